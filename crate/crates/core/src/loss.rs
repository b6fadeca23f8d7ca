//! Training-objective components, SSIM, the SF/AG quality metrics and the
//! perception-entropy histogram.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{reflect_index, sobel_magnitude, LinearMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 15.0,
            alpha2: 15.0,
            alpha3: 15.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Maps an image to class logits.
pub trait LogitsProvider {
    fn classes(&self) -> usize;
    fn logits(&self, img: &Tensor) -> Result<Vec<f64>>;
}

pub const POOL_SIDE: usize = 7;
pub const DEFAULT_CLASSES: usize = 1000;

/// Deterministic stand-in classifier: adaptive average pool to 7x7, then a
/// seeded random linear map to `K` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLinearProvider {
    pub map: LinearMap,
}

impl PooledLinearProvider {
    pub fn new(seed: u64, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = POOL_SIDE * POOL_SIDE;
        let bound = 1.0 / (n as f64).sqrt();
        let weight = Tensor::from_fn(&[classes, n], |_| rng.gen_range(-bound..=bound));
        let bias = Tensor::from_fn(&[classes], |_| rng.gen_range(-bound..=bound));
        Self { map: LinearMap { weight, bias } }
    }
}

impl LogitsProvider for PooledLinearProvider {
    fn classes(&self) -> usize {
        self.map.out_dim()
    }

    fn logits(&self, img: &Tensor) -> Result<Vec<f64>> {
        let pooled = adaptive_avg_pool(&plane(img)?, POOL_SIDE, POOL_SIDE);
        let mut out = vec![0.0; self.classes()];
        self.map.apply_row(pooled.data(), &mut out);
        Ok(out)
    }
}

/// Averages over the bins `[floor(i*H/n), ceil((i+1)*H/n))` per axis.
pub fn adaptive_avg_pool(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let src = x.data();
    Tensor::from_fn(&[oh, ow], |k| {
        let (i, j) = (k / ow, k % ow);
        let (y0, y1) = (i * h / oh, ((i + 1) * h).div_ceil(oh));
        let (x0, x1) = (j * w / ow, ((j + 1) * w).div_ceil(ow));
        let mut s = 0.0;
        for y in y0..y1 {
            s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
        }
        s / ((y1 - y0) * (x1 - x0)) as f64
    })
}

/// Views `[H, W]` or `[H, W, 1]` as `[H, W]`.
pub fn plane(img: &Tensor) -> Result<Tensor> {
    match img.shape() {
        [_, _] => Ok(img.clone()),
        [h, w, 1] => Tensor::new(vec![*h, *w], img.data().to_vec()),
        other => Err(Error::shape(format!("expected a single-channel image, got extents {other:?}"))),
    }
}

fn same_extents(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: extents {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Entropy `-sum y ln y` of `softmax(logits)` and its gradient with respect
/// to the logits, `-y_j (ln y_j + loss)`.
pub fn perception_loss(logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Domain(format!("need at least two classes, got {}", logits.len())));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Domain("logits must not be NaN or +inf".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain("all logits are -inf".into()));
    }
    let log_z = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let log_p: Vec<f64> = logits.iter().map(|&v| v - log_z).collect();
    let loss = -log_p.iter().filter(|lp| lp.is_finite()).map(|&lp| lp.exp() * lp).sum::<f64>();
    let loss = loss.max(0.0);
    let grad = log_p
        .iter()
        .map(|&lp| if lp.is_finite() { -lp.exp() * (lp + loss) } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Mean absolute difference between the Sobel magnitude of `f` and the
/// elementwise maximum of the sources' magnitudes.
pub fn gradient_loss(f: &Tensor, i: &Tensor, v: &Tensor) -> Result<f64> {
    let (f, i, v) = (plane(f)?, plane(i)?, plane(v)?);
    same_extents(&f, &i, "gradient loss")?;
    same_extents(&f, &v, "gradient loss")?;
    let (gf, gi, gv) = (sobel_magnitude(&f)?, sobel_magnitude(&i)?, sobel_magnitude(&v)?);
    let total: f64 = gf
        .data()
        .iter()
        .zip(gi.data().iter().zip(gv.data()))
        .map(|(&a, (&b, &c))| (a - b.max(c)).abs())
        .sum();
    Ok(total / gf.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW).map(|k| (-(k as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filtering with reflect padding, same extents.
fn gaussian_filter(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * x[i * w + reflect_index(j as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * tmp[reflect_index(i as isize + k as isize - r, h) * w + j])
                .sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
/// `K2 = 0.03` and unit dynamic range.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (a, b) = (plane(a)?, plane(b)?);
    same_extents(&a, &b, "ssim")?;
    let (h, w) = a.dims2()?;
    let taps = gaussian_taps();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| gaussian_filter(&(0..h * w).map(f).collect::<Vec<_>>(), h, w, &taps);
    let mu_x = gaussian_filter(x, h, w, &taps);
    let mu_y = gaussian_filter(y, h, w, &taps);
    let xx = prod(&|k| x[k] * x[k]);
    let yy = prod(&|k| y[k] * y[k]);
    let xy = prod(&|k| x[k] * y[k]);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..h * w)
        .map(|k| {
            let (mx, my) = (mu_x[k], mu_y[k]);
            let sx = xx[k] - mx * mx;
            let sy = yy[k] - my * my;
            let sxy = xy[k] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        })
        .sum();
    Ok(total / (h * w) as f64)
}

pub const OMEGA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fidelity {
    pub l1: f64,
    pub ssim_loss: f64,
    /// `(omega_ir, omega_vi)`, summing to exactly 1.
    pub omega: (f64, f64),
}

/// Source weights from mean Sobel energy `g`: `(g_i + eps) / (g_ir + g_vi + 2 eps)`.
/// The smaller weight is computed by division and the larger as its
/// complement, so the pair sums to one and is symmetric under swapping.
pub fn source_weights(i: &Tensor, v: &Tensor) -> Result<(f64, f64)> {
    let gi = sobel_magnitude(&plane(i)?)?.mean();
    let gv = sobel_magnitude(&plane(v)?)?.mean();
    let denom = gi + gv + 2.0 * OMEGA_EPS;
    Ok(if gi <= gv {
        let w = (gi + OMEGA_EPS) / denom;
        (w, 1.0 - w)
    } else {
        let w = (gv + OMEGA_EPS) / denom;
        (1.0 - w, w)
    })
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn weighted_fidelity(f: &Tensor, i: &Tensor, v: &Tensor) -> Result<Fidelity> {
    let (f, i, v) = (plane(f)?, plane(i)?, plane(v)?);
    same_extents(&f, &i, "fidelity")?;
    same_extents(&f, &v, "fidelity")?;
    let (w1, w2) = source_weights(&i, &v)?;
    Ok(Fidelity {
        l1: w1 * mean_abs_diff(&f, &i) + w2 * mean_abs_diff(&f, &v),
        ssim_loss: w1 * (1.0 - ssim(&f, &i)?) + w2 * (1.0 - ssim(&f, &v)?),
        omega: (w1, w2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub perception: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.perception + w.alpha1 * c.l1 + w.alpha2 * c.ssim + w.alpha3 * c.grad
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub components: LossComponents,
    pub weights: LossWeights,
    pub omega_ir: f64,
    pub omega_vi: f64,
    pub total: f64,
}

/// Evaluates every objective term for a fused image against its sources.
pub fn loss_report(f: &Tensor, i: &Tensor, v: &Tensor, provider: &dyn LogitsProvider, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let (perception, _) = perception_loss(&provider.logits(f)?)?;
    let fid = weighted_fidelity(f, i, v)?;
    let components = LossComponents {
        perception,
        l1: fid.l1,
        ssim: fid.ssim_loss,
        grad: gradient_loss(f, i, v)?,
    };
    Ok(LossReport {
        components,
        weights: *weights,
        omega_ir: fid.omega.0,
        omega_vi: fid.omega.1,
        total: total_loss(&components, weights),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub sf: f64,
    pub ag: f64,
}

/// Spatial frequency and average gradient of `img` after multiplying by
/// `scale` (255 for the usual 8-bit convention).
pub fn quality_metrics(img: &Tensor, scale: f64) -> Result<QualityMetrics> {
    let x = plane(img)?;
    let (h, w) = x.dims2()?;
    if h < 2 || w < 2 {
        return Err(Error::Size(format!("metrics need at least 2x2, got {h}x{w}")));
    }
    let p = |i: usize, j: usize| x.data()[i * w + j] * scale;
    let mut rf = 0.0;
    for i in 0..h {
        for j in 1..w {
            rf += (p(i, j) - p(i, j - 1)).powi(2);
        }
    }
    let mut cf = 0.0;
    for i in 1..h {
        for j in 0..w {
            cf += (p(i, j) - p(i - 1, j)).powi(2);
        }
    }
    let rf = rf / (h * (w - 1)) as f64;
    let cf = cf / ((h - 1) * w) as f64;
    let mut ag = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let dx = p(i, j + 1) - p(i, j);
            let dy = p(i + 1, j) - p(i, j);
            ag += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(QualityMetrics {
        sf: (rf + cf).sqrt(),
        ag: ag / ((h - 1) * (w - 1)) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; values outside are clamped into the end bins.
    pub fn uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Domain(format!("need at least one bin over a non-empty range, got {bins} over [{lo}, {hi}]")));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|k| lo + k as f64 * width).collect();
        edges.push(hi);
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    /// CSV `entropy,count`, one row per bin, `entropy` at the bin centre.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "entropy,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(out, "{:.9},{c}", 0.5 * (self.edges[k] + self.edges[k + 1]))?;
        }
        Ok(())
    }
}

/// Perception entropies of `images` binned uniformly over `[0, ln K]`.
pub fn entropy_histogram(images: &[Tensor], provider: &dyn LogitsProvider, bins: usize) -> Result<Histogram> {
    let values = images
        .iter()
        .map(|img| perception_loss(&provider.logits(img)?).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Histogram::uniform(&values, 0.0, (provider.classes() as f64).ln(), bins)
}
