//! Self-check suites run by `s4fusion verify`. Every check compares a
//! library routine against an independent computation on seeded random
//! inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{pnm, weights};
use crate::loss::perception_loss;
use crate::scan_path::{deinterleave, flatten_direction, interleave, recover, unflatten_direction, Direction};
use crate::ssm::{discretize, selective_scan_backward, selective_scan_chunked, selective_scan_ref, DiscretizeMode};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Scan,
    Grad,
    Roundtrip,
    All,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Scan => "scan",
            Suite::Grad => "grad",
            Suite::Roundtrip => "roundtrip",
            Suite::All => "all",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(Suite::Scan),
            "grad" => Ok(Suite::Grad),
            "roundtrip" => Ok(Suite::Roundtrip),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown suite `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Random cases for the scan comparison; other checks scale from it.
    pub cases: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { cases: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or mismatch count) against the bound.
    pub worst: f64,
    pub bound: f64,
    pub cases: usize,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: worst {:.3e} (bound {:.1e}, {} cases)",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.worst,
            self.bound,
            self.cases
        )
    }
}

fn check(suite: Suite, name: &str, worst: f64, bound: f64, cases: usize) -> Check {
    Check {
        suite: suite.to_string(),
        name: name.to_string(),
        passed: worst <= bound,
        worst,
        bound,
        cases,
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Vec<Check> {
    match suite {
        Suite::Scan => scan_suite(opts),
        Suite::Grad => grad_suite(opts),
        Suite::Roundtrip => roundtrip_suite(opts),
        Suite::All => [Suite::Scan, Suite::Grad, Suite::Roundtrip].iter().flat_map(|&s| run(s, opts)).collect(),
    }
}

/// Random scan operands with `|a_bar| < 1`.
pub struct ScanCase {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
    pub c_seq: Tensor,
    pub x: Tensor,
    pub d: Option<Tensor>,
}

impl ScanCase {
    pub fn random(rng: &mut ChaCha8Rng, l: usize, c: usize, h: usize) -> Self {
        Self {
            a_bar: Tensor::from_fn(&[l, c, h], |_| rng.gen_range(0.0..0.999)),
            b_bar: Tensor::from_fn(&[l, c, h], |_| rng.gen_range(-1.0..1.0)),
            c_seq: Tensor::from_fn(&[l, h], |_| rng.gen_range(-1.0..1.0)),
            x: Tensor::from_fn(&[l, c], |_| rng.gen_range(-1.0..1.0)),
            d: rng.gen_bool(0.5).then(|| Tensor::from_fn(&[c], |_| rng.gen_range(-1.0..1.0))),
        }
    }

    fn reference(&self) -> Tensor {
        selective_scan_ref(&self.a_bar, &self.b_bar, &self.c_seq, &self.x, self.d.as_ref()).expect("consistent case")
    }
}

/// Direct evaluation of `y_t = sum_s<=t (prod a) b_s x_s . C_t + D x_t`
/// without a running state.
fn unrolled_scan(case: &ScanCase) -> Vec<f64> {
    let (l, c, h) = case.a_bar.dims3().unwrap();
    let (a, b, cs, x) = (case.a_bar.data(), case.b_bar.data(), case.c_seq.data(), case.x.data());
    let mut y = vec![0.0; l * c];
    for t in 0..l {
        for ch in 0..c {
            let mut acc = 0.0;
            for k in 0..h {
                let mut hk = 0.0;
                for s in 0..=t {
                    let mut decay = 1.0;
                    for r in s + 1..=t {
                        decay *= a[(r * c + ch) * h + k];
                    }
                    hk += decay * b[(s * c + ch) * h + k] * x[s * c + ch];
                }
                acc += cs[t * h + k] * hk;
            }
            if let Some(d) = &case.d {
                acc += d.data()[ch] * x[t * c + ch];
            }
            y[t * c + ch] = acc;
        }
    }
    y
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn scan_suite(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let chunks = [1, 2, 7, 64];
    let mut worst = 0.0f64;
    for _ in 0..opts.cases {
        let (l, c, h) = (rng.gen_range(1..=512), rng.gen_range(1..=8), rng.gen_range(1..=16));
        let case = ScanCase::random(&mut rng, l, c, h);
        let chunk = chunks[rng.gen_range(0..chunks.len())];
        let got = selective_scan_chunked(&case.a_bar, &case.b_bar, &case.c_seq, &case.x, case.d.as_ref(), chunk).expect("consistent case");
        worst = worst.max(got.max_abs_diff(&case.reference()));
    }
    let mut out = vec![check(Suite::Scan, "chunked_vs_reference", worst, 1e-12, opts.cases)];

    let n = (opts.cases / 20).max(5);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (l, c, h) = (rng.gen_range(1..=24), rng.gen_range(1..=3), rng.gen_range(1..=4));
        let case = ScanCase::random(&mut rng, l, c, h);
        worst = worst.max(max_abs(case.reference().data(), &unrolled_scan(&case)));
    }
    out.push(check(Suite::Scan, "reference_vs_unrolled", worst, 1e-12, n));

    let ln2 = 2f64.ln();
    let delta = Tensor::new(vec![1, 1], vec![ln2]).unwrap();
    let (a, b) = (Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let euler = discretize(&delta, &a, &b, DiscretizeMode::Euler).unwrap().b_bar.data()[0];
    let zoh = discretize(&delta, &a, &b, DiscretizeMode::Zoh).unwrap().b_bar.data()[0];
    out.push(check(Suite::Scan, "discretize_closed_forms", (euler - ln2).abs().max((zoh - 1.0).abs()), 1e-12, 1));

    let gap = |dt: f64| {
        let d = Tensor::new(vec![1, 1], vec![dt]).unwrap();
        let a = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let e = discretize(&d, &a, &b, DiscretizeMode::Euler).unwrap().b_bar.data()[0];
        let z = discretize(&d, &a, &b, DiscretizeMode::Zoh).unwrap().b_bar.data()[0];
        (z - e).abs() / e.abs()
    };
    let ratio_err = [1e-3, 5e-4, 2.5e-4].iter().map(|&dt| (gap(dt) / gap(dt / 2.0) / 2.0 - 1.0).abs()).fold(0.0, f64::max);
    out.push(check(Suite::Scan, "zoh_euler_relative_gap_halves", ratio_err, 0.1, 3));
    out
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` (0 when both vanish).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` with respect to every entry of `v`.
pub fn central_differences(v: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let orig = v[i];
            let h = 1e-5 * orig.abs().max(1.0);
            v[i] = orig + h;
            let up = f(v);
            v[i] = orig - h;
            let down = f(v);
            v[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative gradient error of the scan backward pass on one instance.
pub fn scan_gradient_error(case: &ScanCase, dy: &Tensor) -> f64 {
    let grads = selective_scan_backward(&case.a_bar, &case.b_bar, &case.c_seq, &case.x, case.d.as_ref(), dy).expect("consistent case");
    let objective = |a: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor, d: Option<&Tensor>| {
        let y = selective_scan_ref(a, b, c, x, d).expect("consistent case");
        y.data().iter().zip(dy.data()).map(|(p, q)| p * q).sum::<f64>()
    };
    let with = |t: &Tensor, v: &[f64]| Tensor::new(t.shape().to_vec(), v.to_vec()).unwrap();
    let mut worst = 0.0f64;

    let mut v = case.a_bar.data().to_vec();
    let n = central_differences(&mut v, |v| objective(&with(&case.a_bar, v), &case.b_bar, &case.c_seq, &case.x, case.d.as_ref()));
    worst = worst.max(relative_error(grads.a_bar.data(), &n));

    let mut v = case.b_bar.data().to_vec();
    let n = central_differences(&mut v, |v| objective(&case.a_bar, &with(&case.b_bar, v), &case.c_seq, &case.x, case.d.as_ref()));
    worst = worst.max(relative_error(grads.b_bar.data(), &n));

    let mut v = case.c_seq.data().to_vec();
    let n = central_differences(&mut v, |v| objective(&case.a_bar, &case.b_bar, &with(&case.c_seq, v), &case.x, case.d.as_ref()));
    worst = worst.max(relative_error(grads.c_seq.data(), &n));

    let mut v = case.x.data().to_vec();
    let n = central_differences(&mut v, |v| objective(&case.a_bar, &case.b_bar, &case.c_seq, &with(&case.x, v), case.d.as_ref()));
    worst = worst.max(relative_error(grads.x.data(), &n));

    if let (Some(d), Some(gd)) = (&case.d, &grads.d) {
        let mut v = d.data().to_vec();
        let n = central_differences(&mut v, |v| objective(&case.a_bar, &case.b_bar, &case.c_seq, &case.x, Some(&with(d, v))));
        worst = worst.max(relative_error(gd.data(), &n));
    }
    worst
}

fn grad_suite(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let n = (opts.cases / 10).max(10);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (l, c, h) = (rng.gen_range(1..=16), rng.gen_range(1..=3), rng.gen_range(1..=4));
        let case = ScanCase::random(&mut rng, l, c, h);
        let dy = Tensor::from_fn(&[l, c], |_| rng.gen_range(-1.0..1.0));
        worst = worst.max(scan_gradient_error(&case, &dy));
    }
    let mut out = vec![check(Suite::Grad, "scan_backward_vs_fd", worst, 1e-5, n)];

    let mut worst = 0.0f64;
    for _ in 0..n {
        let k = rng.gen_range(2..=64);
        let mut logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let (_, g) = perception_loss(&logits).expect("finite logits");
        let num = central_differences(&mut logits, |v| perception_loss(v).expect("finite logits").0);
        worst = worst.max(relative_error(&g, &num));
    }
    out.push(check(Suite::Grad, "perception_loss_vs_fd", worst, 1e-6, n));
    out
}

fn roundtrip_suite(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5151);
    let n = (opts.cases / 10).max(10);
    let mut mismatches = 0usize;
    for _ in 0..n {
        let (h, w, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=8));
        let grid = Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-1.0..1.0));
        let other = Tensor::from_fn(&[h * w, c], |_| rng.gen_range(-1.0..1.0));
        for d in Direction::ALL {
            let seq = flatten_direction(&grid, d).expect("grid");
            mismatches += usize::from(unflatten_direction(&seq).expect("seq") != grid);
        }
        let seq = flatten_direction(&grid, Direction::Hf).expect("grid").values;
        let (a, b) = deinterleave(&interleave(&seq, &other).expect("equal")).expect("even");
        mismatches += usize::from(a != seq || b != other);

        let streams: Vec<Tensor> = Direction::ALL
            .iter()
            .map(|&d| interleave(&flatten_direction(&grid, d).unwrap().values, &flatten_direction(&grid, d).unwrap().values).unwrap())
            .collect();
        let (ri, rv) = recover([&streams[0], &streams[1], &streams[2], &streams[3]], h, w).expect("streams");
        let four = grid.scale(4.0);
        mismatches += usize::from(ri != four || rv != four);
    }
    let mut out = vec![check(Suite::Roundtrip, "scan_geometry", mismatches as f64, 0.0, n)];

    let mut mismatches = 0usize;
    for k in 0..n {
        let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let color = k % 2 == 1;
        let mut bytes = format!("{}\n{w} {h}\n255\n", if color { "P6" } else { "P5" }).into_bytes();
        bytes.extend((0..h * w * if color { 3 } else { 1 }).map(|_| rng.gen::<u8>()));
        let back = pnm::decode(&bytes).and_then(|img| pnm::encode(&img));
        mismatches += usize::from(back.ok().as_deref() != Some(bytes.as_slice()));
    }
    out.push(check(Suite::Roundtrip, "pnm_bytes", mismatches as f64, 0.0, n));

    let mut mismatches = 0usize;
    for _ in 0..n {
        let mut m = BTreeMap::new();
        for i in 0..rng.gen_range(1..6) {
            let rank = rng.gen_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
            m.insert(format!("t{i}.{}", rng.gen::<u16>()), Tensor::from_fn(&shape, |_| rng.gen_range(-1e3..1e3)));
        }
        let bytes = weights::encode_tensors(&m, DType::F64).expect("encodable");
        let again = weights::decode_tensors(&bytes).and_then(|t| weights::encode_tensors(&t, DType::F64));
        mismatches += usize::from(again.ok().as_deref() != Some(bytes.as_slice()));
        let mut bad = bytes.clone();
        let i = rng.gen_range(0..bad.len());
        bad[i] ^= 1 << rng.gen_range(0..8);
        let rejected = match weights::decode_tensors(&bad) {
            Err(Error::Checksum { .. }) => true,
            // the flip landed in the magic or version field, caught before the CRC
            Err(Error::BadMagic(_) | Error::UnsupportedVersion(_)) => i < 8,
            _ => false,
        };
        mismatches += usize::from(!rejected);
    }
    out.push(check(Suite::Roundtrip, "weight_container", mismatches as f64, 0.0, n));
    out
}
