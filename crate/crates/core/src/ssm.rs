//! Discretisation and the selective-scan recurrence.
//!
//! Shapes follow one convention throughout: a sequence of `L` steps over `C`
//! channels, each channel carrying an `H`-wide hidden state.
//!
//! ```text
//! h_t = a_bar_t * h_{t-1} + b_bar_t * x_t        (per channel, per hidden slot)
//! y_t = <c_t, h_t> + d * x_t
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softplus, LinearMap, Real, Tensor};

/// How `b_bar` is derived from `delta`, `A` and `B`. `a_bar` is always
/// `exp(delta * A)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscretizeMode {
    /// `b_bar = delta * B`
    #[default]
    Euler,
    /// `b_bar = (delta A)^-1 (exp(delta A) - 1) delta B`
    Zoh,
}

/// Below this `|delta * A|` the ZOH quotient `(e^z - 1) / z` uses `1 + z/2`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// Discretised transition and input tensors, both `[L, C, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStep<T = f64> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
}

pub fn discretize<T: Real>(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, mode: DiscretizeMode) -> Result<DiscreteStep<T>> {
    let (l, c) = delta.dims2()?;
    let (ca, h) = a.dims2()?;
    if ca != c {
        return Err(Error::shape(format!("delta has {c} channels, A has {ca}")));
    }
    b.expect_shape(&[l, h], "discretize B")?;
    if let Some(bad) = delta.data().iter().find(|&&v| !(v >= T::zero())) {
        return Err(Error::Domain(format!("delta must be non-negative, got {bad:?}")));
    }
    let threshold = T::from_f64(ZOH_SERIES_THRESHOLD);
    let half = T::from_f64(0.5);
    let mut a_bar = Vec::with_capacity(l * c * h);
    let mut b_bar = Vec::with_capacity(l * c * h);
    for t in 0..l {
        let b_row = &b.data()[t * h..(t + 1) * h];
        for ch in 0..c {
            let dt = delta.data()[t * c + ch];
            let a_row = &a.data()[ch * h..(ch + 1) * h];
            for (&av, &bv) in a_row.iter().zip(b_row) {
                let z = dt * av;
                let ez = z.exp();
                a_bar.push(ez);
                let euler = dt * bv;
                b_bar.push(match mode {
                    DiscretizeMode::Euler => euler,
                    DiscretizeMode::Zoh => {
                        let quotient = if z.abs() < threshold { T::one() + z * half } else { z.exp_m1() / z };
                        quotient * euler
                    }
                });
            }
        }
    }
    Ok(DiscreteStep {
        a_bar: Tensor::new(vec![l, c, h], a_bar)?,
        b_bar: Tensor::new(vec![l, c, h], b_bar)?,
    })
}

/// Validates scan operand shapes and returns `(L, C, H)`.
fn scan_dims<T: Real>(a_bar: &Tensor<T>, b_bar: &Tensor<T>, c_seq: &Tensor<T>, x: &Tensor<T>, d: Option<&Tensor<T>>) -> Result<(usize, usize, usize)> {
    let (l, c, h) = a_bar.dims3()?;
    b_bar.expect_shape(&[l, c, h], "scan b_bar")?;
    c_seq.expect_shape(&[l, h], "scan c_seq")?;
    x.expect_shape(&[l, c], "scan x")?;
    if let Some(d) = d {
        d.expect_shape(&[c], "scan skip gain")?;
    }
    Ok((l, c, h))
}

/// Emits `y_t` for one step given the updated state.
#[inline]
fn readout<T: Real>(state: &[T], c_row: &[T], x_row: &[T], d: Option<&[T]>, y_row: &mut [T]) {
    let h = c_row.len();
    for (ch, y) in y_row.iter_mut().enumerate() {
        let s = &state[ch * h..(ch + 1) * h];
        let mut acc = T::zero();
        for (&cv, &sv) in c_row.iter().zip(s) {
            acc = acc + cv * sv;
        }
        if let Some(d) = d {
            acc = acc + d[ch] * x_row[ch];
        }
        *y = acc;
    }
}

/// Advances `state` by one step in place.
#[inline]
fn step<T: Real>(state: &mut [T], a_row: &[T], b_row: &[T], x_row: &[T]) {
    let h = a_row.len() / x_row.len();
    for (ch, &xv) in x_row.iter().enumerate() {
        let lo = ch * h;
        for k in lo..lo + h {
            state[k] = a_row[k] * state[k] + b_row[k] * xv;
        }
    }
}

/// Strictly sequential selective scan starting from a zero state.
pub fn selective_scan_ref<T: Real>(a_bar: &Tensor<T>, b_bar: &Tensor<T>, c_seq: &Tensor<T>, x: &Tensor<T>, d: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (l, c, h) = scan_dims(a_bar, b_bar, c_seq, x, d)?;
    let ch = c * h;
    let d = d.map(|d| d.data());
    let mut state = vec![T::zero(); ch];
    let mut y = vec![T::zero(); l * c];
    for t in 0..l {
        let x_row = &x.data()[t * c..(t + 1) * c];
        step(&mut state, &a_bar.data()[t * ch..(t + 1) * ch], &b_bar.data()[t * ch..(t + 1) * ch], x_row);
        readout(&state, &c_seq.data()[t * h..(t + 1) * h], x_row, d, &mut y[t * c..(t + 1) * c]);
    }
    Tensor::new(vec![l, c], y)
}

/// Blocked selective scan with the same contract as [`selective_scan_ref`].
///
/// The sequence is cut into `chunk`-step blocks. Each block is first reduced
/// to a `(decay product, zero-start end state)` pair, the pairs are folded
/// left to right into each block's incoming state, and every block is then
/// replayed from its incoming state. The first and last passes run blocks in
/// parallel; the block partition depends only on `chunk`, so the result does
/// not depend on the thread count.
pub fn selective_scan_chunked<T: Real>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c_seq: &Tensor<T>,
    x: &Tensor<T>,
    d: Option<&Tensor<T>>,
    chunk: usize,
) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(Error::Domain("chunk size must be at least 1".into()));
    }
    let (l, c, h) = scan_dims(a_bar, b_bar, c_seq, x, d)?;
    let ch = c * h;
    let n_blocks = l.div_ceil(chunk);
    let (a, b, xs) = (a_bar.data(), b_bar.data(), x.data());

    let summaries: Vec<(Vec<T>, Vec<T>)> = (0..n_blocks.saturating_sub(1))
        .into_par_iter()
        .map(|k| {
            let mut decay = vec![T::one(); ch];
            let mut state = vec![T::zero(); ch];
            for t in k * chunk..((k + 1) * chunk).min(l) {
                let a_row = &a[t * ch..(t + 1) * ch];
                for (p, &av) in decay.iter_mut().zip(a_row) {
                    *p = *p * av;
                }
                step(&mut state, a_row, &b[t * ch..(t + 1) * ch], &xs[t * c..(t + 1) * c]);
            }
            (decay, state)
        })
        .collect();

    let mut incoming = Vec::with_capacity(n_blocks);
    incoming.push(vec![T::zero(); ch]);
    for (decay, local) in &summaries {
        let prev = incoming.last().unwrap();
        let next: Vec<T> = prev.iter().zip(decay).zip(local).map(|((&hp, &p), &s)| p * hp + s).collect();
        incoming.push(next);
    }

    let d = d.map(|d| d.data());
    let mut y = vec![T::zero(); l * c];
    y.par_chunks_mut(chunk * c).zip(incoming.into_par_iter()).enumerate().for_each(|(k, (y_block, mut state))| {
        for (i, y_row) in y_block.chunks_exact_mut(c).enumerate() {
            let t = k * chunk + i;
            let x_row = &xs[t * c..(t + 1) * c];
            step(&mut state, &a[t * ch..(t + 1) * ch], &b[t * ch..(t + 1) * ch], x_row);
            readout(&state, &c_seq.data()[t * h..(t + 1) * h], x_row, d, y_row);
        }
    });
    Tensor::new(vec![l, c], y)
}

/// Discretisation and kernel choice threaded through every forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanOptions {
    pub mode: DiscretizeMode,
    pub kernel: ScanKernel,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            mode: DiscretizeMode::Euler,
            kernel: ScanKernel::Chunked(64),
        }
    }
}

/// Which scan implementation a caller wants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKernel {
    Reference,
    Chunked(usize),
}

impl ScanKernel {
    pub fn run<T: Real>(self, step: &DiscreteStep<T>, c_seq: &Tensor<T>, x: &Tensor<T>, d: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match self {
            ScanKernel::Reference => selective_scan_ref(&step.a_bar, &step.b_bar, c_seq, x, d),
            ScanKernel::Chunked(n) => selective_scan_chunked(&step.a_bar, &step.b_bar, c_seq, x, d, n),
        }
    }
}

/// Gradients of `<dy, y>` with respect to every scan operand.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads<T = f64> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
    pub c_seq: Tensor<T>,
    pub x: Tensor<T>,
    pub d: Option<Tensor<T>>,
}

/// Reverse-time adjoint of [`selective_scan_ref`].
pub fn selective_scan_backward<T: Real>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c_seq: &Tensor<T>,
    x: &Tensor<T>,
    d: Option<&Tensor<T>>,
    dy: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    let (l, c, h) = scan_dims(a_bar, b_bar, c_seq, x, d)?;
    dy.expect_shape(&[l, c], "scan dy")?;
    let ch = c * h;
    let (a, b, cs, xs, g) = (a_bar.data(), b_bar.data(), c_seq.data(), x.data(), dy.data());

    // states[t] holds h_t; states[0..ch] is the zero initial state.
    let mut states = vec![T::zero(); (l + 1) * ch];
    for t in 0..l {
        let (prev, next) = states.split_at_mut((t + 1) * ch);
        let next = &mut next[..ch];
        next.copy_from_slice(&prev[t * ch..]);
        step(next, &a[t * ch..(t + 1) * ch], &b[t * ch..(t + 1) * ch], &xs[t * c..(t + 1) * c]);
    }

    let mut da = vec![T::zero(); l * ch];
    let mut db = vec![T::zero(); l * ch];
    let mut dc = vec![T::zero(); l * h];
    let mut dx = vec![T::zero(); l * c];
    // adjoint of h_t, carried backwards
    let mut adj = vec![T::zero(); ch];
    for t in (0..l).rev() {
        let h_t = &states[(t + 1) * ch..(t + 2) * ch];
        let h_prev = &states[t * ch..(t + 1) * ch];
        for chn in 0..c {
            let gy = g[t * c + chn];
            let xv = xs[t * c + chn];
            let mut dx_acc = T::zero();
            for k in 0..h {
                let i = chn * h + k;
                let carried = if t + 1 < l { a[(t + 1) * ch + i] * adj[i] } else { T::zero() };
                adj[i] = gy * cs[t * h + k] + carried;
                dc[t * h + k] = dc[t * h + k] + gy * h_t[i];
                da[t * ch + i] = adj[i] * h_prev[i];
                db[t * ch + i] = adj[i] * xv;
                dx_acc = dx_acc + adj[i] * b[t * ch + i];
            }
            if let Some(d) = d {
                dx_acc = dx_acc + d.data()[chn] * gy;
            }
            dx[t * c + chn] = dx_acc;
        }
    }
    let dd = d.map(|_| {
        let mut out = vec![T::zero(); c];
        for t in 0..l {
            for chn in 0..c {
                out[chn] = out[chn] + g[t * c + chn] * xs[t * c + chn];
            }
        }
        Tensor::from_vec(out)
    });
    Ok(ScanGrads {
        a_bar: Tensor::new(vec![l, c, h], da)?,
        b_bar: Tensor::new(vec![l, c, h], db)?,
        c_seq: Tensor::new(vec![l, h], dc)?,
        x: Tensor::new(vec![l, c], dx)?,
        d: dd,
    })
}

/// Input-dependent projections of one modality: `x -> B`, `x -> C`
/// (`C -> H` each) and `x -> delta` pre-activation (`C -> C`).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProj {
    pub proj_b: LinearMap,
    pub proj_c: LinearMap,
    pub proj_delta: LinearMap,
}

impl SelectiveProj {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            proj_b: LinearMap::zeros(channels, hidden),
            proj_c: LinearMap::zeros(channels, hidden),
            proj_delta: LinearMap::zeros(channels, channels),
        }
    }

    /// Projects an `[L, C]` sequence into its selective inputs; `delta_bias`
    /// is the shared additive bias of the delta pre-activation.
    pub fn inputs(&self, x: &Tensor, delta_bias: &Tensor) -> Result<SelectiveInputs> {
        let mut delta_pre = self.proj_delta.apply(x)?;
        let c = delta_pre.last_dim();
        delta_bias.expect_shape(&[c], "delta bias")?;
        for row in delta_pre.data_mut().chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(delta_bias.data()) {
                *v += b;
            }
        }
        Ok(SelectiveInputs {
            b_seq: self.proj_b.apply(x)?,
            c_seq: self.proj_c.apply(x)?,
            delta_pre,
        })
    }
}

/// Input-independent state-space parameters shared by every position:
/// `A = -exp(a_log)` (`[C, H]`), the additive delta bias and the optional
/// skip gains `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmCore {
    pub a_log: Tensor,
    pub delta_bias: Tensor,
    pub d: Option<Tensor>,
}

impl SsmCore {
    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The (strictly negative) state matrix.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }
}

/// Selective-scan parameters for an infrared/visible pair: one shared core
/// and a private projection set per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub core: SsmCore,
    pub ir: SelectiveProj,
    pub vi: SelectiveProj,
}

/// Selective-scan parameters for a single modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Ss2dParams {
    pub core: SsmCore,
    pub proj: SelectiveProj,
}

/// Per-position quantities produced by the selective projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveInputs {
    /// `[L, H]`
    pub b_seq: Tensor,
    /// `[L, H]`
    pub c_seq: Tensor,
    /// Pre-softplus delta including the shared bias, `[L, C]`.
    pub delta_pre: Tensor,
}

impl SelectiveInputs {
    pub fn delta(&self) -> Tensor {
        self.delta_pre.map(softplus)
    }
}

/// Discretises with `core` and scans `x` through the selective inputs.
pub fn run_selective(core: &SsmCore, inputs: &SelectiveInputs, x: &Tensor, opts: ScanOptions) -> Result<Tensor> {
    let step = discretize(&inputs.delta(), &core.a(), &inputs.b_seq, opts.mode)?;
    opts.kernel.run(&step, &inputs.c_seq, x, core.d.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    /// Independent oracle: direct index arithmetic, one output at a time.
    fn oracle_scan(l: usize, c: usize, h: usize, a: &[f64], b: &[f64], cs: &[f64], x: &[f64], d: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; l * c];
        for chn in 0..c {
            for k in 0..h {
                let mut s = 0.0;
                for t in 0..l {
                    let i = (t * c + chn) * h + k;
                    s = a[i] * s + b[i] * x[t * c + chn];
                    y[t * c + chn] += cs[t * h + k] * s;
                }
            }
            for t in 0..l {
                y[t * c + chn] += d[chn] * x[t * c + chn];
            }
        }
        y
    }

    struct Case {
        a: Tensor,
        b: Tensor,
        c: Tensor,
        x: Tensor,
        d: Tensor,
    }

    fn random_case(rng: &mut ChaCha8Rng, l: usize, c: usize, h: usize) -> Case {
        let mut u = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
        Case {
            a: Tensor::new(vec![l, c, h], u(l * c * h, 0.0, 1.0)).unwrap(),
            b: Tensor::new(vec![l, c, h], u(l * c * h, -1.0, 1.0)).unwrap(),
            c: Tensor::new(vec![l, h], u(l * h, -1.0, 1.0)).unwrap(),
            x: Tensor::new(vec![l, c], u(l * c, -1.0, 1.0)).unwrap(),
            d: Tensor::from_vec(u(c, -1.0, 1.0)),
        }
    }

    fn t1(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    fn t3(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn discretize_zero_delta() {
        for mode in [DiscretizeMode::Euler, DiscretizeMode::Zoh] {
            let s = discretize(&t1(0.0), &t1(-2.0), &t1(3.0), mode).unwrap();
            assert_eq!(s.a_bar.data(), &[1.0]);
            assert_eq!(s.b_bar.data(), &[0.0]);
        }
    }

    #[test]
    fn discretize_closed_forms() {
        let e = discretize(&t1(LN_2), &t1(1.0), &t1(1.0), DiscretizeMode::Euler).unwrap();
        assert_abs_diff_eq!(e.a_bar.data()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.b_bar.data()[0], LN_2, epsilon = 1e-12);
        let z = discretize(&t1(LN_2), &t1(1.0), &t1(1.0), DiscretizeMode::Zoh).unwrap();
        assert_abs_diff_eq!(z.b_bar.data()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn discretize_rejects_negative_delta() {
        let r = discretize(&t1(-1e-3), &t1(-1.0), &t1(1.0), DiscretizeMode::Euler);
        assert!(matches!(r, Err(Error::Domain(_))));
        let r = discretize(&t1(f64::NAN), &t1(-1.0), &t1(1.0), DiscretizeMode::Euler);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn zoh_series_branch_is_continuous() {
        // just below and above the series threshold
        for dt in [0.9e-6, 1.1e-6] {
            let z = discretize(&t1(dt), &t1(-1.0), &t1(1.0), DiscretizeMode::Zoh).unwrap();
            let exact = -(-dt).exp_m1();
            assert_abs_diff_eq!(z.b_bar.data()[0], exact, epsilon = 1e-12 * dt);
        }
    }

    #[test]
    fn zoh_approaches_euler_linearly() {
        let a = Tensor::new(vec![2, 3], vec![-1.0, -2.0, -3.0, -0.5, -4.0, -1.5]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let gap = |dt: f64| {
            let delta = Tensor::new(vec![1, 2], vec![dt, dt]).unwrap();
            let e = discretize(&delta, &a, &b, DiscretizeMode::Euler).unwrap().b_bar;
            let z = discretize(&delta, &a, &b, DiscretizeMode::Zoh).unwrap().b_bar;
            let num: f64 = z.sub(&e).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let den: f64 = e.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            num / den
        };
        for dt in [1e-3, 5e-4, 2.5e-4] {
            let ratio = gap(dt) / gap(dt / 2.0);
            assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio} at {dt}");
        }
    }

    #[test]
    fn scan_single_step() {
        let y = selective_scan_ref(&t3(&[0.5]), &t3(&[2.0]), &t1(3.0), &t1(1.0), Some(&Tensor::from_vec(vec![0.0]))).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn scan_prefix_sums() {
        let ones = t3(&[1.0; 3]);
        let c = Tensor::full(&[3, 1], 1.0);
        let x = Tensor::full(&[3, 1], 1.0);
        let y = selective_scan_ref(&ones, &ones, &c, &x, None).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
        let y = selective_scan_chunked(&ones, &ones, &c, &x, None, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scan_without_carry_is_memoryless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut case = random_case(&mut rng, 6, 2, 3);
        case.a = Tensor::zeros(&[6, 2, 3]);
        let y = selective_scan_ref(&case.a, &case.b, &case.c, &case.x, Some(&case.d)).unwrap();
        for t in 0..6 {
            for chn in 0..2 {
                let xv = case.x.data()[t * 2 + chn];
                let mut want = 0.0;
                for k in 0..3 {
                    want += case.c.data()[t * 3 + k] * case.b.data()[(t * 2 + chn) * 3 + k] * xv;
                }
                want += case.d.data()[chn] * xv;
                assert_abs_diff_eq!(y.data()[t * 2 + chn], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn scan_rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let case = random_case(&mut rng, 4, 2, 3);
        let bad_x = Tensor::zeros(&[4, 3]);
        assert!(selective_scan_ref(&case.a, &case.b, &case.c, &bad_x, None).is_err());
        assert!(selective_scan_chunked(&case.a, &case.b, &case.c, &case.x, None, 0).is_err());
        assert!(selective_scan_backward(&case.a, &case.b, &case.c, &case.x, None, &bad_x).is_err());
    }

    #[test]
    fn reference_matches_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (l, c, h) = (rng.gen_range(1..40), rng.gen_range(1..5), rng.gen_range(1..6));
            let k = random_case(&mut rng, l, c, h);
            let y = selective_scan_ref(&k.a, &k.b, &k.c, &k.x, Some(&k.d)).unwrap();
            let want = oracle_scan(l, c, h, k.a.data(), k.b.data(), k.c.data(), k.x.data(), k.d.data());
            assert!(y.max_abs_diff(&Tensor::new(vec![l, c], want).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn chunk_of_one_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_case(&mut rng, 50, 3, 4);
        let r = selective_scan_ref(&k.a, &k.b, &k.c, &k.x, Some(&k.d)).unwrap();
        let c = selective_scan_chunked(&k.a, &k.b, &k.c, &k.x, Some(&k.d), 1).unwrap();
        assert_eq!(r, c);
    }

    #[test]
    fn chunked_long_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_case(&mut rng, 257, 4, 8);
        let r = selective_scan_ref(&k.a, &k.b, &k.c, &k.x, Some(&k.d)).unwrap();
        let c = selective_scan_chunked(&k.a, &k.b, &k.c, &k.x, Some(&k.d), 64).unwrap();
        assert!(r.max_abs_diff(&c) <= 1e-12);
    }

    #[test]
    fn backward_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = random_case(&mut rng, 7, 2, 3);
        let g = selective_scan_backward(&k.a, &k.b, &k.c, &k.x, Some(&k.d), &Tensor::zeros(&[7, 2])).unwrap();
        for t in [&g.a_bar, &g.b_bar, &g.c_seq, &g.x, g.d.as_ref().unwrap()] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_scalar_closed_form() {
        let (a, b, c, x, d) = (0.3, 1.7, -0.4, 2.5, 0.9);
        let one = Tensor::full(&[1, 1], 1.0);
        let g = selective_scan_backward(&t3(&[a]), &t3(&[b]), &t1(c), &t1(x), Some(&Tensor::from_vec(vec![d])), &one).unwrap();
        assert_abs_diff_eq!(g.c_seq.data()[0], b * x, epsilon = 1e-15);
        assert_abs_diff_eq!(g.x.data()[0], c * b + d, epsilon = 1e-15);
        assert_abs_diff_eq!(g.b_bar.data()[0], c * x, epsilon = 1e-15);
        assert_eq!(g.a_bar.data()[0], 0.0);
        assert_abs_diff_eq!(g.d.unwrap().data()[0], x, epsilon = 1e-15);
    }

    fn fd_objective(k: &Case, dy: &Tensor) -> f64 {
        let y = selective_scan_ref(&k.a, &k.b, &k.c, &k.x, Some(&k.d)).unwrap();
        y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut k = random_case(&mut rng, 33, 2, 3);
        let dy = Tensor::from_fn(&[33, 2], |_| rng.gen_range(-1.0..1.0));
        let g = selective_scan_backward(&k.a, &k.b, &k.c, &k.x, Some(&k.d), &dy).unwrap();

        macro_rules! fd {
            ($field:ident) => {{
                let n = k.$field.len();
                let mut out = vec![0.0; n];
                for i in 0..n {
                    let orig = k.$field.data()[i];
                    let step = 1e-5 * orig.abs().max(1.0);
                    k.$field.data_mut()[i] = orig + step;
                    let plus = fd_objective(&k, &dy);
                    k.$field.data_mut()[i] = orig - step;
                    let minus = fd_objective(&k, &dy);
                    k.$field.data_mut()[i] = orig;
                    out[i] = (plus - minus) / (2.0 * step);
                }
                out
            }};
        }
        assert!(rel_err(g.a_bar.data(), &fd!(a)) <= 1e-5);
        assert!(rel_err(g.b_bar.data(), &fd!(b)) <= 1e-5);
        assert!(rel_err(g.c_seq.data(), &fd!(c)) <= 1e-5);
        assert!(rel_err(g.x.data(), &fd!(x)) <= 1e-5);
        assert!(rel_err(g.d.as_ref().unwrap().data(), &fd!(d)) <= 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decay_stays_in_unit_interval(dt in proptest::collection::vec(0.0f64..5.0, 6), a in proptest::collection::vec(-8.0f64..-1e-3, 4)) {
            let delta = Tensor::new(vec![3, 2], dt).unwrap();
            let a = Tensor::new(vec![2, 2], a).unwrap();
            let s = discretize(&delta, &a, &Tensor::full(&[3, 2], 1.0), DiscretizeMode::Zoh).unwrap();
            prop_assert!(s.a_bar.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn scan_is_linear_in_x(seed in any::<u64>(), l in 1usize..64, c in 1usize..4, h in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_case(&mut rng, l, c, h);
            let x2 = Tensor::from_fn(&[l, c], |_| rng.gen_range(-1.0..1.0));
            let run = |x: &Tensor| selective_scan_ref(&k.a, &k.b, &k.c, x, Some(&k.d)).unwrap();
            let lhs = run(&k.x.add(&x2).unwrap());
            let rhs = run(&k.x).add(&run(&x2)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }

        #[test]
        fn scan_is_causal(seed in any::<u64>(), l in 2usize..64, frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_case(&mut rng, l, 2, 3);
            let t = ((l - 1) as f64 * frac) as usize + 1;
            let mut x = k.x.clone();
            x.data_mut()[t * 2] += 10.0;
            for chunk in [1usize, 3] {
                let base = selective_scan_chunked(&k.a, &k.b, &k.c, &k.x, Some(&k.d), chunk).unwrap();
                let pert = selective_scan_chunked(&k.a, &k.b, &k.c, &x, Some(&k.d), chunk).unwrap();
                prop_assert_eq!(&base.data()[..t * 2], &pert.data()[..t * 2]);
            }
        }

        #[test]
        fn chunked_matches_reference(seed in any::<u64>(), l in 1usize..200, c in 1usize..8, h in 1usize..16, ci in 0usize..4) {
            let chunk = [1usize, 2, 7, 64][ci];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_case(&mut rng, l, c, h);
            let r = selective_scan_ref(&k.a, &k.b, &k.c, &k.x, Some(&k.d)).unwrap();
            let q = selective_scan_chunked(&k.a, &k.b, &k.c, &k.x, Some(&k.d), chunk).unwrap();
            prop_assert!(r.max_abs_diff(&q) <= 1e-12);
        }
    }
}
