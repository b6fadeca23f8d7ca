//! Cross-modal spatial awareness: patch marks, per-modality parameter
//! interleaving, the cross-modal selective scan, CMSA blocks and the
//! K-block stack, plus the delta-statistics diagnostic.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scan_path::{flatten_direction, interleave, recover, Direction};
use crate::ssm::{run_selective, ScanOptions, SelectiveInputs, SsmParams};
use crate::tensor::{activation, chw_to_hwc, depthwise_conv3x3, hwc_to_chw, softplus, Activation, LayerNorm, LinearMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Ir,
    Vi,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ir => "ir",
            Modality::Vi => "vi",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per modality. With `T = Tensor` this is the feature pair
/// `(I, V)` flowing through the fusion blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalPair<T = Tensor> {
    pub ir: T,
    pub vi: T,
}

impl<T> ModalPair<T> {
    pub fn swapped(self) -> Self {
        Self { ir: self.vi, vi: self.ir }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Ir => &self.ir,
            Modality::Vi => &self.vi,
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> ModalPair<U> {
        ModalPair { ir: f(self.ir), vi: f(self.vi) }
    }

    pub fn as_ref(&self) -> ModalPair<&T> {
        ModalPair { ir: &self.ir, vi: &self.vi }
    }

    pub fn try_map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<ModalPair<U>> {
        Ok(ModalPair { ir: f(self.ir)?, vi: f(self.vi)? })
    }
}

impl ModalPair<Tensor> {
    pub fn new(ir: Tensor, vi: Tensor) -> Result<Self> {
        vi.expect_shape(ir.shape(), "visible features")?;
        Ok(Self { ir, vi })
    }

    /// Elementwise `I + V`.
    pub fn sum(&self) -> Result<Tensor> {
        self.ir.add(&self.vi)
    }
}

/// Parameters of one CMSA block.
#[derive(Debug, Clone, PartialEq)]
pub struct CmsaBlockParams {
    pub norm_in: ModalPair<LayerNorm>,
    /// `C -> 2C`; first half feeds the scan branch, second half the gate.
    pub proj_in: ModalPair<LinearMap>,
    /// `[C, 3, 3]`, shared by both modalities.
    pub dw_conv: Tensor,
    /// `2C -> C` over the channel concatenation `[ir ; vi]`.
    pub mark: LinearMap,
    /// Cross-scan parameters, one set per direction in `Direction::ALL` order.
    pub ssm: [SsmParams; 4],
    pub norm_out: ModalPair<LayerNorm>,
    pub proj_out: ModalPair<LinearMap>,
}

impl CmsaBlockParams {
    pub fn channels(&self) -> usize {
        self.dw_conv.shape()[0]
    }

    /// Exchanges every per-modality parameter. Mark columns are permuted so
    /// the mark still sees `[ir ; vi]` in the new roles.
    pub fn swap_modalities(&mut self) {
        std::mem::swap(&mut self.norm_in.ir, &mut self.norm_in.vi);
        std::mem::swap(&mut self.proj_in.ir, &mut self.proj_in.vi);
        std::mem::swap(&mut self.norm_out.ir, &mut self.norm_out.vi);
        std::mem::swap(&mut self.proj_out.ir, &mut self.proj_out.vi);
        for p in &mut self.ssm {
            std::mem::swap(&mut p.ir, &mut p.vi);
        }
        let c = self.channels();
        for row in self.mark.weight.data_mut().chunks_exact_mut(2 * c) {
            let (a, b) = row.split_at_mut(c);
            a.swap_with_slice(b);
        }
    }
}

/// Concatenates `[H, W, C]` maps along channels.
fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, c) = a.dims3()?;
    b.expect_shape(&[h, w, c], "channel concat")?;
    let mut out = Vec::with_capacity(2 * a.len());
    for (x, y) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)) {
        out.extend_from_slice(x);
        out.extend_from_slice(y);
    }
    Tensor::new(vec![h, w, 2 * c], out)
}

/// Splits `[.., 2C]` into its leading and trailing `C` channels.
fn chunk_channels(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let two_c = x.last_dim();
    if two_c % 2 != 0 {
        return Err(Error::shape(format!("cannot chunk odd channel count {two_c}")));
    }
    let c = two_c / 2;
    let mut a = Vec::with_capacity(x.len() / 2);
    let mut b = Vec::with_capacity(x.len() / 2);
    for row in x.data().chunks_exact(two_c) {
        a.extend_from_slice(&row[..c]);
        b.extend_from_slice(&row[c..]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    Ok((Tensor::new(shape.clone(), a)?, Tensor::new(shape, b)?))
}

/// Computes the shared mark `M = mark([p_ir ; p_vi])` and adds it to both
/// modalities. Returns `(p_ir + M, p_vi + M, M)`.
pub fn patch_mark(p_ir: &Tensor, p_vi: &Tensor, mark: &LinearMap) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, _, c) = p_ir.dims3()?;
    if mark.in_dim() != 2 * c || mark.out_dim() != c {
        return Err(Error::shape(format!(
            "mark must map {} -> {c}, got {} -> {}",
            2 * c,
            mark.in_dim(),
            mark.out_dim()
        )));
    }
    let m = mark.apply(&concat_channels(p_ir, p_vi)?)?;
    Ok((p_ir.add(&m)?, p_vi.add(&m)?, m))
}

/// Applies `s_ir` to even rows and `s_vi` to odd rows of an interleaved
/// `[2L, C]` sequence.
pub fn interleave_params(s_ir: &LinearMap, s_vi: &LinearMap, x: &Tensor) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if n % 2 != 0 {
        return Err(Error::shape(format!("interleaved sequence has odd length {n}")));
    }
    if s_ir.in_dim() != c || s_vi.in_dim() != c || s_ir.out_dim() != s_vi.out_dim() {
        return Err(Error::shape(format!(
            "interleaved maps {}->{} / {}->{} do not fit {c} channels",
            s_ir.in_dim(),
            s_ir.out_dim(),
            s_vi.in_dim(),
            s_vi.out_dim()
        )));
    }
    let o = s_ir.out_dim();
    let mut out = vec![0.0; n * o];
    for (t, (src, dst)) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(o)).enumerate() {
        let map = if t % 2 == 0 { s_ir } else { s_vi };
        map.apply_row(src, dst);
    }
    Tensor::new(vec![n, o], out)
}

fn cross_inputs(phi: &Tensor, params: &SsmParams) -> Result<SelectiveInputs> {
    let (_, c) = phi.dims2()?;
    params.core.delta_bias.expect_shape(&[c], "delta bias")?;
    let mut delta_pre = interleave_params(&params.ir.proj_delta, &params.vi.proj_delta, phi)?;
    for row in delta_pre.data_mut().chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(params.core.delta_bias.data()) {
            *v += b;
        }
    }
    Ok(SelectiveInputs {
        b_seq: interleave_params(&params.ir.proj_b, &params.vi.proj_b, phi)?,
        c_seq: interleave_params(&params.ir.proj_c, &params.vi.proj_c, phi)?,
        delta_pre,
    })
}

/// Cross-modal selective scan of an interleaved `[2L, C]` sequence.
///
/// B, C and delta come from the modality-private projections, A is shared,
/// and one hidden state runs through the whole sequence across modality
/// boundaries.
pub fn cross_ss2d(phi: &Tensor, params: &SsmParams, opts: ScanOptions) -> Result<Tensor> {
    cross_ss2d_traced(phi, params, opts).map(|(y, _)| y)
}

/// [`cross_ss2d`] that also returns the pre-softplus delta, `[2L, C]`.
pub fn cross_ss2d_traced(phi: &Tensor, params: &SsmParams, opts: ScanOptions) -> Result<(Tensor, Tensor)> {
    let inputs = cross_inputs(phi, params)?;
    let y = run_selective(&params.core, &inputs, phi, opts)?;
    Ok((y, inputs.delta_pre))
}

/// Running sums of delta values for one modality.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeltaAccum {
    pub pre_sum: f64,
    pub post_sum: f64,
    pub count: usize,
}

impl DeltaAccum {
    pub fn add(&mut self, pre: f64) {
        self.pre_sum += pre;
        self.post_sum += softplus(pre);
        self.count += 1;
    }

    pub fn merge(&mut self, other: &DeltaAccum) {
        self.pre_sum += other.pre_sum;
        self.post_sum += other.post_sum;
        self.count += other.count;
    }

    pub fn pre_mean(&self) -> f64 {
        self.pre_sum / self.count as f64
    }

    pub fn post_mean(&self) -> f64 {
        self.post_sum / self.count as f64
    }
}

/// Per-modality delta sums of one block, over all directions and channels.
pub type BlockDeltaTrace = ModalPair<DeltaAccum>;

impl Default for BlockDeltaTrace {
    fn default() -> Self {
        ModalPair {
            ir: DeltaAccum::default(),
            vi: DeltaAccum::default(),
        }
    }
}

fn accumulate_delta(trace: &mut BlockDeltaTrace, delta_pre: &Tensor) {
    let c = delta_pre.last_dim();
    for (t, row) in delta_pre.data().chunks_exact(c).enumerate() {
        let acc = if t % 2 == 0 { &mut trace.ir } else { &mut trace.vi };
        for &v in row {
            acc.add(v);
        }
    }
}

pub(crate) fn scan_branch(x: &Tensor, norm: &LayerNorm, proj_in: &LinearMap, dw: &Tensor) -> Result<(Tensor, Tensor)> {
    let z = proj_in.apply(&norm.forward(x)?)?;
    let (s, gate) = chunk_channels(&z)?;
    let conv = chw_to_hwc(&depthwise_conv3x3(&hwc_to_chw(&s)?, dw)?)?;
    Ok((activation(Activation::Silu, &conv), gate))
}

/// Gated output with residual: `x + proj_out(norm_out(t) * silu(gate))`.
pub(crate) fn gated_residual(x: &Tensor, t: &Tensor, gate: &Tensor, norm_out: &LayerNorm, proj_out: &LinearMap) -> Result<Tensor> {
    let gated = norm_out.forward(t)?.mul(&activation(Activation::Silu, gate))?;
    x.add(&proj_out.apply(&gated)?)
}

pub fn cmsa_block(pair: &ModalPair, params: &CmsaBlockParams, opts: ScanOptions) -> Result<ModalPair> {
    cmsa_block_traced(pair, params, opts, None)
}

pub fn cmsa_block_traced(pair: &ModalPair, params: &CmsaBlockParams, opts: ScanOptions, trace: Option<&mut BlockDeltaTrace>) -> Result<ModalPair> {
    let (h, w, c) = pair.ir.dims3()?;
    pair.vi.expect_shape(&[h, w, c], "visible features")?;
    if params.channels() != c {
        return Err(Error::shape(format!("block expects {} channels, features have {c}", params.channels())));
    }

    let (p_ir, gate_ir) = scan_branch(&pair.ir, &params.norm_in.ir, &params.proj_in.ir, &params.dw_conv)?;
    let (p_vi, gate_vi) = scan_branch(&pair.vi, &params.norm_in.vi, &params.proj_in.vi, &params.dw_conv)?;
    let (pm_ir, pm_vi, _) = patch_mark(&p_ir, &p_vi, &params.mark)?;

    let streams: Vec<(Tensor, Tensor)> = Direction::ALL
        .par_iter()
        .zip(params.ssm.par_iter())
        .map(|(&d, ssm)| {
            let phi = interleave(&flatten_direction(&pm_ir, d)?.values, &flatten_direction(&pm_vi, d)?.values)?;
            cross_ss2d_traced(&phi, ssm, opts)
        })
        .collect::<Result<_>>()?;

    if let Some(trace) = trace {
        for (_, delta_pre) in &streams {
            accumulate_delta(trace, delta_pre);
        }
    }

    let (t_ir, t_vi) = recover([&streams[0].0, &streams[1].0, &streams[2].0, &streams[3].0], h, w)?;
    Ok(ModalPair {
        ir: gated_residual(&pair.ir, &t_ir, &gate_ir, &params.norm_out.ir, &params.proj_out.ir)?,
        vi: gated_residual(&pair.vi, &t_vi, &gate_vi, &params.norm_out.vi, &params.proj_out.vi)?,
    })
}

/// Runs the blocks in sequence and returns `I^(K) + V^(K)`.
pub fn cmsa_stack(pair: &ModalPair, blocks: &[CmsaBlockParams], opts: ScanOptions) -> Result<Tensor> {
    cmsa_stack_traced(pair, blocks, opts, None)
}

pub fn cmsa_stack_traced(pair: &ModalPair, blocks: &[CmsaBlockParams], opts: ScanOptions, mut traces: Option<&mut Vec<BlockDeltaTrace>>) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(Error::Config("a CMSA stack needs at least one block".into()));
    }
    let mut cur = pair.clone();
    for block in blocks {
        let mut trace = BlockDeltaTrace::default();
        cur = cmsa_block_traced(&cur, block, opts, traces.as_ref().map(|_| &mut trace))?;
        if let Some(t) = traces.as_deref_mut() {
            t.push(trace);
        }
    }
    cur.sum()
}

/// One line of the delta-statistics report. `block == None` is the layer
/// aggregate over all blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStatRow {
    pub layer: usize,
    pub block: Option<usize>,
    pub modality: Modality,
    pub pre_mean: f64,
    pub post_mean: f64,
}

/// Turns per-layer block traces into report rows (1-based layer and block).
pub fn delta_rows(per_layer: &[Vec<BlockDeltaTrace>]) -> Vec<DeltaStatRow> {
    let mut rows = Vec::new();
    for (l, blocks) in per_layer.iter().enumerate() {
        let mut total = BlockDeltaTrace::default();
        for (k, t) in blocks.iter().enumerate() {
            for m in [Modality::Ir, Modality::Vi] {
                let acc = t.get(m);
                rows.push(DeltaStatRow {
                    layer: l + 1,
                    block: Some(k + 1),
                    modality: m,
                    pre_mean: acc.pre_mean(),
                    post_mean: acc.post_mean(),
                });
            }
            total.ir.merge(&t.ir);
            total.vi.merge(&t.vi);
        }
        for m in [Modality::Ir, Modality::Vi] {
            let acc = total.get(m);
            rows.push(DeltaStatRow {
                layer: l + 1,
                block: None,
                modality: m,
                pre_mean: acc.pre_mean(),
                post_mean: acc.post_mean(),
            });
        }
    }
    rows
}

pub const DELTA_CSV_HEADER: &str = "layer,block,modality,pre_mean,post_mean";

/// Writes rows as `layer,block,modality,pre_mean,post_mean`; the layer
/// aggregate uses `all` in the block column.
pub fn write_delta_csv(rows: &[DeltaStatRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{DELTA_CSV_HEADER}")?;
    for r in rows {
        let block = r.block.map_or_else(|| "all".to_string(), |b| b.to_string());
        writeln!(out, "{},{},{},{:.9e},{:.9e}", r.layer, block, r.modality, r.pre_mean, r.post_mean)?;
    }
    Ok(())
}
