//! The multi-scale fusion network: overlap patch embedding, VSS blocks,
//! the two encoder towers, per-scale fusion, the decoder and the fold back
//! to pixels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmsa::{cmsa_stack_traced, gated_residual, scan_branch, BlockDeltaTrace, CmsaBlockParams, ModalPair};
use crate::error::{Error, Result};
use crate::params::{field_params, Params};
use crate::scan_path::ss2d_single;
use crate::ssm::{DiscretizeMode, ScanKernel, ScanOptions, SelectiveProj, Ss2dParams, SsmCore, SsmParams};
use crate::tensor::{reflect_index, softplus_inv, LayerNorm, LinearMap, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub n_layers: usize,
    pub k_blocks: usize,
    pub vss_counts: Vec<usize>,
    pub channels: Vec<usize>,
    pub patch_size: usize,
    pub overlap: usize,
    pub hidden: usize,
    pub mode: DiscretizeMode,
    pub seed: u64,
    /// Whether the scans carry the `D * x` skip term.
    pub skip_d: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            k_blocks: 3,
            vss_counts: vec![1, 2, 1],
            channels: vec![48, 96, 192],
            patch_size: 4,
            overlap: 1,
            hidden: 16,
            mode: DiscretizeMode::Euler,
            seed: 0,
            skip_d: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.k_blocks == 0 {
            return bad("k_blocks must be at least 1".into());
        }
        if self.vss_counts.len() != self.n_layers {
            return bad(format!("vss_counts has {} entries for {} layers", self.vss_counts.len(), self.n_layers));
        }
        if self.channels.len() != self.n_layers {
            return bad(format!("channels has {} entries for {} layers", self.channels.len(), self.n_layers));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("channels {:?} must be non-decreasing", self.channels));
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.overlap >= self.patch_size {
            return bad(format!("overlap {} must be below patch_size {}", self.overlap, self.patch_size));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.patch_size - self.overlap
    }

    /// Token-grid extents per layer for an `h x w` image.
    pub fn grid_extents(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let s = self.stride();
        let mut cur = (ope_grid_extent(h, self.patch_size, s), ope_grid_extent(w, self.patch_size, s));
        let mut out = vec![cur];
        for _ in 1..self.n_layers {
            cur = (cur.0.div_ceil(2), cur.1.div_ceil(2));
            out.push(cur);
        }
        out
    }
}

/// Fusion rule applied at every scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Cmsa,
    /// Elementwise `I + V`, ignoring the CMSA weights.
    Add,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Cmsa => "cmsa",
            FusionMode::Add => "add",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmsa" => Ok(FusionMode::Cmsa),
            "add" => Ok(FusionMode::Add),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (expected cmsa or add)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub kernel: ScanKernel,
    pub fusion: FusionMode,
    /// Collect delta statistics from the fusion blocks.
    pub trace_delta: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            kernel: ScanKernel::Chunked(64),
            fusion: FusionMode::Cmsa,
            trace_delta: false,
        }
    }
}

/// Single-modality state-space block.
#[derive(Debug, Clone, PartialEq)]
pub struct VssBlockParams {
    pub norm_in: LayerNorm,
    /// `C -> 2C`, split into scan input and gate.
    pub proj_in: LinearMap,
    pub dw_conv: Tensor,
    pub ss2d: Ss2dParams,
    pub norm_out: LayerNorm,
    pub proj_out: LinearMap,
}

field_params!(VssBlockParams { norm_in, proj_in, dw_conv, ss2d, norm_out, proj_out });

impl VssBlockParams {
    pub fn channels(&self) -> usize {
        self.dw_conv.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `p*p -> C_1` window embedding.
    pub ope: ModalPair<LinearMap>,
    /// Encoder VSS blocks, `[layer][block]`.
    pub enc: ModalPair<Vec<Vec<VssBlockParams>>>,
    /// `4 C_l -> C_{l+1}` downsampling, one per layer boundary.
    pub merge: ModalPair<Vec<LinearMap>>,
    /// Fusion blocks, `[layer][block]`.
    pub cmsa: Vec<Vec<CmsaBlockParams>>,
    /// `C_{l+1} -> 4 C_l` upsampling, one per layer boundary.
    pub expand: Vec<LinearMap>,
    /// Decoder VSS blocks, `[layer][block]`.
    pub dec: Vec<Vec<VssBlockParams>>,
    /// Per-token `C_1 -> p*p*C_1` window reconstruction before folding.
    pub unproj: LinearMap,
    /// `C_1 -> 1` channel integration.
    pub head: LinearMap,
}

field_params!(ModelWeights { ope, enc, merge, cmsa, expand, dec, unproj, head });

struct Init {
    rng: ChaCha8Rng,
    hidden: usize,
    skip_d: bool,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..=bound))
    }

    fn linear(&mut self, i: usize, o: usize) -> LinearMap {
        let bound = 1.0 / (i as f64).sqrt();
        let weight = self.uniform(&[o, i], bound);
        let bias = self.uniform(&[o], bound);
        LinearMap { weight, bias }
    }

    fn conv(&mut self, c: usize) -> Tensor {
        self.uniform(&[c, 3, 3], 1.0 / 3.0)
    }

    fn core(&mut self, c: usize) -> SsmCore {
        let h = self.hidden;
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        SsmCore {
            a_log: Tensor::from_fn(&[c, h], |k| ((k % h) as f64 + 1.0).ln()),
            delta_bias: Tensor::from_fn(&[c], |_| softplus_inv(self.rng.gen_range(lo..hi).exp())),
            d: self.skip_d.then(|| Tensor::full(&[c], 1.0)),
        }
    }

    fn selective(&mut self, c: usize) -> SelectiveProj {
        SelectiveProj {
            proj_b: self.linear(c, self.hidden),
            proj_c: self.linear(c, self.hidden),
            proj_delta: self.linear(c, c),
        }
    }

    fn vss(&mut self, c: usize) -> VssBlockParams {
        VssBlockParams {
            norm_in: LayerNorm::new(c),
            proj_in: self.linear(c, 2 * c),
            dw_conv: self.conv(c),
            ss2d: Ss2dParams {
                core: self.core(c),
                proj: self.selective(c),
            },
            norm_out: LayerNorm::new(c),
            proj_out: LinearMap::zeros(c, c),
        }
    }

    fn ssm_pair(&mut self, c: usize) -> SsmParams {
        SsmParams {
            core: self.core(c),
            ir: self.selective(c),
            vi: self.selective(c),
        }
    }

    fn cmsa(&mut self, c: usize) -> CmsaBlockParams {
        CmsaBlockParams {
            norm_in: ModalPair { ir: LayerNorm::new(c), vi: LayerNorm::new(c) },
            proj_in: ModalPair { ir: self.linear(c, 2 * c), vi: self.linear(c, 2 * c) },
            dw_conv: self.conv(c),
            mark: self.linear(2 * c, c),
            ssm: [self.ssm_pair(c), self.ssm_pair(c), self.ssm_pair(c), self.ssm_pair(c)],
            norm_out: ModalPair { ir: LayerNorm::new(c), vi: LayerNorm::new(c) },
            proj_out: ModalPair { ir: LinearMap::zeros(c, c), vi: LinearMap::zeros(c, c) },
        }
    }

    fn tower(&mut self, cfg: &FusionConfig) -> (LinearMap, Vec<Vec<VssBlockParams>>, Vec<LinearMap>) {
        let p2 = cfg.patch_size * cfg.patch_size;
        let ope = self.linear(p2, cfg.channels[0]);
        let enc = (0..cfg.n_layers).map(|l| (0..cfg.vss_counts[l]).map(|_| self.vss(cfg.channels[l])).collect()).collect();
        let merge = (1..cfg.n_layers).map(|l| self.linear(4 * cfg.channels[l - 1], cfg.channels[l])).collect();
        (ope, enc, merge)
    }
}

impl ModelWeights {
    /// Seeded initialisation: linear maps uniform in `±1/sqrt(fan_in)`,
    /// `A = -(h + 1)`, delta bias placing `softplus` log-uniformly in
    /// `[1e-3, 1e-1]`, output projections zero, norms at identity.
    pub fn init(cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            hidden: cfg.hidden,
            skip_d: cfg.skip_d,
        };
        let (ope_ir, enc_ir, merge_ir) = init.tower(cfg);
        let (ope_vi, enc_vi, merge_vi) = init.tower(cfg);
        let cmsa = cfg.channels.iter().map(|&c| (0..cfg.k_blocks).map(|_| init.cmsa(c)).collect()).collect();
        let expand = (1..cfg.n_layers).map(|l| init.linear(cfg.channels[l], 4 * cfg.channels[l - 1])).collect();
        let dec = (0..cfg.n_layers).map(|l| (0..cfg.vss_counts[l]).map(|_| init.vss(cfg.channels[l])).collect()).collect();
        let c0 = cfg.channels[0];
        let p2 = cfg.patch_size * cfg.patch_size;
        Ok(Self {
            ope: ModalPair { ir: ope_ir, vi: ope_vi },
            enc: ModalPair { ir: enc_ir, vi: enc_vi },
            merge: ModalPair { ir: merge_ir, vi: merge_vi },
            cmsa,
            expand,
            unproj: init.linear(c0, p2 * c0),
            head: init.linear(c0, 1),
            dec,
        })
    }

    /// Builds weights for `cfg` from named tensors, checking every name and
    /// extent.
    pub fn from_tensors(cfg: &FusionConfig, tensors: std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let mut w = Self::init(cfg)?;
        w.assign_from(tensors)?;
        Ok(w)
    }

    /// Checks that every tensor matches the extents implied by `cfg`.
    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        let template = Self::init(cfg)?;
        let mut expected = template.named_tensors()?;
        self.visit("", &mut |name, t| {
            let want = expected.remove(name).ok_or_else(|| Error::UnexpectedTensor(name.to_string()))?;
            if want.shape() != t.shape() {
                return Err(Error::Extent {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(())
        })?;
        match expected.into_keys().next() {
            Some(missing) => Err(Error::MissingTensor(missing)),
            None => Ok(()),
        }
    }

    /// Exchanges the infrared and visible roles of every per-modality
    /// parameter. The decoder is shared and unchanged.
    pub fn swap_modalities(&mut self) {
        std::mem::swap(&mut self.ope.ir, &mut self.ope.vi);
        std::mem::swap(&mut self.enc.ir, &mut self.enc.vi);
        std::mem::swap(&mut self.merge.ir, &mut self.merge.vi);
        for block in self.cmsa.iter_mut().flatten() {
            block.swap_modalities();
        }
    }
}

/// Padded image extent for windows of size `p` at stride `s`: at least `p`,
/// and `(n_pad - p)` divisible by `s`.
pub fn ope_padded_extent(n: usize, p: usize, s: usize) -> usize {
    if n <= p {
        p
    } else {
        n + (s - (n - p) % s) % s
    }
}

pub fn ope_grid_extent(n: usize, p: usize, s: usize) -> usize {
    (ope_padded_extent(n, p, s) - p) / s + 1
}

fn plane_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] | [h, w, 1] => Ok((*h, *w)),
        other => Err(Error::shape(format!("expected a single-channel image, got extents {other:?}"))),
    }
}

/// Cuts `[H, W, C]` into `p x p` windows at stride `s` after reflect-padding
/// the bottom and right edges. Returns `[h, w, p*p*C]`, each window
/// flattened row-major with channels innermost.
pub fn unfold_windows(img: &Tensor, p: usize, s: usize) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    if s == 0 || p == 0 {
        return Err(Error::Domain(format!("window size {p} and stride {s} must be positive")));
    }
    let (gh, gw) = (ope_grid_extent(h, p, s), ope_grid_extent(w, p, s));
    let src = img.data();
    let mut out = Vec::with_capacity(gh * gw * p * p * c);
    for i in 0..gh {
        for j in 0..gw {
            for di in 0..p {
                let y = reflect_index((i * s + di) as isize, h);
                for dj in 0..p {
                    let x = reflect_index((j * s + dj) as isize, w);
                    out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
                }
            }
        }
    }
    Tensor::new(vec![gh, gw, p * p * c], out)
}

/// Places each token's `p x p` window at stride `s`, averages overlapping
/// contributions by count and crops to `out_h x out_w`.
pub fn fold_windows(tokens: &Tensor, p: usize, s: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (gh, gw, k) = tokens.dims3()?;
    if s == 0 || p == 0 || k % (p * p) != 0 {
        return Err(Error::shape(format!("cannot fold {k} values into {p}x{p} windows at stride {s}")));
    }
    let c = k / (p * p);
    let (ch, cw) = ((gh - 1) * s + p, (gw - 1) * s + p);
    if out_h > ch || out_w > cw {
        return Err(Error::shape(format!("fold canvas {ch}x{cw} is smaller than the requested {out_h}x{out_w}")));
    }
    let mut acc = vec![0.0; ch * cw * c];
    let mut count = vec![0u32; ch * cw];
    for (t, win) in tokens.data().chunks_exact(k).enumerate() {
        let (i, j) = (t / gw, t % gw);
        for di in 0..p {
            for dj in 0..p {
                let pix = (i * s + di) * cw + j * s + dj;
                count[pix] += 1;
                let src = &win[(di * p + dj) * c..(di * p + dj + 1) * c];
                for (a, &v) in acc[pix * c..(pix + 1) * c].iter_mut().zip(src) {
                    *a += v;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        for x in 0..out_w {
            let pix = y * cw + x;
            let n = count[pix] as f64;
            out.extend(acc[pix * c..(pix + 1) * c].iter().map(|v| v / n));
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Overlapping `p x p` windows at stride `p - o`, each flattened and mapped
/// to `C` channels.
pub fn overlap_patch_embed(img: &Tensor, p: usize, o: usize, proj: &LinearMap) -> Result<Tensor> {
    if o >= p {
        return Err(Error::Domain(format!("overlap {o} leaves a non-positive stride for patch size {p}")));
    }
    let (h, w) = plane_dims(img)?;
    if proj.in_dim() != p * p {
        return Err(Error::shape(format!("embedding expects {} inputs, windows have {}", proj.in_dim(), p * p)));
    }
    let plane = Tensor::new(vec![h, w, 1], img.data().to_vec())?;
    proj.apply(&unfold_windows(&plane, p, p - o)?)
}

pub fn vss_block(grid: &Tensor, params: &VssBlockParams, opts: ScanOptions) -> Result<Tensor> {
    let (_, _, c) = grid.dims3()?;
    if params.channels() != c {
        return Err(Error::shape(format!("VSS block expects {} channels, grid has {c}", params.channels())));
    }
    let (s, gate) = scan_branch(grid, &params.norm_in, &params.proj_in, &params.dw_conv)?;
    let t = ss2d_single(&s, &params.ss2d, opts)?;
    gated_residual(grid, &t, &gate, &params.norm_out, &params.proj_out)
}

/// Concatenates each 2x2 neighbourhood (TL, TR, BL, BR) and projects
/// `4C` to the map's output width. Odd extents are reflect-padded first.
pub fn patch_merge(grid: &Tensor, proj: &LinearMap) -> Result<Tensor> {
    let (h, w, c) = grid.dims3()?;
    if proj.in_dim() != 4 * c {
        return Err(Error::shape(format!("merge expects {} inputs, grid gives {}", proj.in_dim(), 4 * c)));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let src = grid.data();
    let mut cat = Vec::with_capacity(oh * ow * 4 * c);
    for i in 0..oh {
        for j in 0..ow {
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let y = reflect_index((2 * i + di) as isize, h);
                let x = reflect_index((2 * j + dj) as isize, w);
                cat.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
            }
        }
    }
    proj.apply(&Tensor::new(vec![oh, ow, 4 * c], cat)?)
}

/// Projects each token and spreads the result over a 2x2 block in the
/// TL, TR, BL, BR layout used by [`patch_merge`].
pub fn patch_expand(grid: &Tensor, proj: &LinearMap) -> Result<Tensor> {
    let (h, w, _) = grid.dims3()?;
    let k = proj.out_dim();
    if k % 4 != 0 {
        return Err(Error::shape(format!("expand output width {k} does not split into a 2x2 block")));
    }
    let co = k / 4;
    let y = proj.apply(grid)?;
    let mut out = vec![0.0; 4 * h * w * co];
    let ow = 2 * w;
    for (t, tok) in y.data().chunks_exact(k).enumerate() {
        let (i, j) = (t / w, t % w);
        for (q, part) in tok.chunks_exact(co).enumerate() {
            let pix = (2 * i + q / 2) * ow + 2 * j + q % 2;
            out[pix * co..(pix + 1) * co].copy_from_slice(part);
        }
    }
    Tensor::new(vec![2 * h, ow, co], out)
}

/// Top-left `h x w` crop of an `[H, W, C]` grid.
pub fn crop(grid: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw, c) = grid.dims3()?;
    if h > gh || w > gw {
        return Err(Error::shape(format!("cannot crop {gh}x{gw} to {h}x{w}")));
    }
    if (h, w) == (gh, gw) {
        return Ok(grid.clone());
    }
    let mut out = Vec::with_capacity(h * w * c);
    for row in grid.data().chunks_exact(gw * c).take(h) {
        out.extend_from_slice(&row[..w * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

fn scan_options(cfg: &FusionConfig, opts: &ForwardOptions) -> ScanOptions {
    ScanOptions {
        mode: cfg.mode,
        kernel: opts.kernel,
    }
}

fn encode_tower(img: &Tensor, ope: &LinearMap, enc: &[Vec<VssBlockParams>], merge: &[LinearMap], cfg: &FusionConfig, opts: ScanOptions) -> Result<Vec<Tensor>> {
    let mut x = overlap_patch_embed(img, cfg.patch_size, cfg.overlap, ope)?;
    let mut out = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        for block in &enc[l] {
            x = vss_block(&x, block, opts)?;
        }
        let next = if l + 1 < cfg.n_layers { Some(patch_merge(&x, &merge[l])?) } else { None };
        out.push(x);
        match next {
            Some(n) => x = n,
            None => break,
        }
    }
    Ok(out)
}

/// Both encoder towers. Returns one `(I, V)` pair per layer, finest first.
pub fn encode(img_ir: &Tensor, img_vi: &Tensor, weights: &ModelWeights, cfg: &FusionConfig, opts: &ForwardOptions) -> Result<Vec<ModalPair>> {
    let dims = plane_dims(img_ir)?;
    if plane_dims(img_vi)? != dims {
        return Err(Error::shape(format!("infrared is {dims:?} but visible is {:?}", plane_dims(img_vi)?)));
    }
    let so = scan_options(cfg, opts);
    let (ir, vi) = rayon::join(
        || encode_tower(img_ir, &weights.ope.ir, &weights.enc.ir, &weights.merge.ir, cfg, so),
        || encode_tower(img_vi, &weights.ope.vi, &weights.enc.vi, &weights.merge.vi, cfg, so),
    );
    Ok(ir?.into_iter().zip(vi?).map(|(ir, vi)| ModalPair { ir, vi }).collect())
}

/// Decodes from the coarsest features `top` (`I + V` at the last layer) and
/// the per-layer fused grids, then folds to an `out_h x out_w x 1` image
/// clamped to `[0, 1]`.
pub fn decode_and_fold(fused: &[Tensor], top: &Tensor, weights: &ModelWeights, cfg: &FusionConfig, opts: &ForwardOptions, out_h: usize, out_w: usize) -> Result<Tensor> {
    if fused.len() != cfg.n_layers {
        return Err(Error::shape(format!("{} fused grids for {} layers", fused.len(), cfg.n_layers)));
    }
    let so = scan_options(cfg, opts);
    let mut f = top.clone();
    for l in (0..cfg.n_layers).rev() {
        let r = &fused[l];
        let (h, w, _) = r.dims3()?;
        let up = if l + 1 == cfg.n_layers { f } else { crop(&patch_expand(&f, &weights.expand[l])?, h, w)? };
        f = up.add(r)?;
        for block in &weights.dec[l] {
            f = vss_block(&f, block, so)?;
        }
    }
    let windows = weights.unproj.apply(&f)?;
    let s = cfg.stride();
    let folded = fold_windows(&windows, cfg.patch_size, s, out_h, out_w)?;
    Ok(weights.head.apply(&folded)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Intermediate grids of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub ir: Tensor,
    pub vi: Tensor,
    pub fused: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseOutput {
    /// `[H, W, 1]` in `[0, 1]`.
    pub image: Tensor,
    pub layers: Vec<LayerFeatures>,
    /// Per layer, per fusion block; empty unless tracing was requested.
    pub delta: Vec<Vec<BlockDeltaTrace>>,
}

pub fn fuse_forward(img_ir: &Tensor, img_vi: &Tensor, weights: &ModelWeights, cfg: &FusionConfig) -> Result<Tensor> {
    fuse_forward_with(img_ir, img_vi, weights, cfg, &ForwardOptions::default()).map(|o| o.image)
}

pub fn fuse_forward_with(img_ir: &Tensor, img_vi: &Tensor, weights: &ModelWeights, cfg: &FusionConfig, opts: &ForwardOptions) -> Result<FuseOutput> {
    cfg.validate()?;
    let (h, w) = plane_dims(img_ir)?;
    let pairs = encode(img_ir, img_vi, weights, cfg, opts)?;
    let so = scan_options(cfg, opts);
    let mut delta = Vec::new();
    let mut layers = Vec::with_capacity(pairs.len());
    for (l, pair) in pairs.into_iter().enumerate() {
        let fused = match opts.fusion {
            FusionMode::Add => pair.sum()?,
            FusionMode::Cmsa => {
                let mut traces = Vec::new();
                let r = cmsa_stack_traced(&pair, &weights.cmsa[l], so, opts.trace_delta.then_some(&mut traces))?;
                if opts.trace_delta {
                    delta.push(traces);
                }
                r
            }
        };
        layers.push(LayerFeatures { ir: pair.ir, vi: pair.vi, fused });
    }
    let last = layers.last().expect("at least one layer");
    let top = last.ir.add(&last.vi)?;
    let fused: Vec<Tensor> = layers.iter().map(|f| f.fused.clone()).collect();
    let image = decode_and_fold(&fused, &top, weights, cfg, opts, h, w)?;
    Ok(FuseOutput { image, layers, delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmsa::cmsa_block;

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            n_layers: 2,
            k_blocks: 2,
            vss_counts: vec![1, 1],
            channels: vec![4, 8],
            patch_size: 4,
            overlap: 1,
            hidden: 4,
            seed: 7,
            ..FusionConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 1], |_| rng.gen_range(0.0..1.0))
    }

    fn randomize_outputs(w: &mut ModelWeights, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut touch = |m: &mut LinearMap| {
            m.weight = Tensor::from_fn(m.weight.shape(), |_| rng.gen_range(-0.3..0.3));
            m.bias = Tensor::from_fn(m.bias.shape(), |_| rng.gen_range(-0.1..0.1));
        };
        for tower in [&mut w.enc.ir, &mut w.enc.vi, &mut w.dec] {
            for b in tower.iter_mut().flatten() {
                touch(&mut b.proj_out);
            }
        }
    }

    #[test]
    fn config_validation() {
        FusionConfig::default().validate().unwrap();
        let cases = [
            FusionConfig { channels: vec![48, 96], ..FusionConfig::default() },
            FusionConfig { channels: vec![96, 48, 192], ..FusionConfig::default() },
            FusionConfig { overlap: 4, ..FusionConfig::default() },
            FusionConfig { vss_counts: vec![1], ..FusionConfig::default() },
            FusionConfig { k_blocks: 0, ..FusionConfig::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let c: FusionConfig = serde_json::from_str(r#"{"n_layers": 3, "mode": "zoh"}"#).unwrap();
        assert_eq!(c.mode, DiscretizeMode::Zoh);
        assert!(serde_json::from_str::<FusionConfig>(r#"{"layers": 3}"#).is_err());
    }

    #[test]
    fn ope_extents() {
        assert_eq!(ope_grid_extent(229, 4, 3), 76);
        assert_eq!(ope_padded_extent(7, 4, 3), 7);
        assert_eq!(ope_grid_extent(7, 4, 3), 2);
        assert_eq!(ope_padded_extent(8, 4, 3), 10);
        assert_eq!(ope_padded_extent(2, 4, 3), 4);
        let proj = LinearMap::identity(16);
        let g = overlap_patch_embed(&image(229, 229, 1), 4, 1, &proj).unwrap();
        assert_eq!(g.shape(), &[76, 76, 16]);
        assert!(overlap_patch_embed(&image(8, 8, 1), 4, 4, &proj).is_err());
    }

    #[test]
    fn ope_windows_match_direct_indexing() {
        let img = image(7, 7, 2);
        let g = overlap_patch_embed(&img, 4, 1, &LinearMap::identity(16)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for di in 0..4 {
                    for dj in 0..4 {
                        let want = img.data()[(3 * i + di) * 7 + 3 * j + dj];
                        assert_eq!(g.data()[(i * 2 + j) * 16 + di * 4 + dj], want);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = LinearMap::new(Tensor::from_fn(&[5, 16], |_| rng.gen_range(-1.0..1.0)), None).unwrap();
        let g = overlap_patch_embed(&Tensor::full(&[10, 9, 1], 0.4), 4, 1, &proj).unwrap();
        let first = g.data()[..5].to_vec();
        assert!(g.data().chunks_exact(5).all(|t| t == first.as_slice()));
    }

    #[test]
    fn fold_unfold_without_overlap_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[8, 12, 3], |_| rng.gen_range(-1.0..1.0));
        let back = fold_windows(&unfold_windows(&x, 4, 4).unwrap(), 4, 4, 8, 12).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn fold_unfold_with_overlap_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[11, 9, 2], |_| rng.gen_range(-1.0..1.0));
        let back = fold_windows(&unfold_windows(&x, 4, 3).unwrap(), 4, 3, 11, 9).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-15);
    }

    #[test]
    fn fold_constant_windows_is_constant() {
        let tokens = Tensor::full(&[5, 4, 16], 0.625);
        let img = fold_windows(&tokens, 4, 3, 14, 12).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.625));
        assert!(fold_windows(&tokens, 4, 3, 17, 12).is_err());
    }

    #[test]
    fn merge_examples() {
        let g = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = patch_merge(&g, &LinearMap::new(w, None).unwrap()).unwrap();
        assert_eq!((m.shape(), m.data()), (&[1, 1, 2][..], &[1.0, 4.0][..]));

        // takes the top-left copy into both output channels
        let dup = LinearMap::new(Tensor::from_fn(&[2, 4], |k| if k % 4 == 0 { 1.0 } else { 0.0 }), None).unwrap();
        let out = patch_merge(&Tensor::full(&[6, 4, 1], 0.3), &dup).unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.3));

        let odd = patch_merge(&Tensor::zeros(&[5, 3, 48]), &LinearMap::zeros(192, 96)).unwrap();
        assert_eq!(odd.shape(), &[3, 2, 96]);
    }

    #[test]
    fn odd_merge_uses_reflected_neighbours() {
        let g = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let m = patch_merge(&g, &LinearMap::identity(4)).unwrap();
        // padding row mirrors to row 0 (n = 1); padding column 3 mirrors to 1
        assert_eq!(m.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn expand_examples() {
        let t = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = patch_expand(&t, &LinearMap::identity(4)).unwrap();
        assert_eq!(e.shape(), &[2, 2, 1]);
        assert_eq!(e.data(), &[1.0, 2.0, 3.0, 4.0]);

        let proj = LinearMap::new(Tensor::from_fn(&[8, 4], |k| [0.5, -1.0, 0.25, 2.0][k % 4]), None).unwrap();
        let e = patch_expand(&Tensor::new(vec![1, 1, 4], vec![1.0, 1.0, 2.0, 3.0]).unwrap(), &proj).unwrap();
        assert_eq!(e.shape(), &[2, 2, 2]);
        assert!(e.data().iter().all(|&v| v == e.data()[0]));

        assert!(patch_expand(&Tensor::zeros(&[1, 1, 3]), &LinearMap::zeros(3, 6)).is_err());
    }

    #[test]
    fn merge_then_expand_roundtrips_shape_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Tensor::from_fn(&[4, 6, 3], |_| rng.gen_range(-1.0..1.0));
        let m = patch_merge(&g, &LinearMap::identity(12)).unwrap();
        assert_eq!(patch_expand(&m, &LinearMap::identity(12)).unwrap(), g);
        let m = patch_merge(&g, &LinearMap::zeros(12, 6)).unwrap();
        assert_eq!(patch_expand(&m, &LinearMap::zeros(6, 12)).unwrap().shape(), g.shape());
    }

    fn random_vss(seed: u64, c: usize, h: usize) -> VssBlockParams {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            hidden: h,
            skip_d: true,
        };
        let mut b = init.vss(c);
        b.proj_out = init.linear(c, c);
        b
    }

    #[test]
    fn vss_zero_proj_out_is_identity() {
        let mut b = random_vss(8, 4, 3);
        b.proj_out = LinearMap::zeros(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Tensor::from_fn(&[9, 5, 4], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(vss_block(&g, &b, ScanOptions::default()).unwrap(), g);
    }

    #[test]
    fn vss_preserves_shape() {
        let b = random_vss(10, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Tensor::from_fn(&[9, 5, 4], |_| rng.gen_range(-1.0..1.0));
        let y = vss_block(&g, &b, ScanOptions::default()).unwrap();
        assert_eq!(y.shape(), &[9, 5, 4]);
        assert!(y.is_finite() && y != g);
        assert!(vss_block(&Tensor::zeros(&[3, 3, 2]), &b, ScanOptions::default()).is_err());
    }

    #[test]
    fn vss_agrees_with_tied_cmsa_when_readout_and_mark_vanish() {
        let c = 3;
        let mut b = random_vss(12, c, 4);
        b.ss2d.proj.proj_c = LinearMap::zeros(c, 4);
        b.ss2d.core.d = Some(Tensor::zeros(&[c]));
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(13),
            hidden: 4,
            skip_d: true,
        };
        let mut cb = init.cmsa(c);
        let pair_of = |x: &LayerNorm| ModalPair { ir: x.clone(), vi: x.clone() };
        cb.norm_in = pair_of(&b.norm_in);
        cb.norm_out = pair_of(&b.norm_out);
        cb.proj_in = ModalPair { ir: b.proj_in.clone(), vi: b.proj_in.clone() };
        cb.proj_out = ModalPair { ir: b.proj_out.clone(), vi: b.proj_out.clone() };
        cb.dw_conv = b.dw_conv.clone();
        cb.mark = LinearMap::zeros(2 * c, c);
        for p in &mut cb.ssm {
            p.core = b.ss2d.core.clone();
            p.ir = b.ss2d.proj.clone();
            p.vi = b.ss2d.proj.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::from_fn(&[4, 5, c], |_| rng.gen_range(-1.0..1.0));
        let opts = ScanOptions::default();
        let single = vss_block(&x, &b, opts).unwrap();
        let pair = cmsa_block(&ModalPair { ir: x.clone(), vi: x.clone() }, &cb, opts).unwrap();
        assert!(single.max_abs_diff(&pair.ir) <= 1e-12);
        assert!(single.max_abs_diff(&pair.vi) <= 1e-12);
        assert!(single.max_abs_diff(&x) > 1e-3);
    }

    #[test]
    fn encode_pyramid_and_independence() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg).unwrap();
        randomize_outputs(&mut w, 1);
        let (ir, vi) = (image(13, 10, 1), image(13, 10, 2));
        let pairs = encode(&ir, &vi, &w, &cfg, &ForwardOptions::default()).unwrap();
        assert_eq!(pairs[0].ir.shape(), &[4, 3, 4]);
        assert_eq!(pairs[1].vi.shape(), &[2, 2, 8]);
        assert_eq!(cfg.grid_extents(13, 10), vec![(4, 3), (2, 2)]);

        let mut w2 = w.clone();
        w2.ope.vi.bias = w2.ope.vi.bias.map(|v| v + 0.5);
        let other = encode(&ir, &vi, &w2, &cfg, &ForwardOptions::default()).unwrap();
        for (a, b) in pairs.iter().zip(&other) {
            assert_eq!(a.ir, b.ir);
            assert_ne!(a.vi, b.vi);
        }
        assert!(encode(&ir, &image(12, 10, 2), &w, &cfg, &ForwardOptions::default()).is_err());
    }

    fn zero_biases(w: &mut ModelWeights) {
        w.visit_mut("", &mut |name, t| {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                *t = Tensor::zeros(t.shape());
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn zero_images_and_biases_give_zero_everywhere() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg).unwrap();
        randomize_outputs(&mut w, 2);
        zero_biases(&mut w);
        let zero = Tensor::zeros(&[9, 9, 1]);
        let out = fuse_forward_with(&zero, &zero, &w, &cfg, &ForwardOptions::default()).unwrap();
        for f in &out.layers {
            assert!(f.ir.data().iter().chain(f.vi.data()).chain(f.fused.data()).all(|&v| v == 0.0));
        }
        assert!(out.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_zero_features() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg).unwrap();
        zero_biases(&mut w);
        let fused = vec![Tensor::zeros(&[4, 3, 4]), Tensor::zeros(&[2, 2, 8])];
        let img = decode_and_fold(&fused, &fused[1], &w, &cfg, &ForwardOptions::default(), 13, 10).unwrap();
        assert_eq!(img.shape(), &[13, 10, 1]);
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert!(decode_and_fold(&fused[..1], &fused[1], &w, &cfg, &ForwardOptions::default(), 13, 10).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg).unwrap();
        randomize_outputs(&mut w, 3);
        let (ir, vi) = (image(12, 11, 3), image(12, 11, 4));
        let a = fuse_forward(&ir, &vi, &w, &cfg).unwrap();
        let b = fuse_forward(&ir, &vi, &ModelWeights::init(&cfg).map(|mut w| {
            randomize_outputs(&mut w, 3);
            w
        }).unwrap(), &cfg)
        .unwrap();
        assert_eq!(a.shape(), &[12, 11, 1]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn modality_swap_with_swapped_weights() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg).unwrap();
        randomize_outputs(&mut w, 4);
        let (ir, vi) = (image(10, 10, 5), image(10, 10, 6));
        let f = fuse_forward(&ir, &vi, &w, &cfg).unwrap();
        let mut sw = w.clone();
        sw.swap_modalities();
        let g = fuse_forward(&vi, &ir, &sw, &cfg).unwrap();
        assert!(f.max_abs_diff(&g) <= 1e-12);
        sw.swap_modalities();
        assert_eq!(sw, w);
    }

    #[test]
    fn add_ablation_runs() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg).unwrap();
        let opts = ForwardOptions { fusion: FusionMode::Add, ..ForwardOptions::default() };
        let (ir, vi) = (image(9, 8, 7), image(9, 8, 8));
        let a = fuse_forward_with(&ir, &vi, &w, &cfg, &opts).unwrap();
        let b = fuse_forward_with(&ir, &vi, &w, &cfg, &opts).unwrap();
        assert_eq!(a.image, b.image);
        for f in &a.layers {
            assert_eq!(f.fused, f.ir.add(&f.vi).unwrap());
        }
        assert!("add".parse::<FusionMode>().is_ok() && "mul".parse::<FusionMode>().is_err());
    }

    #[test]
    fn delta_trace_shape() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg).unwrap();
        let opts = ForwardOptions { trace_delta: true, ..ForwardOptions::default() };
        let out = fuse_forward_with(&image(8, 8, 9), &image(8, 8, 10), &w, &cfg, &opts).unwrap();
        assert_eq!(out.delta.len(), 2);
        assert!(out.delta.iter().all(|l| l.len() == 2));
        let post = out.delta[0][0].ir.post_mean();
        assert!(post > 0.0 && post.is_finite());
    }

    #[test]
    fn init_is_seeded_and_validates() {
        let cfg = small_cfg();
        let a = ModelWeights::init(&cfg).unwrap();
        assert_eq!(a, ModelWeights::init(&cfg).unwrap());
        assert_ne!(a, ModelWeights::init(&FusionConfig { seed: 8, ..cfg.clone() }).unwrap());
        a.validate(&cfg).unwrap();
        let bigger = FusionConfig { hidden: 5, ..cfg.clone() };
        assert!(matches!(a.validate(&bigger), Err(Error::Extent { .. })));
        let no_d = FusionConfig { skip_d: false, ..cfg.clone() };
        assert!(matches!(a.validate(&no_d), Err(Error::UnexpectedTensor(_))));

        let core = &a.dec[0][0].ss2d.core;
        for (k, &a) in core.a().data()[..4].iter().enumerate() {
            assert!((a + (k as f64 + 1.0)).abs() <= 1e-15 * (k as f64 + 1.0));
        }
        for &b in core.delta_bias.data() {
            let dt = crate::tensor::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt));
        }
        let t = a.named_tensors().unwrap();
        assert!(t.contains_key("cmsa.1.0.ssm.3.vi.proj_delta.weight"));
        assert!(t.contains_key("enc.ir.0.0.ss2d.core.d"));
        assert_eq!(ModelWeights::from_tensors(&cfg, t).unwrap(), a);
    }
}
