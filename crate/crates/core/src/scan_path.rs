//! Scan geometry: four-direction flattening of `[H, W, C]` grids, two-stream
//! interleaving, recovery back to grids, and the single-modality SS2D.
//!
//! `Hf` is row-major order and `Vf` column-major order; `Hb` and `Vb` are
//! their exact reversals.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ssm::{run_selective, ScanOptions, Ss2dParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Hf,
    Hb,
    Vf,
    Vb,
}

impl Direction {
    /// All directions in summation order.
    pub const ALL: [Direction; 4] = [Direction::Hf, Direction::Hb, Direction::Vf, Direction::Vb];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Hf => "hf",
            Direction::Hb => "hb",
            Direction::Vf => "vf",
            Direction::Vb => "vb",
        }
    }

    /// Grid cell (row-major flat index) visited at each sequence position.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row_major = || 0..h * w;
        let col_major = move || (0..w).flat_map(move |j| (0..h).map(move |i| i * w + j));
        match self {
            Direction::Hf => row_major().collect(),
            Direction::Hb => row_major().rev().collect(),
            Direction::Vf => col_major().collect(),
            Direction::Vb => {
                let mut v: Vec<usize> = col_major().collect();
                v.reverse();
                v
            }
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scan direction `{s}`")))
    }
}

/// A flattened grid tagged with the direction and geometry it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalSequence {
    pub direction: Direction,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `[grid_h * grid_w, C]`
    pub values: Tensor,
}

pub fn flatten_direction(grid: &Tensor, d: Direction) -> Result<DirectionalSequence> {
    let (h, w, c) = grid.dims3()?;
    let src = grid.data();
    let mut out = Vec::with_capacity(src.len());
    for cell in d.order(h, w) {
        out.extend_from_slice(&src[cell * c..(cell + 1) * c]);
    }
    Ok(DirectionalSequence {
        direction: d,
        grid_h: h,
        grid_w: w,
        values: Tensor::new(vec![h * w, c], out)?,
    })
}

pub fn unflatten_direction(seq: &DirectionalSequence) -> Result<Tensor> {
    let (l, c) = seq.values.dims2()?;
    let (h, w) = (seq.grid_h, seq.grid_w);
    if l != h * w {
        return Err(Error::shape(format!("sequence length {l} does not cover a {h}x{w} grid")));
    }
    let src = seq.values.data();
    let mut out = vec![0.0; src.len()];
    for (t, cell) in seq.direction.order(h, w).into_iter().enumerate() {
        out[cell * c..(cell + 1) * c].copy_from_slice(&src[t * c..(t + 1) * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

/// Alternates rows of the two streams, infrared first: `[I1, V1, I2, V2, ...]`.
pub fn interleave(seq_ir: &Tensor, seq_vi: &Tensor) -> Result<Tensor> {
    let (l, c) = seq_ir.dims2()?;
    seq_vi.expect_shape(&[l, c], "interleave visible stream")?;
    let mut out = Vec::with_capacity(2 * l * c);
    for (a, b) in seq_ir.data().chunks_exact(c).zip(seq_vi.data().chunks_exact(c)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    Tensor::new(vec![2 * l, c], out)
}

/// Inverse of [`interleave`]: even rows are infrared, odd rows visible.
pub fn deinterleave(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c) = x.dims2()?;
    if n % 2 != 0 {
        return Err(Error::shape(format!("interleaved sequence has odd length {n}")));
    }
    let mut ir = Vec::with_capacity(n / 2 * c);
    let mut vi = Vec::with_capacity(n / 2 * c);
    for pair in x.data().chunks_exact(2 * c) {
        ir.extend_from_slice(&pair[..c]);
        vi.extend_from_slice(&pair[c..]);
    }
    Ok((Tensor::new(vec![n / 2, c], ir)?, Tensor::new(vec![n / 2, c], vi)?))
}

/// Splits each interleaved direction stream (given in `Direction::ALL`
/// order), restores it to grid layout and sums the four grids per modality.
pub fn recover(streams: [&Tensor; 4], grid_h: usize, grid_w: usize) -> Result<(Tensor, Tensor)> {
    let mut acc: Option<(Tensor, Tensor)> = None;
    for (d, stream) in Direction::ALL.into_iter().zip(streams) {
        let (n, _) = stream.dims2()?;
        if n != 2 * grid_h * grid_w {
            return Err(Error::shape(format!(
                "{d} stream has length {n}, expected {} for a {grid_h}x{grid_w} grid",
                2 * grid_h * grid_w
            )));
        }
        let (ir, vi) = deinterleave(stream)?;
        let ungrid = |values| {
            unflatten_direction(&DirectionalSequence {
                direction: d,
                grid_h,
                grid_w,
                values,
            })
        };
        let (g_ir, g_vi) = (ungrid(ir)?, ungrid(vi)?);
        acc = Some(match acc {
            None => (g_ir, g_vi),
            Some((a, b)) => (a.add(&g_ir)?, b.add(&g_vi)?),
        });
    }
    Ok(acc.expect("four directions"))
}

/// Single-modality SS2D: one parameter set scans all four flattenings and
/// the restored grids are summed.
pub fn ss2d_single(grid: &Tensor, params: &Ss2dParams, opts: ScanOptions) -> Result<Tensor> {
    let (_, _, c) = grid.dims3()?;
    if params.core.channels() != c {
        return Err(Error::shape(format!("ss2d params expect {} channels, grid has {c}", params.core.channels())));
    }
    let per_direction: Vec<Tensor> = Direction::ALL
        .par_iter()
        .map(|&d| {
            let seq = flatten_direction(grid, d)?;
            let inputs = params.proj.inputs(&seq.values, &params.core.delta_bias)?;
            let y = run_selective(&params.core, &inputs, &seq.values, opts)?;
            unflatten_direction(&DirectionalSequence { values: y, ..seq })
        })
        .collect::<Result<_>>()?;
    let mut it = per_direction.into_iter();
    let first = it.next().unwrap();
    it.try_fold(first, |acc, g| acc.add(&g))
}
