//! Wall-clock timing of the chunked scan over a range of sequence lengths.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ssm::selective_scan_chunked;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub hidden: usize,
    pub chunk: usize,
    /// Best-of count per length.
    pub repeats: usize,
    /// Worker threads for the scan; 1 gives the steadiest timings.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: (12..=16).map(|k| 1 << k).collect(),
            channels: 4,
            hidden: 8,
            chunk: 64,
            repeats: 5,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "L")]
    pub length: usize,
    /// Nanoseconds per `(position, channel, state)` update.
    pub ns_per_element: f64,
}

pub fn bench_scan(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.lengths.is_empty() || cfg.lengths.contains(&0) {
        return Err(Error::Config("lengths must be non-empty and positive".into()));
    }
    if cfg.channels == 0 || cfg.hidden == 0 || cfg.chunk == 0 || cfg.repeats == 0 || cfg.threads == 0 {
        return Err(Error::Config("channels, hidden, chunk, repeats and threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, h) = (cfg.channels, cfg.hidden);
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &l in &cfg.lengths {
        let a = Tensor::from_fn(&[l, c, h], |_| rng.gen_range(0.5..0.999));
        let b = Tensor::from_fn(&[l, c, h], |_| rng.gen_range(-1.0..1.0));
        let cs = Tensor::from_fn(&[l, h], |_| rng.gen_range(-1.0..1.0));
        let x = Tensor::from_fn(&[l, c], |_| rng.gen_range(-1.0..1.0));
        let d = Tensor::full(&[c], 1.0);
        let best = pool.install(|| -> Result<f64> {
            let mut best = f64::INFINITY;
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                let y = selective_scan_chunked(&a, &b, &cs, &x, Some(&d), cfg.chunk)?;
                best = best.min(start.elapsed().as_nanos() as f64);
                std::hint::black_box(y);
            }
            Ok(best)
        })?;
        rows.push(BenchRow {
            length: l,
            ns_per_element: best / (l * c * h) as f64,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log(total time)` against `log(L)`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.length as f64).ln(), (r.ns_per_element * r.length as f64).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Largest over smallest per-element time.
pub fn spread(rows: &[BenchRow]) -> f64 {
    let max = rows.iter().map(|r| r.ns_per_element).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.ns_per_element).fold(f64::INFINITY, f64::min);
    max / min
}

pub fn write_csv(rows: &[BenchRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "L,ns_per_element")?;
    for r in rows {
        writeln!(out, "{},{:.4}", r.length, r.ns_per_element)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(l: usize, ns: f64) -> BenchRow {
        BenchRow { length: l, ns_per_element: ns }
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let linear: Vec<_> = [1000, 2000, 4000].iter().map(|&l| row(l, 3.0)).collect();
        assert!((loglog_slope(&linear) - 1.0).abs() < 1e-12);
        let quad: Vec<_> = [1000, 2000, 4000].iter().map(|&l| row(l, l as f64)).collect();
        assert!((loglog_slope(&quad) - 2.0).abs() < 1e-12);
        assert_eq!(spread(&quad), 4.0);
    }

    #[test]
    fn small_run_and_csv() {
        let cfg = BenchConfig {
            lengths: vec![64, 128],
            channels: 2,
            hidden: 2,
            chunk: 16,
            repeats: 1,
            ..BenchConfig::default()
        };
        let rows = bench_scan(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.ns_per_element > 0.0));
        let mut buf = Vec::new();
        write_csv(&[row(4096, 1.5)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "L,ns_per_element\n4096,1.5000\n");
        assert!(bench_scan(&BenchConfig { lengths: vec![], ..cfg }).is_err());
    }
}
