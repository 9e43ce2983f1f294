//! Gaussian kernel with sampled units as bases, and bandwidth selection by
//! maximizing the variance of the off-diagonal kernel entries.

use std::collections::HashMap;
use std::io::{Read, Write};

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use rayon::prelude::*;

use crate::dataset::DesignMatrix;
use crate::error::{KpopError, Result};

const ROW_BLOCK: usize = 256;
const KPK1_MAGIC: &[u8; 4] = b"KPK1";

/// Default bandwidth search interval. The lower end stays away from zero so
/// that `-d/b` cannot overflow.
pub const DEFAULT_SEARCH_INTERVAL: (f64, f64) = (0.01, 2000.0);
const COARSE_GRID: usize = 64;
const GOLDEN_REL_TOL: f64 = 1e-6;

/// `(N_s + N_pop) × N_s` kernel, rows in design order, one column per sampled unit.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    values: Vec<f64>,
    n_rows: usize,
    n_bases: usize,
    bandwidth: f64,
}

impl KernelMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Number of basis columns, which is also the number of sample rows.
    pub fn n_bases(&self) -> usize {
        self.n_bases
    }

    pub fn n_sample(&self) -> usize {
        self.n_bases
    }

    pub fn n_population(&self) -> usize {
        self.n_rows - self.n_bases
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Design-row index of the unit behind each column.
    pub fn base_rows(&self) -> std::ops::Range<usize> {
        0..self.n_bases
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_bases + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_bases..(i + 1) * self.n_bases]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.values, self.n_rows, self.n_bases)
    }

    pub fn sample_block(&self) -> MatRef<'_, f64> {
        self.as_mat().subrows(0, self.n_bases)
    }

    pub fn population_block(&self) -> MatRef<'_, f64> {
        self.as_mat().subrows(self.n_bases, self.n_population())
    }

    /// Weighted column means `wᵀK` over the sample rows.
    pub fn sample_column_means(&self, w: &[f64]) -> Vec<f64> {
        weighted_column_means(&self.values[..self.n_bases * self.n_bases], self.n_bases, w)
    }

    /// Weighted column means over the population rows.
    pub fn population_column_means(&self, w: &[f64]) -> Vec<f64> {
        weighted_column_means(&self.values[self.n_bases * self.n_bases..], self.n_bases, w)
    }

    /// Wraps precomputed values, e.g. from a cache file.
    pub fn from_parts(values: Vec<f64>, n_rows: usize, n_bases: usize, bandwidth: f64) -> Result<Self> {
        if values.len() != n_rows * n_bases || n_bases > n_rows {
            return Err(KpopError::DimensionMismatch(format!(
                "{} values for a {n_rows}x{n_bases} kernel",
                values.len()
            )));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(KpopError::InvalidBandwidth(bandwidth));
        }
        Ok(KernelMatrix {
            values,
            n_rows,
            n_bases,
            bandwidth,
        })
    }

    /// Binary dump: `KPK1`, rows and cols as u64, bandwidth as f64, then the
    /// row-major values, all little-endian.
    pub fn write_kpk1<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(KPK1_MAGIC)?;
        w.write_all(&(self.n_rows as u64).to_le_bytes())?;
        w.write_all(&(self.n_bases as u64).to_le_bytes())?;
        w.write_all(&self.bandwidth.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.n_bases * 8);
        for row in self.values.chunks(self.n_bases.max(1)) {
            buf.clear();
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_kpk1<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| KpopError::BadKernelCache(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != KPK1_MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let n_rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let n_bases = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let bandwidth = f64::from_le_bytes(word);
        let len = n_rows
            .checked_mul(n_bases)
            .ok_or_else(|| bad("dimensions overflow"))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|_| bad("unreadable body"))?;
        if bytes.len() != len * 8 {
            return Err(bad("body length does not match dimensions"));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(values, n_rows, n_bases, bandwidth)
    }
}

fn weighted_column_means(block: &[f64], n_cols: usize, w: &[f64]) -> Vec<f64> {
    debug_assert_eq!(block.len(), w.len() * n_cols);
    let mut out = vec![0.0; n_cols];
    for (row, &wi) in block.chunks_exact(n_cols).zip(w) {
        if wi == 0.0 {
            continue;
        }
        for (o, &k) in out.iter_mut().zip(row) {
            *o += wi * k;
        }
    }
    out
}

/// Squared distances from design rows `[i0, i0 + out.len() / n_s)` to every
/// sample row, written row-major into `out`.
fn squared_distance_block(design: &DesignMatrix, i0: usize, out: &mut [f64]) {
    let n_s = design.n_sample();
    let p = design.n_cols();
    let h = out.len() / n_s;
    if design.categorical_only {
        // Binary entries: norms and inner products are small integers, so
        // the expansion is exact.
        let x = MatRef::from_row_major_slice(design.values(), design.n_rows(), p);
        let bases = x.subrows(0, n_s);
        let rows = x.subrows(i0, h);
        let mut dst = MatMut::from_column_major_slice_mut(out, n_s, h);
        matmul(dst.as_mut(), Accum::Replace, bases, rows.transpose(), -2.0, Par::Seq);
        let base_norms: Vec<f64> = (0..n_s).map(|j| sq_norm(design.row(j))).collect();
        for r in 0..h {
            let ri = sq_norm(design.row(i0 + r));
            for (j, bn) in base_norms.iter().enumerate() {
                dst[(j, r)] += ri + bn;
            }
        }
    } else {
        for r in 0..h {
            let xi = design.row(i0 + r);
            for j in 0..n_s {
                out[r * n_s + j] = xi
                    .iter()
                    .zip(design.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_design(design: &DesignMatrix) -> Result<()> {
    if design.n_sample() == 0 {
        return Err(KpopError::DimensionMismatch("design has no sample rows".into()));
    }
    if design.values().iter().any(|v| !v.is_finite()) {
        return Err(KpopError::NonFinite("design matrix"));
    }
    Ok(())
}

/// `K[i][j] = exp(-‖xᵢ - x_j‖² / b)` for every design row `i` and sample row `j`.
pub fn make_kernel(design: &DesignMatrix, b: f64) -> Result<KernelMatrix> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(KpopError::InvalidBandwidth(b));
    }
    check_design(design)?;
    let n_s = design.n_sample();
    let n = design.n_rows();
    // Binary designs only produce integer squared distances up to twice the
    // row norm bound, so exp is tabulated.
    let table: Option<Vec<f64>> = design.categorical_only.then(|| {
        let max_d = 2 * (0..n).map(|i| sq_norm(design.row(i))).fold(0.0, f64::max) as usize;
        (0..=max_d).map(|d| (-(d as f64) / b).exp()).collect()
    });
    let mut values = vec![0.0; n * n_s];
    values
        .par_chunks_mut(ROW_BLOCK * n_s)
        .enumerate()
        .for_each(|(blk, chunk)| {
            squared_distance_block(design, blk * ROW_BLOCK, chunk);
            match &table {
                Some(t) => {
                    for v in chunk.iter_mut() {
                        *v = t[*v as usize];
                    }
                }
                None => {
                    for v in chunk.iter_mut() {
                        *v = (-*v / b).exp();
                    }
                }
            }
        });
    Ok(KernelMatrix {
        values,
        n_rows: n,
        n_bases: n_s,
        bandwidth: b,
    })
}

/// Counts of squared distances over all (row, basis) pairs, self-pairs excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceHistogram {
    bins: Vec<(f64, u64)>,
}

impl DistanceHistogram {
    pub fn from_bins(mut bins: Vec<(f64, u64)>) -> Result<Self> {
        if bins.iter().any(|(d, _)| !(d.is_finite() && *d >= 0.0)) {
            return Err(KpopError::NonFinite("distance histogram"));
        }
        bins.retain(|&(_, c)| c > 0);
        bins.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, u64)> = Vec::with_capacity(bins.len());
        for (d, c) in bins {
            match merged.last_mut() {
                Some(last) if last.0 == d => last.1 += c,
                _ => merged.push((d, c)),
            }
        }
        Ok(DistanceHistogram { bins: merged })
    }

    /// `(distance, count)` pairs in increasing distance order.
    pub fn bins(&self) -> &[(f64, u64)] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.1).sum()
    }

    /// Multiplies every distance by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        DistanceHistogram {
            bins: self.bins.iter().map(|&(d, n)| (d * c, n)).collect(),
        }
    }
}

pub fn distance_histogram(design: &DesignMatrix) -> Result<DistanceHistogram> {
    check_design(design)?;
    let n_s = design.n_sample();
    let n = design.n_rows();
    let starts: Vec<usize> = (0..n).step_by(ROW_BLOCK).collect();
    let partials: Vec<HashMap<u64, u64>> = starts
        .par_iter()
        .map(|&i0| {
            let h = ROW_BLOCK.min(n - i0);
            let mut buf = vec![0.0; h * n_s];
            squared_distance_block(design, i0, &mut buf);
            let mut local: HashMap<u64, u64> = HashMap::new();
            // integer distances from binary designs are counted densely first
            let mut dense: Vec<u64> = Vec::new();
            for r in 0..h {
                let i = i0 + r;
                for (j, &d) in buf[r * n_s..(r + 1) * n_s].iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    if design.categorical_only {
                        let k = d as usize;
                        if k >= dense.len() {
                            dense.resize(k + 1, 0);
                        }
                        dense[k] += 1;
                    } else {
                        // +0.0 folds -0.0 into the same bin
                        *local.entry((d + 0.0).to_bits()).or_insert(0) += 1;
                    }
                }
            }
            for (k, c) in dense.into_iter().enumerate() {
                if c > 0 {
                    *local.entry((k as f64).to_bits()).or_insert(0) += c;
                }
            }
            local
        })
        .collect();
    let mut merged: HashMap<u64, u64> = HashMap::new();
    for part in partials {
        for (k, c) in part {
            *merged.entry(k).or_insert(0) += c;
        }
    }
    DistanceHistogram::from_bins(merged.into_iter().map(|(k, c)| (f64::from_bits(k), c)).collect())
}

/// Variance of `exp(-d/b)` over the histogram.
pub fn variance_of_k(b: f64, hist: &DistanceHistogram) -> Result<f64> {
    if !(b > 0.0) {
        return Err(KpopError::InvalidBandwidth(b));
    }
    let total = hist.total();
    if total == 0 {
        return Err(KpopError::DegenerateHistogram);
    }
    let total = total as f64;
    let mean: f64 = hist
        .bins
        .iter()
        .map(|&(d, n)| (-d / b).exp() * n as f64 / total)
        .sum();
    Ok(hist
        .bins
        .iter()
        .map(|&(d, n)| ((-d / b).exp() - mean).powi(2) * n as f64 / total)
        .sum())
}

/// Variance-maximizing bandwidth on `interval`.
///
/// A coarse log-spaced scan brackets the best region, then golden-section
/// search in `log b` refines it to relative tolerance 1e-6.
pub fn select_bandwidth(hist: &DistanceHistogram, interval: (f64, f64)) -> Result<f64> {
    let (lo, hi) = interval;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(KpopError::InvalidConfig(format!(
            "bandwidth search interval ({lo}, {hi})"
        )));
    }
    if hist.bins.len() < 2 {
        return Err(KpopError::DegenerateHistogram);
    }
    let f = |log_b: f64| variance_of_k(log_b.exp(), hist).unwrap_or(f64::NEG_INFINITY);
    let (a, z) = (lo.ln(), hi.ln());
    let grid: Vec<f64> = (0..COARSE_GRID)
        .map(|k| a + (z - a) * k as f64 / (COARSE_GRID - 1) as f64)
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let best = vals
        .iter()
        .enumerate()
        .fold(0, |bi, (i, v)| if *v > vals[bi] { i } else { bi });
    let mut left = grid[best.saturating_sub(1)];
    let mut right = grid[(best + 1).min(COARSE_GRID - 1)];

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = right - inv_phi * (right - left);
    let mut d = left + inv_phi * (right - left);
    let (mut fc, mut fd) = (f(c), f(d));
    while right - left > GOLDEN_REL_TOL {
        if fc >= fd {
            right = d;
            d = c;
            fd = fc;
            c = right - inv_phi * (right - left);
            fc = f(c);
        } else {
            left = c;
            c = d;
            fc = fd;
            d = left + inv_phi * (right - left);
            fd = f(d);
        }
    }
    let b = (0.5 * (left + right)).exp();
    Ok(b.clamp(lo, hi))
}
