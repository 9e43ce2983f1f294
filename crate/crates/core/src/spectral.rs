//! Thin SVD of the kernel matrix via the `N_s × N_s` Gram matrix.
//!
//! `G = KᵀK = U A² Uᵀ` gives `U`; then `A_j = ‖K U_j‖` and `V = K U A⁻¹`.
//! Directions with `A_j ≤ floor · A_1` are dropped.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use faer::Mat;

use crate::error::{KpopError, Result};
use crate::kernel::KernelMatrix;
use crate::linalg;

pub const DEFAULT_SVD_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// Left singular vectors, `(N_s + N_pop) × r`, sample rows first.
    pub v: Mat<f64>,
    /// Singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// Right singular vectors, `N_s × r`.
    pub u: Mat<f64>,
    /// Number of sample rows at the top of `v`.
    pub split_index: usize,
}

impl SpectralDecomposition {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn v_sample(&self) -> faer::MatRef<'_, f64> {
        self.v.as_ref().subrows(0, self.split_index)
    }

    pub fn v_population(&self) -> faer::MatRef<'_, f64> {
        let n = self.v.nrows() - self.split_index;
        self.v.as_ref().subrows(self.split_index, n)
    }

    /// Weighted column means of the population block of `V`.
    pub fn population_means(&self, pop_w: &[f64]) -> Vec<f64> {
        column_means(self.v_population(), pop_w)
    }

    /// Weighted column means of the sample block of `V`.
    pub fn sample_means(&self, w: &[f64]) -> Vec<f64> {
        column_means(self.v_sample(), w)
    }
}

fn column_means(m: faer::MatRef<'_, f64>, w: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.nrows(), w.len());
    (0..m.ncols())
        .map(|j| m.col(j).iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn thin_svd(k: &KernelMatrix, floor: f64) -> Result<SpectralDecomposition> {
    if !(0.0..1.0).contains(&floor) {
        return Err(KpopError::InvalidConfig(format!("svd floor {floor} outside [0, 1)")));
    }
    if k.values().iter().any(|v| !v.is_finite()) {
        return Err(KpopError::NonFinite("kernel matrix"));
    }
    if k.values().iter().all(|&v| v == 0.0) {
        return Err(KpopError::ZeroMatrix);
    }
    let (n, n_s) = (k.n_rows(), k.n_bases());
    // Repeated covariate profiles repeat kernel rows and columns. With row
    // multiplicities r and column multiplicities c, K shares its nonzero
    // singular values with diag(√r)·K_distinct·diag(√c), and U expands from
    // the distinct columns by 1/√c.
    let rows = RowGroups::new(k);
    let cols = ColumnGroups::new(k, &rows);
    let grouped = rows.reps.len() * cols.reps.len() * 5 < n * n_s * 4;
    let core = grouped.then(|| {
        Mat::<f64>::from_fn(rows.reps.len(), cols.reps.len(), |g, h| {
            k.get(rows.reps[g], cols.reps[h]) * (rows.counts[g] as f64).sqrt() * (cols.counts[h] as f64).sqrt()
        })
    });
    let gram = match &core {
        Some(c) => linalg::gram(c.as_ref()),
        None => linalg::gram(k.as_mat()),
    };
    let (eigvals, eigvecs) = linalg::symmetric_eigen(gram.as_ref())
        .ok_or(KpopError::NonFinite("gram eigendecomposition"))?;

    let d = eigvals.len();
    let top = eigvals[d - 1].max(0.0).sqrt();
    // √eig cannot resolve anything below about √ε·A₁, so candidates are
    // screened loosely here and the singular values re-measured as ‖K·U_j‖.
    let candidates: Vec<usize> = (0..d)
        .rev()
        .filter(|&idx| eigvals[idx] > 0.0 && eigvals[idx].sqrt() > floor * top)
        .collect();
    let col_scale = |j: usize| -> (usize, f64) {
        if grouped {
            let h = cols.of_col[j];
            (h, 1.0 / (cols.counts[h] as f64).sqrt())
        } else {
            (j, 1.0)
        }
    };
    let mut u_all = Mat::<f64>::zeros(n_s, candidates.len());
    for (c, &idx) in candidates.iter().enumerate() {
        let col = eigvecs.col(idx);
        for j in 0..n_s {
            let (h, f) = col_scale(j);
            u_all[(j, c)] = col[h] * f;
        }
        // largest-magnitude entry positive; first index wins ties
        let uc = u_all.col(c);
        let pivot = (0..n_s).fold(0, |best, i| if uc[i].abs() > uc[best].abs() { i } else { best });
        if uc[pivot] < 0.0 {
            u_all.col_mut(c).iter_mut().for_each(|x| *x = -*x);
        }
    }

    let ku = if grouped {
        // K·U evaluated on distinct rows, then scattered
        let distinct = Mat::<f64>::from_fn(rows.reps.len(), cols.reps.len(), |g, h| {
            k.get(rows.reps[g], cols.reps[h]) * cols.counts[h] as f64
        });
        let u_distinct = Mat::<f64>::from_fn(cols.reps.len(), u_all.ncols(), |h, c| u_all[(cols.reps[h], c)]);
        let w = linalg::mul(distinct.as_ref(), u_distinct.as_ref());
        Mat::from_fn(n, u_all.ncols(), |i, c| w[(rows.of_row[i], c)])
    } else {
        linalg::mul(k.as_mat(), u_all.as_ref())
    };
    let norms: Vec<f64> = (0..ku.ncols()).map(|c| ku.col(c).norm_l2()).collect();
    let a1 = norms.iter().copied().fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..norms.len()).filter(|&c| norms[c] > floor * a1).collect();
    keep.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let singular_values: Vec<f64> = keep.iter().map(|&c| norms[c]).collect();
    let u = Mat::from_fn(n_s, keep.len(), |i, c| u_all[(i, keep[c])]);
    let v = if keep.iter().enumerate().all(|(c, &k)| c == k) {
        // usual case: already ordered, so scale in place and skip a copy of K's size
        let mut ku = ku;
        for (c, a) in singular_values.iter().enumerate() {
            ku.col_mut(c).iter_mut().for_each(|x| *x /= a);
        }
        ku.truncate(ku.nrows(), keep.len());
        ku
    } else {
        Mat::from_fn(ku.nrows(), keep.len(), |i, c| ku[(i, keep[c])] / norms[keep[c]])
    };
    Ok(SpectralDecomposition {
        v,
        singular_values,
        u,
        split_index: k.n_sample(),
    })
}

/// Bitwise-identical rows of a kernel matrix, in first-appearance order.
struct RowGroups {
    reps: Vec<usize>,
    counts: Vec<usize>,
    of_row: Vec<usize>,
}

impl RowGroups {
    fn new(k: &KernelMatrix) -> Self {
        let mut index: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut reps: Vec<usize> = Vec::new();
        let mut counts = Vec::new();
        let mut of_row = Vec::with_capacity(k.n_rows());
        for i in 0..k.n_rows() {
            let row = k.row(i);
            let mut h = DefaultHasher::new();
            for v in row {
                v.to_bits().hash(&mut h);
            }
            let bucket = index.entry(h.finish()).or_default();
            let found = bucket
                .iter()
                .copied()
                .find(|&g| k.row(reps[g]).iter().zip(row).all(|(a, b)| a.to_bits() == b.to_bits()));
            let g = match found {
                Some(g) => g,
                None => {
                    bucket.push(reps.len());
                    reps.push(i);
                    counts.push(0);
                    reps.len() - 1
                }
            };
            counts[g] += 1;
            of_row.push(g);
        }
        RowGroups { reps, counts, of_row }
    }
}

/// Bitwise-identical columns, found among columns whose base rows coincide.
struct ColumnGroups {
    reps: Vec<usize>,
    counts: Vec<usize>,
    of_col: Vec<usize>,
}

impl ColumnGroups {
    fn new(k: &KernelMatrix, rows: &RowGroups) -> Self {
        let same = |a: usize, b: usize| (0..k.n_rows()).all(|i| k.get(i, a).to_bits() == k.get(i, b).to_bits());
        let mut by_row_group: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut reps: Vec<usize> = Vec::new();
        let mut counts = Vec::new();
        let mut of_col = Vec::with_capacity(k.n_bases());
        for j in 0..k.n_bases() {
            let bucket = by_row_group.entry(rows.of_row[j]).or_default();
            let g = match bucket.iter().copied().find(|&g| same(reps[g], j)) {
                Some(g) => g,
                None => {
                    bucket.push(reps.len());
                    reps.push(j);
                    counts.push(0);
                    reps.len() - 1
                }
            };
            counts[g] += 1;
            of_col.push(g);
        }
        ColumnGroups { reps, counts, of_col }
    }
}

/// First `k` singular values divided by the largest. Values below the
/// truncation floor are absent, so fewer than `k` may come back.
pub fn scree(dec: &SpectralDecomposition, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(KpopError::InvalidConfig("scree needs k >= 1".into()));
    }
    let a1 = dec.singular_values[0];
    Ok(dec.singular_values.iter().take(k).map(|a| a / a1).collect())
}

/// CSV with columns `index,singular_value,normalized`, 1-based index.
pub fn write_scree_csv<W: std::io::Write>(dec: &SpectralDecomposition, k: usize, w: W) -> Result<()> {
    let norm = scree(dec, k)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["index", "singular_value", "normalized"])?;
    for (i, nv) in norm.iter().enumerate() {
        out.write_record([
            (i + 1).to_string(),
            format!("{}", dec.singular_values[i]),
            format!("{nv}"),
        ])?;
    }
    out.flush().map_err(|e| KpopError::io("<scree csv>", e))?;
    Ok(())
}
