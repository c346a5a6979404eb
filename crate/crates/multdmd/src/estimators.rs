//! Koopman-matrix estimators on the indicator dictionary.
//!
//! All discretized inner products reduce to the nonnegative transition-weight
//! matrix `omega`, with `omega[i][j]` the total quadrature weight of pairs
//! moving from cell `i` to cell `j`:
//! * `Psi_X^* W Psi_X = diag(gram)` with `gram = ` row sums of `omega`,
//! * `Psi_Y^* W Psi_Y = diag(col_mass)` with `col_mass = ` column sums,
//! * `Psi_X^* W Psi_Y = omega`.
//!
//! The multiplicative estimator solves, per row `i`, the decoupled problem
//! `min_j (gram[i] - 2 omega[i][j]) / gram[j]` and places a single unit entry
//! there; the result is the 0/1 matrix of an index map `sigma`, which
//! preserves the Hadamard product exactly. The EDMD baseline on the same
//! dictionary is the stochastic matrix `diag(gram)^{-1} omega`, and exact DMD
//! is an unconstrained least-squares fit on the raw states.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use ndarray_linalg::{JobSvd, SVDDC};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dictionary::Dictionary;
use crate::dynsys::SnapshotSet;
use crate::error::{Error, Result};

/// Sparse nonnegative transition weights with their diagonal marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionWeights {
    /// Row-major sparse storage, each row sorted by column index.
    rows: Vec<Vec<(usize, f64)>>,
    /// Row sums (the diagonal of `Psi_X^* W Psi_X`); strictly positive.
    gram: Vec<f64>,
    /// Column sums (the diagonal of `Psi_Y^* W Psi_Y`).
    col_mass: Vec<f64>,
}

impl TransitionWeights {
    /// Builds from explicit sparse rows; row sums must all be positive.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut sorted = rows;
        for row in &mut sorted {
            row.sort_unstable_by_key(|e| e.0);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Domain("duplicate column in transition row".into()));
            }
            if row.iter().any(|e| e.0 >= n || e.1 < 0.0 || !e.1.is_finite()) {
                return Err(Error::Domain(
                    "transition entries must be finite, nonnegative and in range".into(),
                ));
            }
        }
        let gram: Vec<f64> = sorted
            .iter()
            .map(|row| row.iter().map(|e| e.1).sum())
            .collect();
        if let Some(i) = gram.iter().position(|g| *g <= 0.0) {
            return Err(Error::SingularGram(i));
        }
        let mut col_mass = vec![0.0; n];
        for row in &sorted {
            for (j, w) in row {
                col_mass[*j] += w;
            }
        }
        Ok(TransitionWeights {
            rows: sorted,
            gram,
            col_mass,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    pub fn col_mass(&self) -> &[f64] {
        &self.col_mass
    }

    pub fn omega(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn total_mass(&self) -> f64 {
        crate::util::kahan_sum(self.gram.iter().copied())
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut dense = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for (j, w) in row {
                dense[[i, *j]] = *w;
            }
        }
        dense
    }

    /// Short hash of the sparse content, used as operator provenance.
    pub fn data_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.n() as u64).to_le_bytes());
        for (i, row) in self.rows.iter().enumerate() {
            for (j, w) in row {
                hasher.update((i as u64).to_le_bytes());
                hasher.update((*j as u64).to_le_bytes());
                hasher.update(w.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Result of accumulating a snapshot set against a dictionary. Cells that
/// received no x-mass are merged into their surviving neighbors (the
/// dictionary shrinks), so `gram` is strictly positive.
#[derive(Debug, Clone)]
pub struct Accumulation {
    pub weights: TransitionWeights,
    pub dictionary: Dictionary,
    /// Indices (in the original dictionary) of cells removed by the repair.
    pub removed_cells: Vec<usize>,
}

/// Accumulates `omega[i][j] += w_m` over pairs with `x` in cell `i` and `y`
/// in cell `j`. Assignment runs in parallel; the accumulation order is fixed,
/// so results are identical across thread counts.
pub fn accumulate(s: &SnapshotSet, d: &Dictionary) -> Result<Accumulation> {
    if s.dim() != d.dim() {
        return Err(Error::Domain(format!(
            "snapshot dimension {} does not match dictionary dimension {}",
            s.dim(),
            d.dim()
        )));
    }
    let mut dict = d.clone();
    // Original index of each live cell.
    let mut alive: Vec<usize> = (0..d.len()).collect();
    let mut removed_cells = Vec::new();
    loop {
        let xi = dict.assign_rows(s.x())?;
        let yi = dict.assign_rows(s.y())?;
        let n = dict.len();
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for m in 0..s.count() {
            *maps[xi[m]].entry(yi[m]).or_insert(0.0) += s.weights()[m];
        }
        let empty: BTreeSet<usize> = (0..n).filter(|&i| maps[i].is_empty()).collect();
        if empty.is_empty() {
            let rows: Vec<Vec<(usize, f64)>> =
                maps.into_iter().map(|m| m.into_iter().collect()).collect();
            let weights = TransitionWeights::from_rows(rows)?;
            return Ok(Accumulation {
                weights,
                dictionary: dict,
                removed_cells,
            });
        }
        for &i in &empty {
            log::warn!(
                "cell {} has no x-points; merging into its nearest neighbor",
                alive[i]
            );
            removed_cells.push(alive[i]);
        }
        alive = alive
            .iter()
            .enumerate()
            .filter(|(i, _)| !empty.contains(i))
            .map(|(_, orig)| *orig)
            .collect();
        dict = dict.remove_cells(&empty)?;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub estimator: &'static str,
    pub data_hash: String,
}

/// A finite-dimensional Koopman approximation.
#[derive(Debug, Clone, PartialEq)]
pub enum KoopmanApprox {
    /// 0/1 matrix with at most one unit entry per row: `K[i, sigma[i]] = 1`.
    /// Rows with `sigma[i] = None` are zero.
    MultDmd {
        sigma: Vec<Option<usize>>,
        provenance: Provenance,
    },
    /// Dense real matrix (EDMD on the indicator dictionary, or exact DMD on
    /// raw states).
    Dense {
        matrix: Array2<f64>,
        provenance: Provenance,
    },
}

impl KoopmanApprox {
    pub fn n(&self) -> usize {
        match self {
            KoopmanApprox::MultDmd { sigma, .. } => sigma.len(),
            KoopmanApprox::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn sigma(&self) -> Option<&[Option<usize>]> {
        match self {
            KoopmanApprox::MultDmd { sigma, .. } => Some(sigma),
            KoopmanApprox::Dense { .. } => None,
        }
    }

    pub fn dense(&self) -> Option<ArrayView2<'_, f64>> {
        match self {
            KoopmanApprox::Dense { matrix, .. } => Some(matrix.view()),
            KoopmanApprox::MultDmd { .. } => None,
        }
    }

    pub fn provenance(&self) -> &Provenance {
        match self {
            KoopmanApprox::MultDmd { provenance, .. } => provenance,
            KoopmanApprox::Dense { provenance, .. } => provenance,
        }
    }

    /// Applies the operator to a coefficient vector. For the multiplicative
    /// variant this is the exact composition `(K v)[i] = v[sigma[i]]`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n() {
            return Err(Error::Domain(format!(
                "vector length {} does not match operator size {}",
                v.len(),
                self.n()
            )));
        }
        match self {
            KoopmanApprox::MultDmd { sigma, .. } => Ok(sigma
                .iter()
                .map(|t| t.map(|j| v[j]).unwrap_or(0.0))
                .collect()),
            KoopmanApprox::Dense { matrix, .. } => Ok(matrix
                .rows()
                .into_iter()
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            KoopmanApprox::Dense { matrix, .. } => matrix.clone(),
            KoopmanApprox::MultDmd { sigma, .. } => {
                let n = sigma.len();
                let mut dense = Array2::zeros((n, n));
                for (i, t) in sigma.iter().enumerate() {
                    if let Some(j) = t {
                        dense[[i, *j]] = 1.0;
                    }
                }
                dense
            }
        }
    }

    /// Number of stored nonzeros: at most `N` for the multiplicative variant,
    /// `N^2` for dense matrices.
    pub fn nnz(&self) -> usize {
        match self {
            KoopmanApprox::MultDmd { sigma, .. } => sigma.iter().flatten().count(),
            KoopmanApprox::Dense { matrix, .. } => matrix.len(),
        }
    }
}

/// Solves the constrained least-squares problem over 0/1 matrices with at
/// most one unit entry per row.
///
/// Row `i` places its entry at `argmin_j (gram[i] - 2 omega[i][j]) / gram[j]`
/// (ties to the smallest column). With `allow_empty_rows`, a row whose
/// minimum is `>= 0` is left empty instead, which attains the optimum of the
/// relaxed problem where all-zero rows are admitted.
pub fn fit_multdmd(t: &TransitionWeights, allow_empty_rows: bool) -> Result<KoopmanApprox> {
    if let Some(i) = t.gram().iter().position(|g| *g <= 0.0) {
        return Err(Error::SingularGram(i));
    }
    let n = t.n();
    // Among columns with omega[i][j] = 0 the cost gram[i]/gram[j] is minimized
    // by the largest gram; precompute its smallest index.
    let j_max_gram = t
        .gram()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(j, _)| j)
        .expect("non-empty gram");
    let sigma: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gi = t.gram()[i];
            let mut best_cost = f64::INFINITY;
            let mut best_j = usize::MAX;
            let mut consider = |j: usize, cost: f64| {
                if cost < best_cost || (cost == best_cost && j < best_j) {
                    best_cost = cost;
                    best_j = j;
                }
            };
            for (j, _) in &t.rows()[i] {
                consider(*j, (gi - 2.0 * t.omega(i, *j)) / t.gram()[*j]);
            }
            consider(j_max_gram, (gi - 2.0 * t.omega(i, j_max_gram)) / t.gram()[j_max_gram]);
            if allow_empty_rows && best_cost >= 0.0 {
                None
            } else {
                Some(best_j)
            }
        })
        .collect();
    Ok(KoopmanApprox::MultDmd {
        sigma,
        provenance: Provenance {
            estimator: "multdmd",
            data_hash: t.data_hash(),
        },
    })
}

/// Exact discretized least-squares objective
/// `|| W^{1/2} (Psi_Y - Psi_X K) G^{-1/2} ||_F^2`, evaluated through the
/// transition weights.
pub fn objective(t: &TransitionWeights, k: &KoopmanApprox) -> Result<f64> {
    if k.n() != t.n() {
        return Err(Error::Domain(format!(
            "operator size {} does not match weight size {}",
            k.n(),
            t.n()
        )));
    }
    match k {
        KoopmanApprox::MultDmd { sigma, .. } => {
            let mut total = 0.0;
            for (i, row) in t.rows().iter().enumerate() {
                for (j, w) in row {
                    total += w / t.gram()[*j];
                }
                if let Some(j0) = sigma[i] {
                    total += (t.gram()[i] - 2.0 * t.omega(i, j0)) / t.gram()[j0];
                }
            }
            Ok(total)
        }
        KoopmanApprox::Dense { matrix, .. } => {
            let n = t.n();
            let mut total = 0.0;
            for j in 0..n {
                total += t.col_mass()[j] / t.gram()[j];
            }
            for (i, row) in t.rows().iter().enumerate() {
                for (j, w) in row {
                    total -= 2.0 * matrix[[i, *j]] * w / t.gram()[*j];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let k_ij = matrix[[i, j]];
                    if k_ij != 0.0 {
                        total += t.gram()[i] * k_ij * k_ij / t.gram()[j];
                    }
                }
            }
            Ok(total)
        }
    }
}

/// EDMD specialized to the indicator dictionary: the Gram matrix is diagonal,
/// so the pseudoinverse solution is the stochastic matrix
/// `diag(gram)^{-1} omega`.
pub fn fit_edmd_indicator(t: &TransitionWeights) -> Result<KoopmanApprox> {
    if let Some(i) = t.gram().iter().position(|g| *g <= 0.0) {
        return Err(Error::SingularGram(i));
    }
    let n = t.n();
    let mut matrix = Array2::zeros((n, n));
    for (i, row) in t.rows().iter().enumerate() {
        for (j, w) in row {
            matrix[[i, *j]] = w / t.gram()[i];
        }
    }
    Ok(KoopmanApprox::Dense {
        matrix,
        provenance: Provenance {
            estimator: "edmd_indicator",
            data_hash: t.data_hash(),
        },
    })
}

fn snapshot_hash(s: &SnapshotSet) -> String {
    let mut hasher = Sha256::new();
    hasher.update((s.count() as u64).to_le_bytes());
    hasher.update((s.dim() as u64).to_le_bytes());
    for v in s.x().iter().chain(s.y().iter()) {
        hasher.update(v.to_le_bytes());
    }
    for w in s.weights() {
        hasher.update(w.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Unconstrained least-squares fit `Y ~ X A` on the raw (or POD-compressed)
/// states, via a truncated SVD pseudoinverse with tolerance
/// `1e-12 * sigma_max`. Rank deficiency never hard-fails.
pub fn fit_exact_dmd(s: &SnapshotSet) -> Result<KoopmanApprox> {
    let (m, d) = (s.count(), s.dim());
    if m < d {
        return Err(Error::Domain(format!(
            "exact DMD needs at least d = {d} pairs, got {m}"
        )));
    }
    let x = s.x().to_owned();
    let (u, sv, vt) = x
        .svddc(JobSvd::Some)
        .map_err(|e| Error::Numerical(format!("SVD failed: {e}")))?;
    let u = u.expect("requested U");
    let vt = vt.expect("requested V^T");
    let tol = 1e-12 * sv.iter().cloned().fold(0.0, f64::max);
    // A = V diag(1/sigma) U^T Y, dropping singular values below tol.
    let uty = u.t().dot(&s.y()); // min(m,d) x d
    let mut scaled = uty;
    for (k, row) in scaled.rows_mut().into_iter().enumerate() {
        let sk = sv[k];
        let factor = if sk > tol { 1.0 / sk } else { 0.0 };
        for v in row {
            *v *= factor;
        }
    }
    let matrix = vt.t().dot(&scaled);
    Ok(KoopmanApprox::Dense {
        matrix,
        provenance: Provenance {
            estimator: "exact_dmd",
            data_hash: snapshot_hash(s),
        },
    })
}
