//! Spectral analysis of Koopman approximations.
//!
//! The multiplicative operator acts as `(K f)[i] = f[sigma[i]]`, a composition
//! operator of the index map. Its nonzero spectrum is carried entirely by the
//! cycles of the functional graph `i -> sigma[i]`: a cycle of length `L`
//! contributes the `L`-th roots of unity, with eigenvectors set on the cycle
//! by the root-of-unity phases and propagated backward through the attached
//! trees. Everything off the cycles feeds the zero eigenvalue, reported by
//! multiplicity only.

use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::{Eig, Eigh, Solve, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::dynsys::SnapshotSet;
use crate::error::{Error, Result};
use crate::estimators::{KoopmanApprox, TransitionWeights};

/// Exact representation of `exp(2*pi*i*k/order)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootOfUnity {
    pub k: u64,
    pub order: u64,
}

impl RootOfUnity {
    pub fn value(&self) -> Complex64 {
        Complex64::from_polar(1.0, std::f64::consts::TAU * self.k as f64 / self.order as f64)
    }

    /// `self^n`, exact in the exponent arithmetic.
    pub fn pow(&self, n: u64) -> RootOfUnity {
        RootOfUnity {
            k: (self.k % self.order).wrapping_mul(n % self.order) % self.order,
            order: self.order,
        }
    }

    /// Phase as a signed fraction of a turn in `(-1/2, 1/2]`, compared
    /// exactly through cross-multiplication.
    fn signed_fraction_cmp(&self, other: &RootOfUnity) -> std::cmp::Ordering {
        let signed = |r: &RootOfUnity| -> (i128, i128) {
            let k = (r.k % r.order) as i128;
            let order = r.order as i128;
            if 2 * k > order {
                (k - order, order)
            } else {
                (k, order)
            }
        };
        let (a, p) = signed(self);
        let (b, q) = signed(other);
        (a * q).cmp(&(b * p))
    }
}

/// One cycle of the functional graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleInfo {
    pub length: usize,
    /// Members in orbit order starting from the smallest index.
    pub members: Vec<usize>,
    /// Number of cells whose forward orbit reaches this cycle (members
    /// included).
    pub basin_size: usize,
}

/// Eigenvalues, eigenvector coefficients and diagnostics.
#[derive(Debug, Clone)]
pub struct SpectralResult {
    /// Nonzero (retained) eigenvalues, sorted by descending modulus then
    /// ascending argument.
    pub eigenvalues: Vec<Complex64>,
    /// Exact root-of-unity phases, present for the multiplicative variant.
    pub phases: Option<Vec<RootOfUnity>>,
    /// One unit-Euclidean-norm column per retained eigenvalue.
    pub eigvecs: Array2<Complex64>,
    /// Residuals per eigenpair, filled in by [`SpectralResult::with_residuals`].
    pub residuals: Option<Vec<f64>>,
    /// Count of cells with a nonzero coefficient, per eigenvector.
    pub support_sizes: Vec<usize>,
    /// Cycle metadata (multiplicative variant only).
    pub cycles: Vec<CycleInfo>,
    /// Algebraic multiplicity of the zero eigenvalue (no Jordan vectors are
    /// computed).
    pub zero_multiplicity: usize,
}

impl SpectralResult {
    /// Keeps only eigenpairs whose eigenvector support reaches `min_support`
    /// cells; zero eigenvalues are dropped from the retained set by
    /// construction.
    pub fn retained(&self, min_support: usize) -> SpectralResult {
        let keep: Vec<usize> = (0..self.eigenvalues.len())
            .filter(|&i| self.support_sizes[i] >= min_support && self.eigenvalues[i].norm_sqr() > 0.0)
            .collect();
        let n = self.eigvecs.nrows();
        let mut eigvecs = Array2::zeros((n, keep.len()));
        for (col, &i) in keep.iter().enumerate() {
            eigvecs.column_mut(col).assign(&self.eigvecs.column(i));
        }
        SpectralResult {
            eigenvalues: keep.iter().map(|&i| self.eigenvalues[i]).collect(),
            phases: self
                .phases
                .as_ref()
                .map(|p| keep.iter().map(|&i| p[i]).collect()),
            eigvecs,
            residuals: self
                .residuals
                .as_ref()
                .map(|r| keep.iter().map(|&i| r[i]).collect()),
            support_sizes: keep.iter().map(|&i| self.support_sizes[i]).collect(),
            cycles: self.cycles.clone(),
            zero_multiplicity: self.zero_multiplicity,
        }
    }

    /// Computes the residual of every eigenpair against the transition
    /// weights.
    pub fn with_residuals(
        mut self,
        t: &TransitionWeights,
        denominator: ResidualDenominator,
    ) -> Result<SpectralResult> {
        let res: Result<Vec<f64>> = self
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(i, lambda)| residual(*lambda, self.eigvecs.column(i), t, denominator))
            .collect();
        self.residuals = Some(res?);
        Ok(self)
    }
}

/// Sorts eigenpair indices by descending modulus, then ascending argument.
/// Multiplicative spectra compare their phases exactly.
fn sort_order(
    eigenvalues: &[Complex64],
    phases: Option<&[RootOfUnity]>,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        let by_modulus = eigenvalues[b]
            .norm_sqr()
            .total_cmp(&eigenvalues[a].norm_sqr());
        by_modulus.then_with(|| match phases {
            Some(p) => p[a].signed_fraction_cmp(&p[b]),
            None => eigenvalues[a].arg().total_cmp(&eigenvalues[b].arg()),
        })
    });
    order
}

/// Spectrum of the multiplicative variant through its functional graph.
/// Runs in `O(N)` for the graph decomposition plus the size of the emitted
/// eigenvector columns.
pub fn cycle_spectrum(k: &KoopmanApprox) -> Result<SpectralResult> {
    let Some(sigma) = k.sigma() else {
        return Err(Error::Domain(
            "cycle_spectrum requires the multiplicative variant".into(),
        ));
    };
    let n = sigma.len();

    // Locate cycles: walk unvisited nodes, marking the current path.
    const UNSEEN: u8 = 0;
    const ON_PATH: u8 = 1;
    const DONE: u8 = 2;
    let mut state = vec![UNSEEN; n];
    let mut path_pos = vec![usize::MAX; n];
    let mut cycles: Vec<Vec<usize>> = Vec::new();
    let mut path: Vec<usize> = Vec::new();
    for start in 0..n {
        if state[start] != UNSEEN {
            continue;
        }
        path.clear();
        let mut cur = start;
        loop {
            if state[cur] == ON_PATH {
                let cycle = path[path_pos[cur]..].to_vec();
                cycles.push(cycle);
                break;
            }
            if state[cur] == DONE {
                break;
            }
            state[cur] = ON_PATH;
            path_pos[cur] = path.len();
            path.push(cur);
            match sigma[cur] {
                Some(next) => cur = next,
                None => break,
            }
        }
        for &v in &path {
            state[v] = DONE;
            path_pos[v] = usize::MAX;
        }
    }

    // Canonical orbit order starting from the smallest member.
    for cycle in &mut cycles {
        let min_pos = cycle
            .iter()
            .enumerate()
            .min_by_key(|(_, v)| **v)
            .map(|(i, _)| i)
            .unwrap();
        cycle.rotate_left(min_pos);
    }
    cycles.sort_by_key(|c| c[0]);

    // Reverse adjacency for basin propagation (predecessor lists are built in
    // increasing node order, keeping traversal deterministic).
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, target) in sigma.iter().enumerate() {
        if let Some(j) = target {
            preds[*j].push(i);
        }
    }
    let mut on_cycle = vec![false; n];
    for cycle in &cycles {
        for &v in cycle {
            on_cycle[v] = true;
        }
    }

    // Basin of each cycle: (node, phase offset t such that the node reaches
    // cycle position t after `depth` steps; the eigenvector value only needs
    // t_anchor - depth modulo L).
    struct Basin {
        /// (node, exponent) with eigenvector value `lambda^exponent` where
        /// exponent is taken modulo the cycle length.
        nodes: Vec<(usize, u64)>,
    }
    let mut basins: Vec<Basin> = Vec::with_capacity(cycles.len());
    for cycle in &cycles {
        let len = cycle.len() as u64;
        let mut nodes: Vec<(usize, u64)> = Vec::with_capacity(cycle.len());
        let mut queue: std::collections::VecDeque<(usize, u64)> = std::collections::VecDeque::new();
        for (t, &v) in cycle.iter().enumerate() {
            nodes.push((v, t as u64 % len));
            queue.push_back((v, t as u64 % len));
        }
        while let Some((v, exp)) = queue.pop_front() {
            for &p in &preds[v] {
                if on_cycle[p] {
                    continue;
                }
                // Predecessor value is the successor value divided by lambda:
                // exponent decreases by one, modulo L.
                let pe = (exp + len - 1) % len;
                nodes.push((p, pe));
                queue.push_back((p, pe));
            }
        }
        basins.push(Basin { nodes });
    }

    let total_cycle_len: usize = cycles.iter().map(|c| c.len()).sum();
    let zero_multiplicity = n - total_cycle_len;

    // Emit eigenpairs.
    let mut eigenvalues = Vec::with_capacity(total_cycle_len);
    let mut phases = Vec::with_capacity(total_cycle_len);
    let mut support_sizes = Vec::with_capacity(total_cycle_len);
    let mut columns: Vec<(usize, usize, u64, u64)> = Vec::new(); // (cycle idx, col, k, L)
    for (ci, cycle) in cycles.iter().enumerate() {
        let len = cycle.len() as u64;
        for k_idx in 0..len {
            let root = RootOfUnity { k: k_idx, order: len };
            columns.push((ci, eigenvalues.len(), k_idx, len));
            eigenvalues.push(root.value());
            phases.push(root);
            support_sizes.push(basins[ci].nodes.len());
        }
    }
    let mut eigvecs = Array2::<Complex64>::zeros((n, eigenvalues.len()));
    for (ci, col, k_idx, len) in columns {
        let norm = (basins[ci].nodes.len() as f64).sqrt();
        for &(node, exp) in &basins[ci].nodes {
            // value = lambda^exp / norm, all entries on the unit circle.
            let angle = std::f64::consts::TAU * ((k_idx * exp) % len) as f64 / len as f64;
            eigvecs[[node, col]] = Complex64::from_polar(1.0 / norm, angle);
        }
    }

    let order = sort_order(&eigenvalues, Some(&phases));
    let mut sorted_vecs = Array2::zeros((n, eigenvalues.len()));
    for (col, &i) in order.iter().enumerate() {
        sorted_vecs.column_mut(col).assign(&eigvecs.column(i));
    }
    let cycles_info: Vec<CycleInfo> = cycles
        .iter()
        .enumerate()
        .map(|(ci, members)| CycleInfo {
            length: members.len(),
            members: members.clone(),
            basin_size: basins[ci].nodes.len(),
        })
        .collect();
    Ok(SpectralResult {
        eigenvalues: order.iter().map(|&i| eigenvalues[i]).collect(),
        phases: Some(order.iter().map(|&i| phases[i]).collect()),
        eigvecs: sorted_vecs,
        residuals: None,
        support_sizes: order.iter().map(|&i| support_sizes[i]).collect(),
        cycles: cycles_info,
        zero_multiplicity,
    })
}

/// Relative threshold below which a dense eigenvector entry counts as zero
/// when measuring support.
const SUPPORT_EPS: f64 = 1e-12;

/// Full eigendecomposition of a dense approximation, eigenvalues sorted by
/// descending modulus and columns normalized to unit Euclidean norm.
pub fn dense_eig(k: &KoopmanApprox) -> Result<SpectralResult> {
    let Some(matrix) = k.dense() else {
        return Err(Error::Domain("dense_eig requires the dense variant".into()));
    };
    let owned = matrix.to_owned();
    let (vals, vecs) = owned
        .eig()
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e}")))?;
    let n = owned.nrows();
    let eigenvalues: Vec<Complex64> = vals.iter().copied().collect();
    let order = sort_order(&eigenvalues, None);
    let mut sorted_vals = Vec::with_capacity(n);
    let mut sorted_vecs = Array2::<Complex64>::zeros((n, n));
    let mut support_sizes = Vec::with_capacity(n);
    for (col, &i) in order.iter().enumerate() {
        sorted_vals.push(eigenvalues[i]);
        let column = vecs.column(i);
        let norm = column.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let max_abs = column.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut support = 0;
        for (row, v) in column.iter().enumerate() {
            let value = v / norm;
            sorted_vecs[[row, col]] = value;
            if v.norm() > SUPPORT_EPS * max_abs {
                support += 1;
            }
        }
        support_sizes.push(support);
    }
    Ok(SpectralResult {
        eigenvalues: sorted_vals,
        phases: None,
        eigvecs: sorted_vecs,
        residuals: None,
        support_sizes,
        cycles: Vec::new(),
        zero_multiplicity: 0,
    })
}

/// Denominator convention for [`residual`]. `Paper` uses the printed
/// `g* (Psi_X^* W Psi_Y) g` (its modulus, since the form is not Hermitian);
/// `Gram` substitutes the positive-definite `g* G g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualDenominator {
    Paper,
    Gram,
}

/// Relative residual of a candidate eigenpair,
/// `sqrt(g*[B - lambda A^* - conj(lambda) A + |lambda|^2 G]g / denom)`
/// with `G = diag(gram)`, `B = diag(col_mass)`, `A = omega`. Runs in
/// `O(nnz(omega))`.
pub fn residual(
    lambda: Complex64,
    g: ArrayView1<'_, Complex64>,
    t: &TransitionWeights,
    denominator: ResidualDenominator,
) -> Result<f64> {
    let n = t.n();
    if g.len() != n {
        return Err(Error::Domain(format!(
            "coefficient vector has length {}, expected {n}",
            g.len()
        )));
    }
    let gg: f64 = (0..n).map(|i| t.gram()[i] * g[i].norm_sqr()).sum();
    if gg == 0.0 {
        return Err(Error::UndefinedResidual("coefficient vector vanishes".into()));
    }
    // The quadratic form expands to b - 2 Re(conj(lambda) a) + |lambda|^2 gg,
    // but that route cancels catastrophically near exact eigenpairs; the
    // equivalent sum of squares stays nonnegative term by term.
    let mut num = 0.0;
    let mut a = Complex64::new(0.0, 0.0);
    for (i, row) in t.rows().iter().enumerate() {
        let gi = lambda * g[i];
        let mut inner = Complex64::new(0.0, 0.0);
        for (j, w) in row {
            num += *w * (g[*j] - gi).norm_sqr();
            inner += *w * g[*j];
        }
        a += g[i].conj() * inner;
    }
    // Kept for contract completeness; the sum-of-squares route cannot go
    // negative.
    num = num.max(0.0);
    let den = match denominator {
        ResidualDenominator::Paper => {
            let d = a.norm();
            if d == 0.0 {
                return Err(Error::UndefinedResidual(
                    "printed denominator g* omega g vanishes".into(),
                ));
            }
            d
        }
        ResidualDenominator::Gram => gg,
    };
    Ok((num / den).sqrt())
}

/// Weighted G-norm of a coefficient vector: `sqrt(sum_i gram[i] |g_i|^2)`.
pub fn g_norm(g: ArrayView1<'_, Complex64>, gram: &[f64]) -> f64 {
    g.iter()
        .zip(gram)
        .map(|(v, w)| w * v.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Cell-mean coefficients of one state coordinate: `g[i]` is the weighted
/// mean of `x[coord]` over the x-points landing in cell `i` (zero for cells
/// no point visits).
pub fn cell_mean_observable(
    s: &SnapshotSet,
    d: &Dictionary,
    coord: usize,
) -> Result<Vec<Complex64>> {
    if coord >= s.dim() {
        return Err(Error::Domain(format!(
            "coordinate {coord} out of range for dimension {}",
            s.dim()
        )));
    }
    let cells = d.assign_rows(s.x())?;
    let mut mass = vec![0.0; d.len()];
    let mut sum = vec![0.0; d.len()];
    for m in 0..s.count() {
        let w = s.weights()[m];
        mass[cells[m]] += w;
        sum[cells[m]] += w * s.x()[[m, coord]];
    }
    Ok((0..d.len())
        .map(|i| {
            if mass[i] > 0.0 {
                Complex64::new(sum[i] / mass[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect())
}

/// Ergodic estimates of the correlations `<K^n g, g>` for `n = 0..=n_max`
/// along a single trajectory.
///
/// The observable is evaluated through its cell index. For each lag the
/// estimator averages the lag-`n` observable per starting cell and recombines
/// the cell means with the full-data cell masses, so data that realize an
/// exact cell permutation reproduce the operator correlations exactly. `g` is
/// normalized to unit G-norm first; entry 0 is then 1 up to sampling effects.
pub fn autocorrelation(
    s: &SnapshotSet,
    d: &Dictionary,
    g: ArrayView1<'_, Complex64>,
    n_max: usize,
) -> Result<Vec<Complex64>> {
    if g.len() != d.len() {
        return Err(Error::Domain(format!(
            "coefficient vector has length {}, dictionary has {} cells",
            g.len(),
            d.len()
        )));
    }
    if !s.is_single_trajectory() {
        return Err(Error::UnsupportedSampling(
            "autocorrelation requires single-trajectory data".into(),
        ));
    }
    let m = s.count();
    if n_max > m {
        return Err(Error::Domain(format!(
            "n_max = {n_max} exceeds the trajectory length {m}"
        )));
    }
    // States 0..=m: the x rows plus the final y row.
    let mut cells = d.assign_rows(s.x())?;
    cells.push(d.assign(s.y().row(m - 1))?);
    // Full-data cell masses over the x-states.
    let mut mass = vec![0.0; d.len()];
    for t in 0..m {
        mass[cells[t]] += s.weights()[t];
    }
    let norm = g_norm(g, &mass);
    if norm == 0.0 {
        return Err(Error::Domain("observable vanishes on the visited cells".into()));
    }
    let gn: Vec<Complex64> = g.iter().map(|v| v / norm).collect();

    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        // Per-cell weighted mean of the lag-n observable.
        let mut cell_sum = vec![Complex64::new(0.0, 0.0); d.len()];
        let mut cell_mass = vec![0.0; d.len()];
        let t_end = m.min(m + 1 - n); // x-states with a lag-n partner
        for t in 0..t_end {
            let w = s.weights()[t];
            cell_sum[cells[t]] += w * gn[cells[t + n]];
            cell_mass[cells[t]] += w;
        }
        let mut corr = Complex64::new(0.0, 0.0);
        for i in 0..d.len() {
            if cell_mass[i] > 0.0 {
                corr += mass[i] * gn[i].conj() * (cell_sum[i] / cell_mass[i]);
            }
        }
        out.push(corr);
    }
    Ok(out)
}

/// Moments predicted by a spectral approximation.
#[derive(Debug, Clone)]
pub struct MomentOutput {
    pub moments: Vec<Complex64>,
    /// Condition number of the eigenvector basis in the G inner product.
    pub condition_number: f64,
    /// Set when the basis conditioning exceeds `1e8`.
    pub conditioning_warning: bool,
}

/// Correlations `<K^n g, g>_G` predicted by the retained eigenpairs:
/// `g` is projected onto the eigenvector basis by G-weighted least squares
/// and advanced through exact eigenvalue powers.
pub fn model_moments(
    r: &SpectralResult,
    g: ArrayView1<'_, Complex64>,
    t: &TransitionWeights,
    n_max: usize,
) -> Result<MomentOutput> {
    let n = t.n();
    let k = r.eigenvalues.len();
    if r.eigvecs.nrows() != n || g.len() != n {
        return Err(Error::Domain(
            "spectral result, weights and observable must share one cell count".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Domain("no retained eigenpairs to project onto".into()));
    }
    let norm = g_norm(g, t.gram());
    if norm == 0.0 {
        return Err(Error::Domain("observable has zero G-norm".into()));
    }
    let gn: Vec<Complex64> = g.iter().map(|v| v / norm).collect();

    // Normal equations of the G-weighted projection: (V* G V) c = V* G g.
    let mut vgv = Array2::<Complex64>::zeros((k, k));
    let mut rhs = Array1::<Complex64>::zeros(k);
    for a in 0..k {
        for b in 0..k {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                acc += r.eigvecs[[i, a]].conj() * t.gram()[i] * r.eigvecs[[i, b]];
            }
            vgv[[a, b]] = acc;
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            acc += r.eigvecs[[i, a]].conj() * t.gram()[i] * gn[i];
        }
        rhs[a] = acc;
    }
    let eigs = vgv
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numerical(format!("conditioning eigensolve failed: {e}")))?
        .0;
    let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition_number = if min > 0.0 { (max / min).sqrt() } else { f64::INFINITY };
    let coeffs = vgv
        .solve(&rhs)
        .map_err(|e| Error::Numerical(format!("projection solve failed: {e}")))?;

    // m_n = sum_k lambda_k^n c_k <v_k, g>_G, with <v_k, g>_G = conj(rhs_k).
    let mut moments = Vec::with_capacity(n_max + 1);
    for n_pow in 0..=n_max {
        let mut m_n = Complex64::new(0.0, 0.0);
        for j in 0..k {
            let lambda_n = match &r.phases {
                Some(p) => p[j].pow(n_pow as u64).value(),
                None => r.eigenvalues[j].powi(n_pow as i32),
            };
            m_n += lambda_n * coeffs[j] * rhs[j].conj();
        }
        moments.push(m_n);
    }
    Ok(MomentOutput {
        moments,
        condition_number,
        conditioning_warning: condition_number > 1e8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Dictionary;
    use crate::dynsys::{simulate_rotation, InitScheme, SnapshotSet, SystemConfig, SystemKind};
    use crate::estimators::{accumulate, fit_multdmd, Provenance};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn multdmd(sigma: Vec<Option<usize>>) -> KoopmanApprox {
        KoopmanApprox::MultDmd {
            sigma,
            provenance: Provenance { estimator: "test", data_hash: String::new() },
        }
    }

    /// Multiset distance between the eigenvalues of the cycle decomposition
    /// (zeros appended) and a dense eigensolve: greedy nearest pairing, which
    /// is stable where lexicographic sorting flips conjugate partners.
    fn eigenvalue_multiset_distance(sigma: &[Option<usize>]) -> f64 {
        let k = multdmd(sigma.to_vec());
        let r = cycle_spectrum(&k).unwrap();
        let mut ours: Vec<Complex64> = r.eigenvalues.clone();
        ours.extend(std::iter::repeat_n(
            Complex64::new(0.0, 0.0),
            r.zero_multiplicity,
        ));
        let dense = KoopmanApprox::Dense {
            matrix: k.to_dense(),
            provenance: Provenance { estimator: "test", data_hash: String::new() },
        };
        let d = dense_eig(&dense).unwrap();
        assert_eq!(ours.len(), d.eigenvalues.len());
        let mut used = vec![false; d.eigenvalues.len()];
        let mut worst = 0.0_f64;
        for a in &ours {
            let (idx, dist) = d
                .eigenvalues
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .map(|(i, b)| (i, (a - b).norm()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            used[idx] = true;
            worst = worst.max(dist);
        }
        worst
    }

    #[test]
    fn identity_map_spectrum() {
        let n = 6;
        let k = multdmd((0..n).map(Some).collect());
        let r = cycle_spectrum(&k).unwrap();
        assert_eq!(r.eigenvalues.len(), n);
        assert!(r.eigenvalues.iter().all(|l| (l - 1.0).norm() < 1e-15));
        assert_eq!(r.zero_multiplicity, 0);
        // Standard basis vectors up to order.
        for col in 0..n {
            let support: Vec<usize> = (0..n)
                .filter(|&i| r.eigvecs[[i, col]].norm() > 0.0)
                .collect();
            assert_eq!(support.len(), 1);
            assert_abs_diff_eq!(r.eigvecs[[support[0], col]].re, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_cycle_gives_roots_of_unity() {
        let n = 12;
        let sigma: Vec<Option<usize>> = (0..n).map(|i| Some((i + 1) % n)).collect();
        let dist = eigenvalue_multiset_distance(&sigma);
        assert!(dist <= 1e-10, "multiset distance {dist}");
    }

    #[test]
    fn random_functional_graphs_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..25 {
            let n = rng.random_range(2..=60);
            let sigma: Vec<Option<usize>> = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.15 {
                        None
                    } else {
                        Some(rng.random_range(0..n))
                    }
                })
                .collect();
            let dist = eigenvalue_multiset_distance(&sigma);
            assert!(dist <= 1e-8, "trial {trial}: distance {dist}");
        }
    }

    #[test]
    fn eigenvector_relation_holds_on_trees() {
        // 0 -> 1 -> 2 -> 2 (fixed point with a chain hanging off).
        let sigma = vec![Some(1), Some(2), Some(2)];
        let k = multdmd(sigma.clone());
        let r = cycle_spectrum(&k).unwrap();
        assert_eq!(r.eigenvalues.len(), 1);
        assert_eq!(r.zero_multiplicity, 2);
        let v = r.eigvecs.column(0);
        let lambda = r.eigenvalues[0];
        for (i, target) in sigma.iter().enumerate() {
            if let Some(j) = target {
                assert!((v[*j] - lambda * v[i]).norm() < 1e-14);
            }
        }
        assert_eq!(r.support_sizes[0], 3);
        assert_eq!(r.cycles.len(), 1);
        assert_eq!(r.cycles[0].length, 1);
        assert_eq!(r.cycles[0].basin_size, 3);
    }

    #[test]
    fn unit_modulus_is_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let n = 10_000;
        let sigma: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..n))).collect();
        let r = cycle_spectrum(&multdmd(sigma)).unwrap();
        assert!(!r.eigenvalues.is_empty());
        let phases = r.phases.as_ref().unwrap();
        assert_eq!(phases.len(), r.eigenvalues.len());
        for p in phases {
            // |lambda| = 1 exactly in the structural representation.
            assert!(p.order > 0 && p.k < p.order);
        }
        for l in &r.eigenvalues {
            assert!((l.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn conjugate_symmetry_of_cycle_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 200;
        let sigma: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..n))).collect();
        let r = cycle_spectrum(&multdmd(sigma)).unwrap();
        for l in &r.eigenvalues {
            let conj = l.conj();
            assert!(
                r.eigenvalues.iter().any(|m| (m - conj).norm() < 1e-12),
                "conjugate of {l} missing"
            );
        }
    }

    #[test]
    fn dense_eig_identity_and_hand_checked() {
        let k = KoopmanApprox::Dense {
            matrix: Array2::eye(4),
            provenance: Provenance { estimator: "test", data_hash: String::new() },
        };
        let r = dense_eig(&k).unwrap();
        assert!(r.eigenvalues.iter().all(|l| (l - 1.0).norm() < 1e-12));

        // Characteristic polynomial of [[0.75, 0.25], [0, 1]]: (0.75-l)(1-l).
        let k = KoopmanApprox::Dense {
            matrix: array![[0.75, 0.25], [0.0, 1.0]],
            provenance: Provenance { estimator: "test", data_hash: String::new() },
        };
        let r = dense_eig(&k).unwrap();
        assert_abs_diff_eq!(r.eigenvalues[0].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.eigenvalues[1].re, 0.75, epsilon = 1e-12);
        for col in 0..2 {
            let norm: f64 = r.eigvecs.column(col).iter().map(|v| v.norm_sqr()).sum();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
    }

    fn rotation_system(n_points: usize, theta: f64) -> (SnapshotSet, Dictionary) {
        let cfg = SystemConfig {
            kind: SystemKind::Rotation2d { theta },
            dt_sample: 1.0,
            t_final: 1.0,
            n_trajectories: n_points,
            init: InitScheme::UniformGrid {
                lo: vec![0.01],
                hi: vec![std::f64::consts::TAU + 0.01],
            },
            burn_in: 0,
        };
        let s = simulate_rotation(&cfg).unwrap();
        let d = Dictionary::circle_arcs(8).unwrap();
        (s, d)
    }

    #[test]
    fn residual_vanishes_on_exact_permutation_eigenpairs() {
        let (s, d) = rotation_system(64, std::f64::consts::TAU / 8.0);
        let acc = accumulate(&s, &d).unwrap();
        let k = fit_multdmd(&acc.weights, false).unwrap();
        let r = cycle_spectrum(&k).unwrap();
        for (idx, lambda) in r.eigenvalues.iter().enumerate() {
            for denom in [ResidualDenominator::Gram, ResidualDenominator::Paper] {
                let res = residual(*lambda, r.eigvecs.column(idx), &acc.weights, denom).unwrap();
                assert!(res <= 1e-10, "residual {res} for eigenvalue {lambda}");
            }
        }
    }

    /// Dense assembly oracle for the residual: explicit Psi/W matrices.
    fn residual_dense_oracle(
        lambda: Complex64,
        g: ArrayView1<'_, Complex64>,
        pairs: &[(usize, usize, f64)],
        n: usize,
        denominator: ResidualDenominator,
    ) -> f64 {
        let m = pairs.len();
        let mut psi_x = Array2::<Complex64>::zeros((m, n));
        let mut psi_y = Array2::<Complex64>::zeros((m, n));
        let mut w = Array2::<Complex64>::zeros((m, m));
        for (row, (i, j, wt)) in pairs.iter().enumerate() {
            psi_x[[row, *i]] = Complex64::new(1.0, 0.0);
            psi_y[[row, *j]] = Complex64::new(1.0, 0.0);
            w[[row, row]] = Complex64::new(*wt, 0.0);
        }
        let herm = |m: &Array2<Complex64>| m.t().mapv(|v| v.conj());
        let a = herm(&psi_x).dot(&w).dot(&psi_y);
        let b = herm(&psi_y).dot(&w).dot(&psi_y);
        let gmat = herm(&psi_x).dot(&w).dot(&psi_x);
        let quad = |m: &Array2<Complex64>| -> Complex64 {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    acc += g[i].conj() * m[[i, j]] * g[j];
                }
            }
            acc
        };
        let num_mat = &b - &(a.t().mapv(|v| v.conj()).mapv(|v| v * lambda))
            - &a.mapv(|v| v * lambda.conj())
            + &gmat.mapv(|v| v * lambda.norm_sqr());
        let num = quad(&num_mat).re.max(0.0);
        let den = match denominator {
            ResidualDenominator::Paper => quad(&a).norm(),
            ResidualDenominator::Gram => quad(&gmat).re,
        };
        (num / den).sqrt()
    }

    #[test]
    fn residual_matches_dense_assembly_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let n = rng.random_range(2..=10);
            let m = rng.random_range(n..3 * n);
            let mut pairs = Vec::with_capacity(m);
            for i in 0..n {
                pairs.push((i, rng.random_range(0..n), rng.random::<f64>() + 0.01));
            }
            for _ in n..m {
                pairs.push((
                    rng.random_range(0..n),
                    rng.random_range(0..n),
                    rng.random::<f64>() + 0.01,
                ));
            }
            let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
            for (i, j, w) in &pairs {
                match rows[*i].iter_mut().find(|e| e.0 == *j) {
                    Some(e) => e.1 += w,
                    None => rows[*i].push((*j, *w)),
                }
            }
            let t = TransitionWeights::from_rows(rows).unwrap();
            let lambda = Complex64::new(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0);
            let g: Array1<Complex64> = Array1::from_iter(
                (0..n).map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)),
            );
            for denom in [ResidualDenominator::Paper, ResidualDenominator::Gram] {
                let fast = residual(lambda, g.view(), &t, denom).unwrap();
                let slow = residual_dense_oracle(lambda, g.view(), &pairs, n, denom);
                assert!(
                    (fast - slow).abs() <= 1e-12 * (1.0 + slow),
                    "fast {fast} vs dense oracle {slow}"
                );
            }
        }
    }

    #[test]
    fn autocorrelation_constant_observable() {
        let cfg = SystemConfig {
            kind: SystemKind::Rotation2d { theta: 0.37 },
            dt_sample: 1.0,
            t_final: 200.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![0.1] },
            burn_in: 0,
        };
        let s = simulate_rotation(&cfg).unwrap();
        let d = Dictionary::circle_arcs(8).unwrap();
        let g: Array1<Complex64> = Array1::from_elem(8, Complex64::new(1.0, 0.0));
        let corr = autocorrelation(&s, &d, g.view(), 16).unwrap();
        for c in &corr {
            assert_abs_diff_eq!(c.re, 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(c.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn autocorrelation_rotation_matches_cosine() {
        let theta = std::f64::consts::TAU / 8.0;
        let cfg = SystemConfig {
            kind: SystemKind::Rotation2d { theta },
            dt_sample: 1.0,
            t_final: 64.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![0.05] },
            burn_in: 0,
        };
        let s = simulate_rotation(&cfg).unwrap();
        let d = Dictionary::circle_arcs(8).unwrap();
        let g = Array1::from_vec(cell_mean_observable(&s, &d, 0).unwrap());
        let corr = autocorrelation(&s, &d, g.view(), 16).unwrap();
        assert_abs_diff_eq!(corr[0].re, 1.0, epsilon = 1e-12);
        for (n, c) in corr.iter().enumerate() {
            assert_abs_diff_eq!(c.re, (n as f64 * theta).cos(), epsilon = 1e-10);
            assert_abs_diff_eq!(c.im, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn autocorrelation_rejects_multi_trajectory_data() {
        let (s, d) = rotation_system(64, 0.3);
        let g: Array1<Complex64> = Array1::from_elem(8, Complex64::new(1.0, 0.0));
        assert!(matches!(
            autocorrelation(&s, &d, g.view(), 4),
            Err(Error::UnsupportedSampling(_))
        ));
    }

    #[test]
    fn model_moments_match_data_on_exact_permutation() {
        let theta = std::f64::consts::TAU / 8.0;
        let cfg = SystemConfig {
            kind: SystemKind::Rotation2d { theta },
            dt_sample: 1.0,
            t_final: 64.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![0.05] },
            burn_in: 0,
        };
        let s = simulate_rotation(&cfg).unwrap();
        let d = Dictionary::circle_arcs(8).unwrap();
        let acc = accumulate(&s, &d).unwrap();
        let k = fit_multdmd(&acc.weights, false).unwrap();
        let r = cycle_spectrum(&k).unwrap();
        let g = Array1::from_vec(cell_mean_observable(&s, &acc.dictionary, 0).unwrap());
        let auto = autocorrelation(&s, &acc.dictionary, g.view(), 32).unwrap();
        let model = model_moments(&r, g.view(), &acc.weights, 32).unwrap();
        assert!(!model.conditioning_warning);
        assert_abs_diff_eq!(model.moments[0].re, 1.0, epsilon = 1e-10);
        for n in 0..=32 {
            let diff = (model.moments[n] - auto[n]).norm();
            assert!(diff <= 1e-10, "lag {n}: diff {diff}");
        }
    }

    #[test]
    fn spurious_weight_outside_true_arcs_vanishes_with_exact_data() {
        // Rotation by 2*pi/8 with exact-arc dictionaries of growing size: the
        // spectral weight of the projected observable must sit on the true
        // eigenvalues exp(2*pi*i*k/8).
        let theta = std::f64::consts::TAU / 8.0;
        for n_cells in [8usize, 16, 32, 64] {
            let cfg = SystemConfig {
                kind: SystemKind::Rotation2d { theta },
                dt_sample: 1.0,
                t_final: 1.0,
                n_trajectories: 64,
                init: InitScheme::UniformGrid {
                    lo: vec![0.01],
                    hi: vec![std::f64::consts::TAU + 0.01],
                },
                burn_in: 0,
            };
            let s = simulate_rotation(&cfg).unwrap();
            let d = Dictionary::circle_arcs(n_cells).unwrap();
            let acc = accumulate(&s, &d).unwrap();
            let k = fit_multdmd(&acc.weights, false).unwrap();
            let r = cycle_spectrum(&k).unwrap();
            let g = Array1::from_vec(cell_mean_observable(&s, &acc.dictionary, 0).unwrap());
            let norm = g_norm(g.view(), acc.weights.gram());
            let gn = g.mapv(|v| v / norm);
            // Spectral masses c_k <v_k, g>_G from the moment expansion.
            let n = acc.weights.n();
            let kk = r.eigenvalues.len();
            let mut vgv = Array2::<Complex64>::zeros((kk, kk));
            let mut rhs = Array1::<Complex64>::zeros(kk);
            for a in 0..kk {
                for b in 0..kk {
                    let mut accv = Complex64::new(0.0, 0.0);
                    for i in 0..n {
                        accv += r.eigvecs[[i, a]].conj()
                            * acc.weights.gram()[i]
                            * r.eigvecs[[i, b]];
                    }
                    vgv[[a, b]] = accv;
                }
                let mut accv = Complex64::new(0.0, 0.0);
                for i in 0..n {
                    accv += r.eigvecs[[i, a]].conj() * acc.weights.gram()[i] * gn[i];
                }
                rhs[a] = accv;
            }
            let coeffs = vgv.solve(&rhs).unwrap();
            let mut outside = 0.0;
            let mut total = 0.0;
            for j in 0..kk {
                let mass = (coeffs[j] * rhs[j].conj()).norm();
                total += mass;
                let on_true_arc = (0..8).any(|p| {
                    let target = Complex64::from_polar(1.0, theta * p as f64);
                    (r.eigenvalues[j] - target).norm() < 1e-9
                });
                if !on_true_arc {
                    outside += mass;
                }
            }
            assert!(total > 0.9, "N={n_cells}: total mass {total}");
            assert!(outside <= 1e-10, "N={n_cells}: spurious mass {outside}");
        }
    }

    #[test]
    fn retained_filters_by_support() {
        // Two fixed points, one with a large basin, one bare.
        let sigma = vec![Some(0), Some(0), Some(0), Some(3)];
        let r = cycle_spectrum(&multdmd(sigma)).unwrap();
        assert_eq!(r.eigenvalues.len(), 2);
        let filtered = r.retained(2);
        assert_eq!(filtered.eigenvalues.len(), 1);
        assert_eq!(filtered.support_sizes[0], 3);
    }
}
