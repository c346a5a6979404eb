//! Proper orthogonal decomposition of high-dimensional snapshot fields, plus
//! physical-space Koopman mode reconstruction.

use ndarray::{Array2, ArrayView2};
use ndarray_linalg::{Eigh, JobSvd, SVDDC, UPLO};
use num_complex::Complex64;

use crate::dictionary::Dictionary;
use crate::dynsys::SnapshotSet;
use crate::error::{Error, Result};
use crate::spectral::SpectralResult;

/// Truncated POD basis of a `D x T` field matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    mean_field: Vec<f64>,
    /// `D x r`, orthonormal columns.
    modes: Array2<f64>,
    /// Nonincreasing, strictly positive.
    singular_values: Vec<f64>,
    /// Cumulative explained-variance ratios, length `r`.
    energy_fractions: Vec<f64>,
}

impl PodBasis {
    pub fn dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn mean_field(&self) -> &[f64] {
        &self.mean_field
    }

    pub fn modes(&self) -> ArrayView2<'_, f64> {
        self.modes.view()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn energy_fractions(&self) -> &[f64] {
        &self.energy_fractions
    }

    /// Rebuilds a basis from stored parts (file loading); energy fractions
    /// are recomputed relative to the kept singular values.
    pub fn from_parts(
        mean_field: Vec<f64>,
        modes: Array2<f64>,
        singular_values: Vec<f64>,
    ) -> Result<Self> {
        if modes.nrows() != mean_field.len() || modes.ncols() != singular_values.len() {
            return Err(Error::Domain("POD parts have inconsistent shapes".into()));
        }
        let total: f64 = singular_values.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        let energy_fractions = singular_values
            .iter()
            .map(|s| {
                acc += s * s;
                acc / total
            })
            .collect();
        Ok(PodBasis {
            mean_field,
            modes,
            singular_values,
            energy_fractions,
        })
    }
}

/// Fits a rank-`r` POD basis to a `D x T` field matrix.
///
/// The temporal mean field is subtracted first (disable with `center =
/// false`). When `T < D` the decomposition goes through the `T x T` Gram
/// matrix instead of a direct SVD. Mode signs are fixed so the entry of
/// largest magnitude in each mode is positive.
pub fn fit_pod(fields: ArrayView2<'_, f64>, r: usize, center: bool) -> Result<PodBasis> {
    let (d, t) = fields.dim();
    if t < 2 {
        return Err(Error::Domain("POD needs at least two snapshots".into()));
    }
    if r == 0 || r > d.min(t) {
        return Err(Error::Domain(format!(
            "rank {r} out of range for a {d} x {t} field matrix"
        )));
    }
    let mean_field: Vec<f64> = if center {
        (0..d).map(|i| fields.row(i).sum() / t as f64).collect()
    } else {
        vec![0.0; d]
    };
    let mut centered = fields.to_owned();
    for (i, mut row) in centered.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v -= mean_field[i];
        }
    }
    let total_energy: f64 = centered.iter().map(|v| v * v).sum();
    if total_energy == 0.0 {
        return Err(Error::DegenerateData("fields have no variance".into()));
    }

    let (mut modes, singular_values, all_energy) = if t < d {
        // Gram trick: eigen-decompose the T x T matrix A^T A.
        let gram = centered.t().dot(&centered);
        let (eigs, vecs) = gram
            .eigh(UPLO::Lower)
            .map_err(|e| Error::Numerical(format!("Gram eigensolve failed: {e}")))?;
        // Ascending eigenvalues; take the top r.
        let order: Vec<usize> = (0..t).rev().collect();
        let mut modes = Array2::zeros((d, r));
        let mut sv = Vec::with_capacity(r);
        for (col, &idx) in order.iter().take(r).enumerate() {
            let lambda = eigs[idx].max(0.0);
            let sigma = lambda.sqrt();
            sv.push(sigma);
            if sigma > 0.0 {
                let u = centered.dot(&vecs.column(idx));
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                for i in 0..d {
                    modes[[i, col]] = u[i] / norm;
                }
            }
        }
        let all: f64 = eigs.iter().map(|l| l.max(0.0)).sum();
        (modes, sv, all)
    } else {
        let (u, s, _) = centered
            .svddc(JobSvd::Some)
            .map_err(|e| Error::Numerical(format!("SVD failed: {e}")))?;
        let u = u.expect("requested U");
        let mut modes = Array2::zeros((d, r));
        for col in 0..r {
            modes.column_mut(col).assign(&u.column(col));
        }
        let sv: Vec<f64> = s.iter().take(r).copied().collect();
        let all: f64 = s.iter().map(|v| v * v).sum();
        (modes, sv, all)
    };

    if singular_values.iter().any(|s| *s <= 0.0) {
        return Err(Error::DegenerateData(format!(
            "rank {r} exceeds the numerical rank of the centered fields"
        )));
    }
    // Deterministic sign convention.
    for mut col in modes.columns_mut() {
        let mut lead = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            for v in col.iter_mut() {
                *v = -*v;
            }
        }
    }
    let mut acc = 0.0;
    let energy_fractions: Vec<f64> = singular_values
        .iter()
        .map(|s| {
            acc += s * s;
            acc / all_energy
        })
        .collect();
    Ok(PodBasis {
        mean_field,
        modes,
        singular_values,
        energy_fractions,
    })
}

/// Projects a `D x T'` field matrix onto the basis, returning `T' x r`
/// coefficients.
pub fn project(b: &PodBasis, fields: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if fields.nrows() != b.dim() {
        return Err(Error::Domain(format!(
            "fields have dimension {}, basis has {}",
            fields.nrows(),
            b.dim()
        )));
    }
    let mut centered = fields.to_owned();
    for (i, mut row) in centered.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v -= b.mean_field[i];
        }
    }
    Ok(centered.t().dot(&b.modes))
}

/// Reconstructs fields from `T' x r` coefficients, adding the mean back.
pub fn reconstruct(b: &PodBasis, coeffs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if coeffs.ncols() != b.rank() {
        return Err(Error::Domain(format!(
            "coefficients have rank {}, basis has {}",
            coeffs.ncols(),
            b.rank()
        )));
    }
    let mut fields = b.modes.dot(&coeffs.t());
    for (i, mut row) in fields.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v += b.mean_field[i];
        }
    }
    Ok(fields)
}

/// Sequential coefficient snapshots `T x r` paired into a snapshot set with
/// `M = T - 1` and uniform weights.
pub fn pairs_from_sequence(coeffs: ArrayView2<'_, f64>) -> Result<SnapshotSet> {
    let t = coeffs.nrows();
    if t < 2 {
        return Err(Error::Domain("need at least two snapshots to form pairs".into()));
    }
    let x = coeffs.slice(ndarray::s![..t - 1, ..]).to_owned();
    let y = coeffs.slice(ndarray::s![1.., ..]).to_owned();
    SnapshotSet::with_uniform_weights(x, y)
}

/// Koopman modes: weighted correlation of the field with each retained
/// eigenfunction along the trajectory,
/// `mode_k = sum_m w_m conj(phi_k(x^(m))) field^(m)` with
/// `phi_k(x) = v_k[assign(x)]`, normalized to unit maximum magnitude.
///
/// `fields` holds one column per pair, aligned with `s`; when absent the
/// states themselves serve as the field, giving modes in the (possibly
/// POD-compressed) state space.
pub fn koopman_modes(
    r: &SpectralResult,
    s: &SnapshotSet,
    d: &Dictionary,
    fields: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<Complex64>> {
    if r.eigvecs.nrows() != d.len() {
        return Err(Error::Domain(
            "spectral result and dictionary disagree on cell count".into(),
        ));
    }
    let state_fields;
    let fields = match fields {
        Some(f) => {
            if f.ncols() != s.count() {
                return Err(Error::Domain(format!(
                    "{} field columns do not align with {} pairs",
                    f.ncols(),
                    s.count()
                )));
            }
            f
        }
        None => {
            state_fields = s.x().t().to_owned();
            state_fields.view()
        }
    };
    let cells = d.assign_rows(s.x())?;
    let dim = fields.nrows();
    let k = r.eigenvalues.len();
    let mut modes = Array2::<Complex64>::zeros((dim, k));
    for m in 0..s.count() {
        let w = s.weights()[m];
        let col = fields.column(m);
        for (j, mut mode) in modes.columns_mut().into_iter().enumerate() {
            let phi = r.eigvecs[[cells[m], j]];
            let factor = phi.conj() * w;
            for (i, v) in mode.iter_mut().enumerate() {
                *v += factor * col[i];
            }
        }
    }
    for mut mode in modes.columns_mut() {
        let max = mode.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if max > 0.0 {
            for v in mode.iter_mut() {
                *v /= max;
            }
        }
    }
    Ok(modes)
}
