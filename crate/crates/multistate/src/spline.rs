//! Restricted cubic spline (RCS) bases, derivatives, and knot placement.
//!
//! An RCS with K knots has K-1 basis terms: the first is the identity, the
//! rest are truncated-cubic combinations constrained to be linear beyond the
//! boundary knots. Basis values are scaled by 1/(k_K - k_1)^2 so that the
//! cubic terms stay well conditioned when knots live on scales like calendar
//! years.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("knot vector needs at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("knots must be strictly increasing; duplicate or unordered at position {0}")]
    KnotsNotIncreasing(usize),
    #[error("value {0} is not positive but a log-scale spline was requested")]
    NonPositiveUnderLog(f64),
    #[error("no values supplied for knot placement")]
    EmptyValues,
    #[error("degrees of freedom must be >= 1, got {0}")]
    InvalidDf(usize),
    #[error(
        "duplicate knots at {0}: too few distinct values for the requested degrees of freedom"
    )]
    DuplicateKnots(f64),
    #[error("design matrix is rank deficient at column {0}")]
    RankDeficient(usize),
    #[error("value must be finite, got {0}")]
    NonFinite(f64),
}

/// Ordered knot locations on the modeling scale.
///
/// `scale_is_log` records that raw inputs are log-transformed before the
/// basis is evaluated; the stored knots are already on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    knots: Vec<f64>,
    scale_is_log: bool,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, scale_is_log: bool) -> Result<Self, SplineError> {
        if knots.len() < 2 {
            return Err(SplineError::TooFewKnots(knots.len()));
        }
        for (i, w) in knots.windows(2).enumerate() {
            if !w[0].is_finite() || !w[1].is_finite() {
                return Err(SplineError::NonFinite(w[1]));
            }
            if w[1] <= w[0] {
                return Err(SplineError::KnotsNotIncreasing(i + 1));
            }
        }
        Ok(KnotVector {
            knots,
            scale_is_log,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn scale_is_log(&self) -> bool {
        self.scale_is_log
    }

    /// Number of basis terms this knot vector generates.
    pub fn df(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Map a raw input onto the modeling scale (log transform if requested).
    pub fn to_model_scale(&self, raw: f64) -> Result<f64, SplineError> {
        if self.scale_is_log {
            if raw <= 0.0 {
                return Err(SplineError::NonPositiveUnderLog(raw));
            }
            Ok(raw.ln())
        } else {
            Ok(raw)
        }
    }
}

/// A spline specification: knots plus whether design columns should be
/// orthogonalized during fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub knot_vector: KnotVector,
    pub orthogonalize: bool,
}

impl SplineSpec {
    pub fn new(knot_vector: KnotVector) -> Self {
        SplineSpec {
            knot_vector,
            orthogonalize: false,
        }
    }

    pub fn df(&self) -> usize {
        self.knot_vector.df()
    }
}

/// Place df+1 knots: boundaries at the observed min and max, interior knots
/// at equally spaced centiles of the supplied values (after log transform
/// when requested).
pub fn place_knots(values: &[f64], df: usize, log_scale: bool) -> Result<KnotVector, SplineError> {
    if values.is_empty() {
        return Err(SplineError::EmptyValues);
    }
    if df < 1 {
        return Err(SplineError::InvalidDf(df));
    }
    let mut v = Vec::with_capacity(values.len());
    for &x in values {
        if !x.is_finite() {
            return Err(SplineError::NonFinite(x));
        }
        if log_scale {
            if x <= 0.0 {
                return Err(SplineError::NonPositiveUnderLog(x));
            }
            v.push(x.ln());
        } else {
            v.push(x);
        }
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let mut knots = Vec::with_capacity(df + 1);
    knots.push(v[0]);
    for i in 1..df {
        let p = i as f64 / df as f64;
        knots.push(crate::num::percentile(&v, p));
    }
    knots.push(v[n - 1]);
    for w in knots.windows(2) {
        if w[1] <= w[0] {
            return Err(SplineError::DuplicateKnots(w[0]));
        }
    }
    KnotVector::new(knots, log_scale)
}

/// Evaluate the RCS basis at `x` (already on the modeling scale) into `out`,
/// which must have length `kv.df()`.
pub fn rcs_basis_into(x: f64, kv: &KnotVector, out: &mut [f64]) {
    let k = kv.knots();
    let kmin = k[0];
    let kmax = k[k.len() - 1];
    let span2 = (kmax - kmin) * (kmax - kmin);
    debug_assert_eq!(out.len(), k.len() - 1);
    out[0] = x;
    let cube = |u: f64| if u > 0.0 { u * u * u } else { 0.0 };
    for j in 1..k.len() - 1 {
        let lam = (kmax - k[j]) / (kmax - kmin);
        out[j] = (cube(x - k[j]) - lam * cube(x - kmin) - (1.0 - lam) * cube(x - kmax)) / span2;
    }
}

/// RCS basis values at `x`; length equals `spec` df.
pub fn rcs_basis(x: f64, spec: &SplineSpec) -> Vec<f64> {
    let mut out = vec![0.0; spec.df()];
    rcs_basis_into(x, &spec.knot_vector, &mut out);
    out
}

/// Derivative of each basis term with respect to `x`, into `out`.
pub fn rcs_deriv_into(x: f64, kv: &KnotVector, out: &mut [f64]) {
    let k = kv.knots();
    let kmin = k[0];
    let kmax = k[k.len() - 1];
    let span2 = (kmax - kmin) * (kmax - kmin);
    debug_assert_eq!(out.len(), k.len() - 1);
    out[0] = 1.0;
    let sq = |u: f64| if u > 0.0 { u * u } else { 0.0 };
    for j in 1..k.len() - 1 {
        let lam = (kmax - k[j]) / (kmax - kmin);
        out[j] = 3.0 * (sq(x - k[j]) - lam * sq(x - kmin) - (1.0 - lam) * sq(x - kmax)) / span2;
    }
}

/// Derivative of the RCS basis at `x`.
pub fn rcs_deriv(x: f64, spec: &SplineSpec) -> Vec<f64> {
    let mut out = vec![0.0; spec.df()];
    rcs_deriv_into(x, &spec.knot_vector, &mut out);
    out
}

/// Orthonormalize the columns of a design matrix by modified Gram-Schmidt.
///
/// Returns (Q, R) with `design = Q * R`, Q having orthonormal columns and R
/// upper triangular with positive diagonal. Predictions are invariant to
/// applying this transform because the column span is unchanged.
pub fn orthogonalize_basis(
    design: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SplineError> {
    let (n, p) = design.shape();
    let mut q = design.clone();
    let mut r = DMatrix::zeros(p, p);
    for j in 0..p {
        for i in 0..j {
            let dot = q.column(i).dot(&q.column(j));
            r[(i, j)] = dot;
            let qi = q.column(i).clone_owned();
            let mut qj = q.column_mut(j);
            qj.axpy(-dot, &qi, 1.0);
        }
        let norm = q.column(j).norm();
        // Columns of magnitude comparable to rounding noise mean the design
        // does not have full column rank.
        let col_scale = design.column(j).norm().max(1.0);
        if norm <= 1e-10 * col_scale * (n as f64).sqrt() {
            return Err(SplineError::RankDeficient(j));
        }
        r[(j, j)] = norm;
        q.column_mut(j).scale_mut(1.0 / norm);
    }
    Ok((q, r))
}

/// Map a raw basis row into the orthogonalized coordinates: solves
/// `row_orth * R = row_raw` by forward substitution on R^T.
pub fn apply_inverse_transform(raw: &[f64], r: &DMatrix<f64>, out: &mut [f64]) {
    let p = raw.len();
    debug_assert_eq!(r.nrows(), p);
    for i in 0..p {
        let mut acc = raw[i];
        for (j, &o) in out.iter().enumerate().take(i) {
            acc -= r[(j, i)] * o;
        }
        out[i] = acc / r[(i, i)];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent truncated-power evaluation used as the test oracle.
    fn rcs_oracle(x: f64, knots: &[f64]) -> Vec<f64> {
        let kmin = knots[0];
        let kmax = knots[knots.len() - 1];
        let norm = (kmax - kmin).powi(2);
        let plus3 = |u: f64| u.max(0.0).powi(3);
        let mut out = vec![x];
        for j in 1..knots.len() - 1 {
            let lam = (kmax - knots[j]) / (kmax - kmin);
            out.push(
                (plus3(x - knots[j]) - lam * plus3(x - kmin) - (1.0 - lam) * plus3(x - kmax))
                    / norm,
            );
        }
        out
    }

    fn spec(knots: &[f64]) -> SplineSpec {
        SplineSpec::new(KnotVector::new(knots.to_vec(), false).unwrap())
    }

    #[test]
    fn two_knot_basis_is_identity() {
        let s = spec(&[0.0, 1.0]);
        for &x in &[-3.0, 0.0, 0.4, 2.5] {
            assert_eq!(rcs_basis(x, &s), vec![x]);
            assert_eq!(rcs_deriv(x, &s), vec![1.0]);
        }
    }

    #[test]
    fn basis_dimension_is_knots_minus_one() {
        for k in 2..7 {
            let knots: Vec<f64> = (0..k).map(|i| i as f64).collect();
            let s = spec(&knots);
            assert_eq!(rcs_basis(0.5, &s).len(), k - 1);
        }
    }

    #[test]
    fn linear_beyond_lower_boundary() {
        let s = spec(&[0.0, 1.0, 2.0, 3.0]);
        // Second differences of each basis term vanish below the first knot.
        let h = 0.5;
        for j in 0..s.df() {
            let f = |x: f64| rcs_basis(x, &s)[j];
            let second = f(-5.0 - h) - 2.0 * f(-5.0) + f(-5.0 + h);
            assert_abs_diff_eq!(second, 0.0, epsilon = 1e-12);
            let second = f(-6.0 - h) - 2.0 * f(-6.0) + f(-6.0 + h);
            assert_abs_diff_eq!(second, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_beyond_upper_boundary() {
        let s = spec(&[0.0, 1.0, 2.0, 3.0]);
        for j in 0..s.df() {
            let f = |x: f64| rcs_basis(x, &s)[j];
            let second = f(7.0) - 2.0 * f(8.0) + f(9.0);
            assert_abs_diff_eq!(second, 0.0, epsilon = 1e-9);
        }
        // Derivative constant in the tail.
        let d1 = rcs_deriv(7.0, &s);
        let d2 = rcs_deriv(11.0, &s);
        for j in 0..s.df() {
            assert_abs_diff_eq!(d1[j], d2[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_truncated_power_oracle() {
        let knots = [0.0, 1.0, 2.0, 3.0];
        let s = spec(&knots);
        for &x in &[-1.0, 0.3, 1.5, 2.9, 4.2] {
            let got = rcs_basis(x, &s);
            let want = rcs_oracle(x, &knots);
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn deriv_matches_finite_differences() {
        let knots = [0.1, 0.9, 1.7, 3.0, 4.5];
        let s = spec(&knots);
        let h = 1e-5;
        for &x in &[0.05, 0.5, 1.0, 2.2, 3.9, 5.0] {
            let d = rcs_deriv(x, &s);
            let lo = rcs_basis(x - h, &s);
            let hi = rcs_basis(x + h, &s);
            for j in 0..s.df() {
                let fd = (hi[j] - lo[j]) / (2.0 * h);
                let scale = d[j].abs().max(1e-8);
                assert!(
                    ((d[j] - fd) / scale).abs() < 1e-6,
                    "deriv mismatch at x={x} term {j}: {} vs {}",
                    d[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn c2_continuity_at_knots() {
        let knots = [0.0, 1.0, 2.0, 3.0];
        let s = spec(&knots);
        let h = 1e-5;
        for &k in &knots {
            for j in 0..s.df() {
                let f = |x: f64| rcs_basis(x, &s)[j];
                // second derivative from each side by central differences
                let left = (f(k - h - h) - 2.0 * f(k - h) + f(k)) / (h * h);
                let right = (f(k) - 2.0 * f(k + h) + f(k + h + h)) / (h * h);
                assert!(
                    (left - right).abs() < 1e-3,
                    "second derivative jump at knot {k} term {j}: {left} vs {right}"
                );
            }
        }
    }

    #[test]
    fn place_knots_df1_is_boundaries() {
        let values: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let kv = place_knots(&values, 1, false).unwrap();
        assert_eq!(kv.knots(), &[1.0, 100.0]);
    }

    #[test]
    fn place_knots_df3_matches_sort_oracle() {
        // Weibull-ish sample via inverse transform on a fixed grid.
        let values: Vec<f64> = (0..500)
            .map(|i| {
                let u = (i as f64 + 0.5) / 500.0;
                (-(1.0 - u).ln()).powf(1.0 / 1.3)
            })
            .collect();
        let kv = place_knots(&values, 3, false).unwrap();
        // Oracle: full sort, linear-interpolated centiles.
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let cent = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let fr = pos - lo as f64;
            sorted[lo] * (1.0 - fr) + sorted[(lo + 1).min(sorted.len() - 1)] * fr
        };
        let want = [sorted[0], cent(1.0 / 3.0), cent(2.0 / 3.0), sorted[499]];
        for (g, w) in kv.knots().iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn accepts_explicit_log_scale_knots() {
        // Six knots on the log-age scale form a df-5 vector.
        let knots = vec![2.8904, 4.0604, 4.2195, 4.3175, 4.3944, 4.5951];
        let kv = KnotVector::new(knots, true).unwrap();
        assert_eq!(kv.df(), 5);
        assert!(kv.scale_is_log());
        assert!(kv.to_model_scale(-1.0).is_err());
    }

    #[test]
    fn duplicate_knots_rejected() {
        let values = vec![1.0, 1.0, 1.0, 2.0];
        assert!(matches!(
            place_knots(&values, 3, false),
            Err(SplineError::DuplicateKnots(_))
        ));
    }

    #[test]
    fn log_scale_rejects_non_positive() {
        assert!(matches!(
            place_knots(&[0.0, 1.0, 2.0], 1, true),
            Err(SplineError::NonPositiveUnderLog(_))
        ));
    }

    #[test]
    fn orthogonalize_identity_columns_unchanged() {
        let design = DMatrix::<f64>::identity(4, 3);
        let (q, r) = orthogonalize_basis(&design).unwrap();
        assert_abs_diff_eq!((&q - &design).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!((&r - DMatrix::identity(3, 3)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn orthogonalize_random_design() {
        // Fixed pseudo-random design; Gram matrix of Q must be the identity
        // and Q*R must reproduce the input.
        let n = 100;
        let p = 4;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let design = DMatrix::from_fn(n, p, |_, _| next());
        let (q, r) = orthogonalize_basis(&design).unwrap();
        let gram = q.transpose() * &q;
        assert_abs_diff_eq!(
            (&gram - DMatrix::identity(p, p)).norm(),
            0.0,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!((&q * &r - &design).norm(), 0.0, epsilon = 1e-10);
        for j in 0..p {
            assert!(r[(j, j)] > 0.0);
        }
    }

    #[test]
    fn orthogonalize_detects_rank_deficiency() {
        let mut design = DMatrix::<f64>::zeros(5, 3);
        for i in 0..5 {
            design[(i, 0)] = i as f64 + 1.0;
            design[(i, 1)] = 2.0 * (i as f64 + 1.0);
            design[(i, 2)] = (i as f64).sin();
        }
        assert!(matches!(
            orthogonalize_basis(&design),
            Err(SplineError::RankDeficient(1))
        ));
    }

    #[test]
    fn inverse_transform_roundtrip() {
        let design = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 2.0, 0.5, 3.0, 1.0, 2.0, 0.0, 1.5, 1.0, 2.0, 0.3, 0.7],
        );
        let (q, r) = orthogonalize_basis(&design).unwrap();
        // Row 2 of the raw design mapped through R^{-1} equals row 2 of Q.
        let raw: Vec<f64> = design.row(2).iter().copied().collect();
        let mut mapped = vec![0.0; 3];
        apply_inverse_transform(&raw, &r, &mut mapped);
        for j in 0..3 {
            assert_abs_diff_eq!(mapped[j], q[(2, j)], epsilon = 1e-12);
        }
    }
}
