//! Population expected-rate model: a Poisson regression of grouped event
//! counts on two timescales (attained age and calendar year), each entering
//! through a restricted cubic spline, plus stratification covariates.
//!
//! The fitted rate is evaluated along the main analysis timescale t (time
//! since diagnosis) as  log h*(t) = f(a0 + t) + g(c0 + t) + x'beta, and is
//! treated as fixed (no parameter uncertainty) downstream.

use crate::newton::{self, Eval, NewtonError, Options};
use crate::num::QuadRule;
use crate::spline::{
    apply_inverse_transform, orthogonalize_basis, rcs_basis_into, SplineError, SplineSpec,
};
use crate::table::{Table, TableError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpectedError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("no data rows")]
    EmptyTable,
    #[error("duplicate stratum (year={year}, sex={sex}, age={age})")]
    DuplicateStratum { year: i64, sex: i64, age: i64 },
    #[error("non-positive person-time {y} in stratum (year={year}, sex={sex}, age={age})")]
    NonPositivePersonTime {
        year: i64,
        sex: i64,
        age: i64,
        y: f64,
    },
    #[error("negative event count {d} in stratum (year={year}, sex={sex}, age={age})")]
    NegativeCount {
        year: i64,
        sex: i64,
        age: i64,
        d: f64,
    },
    #[error("covariate column '{0}' not found in rate table")]
    MissingCovariate(String),
    #[error("fit failed: {0}")]
    Fit(#[from] NewtonError),
    #[error("covariate mapping is missing model covariate '{0}'")]
    MissingMapping(String),
    #[error("covariate vector has {got} entries, model expects {expected}")]
    CovariateLength { got: usize, expected: usize },
}

/// One stratum of a population incidence table.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub year: i64,
    pub sex: i64,
    pub age: i64,
    /// Event count in the stratum.
    pub d: f64,
    /// Person-years at risk in the stratum.
    pub y: f64,
}

/// Stratified population event counts and person-time.
#[derive(Debug, Clone)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

impl RateTable {
    pub fn new(rows: Vec<RateRow>) -> Result<Self, ExpectedError> {
        if rows.is_empty() {
            return Err(ExpectedError::EmptyTable);
        }
        let mut seen = std::collections::HashSet::new();
        for r in &rows {
            if !seen.insert((r.year, r.sex, r.age)) {
                return Err(ExpectedError::DuplicateStratum {
                    year: r.year,
                    sex: r.sex,
                    age: r.age,
                });
            }
            if r.y <= 0.0 {
                return Err(ExpectedError::NonPositivePersonTime {
                    year: r.year,
                    sex: r.sex,
                    age: r.age,
                    y: r.y,
                });
            }
            if r.d < 0.0 {
                return Err(ExpectedError::NegativeCount {
                    year: r.year,
                    sex: r.sex,
                    age: r.age,
                    d: r.d,
                });
            }
        }
        Ok(RateTable { rows })
    }

    pub fn ages(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.age as f64).collect()
    }

    pub fn years(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.year as f64).collect()
    }
}

/// Parse a rate table from delimited text with header columns
/// `year sex age d y` (order-free; comma or whitespace separated).
pub fn load_rate_table(text: &str) -> Result<RateTable, ExpectedError> {
    let t = Table::parse(text)?;
    let iy = t.column_index("year")?;
    let is = t.column_index("sex")?;
    let ia = t.column_index("age")?;
    let id = t.column_index("d")?;
    let ipy = t.column_index("y")?;
    if t.rows.is_empty() {
        return Err(ExpectedError::EmptyTable);
    }
    let mut rows = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        rows.push(RateRow {
            year: t.number(r, iy)? as i64,
            sex: t.number(r, is)? as i64,
            age: t.number(r, ia)? as i64,
            d: t.number(r, id)?,
            y: t.number(r, ipy)?,
        });
    }
    RateTable::new(rows)
}

/// A spline block inside a fitted model: the spec plus the (optional)
/// orthogonalization transform recorded at fit time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedSpline {
    pub spec: SplineSpec,
    /// Upper-triangular R from the fit-time QR, row-major, when the spec
    /// asked for orthogonalization.
    pub transform: Option<Vec<f64>>,
}

impl FittedSpline {
    pub fn plain(spec: SplineSpec) -> Self {
        FittedSpline {
            spec,
            transform: None,
        }
    }

    pub fn df(&self) -> usize {
        self.spec.df()
    }

    fn transform_matrix(&self) -> Option<DMatrix<f64>> {
        self.transform
            .as_ref()
            .map(|t| DMatrix::from_row_slice(self.spec.df(), self.spec.df(), t))
    }

    /// Evaluate the basis at a raw (pre-transform) value, applying the log
    /// transform and fit-time orthogonalization. Returns an extrapolation
    /// flag when the value lies outside the boundary knots.
    pub fn eval_into(&self, raw: f64, r_inv_cache: Option<&DMatrix<f64>>, out: &mut [f64]) -> bool {
        let kv = &self.spec.knot_vector;
        let x = if kv.scale_is_log() {
            raw.max(f64::MIN_POSITIVE).ln()
        } else {
            raw
        };
        let extrapolated = x < kv.lower() || x > kv.upper();
        if let Some(r) = r_inv_cache {
            let mut tmp = vec![0.0; out.len()];
            rcs_basis_into(x, kv, &mut tmp);
            apply_inverse_transform(&tmp, r, out);
        } else {
            rcs_basis_into(x, kv, out);
        }
        extrapolated
    }
}

/// Fitted expected-rate model.
///
/// Coefficient layout: `[intercept, f(age) spline, g(year) spline,
/// covariates]`. The variance-covariance matrix is retained for diagnostics
/// only; expected-rate parameters are treated as fixed downstream.
#[derive(Debug, Clone)]
pub struct ExpectedRateModel {
    pub age_spline: FittedSpline,
    pub year_spline: FittedSpline,
    pub covariate_names: Vec<String>,
    pub beta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub deviance: f64,
    /// Gauss-Legendre points per yearly subinterval for cumulative hazards.
    pub quad_points: usize,
}

impl ExpectedRateModel {
    /// Build a reusable evaluator for the linear predictor.
    pub fn evaluator(&self) -> ExpectedEval<'_> {
        assert!(
            self.age_spline.df() <= 16 && self.year_spline.df() <= 16,
            "spline df above 16 is not supported by the evaluator buffers"
        );
        ExpectedEval {
            model: self,
            age_rinv: self.age_spline.transform_matrix().map(|r| invert_upper(&r)),
            year_rinv: self
                .year_spline
                .transform_matrix()
                .map(|r| invert_upper(&r)),
            age_buf: vec![0.0; self.age_spline.df()],
            year_buf: vec![0.0; self.year_spline.df()],
            quad: QuadRule::new(self.quad_points),
        }
    }

    /// Expected rate at time `t` since diagnosis for a subject aged `a0`
    /// diagnosed in decimal year `c0` with covariates `x1`.
    pub fn expected_hazard(
        &self,
        t: f64,
        a0: f64,
        c0: f64,
        x1: &[f64],
    ) -> Result<f64, ExpectedError> {
        Ok(self.evaluator().hazard(t, a0, c0, x1)?.0)
    }

    /// Cumulative expected hazard over `[t0, t1]` of the diagnosis clock.
    pub fn expected_cumhaz(
        &self,
        t0: f64,
        t1: f64,
        a0: f64,
        c0: f64,
        x1: &[f64],
    ) -> Result<f64, ExpectedError> {
        self.evaluator().cumhaz(t0, t1, a0, c0, x1)
    }
}

fn invert_upper(r: &DMatrix<f64>) -> DMatrix<f64> {
    // R is small (df x df); a dense inverse is fine.
    r.clone()
        .try_inverse()
        .expect("transform matrix is invertible by construction")
}

/// Reusable evaluator holding per-model scratch buffers.
pub struct ExpectedEval<'a> {
    model: &'a ExpectedRateModel,
    age_rinv: Option<DMatrix<f64>>,
    year_rinv: Option<DMatrix<f64>>,
    age_buf: Vec<f64>,
    year_buf: Vec<f64>,
    quad: QuadRule,
}

impl ExpectedEval<'_> {
    /// Rate at diagnosis-clock time `t`; the flag reports extrapolation
    /// beyond either spline's boundary knots.
    pub fn hazard(
        &self,
        t: f64,
        a0: f64,
        c0: f64,
        x1: &[f64],
    ) -> Result<(f64, bool), ExpectedError> {
        let m = self.model;
        if x1.len() != m.covariate_names.len() {
            return Err(ExpectedError::CovariateLength {
                got: x1.len(),
                expected: m.covariate_names.len(),
            });
        }
        let mut age_buf = self.age_buf.clone();
        let mut year_buf = self.year_buf.clone();
        let ex_a = m
            .age_spline
            .eval_into(a0 + t, self.age_rinv.as_ref(), &mut age_buf);
        let ex_y = m
            .year_spline
            .eval_into(c0 + t, self.year_rinv.as_ref(), &mut year_buf);
        let mut eta = m.beta[0];
        let mut k = 1;
        for v in &age_buf {
            eta += m.beta[k] * v;
            k += 1;
        }
        for v in &year_buf {
            eta += m.beta[k] * v;
            k += 1;
        }
        for v in x1 {
            eta += m.beta[k] * v;
            k += 1;
        }
        Ok((eta.exp(), ex_a || ex_y))
    }

    /// Hazard without the covariate-length check, for hot loops.
    fn hazard_unchecked(&self, t: f64, a0: f64, c0: f64, x_eta: f64) -> f64 {
        let m = self.model;
        let mut age_buf = [0.0; 16];
        let mut year_buf = [0.0; 16];
        let na = m.age_spline.df();
        let ny = m.year_spline.df();
        m.age_spline
            .eval_into(a0 + t, self.age_rinv.as_ref(), &mut age_buf[..na]);
        m.year_spline
            .eval_into(c0 + t, self.year_rinv.as_ref(), &mut year_buf[..ny]);
        let mut eta = m.beta[0] + x_eta;
        for (j, v) in age_buf[..na].iter().enumerate() {
            eta += m.beta[1 + j] * v;
        }
        for (j, v) in year_buf[..ny].iter().enumerate() {
            eta += m.beta[1 + na + j] * v;
        }
        eta.exp()
    }

    /// Rate at diagnosis-clock time `t` with a precomputed covariate
    /// linear-predictor contribution.
    pub fn hazard_eta(&self, t: f64, a0: f64, c0: f64, x_eta: f64) -> f64 {
        self.hazard_unchecked(t, a0, c0, x_eta)
    }

    /// Whether evaluation at `t` falls outside either spline's boundary
    /// knots (linear-tail extrapolation).
    pub fn extrapolates(&self, t: f64, a0: f64, c0: f64) -> bool {
        let m = self.model;
        let akv = &m.age_spline.spec.knot_vector;
        let ykv = &m.year_spline.spec.knot_vector;
        let a = if akv.scale_is_log() {
            (a0 + t).max(f64::MIN_POSITIVE).ln()
        } else {
            a0 + t
        };
        let y = if ykv.scale_is_log() {
            (c0 + t).max(f64::MIN_POSITIVE).ln()
        } else {
            c0 + t
        };
        a < akv.lower() || a > akv.upper() || y < ykv.lower() || y > ykv.upper()
    }

    pub fn covariate_eta(&self, x1: &[f64]) -> Result<f64, ExpectedError> {
        let m = self.model;
        if x1.len() != m.covariate_names.len() {
            return Err(ExpectedError::CovariateLength {
                got: x1.len(),
                expected: m.covariate_names.len(),
            });
        }
        let off = 1 + m.age_spline.df() + m.year_spline.df();
        Ok(x1
            .iter()
            .enumerate()
            .map(|(j, v)| m.beta[off + j] * v)
            .sum())
    }

    /// Cumulative hazard by fixed-order Gauss-Legendre quadrature on
    /// subintervals of at most one year.
    pub fn cumhaz(
        &self,
        t0: f64,
        t1: f64,
        a0: f64,
        c0: f64,
        x1: &[f64],
    ) -> Result<f64, ExpectedError> {
        let x_eta = self.covariate_eta(x1)?;
        Ok(self.cumhaz_eta(t0, t1, a0, c0, x_eta))
    }

    pub(crate) fn cumhaz_eta(&self, t0: f64, t1: f64, a0: f64, c0: f64, x_eta: f64) -> f64 {
        assert!(t1 >= t0 && t0 >= 0.0, "need 0 <= t0 <= t1");
        if t1 == t0 {
            return 0.0;
        }
        let n_sub = (t1 - t0).ceil().max(1.0) as usize;
        let h = (t1 - t0) / n_sub as f64;
        let mut total = 0.0;
        for i in 0..n_sub {
            let a = t0 + i as f64 * h;
            let b = if i + 1 == n_sub { t1 } else { a + h };
            total += self
                .quad
                .integrate(a, b, |v| self.hazard_unchecked(v, a0, c0, x_eta));
        }
        total
    }
}

/// Attach the expected rate at each row's exit time to a long dataset, so
/// excess-model fits can consume it. `mapping` pairs each model covariate
/// name with a dataset column name (identity mapping when empty names
/// coincide). Rows must carry a0 and c0 columns.
pub fn attach_expected(
    dataset: &mut crate::msm::MultiStateDataset,
    model: &ExpectedRateModel,
    mapping: &[(String, String)],
) -> Result<(), ExpectedError> {
    let col = |name: &str| {
        dataset
            .covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| ExpectedError::MissingMapping(name.to_string()))
    };
    let a0_col = col("a0")?;
    let c0_col = col("c0")?;
    let mut x_cols = Vec::with_capacity(model.covariate_names.len());
    for name in &model.covariate_names {
        let source = mapping
            .iter()
            .find(|(m, _)| m == name)
            .map(|(_, d)| d.as_str())
            .unwrap_or(name.as_str());
        x_cols.push(col(source)?);
    }
    let ev = model.evaluator();
    let mut x1 = vec![0.0; x_cols.len()];
    for row in &mut dataset.rows {
        for (k, &c) in x_cols.iter().enumerate() {
            x1[k] = row.x[c];
        }
        let (rate, _) = ev.hazard(row.stop, row.x[a0_col], row.x[c0_col], &x1)?;
        row.expected_rate_at_exit = Some(rate);
    }
    Ok(())
}

/// Fit the expected-rate Poisson model by Newton-Raphson on the exact
/// log-likelihood with a log person-time offset.
pub fn fit_expected(
    table: &RateTable,
    age_spec: SplineSpec,
    year_spec: SplineSpec,
    covariates: &[String],
) -> Result<ExpectedRateModel, ExpectedError> {
    let n = table.rows.len();
    if n == 0 {
        return Err(ExpectedError::EmptyTable);
    }
    // Build the design: [1 | age spline | year spline | covariates].
    // Covariate columns come straight off the table by name.
    let p_age = age_spec.df();
    let p_year = year_spec.df();
    let p = 1 + p_age + p_year + covariates.len();

    let mut age_cols = DMatrix::zeros(n, p_age);
    let mut year_cols = DMatrix::zeros(n, p_year);
    let mut buf_a = vec![0.0; p_age];
    let mut buf_y = vec![0.0; p_year];
    for (i, row) in table.rows.iter().enumerate() {
        let xa = age_spec.knot_vector.to_model_scale(row.age as f64)?;
        rcs_basis_into(xa, &age_spec.knot_vector, &mut buf_a);
        let xy = year_spec.knot_vector.to_model_scale(row.year as f64)?;
        rcs_basis_into(xy, &year_spec.knot_vector, &mut buf_y);
        for j in 0..p_age {
            age_cols[(i, j)] = buf_a[j];
        }
        for j in 0..p_year {
            year_cols[(i, j)] = buf_y[j];
        }
    }
    let mut age_transform = None;
    if age_spec.orthogonalize {
        let (q, r) = orthogonalize_basis(&age_cols)?;
        age_cols = q;
        age_transform = Some(r.transpose().iter().copied().collect::<Vec<_>>());
        // row-major storage: transpose of column-major iteration
    }
    let mut year_transform = None;
    if year_spec.orthogonalize {
        let (q, r) = orthogonalize_basis(&year_cols)?;
        year_cols = q;
        year_transform = Some(r.transpose().iter().copied().collect::<Vec<_>>());
    }

    let mut design = DMatrix::zeros(n, p);
    let mut cov_values = vec![Vec::with_capacity(n); covariates.len()];
    for (ci, name) in covariates.iter().enumerate() {
        for row in &table.rows {
            let v = match name.as_str() {
                "sex" => row.sex as f64,
                "year" => row.year as f64,
                "age" => row.age as f64,
                _ => return Err(ExpectedError::MissingCovariate(name.clone())),
            };
            cov_values[ci].push(v);
        }
    }
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..p_age {
            design[(i, 1 + j)] = age_cols[(i, j)];
        }
        for j in 0..p_year {
            design[(i, 1 + p_age + j)] = year_cols[(i, j)];
        }
        for (ci, vals) in cov_values.iter().enumerate() {
            design[(i, 1 + p_age + p_year + ci)] = vals[i];
        }
    }

    let d = DVector::from_iterator(n, table.rows.iter().map(|r| r.d));
    let log_y = DVector::from_iterator(n, table.rows.iter().map(|r| r.y.ln()));

    // Start from the pooled rate.
    let mut theta0 = DVector::zeros(p);
    let total_d: f64 = table.rows.iter().map(|r| r.d).sum();
    let total_y: f64 = table.rows.iter().map(|r| r.y).sum();
    theta0[0] = (total_d.max(0.5) / total_y).ln();

    let objective = |theta: &DVector<f64>| -> Eval {
        let eta = &design * theta + &log_y;
        let mu = eta.map(f64::exp);
        let loglik: f64 = d
            .iter()
            .zip(eta.iter())
            .zip(mu.iter())
            .map(|((&di, &ei), &mi)| di * ei - mi)
            .sum();
        let resid = &d - &mu;
        let grad = design.transpose() * &resid;
        // Hessian = -X' W X with W = diag(mu).
        let mut xtwx = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = mu[i];
            let xi = design.row(i);
            for a in 0..p {
                let wa = w * xi[a];
                for b in a..p {
                    xtwx[(a, b)] += wa * xi[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        Eval {
            loglik,
            grad,
            hess: -xtwx,
        }
    };

    // Gradient entries are sums of (d - mu) * x; their rounding floor
    // scales with the total event count, so the criterion is relative.
    let opts = Options {
        max_iter: 100,
        tol_loglik: 1e-10,
        tol_grad: 1e-6,
        grad_scale: total_d.max(1.0),
    };
    let fit = newton::maximize(objective, theta0, &opts)?;

    // Deviance against the saturated model.
    let eta = &design * &fit.theta + &log_y;
    let mu = eta.map(f64::exp);
    let deviance: f64 = d
        .iter()
        .zip(mu.iter())
        .map(|(&di, &mi)| {
            let term = if di > 0.0 { di * (di / mi).ln() } else { 0.0 };
            2.0 * (term - (di - mi))
        })
        .sum();

    let (vcov, _warn) = newton::vcov_from_hessian(&fit.hess);

    Ok(ExpectedRateModel {
        age_spline: FittedSpline {
            spec: age_spec,
            transform: age_transform,
        },
        year_spline: FittedSpline {
            spec: year_spec,
            transform: year_transform,
        },
        covariate_names: covariates.to_vec(),
        beta: fit.theta,
        vcov,
        loglik: fit.loglik,
        deviance,
        quad_points: 30,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::place_knots;
    use approx::assert_abs_diff_eq;

    fn constant_rate_table(rate: f64) -> RateTable {
        // Exact counts d = rate * y (large, effectively noise-free).
        let mut rows = Vec::new();
        for year in 2000..2010 {
            for sex in 0..2 {
                for age in 40..70 {
                    let y = 50_000.0 + 1_000.0 * (age - 40) as f64;
                    rows.push(RateRow {
                        year,
                        sex,
                        age,
                        d: (rate * y).round(),
                        y,
                    });
                }
            }
        }
        RateTable::new(rows).unwrap()
    }

    fn specs_for(table: &RateTable, df_age: usize, df_year: usize) -> (SplineSpec, SplineSpec) {
        let age = SplineSpec::new(place_knots(&table.ages(), df_age, false).unwrap());
        let year = SplineSpec::new(place_knots(&table.years(), df_year, false).unwrap());
        (age, year)
    }

    #[test]
    fn parses_table_one_layout() {
        let text = "year\tsex\tage\td\ty\n2001 1 18 62 74115.36\n2001 1 19 83 74258.12\n";
        let t = load_rate_table(text).unwrap();
        assert_eq!(t.rows.len(), 2);
        let r = &t.rows[0];
        assert_eq!((r.year, r.sex, r.age), (2001, 1, 18));
        assert_abs_diff_eq!(r.d / r.y, 8.3654e-4, epsilon = 1e-8);
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(matches!(
            load_rate_table("year sex age d y\n"),
            Err(ExpectedError::EmptyTable)
        ));
    }

    #[test]
    fn duplicate_stratum_is_an_error() {
        let text = "year sex age d y\n2002 1 18 3 100\n2002 1 18 4 120\n";
        assert!(matches!(
            load_rate_table(text),
            Err(ExpectedError::DuplicateStratum {
                year: 2002,
                sex: 1,
                age: 18
            })
        ));
    }

    #[test]
    fn non_positive_person_time_rejected() {
        let text = "year sex age d y\n2002 1 18 3 0\n";
        assert!(matches!(
            load_rate_table(text),
            Err(ExpectedError::NonPositivePersonTime { .. })
        ));
    }

    #[test]
    fn recovers_constant_rate() {
        let table = constant_rate_table(0.01);
        let (age, year) = specs_for(&table, 3, 3);
        let model = fit_expected(&table, age, year, &["sex".into()]).unwrap();
        // Fitted surface should be 0.01 everywhere within rounding effects.
        for &(t, a0, c0) in &[
            (0.0, 45.0, 2001.0),
            (5.0, 50.0, 2003.0),
            (2.5, 60.5, 2005.5),
        ] {
            let h = model.expected_hazard(t, a0, c0, &[1.0]).unwrap();
            assert_abs_diff_eq!(h, 0.01, epsilon = 0.01 * 1e-3);
        }
    }

    #[test]
    fn recovers_log_linear_age_slope() {
        // log rate = -7 + 0.05 * age, exact expected counts.
        let mut rows = Vec::new();
        for year in 1995..2005 {
            for age in 30..75 {
                let y = 80_000.0;
                let rate = (-7.0 + 0.05 * age as f64).exp();
                rows.push(RateRow {
                    year,
                    sex: 1,
                    age,
                    d: rate * y,
                    y,
                });
            }
        }
        let table = RateTable::new(rows).unwrap();
        // df=1 splines are linear terms, so the slope is directly readable.
        let (age, year) = specs_for(&table, 1, 1);
        let model = fit_expected(&table, age, year, &[]).unwrap();
        assert_abs_diff_eq!(model.beta[1], 0.05, epsilon = 1e-6);
        assert_abs_diff_eq!(model.beta[2], 0.0, epsilon = 1e-8);
    }

    /// Independently coded IRLS for the same Poisson GLM, used as an oracle.
    fn irls_oracle(design: &DMatrix<f64>, d: &DVector<f64>, log_y: &DVector<f64>) -> DVector<f64> {
        let p = design.ncols();
        let mut beta = DVector::zeros(p);
        beta[0] = (d.sum() / log_y.map(f64::exp).sum()).ln();
        for _ in 0..200 {
            let eta = design * &beta + log_y;
            let mu = eta.map(f64::exp);
            // Working response z = eta_lin + (d - mu) / mu, weights mu.
            let mut xtwx = DMatrix::zeros(p, p);
            let mut xtwz = DVector::zeros(p);
            for i in 0..design.nrows() {
                let w = mu[i];
                let z = (eta[i] - log_y[i]) + (d[i] - mu[i]) / mu[i];
                for a in 0..p {
                    xtwz[a] += w * design[(i, a)] * z;
                    for b in 0..p {
                        xtwx[(a, b)] += w * design[(i, a)] * design[(i, b)];
                    }
                }
            }
            let new = xtwx.lu().solve(&xtwz).expect("IRLS solve");
            let done = (&new - &beta).amax() < 1e-12;
            beta = new;
            if done {
                break;
            }
        }
        beta
    }

    #[test]
    fn matches_irls_oracle() {
        // Deterministic pseudo-Poisson counts over a curved rate surface.
        let mut rows = Vec::new();
        let mut state = 12345u64;
        let mut unif = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for year in 1990..2000 {
            for sex in 0..2 {
                for age in 20..60 {
                    let y = 30_000.0 + 40_000.0 * unif();
                    let rate = (-9.0 + 0.06 * age as f64 - 0.01 * (year - 1990) as f64
                        + 0.3 * sex as f64)
                        .exp();
                    // Poissonish integer counts via rounding of mean + noise.
                    let mean = rate * y;
                    let d = (mean + mean.sqrt() * (unif() - 0.5) * 2.0).round().max(0.0);
                    rows.push(RateRow {
                        year,
                        sex,
                        age,
                        d,
                        y,
                    });
                }
            }
        }
        let table = RateTable::new(rows).unwrap();
        let (age, year) = specs_for(&table, 3, 2);
        let model = fit_expected(&table, age.clone(), year.clone(), &["sex".into()]).unwrap();

        // Rebuild the same design for the oracle.
        let n = table.rows.len();
        let p = 1 + age.df() + year.df() + 1;
        let mut design = DMatrix::zeros(n, p);
        let mut ab = vec![0.0; age.df()];
        let mut yb = vec![0.0; year.df()];
        for (i, r) in table.rows.iter().enumerate() {
            rcs_basis_into(r.age as f64, &age.knot_vector, &mut ab);
            rcs_basis_into(r.year as f64, &year.knot_vector, &mut yb);
            design[(i, 0)] = 1.0;
            for j in 0..age.df() {
                design[(i, 1 + j)] = ab[j];
            }
            for j in 0..year.df() {
                design[(i, 1 + age.df() + j)] = yb[j];
            }
            design[(i, p - 1)] = r.sex as f64;
        }
        let d = DVector::from_iterator(n, table.rows.iter().map(|r| r.d));
        let log_y = DVector::from_iterator(n, table.rows.iter().map(|r| r.y.ln()));
        let oracle = irls_oracle(&design, &d, &log_y);
        for j in 0..p {
            assert_abs_diff_eq!(model.beta[j], oracle[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn order_invariance_of_fit() {
        let table = constant_rate_table(0.02);
        let (age, year) = specs_for(&table, 2, 2);
        let m1 = fit_expected(&table, age.clone(), year.clone(), &[]).unwrap();
        let mut rows = table.rows.clone();
        rows.reverse();
        let table2 = RateTable::new(rows).unwrap();
        let m2 = fit_expected(&table2, age, year, &[]).unwrap();
        assert!((&m1.beta - &m2.beta).amax() < 1e-10);
    }

    #[test]
    fn hazard_matches_independent_basis_composition() {
        // Spot values equal exp(intercept + f(a0+t) + g(c0+t) + x * beta)
        // with the spline bases evaluated by an independently coded
        // truncated-power formula.
        let table = constant_rate_table(0.012);
        let (age, year) = specs_for(&table, 3, 2);
        let model = fit_expected(&table, age, year, &["sex".into()]).unwrap();
        let oracle_basis = |x: f64, knots: &[f64]| -> Vec<f64> {
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
        };
        for &(t, a0, c0, sex) in &[(0.0, 45.0, 2001.0, 1.0), (3.7, 52.3, 2003.1, 0.0)] {
            let fa = oracle_basis(a0 + t, model.age_spline.spec.knot_vector.knots());
            let gc = oracle_basis(c0 + t, model.year_spline.spec.knot_vector.knots());
            let mut eta = model.beta[0];
            let mut k = 1;
            for v in &fa {
                eta += model.beta[k] * v;
                k += 1;
            }
            for v in &gc {
                eta += model.beta[k] * v;
                k += 1;
            }
            eta += model.beta[k] * sex;
            let want = eta.exp();
            let got = model.expected_hazard(t, a0, c0, &[sex]).unwrap();
            assert_abs_diff_eq!(got, want, epsilon = 1e-12 * want);
        }
    }

    #[test]
    fn hazard_depends_only_on_attained_scales() {
        // With g constant (df 1, flat truth), the same attained age gives
        // the same rate regardless of the (t, a0) split.
        let table = constant_rate_table(0.01);
        let (age, year) = specs_for(&table, 3, 1);
        let model = fit_expected(&table, age, year, &[]).unwrap();
        let h1 = model.expected_hazard(10.0, 30.0, 2000.0, &[]).unwrap();
        let h2 = model.expected_hazard(0.0, 40.0, 2010.0, &[]).unwrap();
        assert_abs_diff_eq!(h1, h2, epsilon = 1e-10);
    }

    #[test]
    fn cumhaz_constant_rate_closed_form() {
        let table = constant_rate_table(0.01);
        let (age, year) = specs_for(&table, 1, 1);
        let model = fit_expected(&table, age, year, &[]).unwrap();
        // The fitted model is not exactly flat, but nearly so; use the
        // fitted rate itself for the closed form.
        let h = model.expected_hazard(0.0, 50.0, 2004.0, &[]).unwrap();
        let hc = model.expected_cumhaz(0.0, 15.0, 50.0, 2004.0, &[]).unwrap();
        // Allow for the small age/year trend across 15 years.
        assert_abs_diff_eq!(hc, 15.0 * h, epsilon = 0.15 * h * 15.0);
        assert_eq!(
            model.expected_cumhaz(3.0, 3.0, 50.0, 2004.0, &[]).unwrap(),
            0.0
        );
    }

    #[test]
    fn cumhaz_matches_refinement_oracle_and_is_additive() {
        // Log-linear model fitted on exact counts.
        let mut rows = Vec::new();
        for year in 1995..2005 {
            for age in 30..75 {
                let y = 80_000.0;
                let rate = (-7.0 + 0.05 * age as f64).exp();
                rows.push(RateRow {
                    year,
                    sex: 1,
                    age,
                    d: rate * y,
                    y,
                });
            }
        }
        let table = RateTable::new(rows).unwrap();
        let (age, year) = specs_for(&table, 1, 1);
        let model = fit_expected(&table, age, year, &[]).unwrap();
        let ev = model.evaluator();

        // Adaptive-refinement oracle: trapezoid halving until stable.
        let oracle = |t0: f64, t1: f64| {
            let f = |t: f64| model.expected_hazard(t, 40.0, 1998.0, &[]).unwrap();
            let mut n = 8usize;
            let mut prev = f64::INFINITY;
            loop {
                let h = (t1 - t0) / n as f64;
                let mut s = 0.5 * (f(t0) + f(t1));
                for i in 1..n {
                    s += f(t0 + i as f64 * h);
                }
                let cur = s * h;
                if (cur - prev).abs() < 1e-10 || n > 1 << 22 {
                    return cur;
                }
                prev = cur;
                n *= 2;
            }
        };
        let got = ev.cumhaz(0.0, 10.0, 40.0, 1998.0, &[]).unwrap();
        assert_abs_diff_eq!(got, oracle(0.0, 10.0), epsilon = 1e-8);

        // Additivity over a partition.
        let a = ev.cumhaz(0.0, 4.3, 40.0, 1998.0, &[]).unwrap();
        let b = ev.cumhaz(4.3, 10.0, 40.0, 1998.0, &[]).unwrap();
        assert_abs_diff_eq!(a + b, got, epsilon = 1e-10);
    }

    #[test]
    fn attach_expected_fills_rows() {
        use crate::msm::{LongRow, MultiStateDataset};
        let table = constant_rate_table(0.01);
        let (age, year) = specs_for(&table, 1, 1);
        let model = fit_expected(&table, age, year, &["sex".into()]).unwrap();
        let mk_row = |stop: f64, a0: f64, c0: f64| LongRow {
            id: "p".into(),
            trans: 2,
            start: 0.0,
            stop,
            status: true,
            x: vec![a0, c0, 1.0],
            expected_rate_at_exit: None,
        };
        let mut ds = MultiStateDataset {
            covariate_names: vec!["a0".into(), "c0".into(), "female".into()],
            rows: vec![
                mk_row(1e-9, 50.0, 2004.0),
                // Same attained age and calendar year via different splits.
                mk_row(10.0, 44.0, 1995.0),
                mk_row(4.0, 50.0, 2001.0),
            ],
        };
        attach_expected(&mut ds, &model, &[("sex".into(), "female".into())]).unwrap();
        let r0 = ds.rows[0].expected_rate_at_exit.unwrap();
        assert_abs_diff_eq!(r0, 0.01, epsilon = 0.01 * 2e-3);
        // Timescale identity: rows 1 and 2 share (t + a0, t + c0).
        let r1 = ds.rows[1].expected_rate_at_exit.unwrap();
        let r2 = ds.rows[2].expected_rate_at_exit.unwrap();
        assert_abs_diff_eq!(r1, r2, epsilon = 1e-12);
        // Batch values equal per-row calls.
        for row in &ds.rows {
            let direct = model
                .expected_hazard(row.stop, row.x[0], row.x[1], &[row.x[2]])
                .unwrap();
            assert_eq!(row.expected_rate_at_exit.unwrap(), direct);
        }
    }

    #[test]
    fn orthogonalization_invariance() {
        let table = constant_rate_table(0.015);
        let (age, year) = specs_for(&table, 3, 3);
        let plain = fit_expected(&table, age.clone(), year.clone(), &["sex".into()]).unwrap();
        let mut age_o = age;
        age_o.orthogonalize = true;
        let mut year_o = year;
        year_o.orthogonalize = true;
        let orth = fit_expected(&table, age_o, year_o, &["sex".into()]).unwrap();
        assert_abs_diff_eq!(plain.loglik, orth.loglik, epsilon = 1e-6);
        // Fitted hazards agree too.
        for &(t, a0, c0) in &[(0.0, 45.0, 2001.0), (7.0, 52.0, 2002.0)] {
            let h1 = plain.expected_hazard(t, a0, c0, &[1.0]).unwrap();
            let h2 = orth.expected_hazard(t, a0, c0, &[1.0]).unwrap();
            assert_abs_diff_eq!(h1, h2, epsilon = 1e-6 * h1.abs());
        }
    }
}
