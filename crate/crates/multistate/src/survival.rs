//! Flexible parametric survival models on the log cumulative hazard scale,
//! with delayed entry and an optional excess-hazard decomposition.
//!
//! The baseline is a restricted cubic spline in log clock-time:
//!   eta(tau | x) = gamma_0 + s(log tau; gamma) + x'beta,
//!   H(tau | x)   = exp(eta),
//!   h(tau | x)   = s'(log tau) * H / tau.
//!
//! For the excess kind, H and h are the excess quantities and each event's
//! likelihood term adds the subject's fixed expected rate at the event time;
//! the expected cumulative-hazard terms are parameter-free constants and
//! drop from the likelihood, so only the event term differs from the
//! all-cause likelihood.

use crate::expected::FittedSpline;
use crate::newton::{self, Eval, NewtonError, Options};
use crate::num::brent_root;
use crate::spline::{
    orthogonalize_basis, place_knots, rcs_basis_into, rcs_deriv_into, KnotVector, SplineError,
    SplineSpec,
};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("no records supplied")]
    NoRecords,
    #[error("no events among {0} records; the baseline cannot be identified")]
    NoEvents(usize),
    #[error("record {index}: exit {exit} must be greater than entry {entry} (entry >= 0)")]
    BadInterval { index: usize, entry: f64, exit: f64 },
    #[error("record {index}: event row needs a non-negative expected rate for an excess model")]
    MissingExpectedRate { index: usize },
    #[error("covariate '{0}' not found")]
    MissingCovariate(String),
    #[error("fit failed: {0}")]
    Fit(#[from] NewtonError),
    #[error("variance-covariance matrix is not positive semi-definite")]
    IndefiniteVcov,
    #[error("event-time inversion failed: {0}")]
    Inversion(#[from] crate::num::RootError),
    #[error("spline dimension {0} exceeds the supported maximum of 16")]
    DfTooLarge(usize),
}

/// Whether a transition model describes the total hazard or the excess over
/// a fixed expected rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    AllCause,
    Excess,
}

/// The clock a transition runs on: time since study origin (forward) or
/// time since entering the current state (reset).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    Forward,
    Reset,
}

/// One at-risk interval on the transition's own clock.
#[derive(Debug, Clone)]
pub struct SurvivalRecord {
    pub entry: f64,
    pub exit: f64,
    pub status: bool,
    /// Raw covariate values aligned with `SurvivalData::covariate_names`.
    pub covariates: Vec<f64>,
    /// Expected rate at the exit time; consulted only by excess models.
    pub expected_rate_at_exit: Option<f64>,
}

/// Records plus the naming of their covariate columns.
#[derive(Debug, Clone)]
pub struct SurvivalData {
    pub covariate_names: Vec<String>,
    pub records: Vec<SurvivalRecord>,
}

/// One term of the covariate design: a raw column, or an RCS expansion of a
/// raw column (optionally of its log).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateTerm {
    Linear { name: String },
    Spline { name: String, df: usize, log: bool },
}

impl CovariateTerm {
    pub fn linear(name: &str) -> Self {
        CovariateTerm::Linear {
            name: name.to_string(),
        }
    }

    pub fn source(&self) -> &str {
        match self {
            CovariateTerm::Linear { name } => name,
            CovariateTerm::Spline { name, .. } => name,
        }
    }
}

/// Specification of a flexible parametric transition model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlexParamSpec {
    /// Baseline spline dimension; ignored when `baseline_knots` is set.
    pub df: usize,
    /// Explicit baseline knots on the log-time scale (overrides `df`).
    pub baseline_knots: Option<KnotVector>,
    pub covariates: Vec<CovariateTerm>,
    pub kind: ModelKind,
    pub clock: Clock,
    /// Orthogonalize the baseline spline columns during fitting.
    pub orthogonalize: bool,
}

impl FlexParamSpec {
    pub fn new(df: usize, kind: ModelKind, clock: Clock) -> Self {
        FlexParamSpec {
            df,
            baseline_knots: None,
            covariates: Vec::new(),
            kind,
            clock,
            orthogonalize: false,
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<CovariateTerm>) -> Self {
        self.covariates = covariates;
        self
    }
}

/// A covariate term with its fit-time expansion resolved (knots placed).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ResolvedTerm {
    Linear { name: String },
    Spline { name: String, spline: FittedSpline },
}

impl ResolvedTerm {
    pub fn width(&self) -> usize {
        match self {
            ResolvedTerm::Linear { .. } => 1,
            ResolvedTerm::Spline { spline, .. } => spline.df(),
        }
    }

    pub fn source(&self) -> &str {
        match self {
            ResolvedTerm::Linear { name } => name,
            ResolvedTerm::Spline { name, .. } => name,
        }
    }

    fn eval_into(&self, value: f64, out: &mut [f64]) {
        match self {
            ResolvedTerm::Linear { .. } => out[0] = value,
            ResolvedTerm::Spline { spline, .. } => {
                spline.eval_into(value, None, out);
            }
        }
    }
}

/// Diagnostic flags recorded at fit time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitFlags {
    /// Hessian at the optimum was not negative definite.
    pub hessian_warning: bool,
    /// A ridge was applied somewhere along the Newton path.
    pub ridged: bool,
    /// The fitted hazard is negative somewhere on the data range.
    pub negative_hazard_in_range: bool,
}

/// A fitted flexible parametric transition model.
#[derive(Debug, Clone)]
pub struct FittedTransitionModel {
    pub kind: ModelKind,
    pub clock: Clock,
    /// Baseline knots on the log clock-time scale.
    pub baseline_knots: KnotVector,
    /// Baseline orthogonalization transform (row-major R), if used.
    pub baseline_transform: Option<Vec<f64>>,
    /// Intercept followed by baseline spline coefficients.
    pub gamma: DVector<f64>,
    /// Covariate design and coefficients.
    pub terms: Vec<ResolvedTerm>,
    pub beta: DVector<f64>,
    /// Variance-covariance of (gamma, beta).
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub flags: FitFlags,
}

impl FittedTransitionModel {
    /// Assemble a model from raw parts (used by file loading, tests, and
    /// synthetic-model construction). `gamma` = [intercept, spline coefs].
    pub fn from_parts(
        kind: ModelKind,
        clock: Clock,
        baseline_knots: KnotVector,
        gamma: Vec<f64>,
        terms: Vec<ResolvedTerm>,
        beta: Vec<f64>,
        vcov: DMatrix<f64>,
    ) -> Self {
        assert_eq!(
            gamma.len(),
            baseline_knots.df() + 1,
            "gamma length mismatch"
        );
        let p_beta: usize = terms.iter().map(|t| t.width()).sum();
        assert_eq!(beta.len(), p_beta, "beta length mismatch");
        assert_eq!(
            vcov.nrows(),
            gamma.len() + beta.len(),
            "vcov dimension mismatch"
        );
        FittedTransitionModel {
            kind,
            clock,
            baseline_knots,
            baseline_transform: None,
            gamma: DVector::from_vec(gamma),
            terms,
            beta: DVector::from_vec(beta),
            vcov,
            loglik: f64::NAN,
            flags: FitFlags::default(),
        }
    }

    /// A constant-hazard model: df=1 with H(t) = rate * t and zero variance.
    pub fn constant_rate(rate: f64, kind: ModelKind, clock: Clock) -> Self {
        Self::weibull(rate, 1.0, kind, clock)
    }

    /// A Weibull model H(t) = scale * t^shape with zero variance.
    pub fn weibull(scale: f64, shape: f64, kind: ModelKind, clock: Clock) -> Self {
        let knots = KnotVector::new(vec![-10.0, 10.0], false).unwrap();
        Self::from_parts(
            kind,
            clock,
            knots,
            vec![scale.ln(), shape],
            vec![],
            vec![],
            DMatrix::zeros(2, 2),
        )
    }

    pub fn n_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Parameter vector (gamma, beta) concatenated.
    pub fn params(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_params());
        v.rows_mut(0, self.gamma.len()).copy_from(&self.gamma);
        v.rows_mut(self.gamma.len(), self.beta.len())
            .copy_from(&self.beta);
        v
    }

    /// Covariate part of the linear predictor for named values.
    pub fn covariate_eta<F: Fn(&str) -> Option<f64>>(
        &self,
        lookup: F,
    ) -> Result<f64, SurvivalError> {
        self.covariate_eta_with(&self.beta, lookup)
    }

    fn covariate_eta_with<F: Fn(&str) -> Option<f64>>(
        &self,
        beta: &DVector<f64>,
        lookup: F,
    ) -> Result<f64, SurvivalError> {
        let mut eta = 0.0;
        let mut k = 0;
        let mut buf = [0.0; 16];
        for term in &self.terms {
            let value = lookup(term.source())
                .ok_or_else(|| SurvivalError::MissingCovariate(term.source().to_string()))?;
            let w = term.width();
            term.eval_into(value, &mut buf[..w]);
            for j in 0..w {
                eta += beta[k + j] * buf[j];
            }
            k += w;
        }
        Ok(eta)
    }

    /// Evaluator bound to a fixed covariate linear predictor, with any
    /// orthogonalization transform folded into the coefficients.
    pub fn curve(&self, covariate_eta: f64) -> HazardCurve {
        HazardCurve::new(
            &self.baseline_knots,
            &self.gamma,
            self.baseline_transform.as_deref(),
            covariate_eta,
        )
    }

    /// Same, but for an externally supplied parameter vector (e.g. a
    /// bootstrap draw) in (gamma, beta) layout.
    pub fn curve_with_params<F: Fn(&str) -> Option<f64>>(
        &self,
        params: &DVector<f64>,
        lookup: F,
    ) -> Result<HazardCurve, SurvivalError> {
        let pg = self.gamma.len();
        let gamma = params.rows(0, pg).into_owned();
        let beta = params.rows(pg, self.beta.len()).into_owned();
        let eta = self.covariate_eta_with(&beta, lookup)?;
        Ok(HazardCurve::new(
            &self.baseline_knots,
            &gamma,
            self.baseline_transform.as_deref(),
            eta,
        ))
    }

    /// Cumulative hazard at clock time `tau` for named covariates. For
    /// excess models this is the cumulative excess hazard.
    pub fn cumhaz<F: Fn(&str) -> Option<f64>>(
        &self,
        tau: f64,
        lookup: F,
    ) -> Result<f64, SurvivalError> {
        Ok(self.curve(self.covariate_eta(lookup)?).cumhaz(tau))
    }

    /// Hazard at clock time `tau` for named covariates.
    pub fn hazard<F: Fn(&str) -> Option<f64>>(
        &self,
        tau: f64,
        lookup: F,
    ) -> Result<f64, SurvivalError> {
        Ok(self.curve(self.covariate_eta(lookup)?).hazard(tau))
    }

    /// Survival (for excess models: relative survival) at `tau`.
    pub fn survival<F: Fn(&str) -> Option<f64>>(
        &self,
        tau: f64,
        lookup: F,
    ) -> Result<f64, SurvivalError> {
        Ok((-self.cumhaz(tau, lookup)?).exp())
    }

    /// Draw one parameter vector from MVN(mean = estimates, cov = vcov).
    pub fn sample_parameters<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<DVector<f64>, SurvivalError> {
        let mean = self.params();
        let p = mean.len();
        if self.vcov.amax() == 0.0 {
            return Ok(mean);
        }
        let l = mvn_factor(&self.vcov)?;
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        Ok(mean + l * z)
    }
}

/// Cholesky-type factor of a PSD matrix, with a symmetric-eigenvalue
/// fallback for semi-definite inputs.
pub fn mvn_factor(vcov: &DMatrix<f64>) -> Result<DMatrix<f64>, SurvivalError> {
    if let Some(chol) = Cholesky::new(vcov.clone()) {
        return Ok(chol.l());
    }
    let eig = nalgebra::SymmetricEigen::new(vcov.clone());
    let tol = -1e-8 * eig.eigenvalues.amax().max(1.0);
    let mut vals = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < tol {
            return Err(SurvivalError::IndefiniteVcov);
        }
        vals.push(l.max(0.0).sqrt());
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(vals)))
}

/// Baseline-plus-offset hazard evaluator for a single covariate pattern.
/// Any orthogonalization transform is folded into the spline coefficients so
/// evaluation is a raw-basis dot product.
#[derive(Debug, Clone)]
pub struct HazardCurve {
    knots: KnotVector,
    /// Raw-basis spline coefficients (post transform-folding), no intercept.
    coefs: Vec<f64>,
    /// Intercept plus covariate linear predictor.
    offset: f64,
}

impl HazardCurve {
    fn new(
        knots: &KnotVector,
        gamma: &DVector<f64>,
        transform: Option<&[f64]>,
        covariate_eta: f64,
    ) -> Self {
        let df = knots.df();
        let spline_coefs = gamma.rows(1, df).into_owned();
        let coefs: Vec<f64> = match transform {
            // eta uses b_orth = b_raw R^{-1}, so raw coefficients are R^{-1} g.
            Some(t) => {
                let r = DMatrix::from_row_slice(df, df, t);
                let folded = r.try_inverse().expect("stored transform invertible") * &spline_coefs;
                folded.iter().copied().collect()
            }
            None => spline_coefs.iter().copied().collect(),
        };
        HazardCurve {
            knots: knots.clone(),
            coefs,
            offset: gamma[0] + covariate_eta,
        }
    }

    fn spline_parts(&self, z: f64) -> (f64, f64) {
        let mut b = [0.0; 16];
        let mut db = [0.0; 16];
        let df = self.coefs.len();
        rcs_basis_into(z, &self.knots, &mut b[..df]);
        rcs_deriv_into(z, &self.knots, &mut db[..df]);
        let mut s = 0.0;
        let mut ds = 0.0;
        for j in 0..df {
            s += self.coefs[j] * b[j];
            ds += self.coefs[j] * db[j];
        }
        (s, ds)
    }

    /// Cumulative hazard at clock time `tau` (0 at tau = 0 by convention).
    pub fn cumhaz(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let (s, _) = self.spline_parts(tau.ln());
        (self.offset + s).exp()
    }

    /// Hazard at `tau`. May be negative where the fitted spline decreases;
    /// callers decide whether to floor. `tau` = 0 evaluates in the limit at
    /// a tiny positive time.
    pub fn hazard(&self, tau: f64) -> f64 {
        let t = tau.max(1e-12);
        let (s, ds) = self.spline_parts(t.ln());
        ds * (self.offset + s).exp() / t
    }

    /// Solve H(T) - H(entry) = target for T in (entry, horizon], or None
    /// when the horizon censors the draw. Bracketed root finding to 1e-9 in
    /// cumulative-hazard units.
    pub fn invert_increment(
        &self,
        entry: f64,
        target: f64,
        horizon: f64,
    ) -> Result<Option<f64>, SurvivalError> {
        let h_entry = self.cumhaz(entry);
        if self.cumhaz(horizon) - h_entry < target {
            return Ok(None);
        }
        let f = |t: f64| self.cumhaz(t) - h_entry - target;
        let root = brent_root(f, entry, horizon, 1e-9)?;
        Ok(Some(root.clamp(entry, horizon)))
    }
}

/// Draw an event time by cumulative-hazard inversion: solves
/// H(T|x) - H(entry|x) = e for a unit-exponential draw `e`, returning None
/// when the horizon censors the draw.
pub fn draw_event_time(
    curve: &HazardCurve,
    entry: f64,
    unit_exponential: f64,
    horizon: f64,
) -> Result<Option<f64>, SurvivalError> {
    curve.invert_increment(entry, unit_exponential, horizon)
}

/// Internal per-record precomputation for the likelihood.
struct PreparedRecord {
    d: bool,
    /// Exit-time basis and derivative (orthogonalized coordinates if used).
    b_exit: Vec<f64>,
    db_exit: Vec<f64>,
    /// Entry-time basis; None when entry == 0 (H(0) = 0 by convention).
    b_entry: Option<Vec<f64>>,
    x: Vec<f64>,
    hstar: f64,
    exit: f64,
}

/// Fit a flexible parametric model by maximum likelihood (Newton-Raphson
/// with analytic gradient and Hessian).
pub fn fit_flexparam(
    data: &SurvivalData,
    spec: &FlexParamSpec,
) -> Result<FittedTransitionModel, SurvivalError> {
    let records = &data.records;
    if records.is_empty() {
        return Err(SurvivalError::NoRecords);
    }
    for (i, r) in records.iter().enumerate() {
        if !(r.exit > r.entry && r.entry >= 0.0) {
            return Err(SurvivalError::BadInterval {
                index: i,
                entry: r.entry,
                exit: r.exit,
            });
        }
        if spec.kind == ModelKind::Excess && r.status {
            match r.expected_rate_at_exit {
                Some(h) if h >= 0.0 => {}
                _ => return Err(SurvivalError::MissingExpectedRate { index: i }),
            }
        }
    }
    let event_times: Vec<f64> = records
        .iter()
        .filter(|r| r.status)
        .map(|r| r.exit)
        .collect();
    if event_times.is_empty() {
        return Err(SurvivalError::NoEvents(records.len()));
    }

    // Baseline knots: centiles of the log event times unless given.
    let baseline_knots = match &spec.baseline_knots {
        Some(k) => k.clone(),
        None => place_knots(&event_times, spec.df, true)?,
    };
    let df = baseline_knots.df();
    if df > 16 {
        return Err(SurvivalError::DfTooLarge(df));
    }
    for term in &spec.covariates {
        if let CovariateTerm::Spline { df, .. } = term {
            if *df > 16 {
                return Err(SurvivalError::DfTooLarge(*df));
            }
        }
    }

    // Resolve covariate terms; spline terms place knots from the fitting
    // rows' source values.
    let mut terms: Vec<ResolvedTerm> = Vec::with_capacity(spec.covariates.len());
    let mut term_cols: Vec<usize> = Vec::with_capacity(spec.covariates.len());
    for term in &spec.covariates {
        let ci = column_index(data, term.source())?;
        term_cols.push(ci);
        match term {
            CovariateTerm::Linear { name } => {
                terms.push(ResolvedTerm::Linear { name: name.clone() });
            }
            CovariateTerm::Spline { name, df, log } => {
                let values: Vec<f64> = records.iter().map(|r| r.covariates[ci]).collect();
                let kv = place_knots(&values, *df, *log)?;
                terms.push(ResolvedTerm::Spline {
                    name: name.clone(),
                    spline: FittedSpline::plain(SplineSpec::new(kv)),
                });
            }
        }
    }
    let p_beta: usize = terms.iter().map(|t| t.width()).sum();
    let p = 1 + df + p_beta;

    // Raw baseline design at exit times, optionally orthogonalized.
    let n = records.len();
    let mut buf = vec![0.0; df];
    let mut dbuf = vec![0.0; df];
    let mut baseline_transform = None;
    let rinv = if spec.orthogonalize {
        let mut exit_design = DMatrix::zeros(n, df);
        for (i, r) in records.iter().enumerate() {
            rcs_basis_into(r.exit.ln(), &baseline_knots, &mut buf);
            for j in 0..df {
                exit_design[(i, j)] = buf[j];
            }
        }
        let (_q, r) = orthogonalize_basis(&exit_design)?;
        baseline_transform = Some(r.transpose().iter().copied().collect::<Vec<f64>>());
        Some(r.try_inverse().expect("R invertible"))
    } else {
        None
    };
    let map_row = |raw: &[f64]| -> Vec<f64> {
        match &rinv {
            Some(ri) => {
                let v = DVector::from_row_slice(raw);
                (ri.transpose() * v).iter().copied().collect()
            }
            None => raw.to_vec(),
        }
    };

    let mut prepared = Vec::with_capacity(n);
    let mut xrow = vec![0.0; p_beta];
    let mut tb = [0.0; 16];
    for r in records.iter() {
        let z = r.exit.ln();
        rcs_basis_into(z, &baseline_knots, &mut buf);
        rcs_deriv_into(z, &baseline_knots, &mut dbuf);
        let b_exit = map_row(&buf);
        let db_exit = map_row(&dbuf);
        let b_entry = if r.entry > 0.0 {
            rcs_basis_into(r.entry.ln(), &baseline_knots, &mut buf);
            Some(map_row(&buf))
        } else {
            None
        };
        let mut k = 0;
        for (term, &ci) in terms.iter().zip(&term_cols) {
            let w = term.width();
            term.eval_into(r.covariates[ci], &mut tb[..w]);
            xrow[k..k + w].copy_from_slice(&tb[..w]);
            k += w;
        }
        prepared.push(PreparedRecord {
            d: r.status,
            b_exit,
            db_exit,
            b_entry,
            x: xrow.clone(),
            hstar: if spec.kind == ModelKind::Excess {
                r.expected_rate_at_exit.unwrap_or(0.0)
            } else {
                0.0
            },
            exit: r.exit,
        });
    }

    // Starting values: exponential with the crude event rate. The raw
    // coefficient vector (1, 0, ...) maps through R when orthogonalizing.
    let total_time: f64 = records.iter().map(|r| r.exit - r.entry).sum();
    let crude = (event_times.len() as f64 / total_time).max(1e-10);
    let mut theta0 = DVector::zeros(p);
    theta0[0] = crude.ln();
    match &baseline_transform {
        None => theta0[1] = 1.0,
        Some(t) => {
            let r = DMatrix::from_row_slice(df, df, t);
            let mut raw = DVector::zeros(df);
            raw[0] = 1.0;
            let g = r * raw;
            for j in 0..df {
                theta0[1 + j] = g[j];
            }
        }
    }

    let objective = |theta: &DVector<f64>| -> Eval { loglik_eval(&prepared, theta, df, p_beta) };
    let opts = Options {
        max_iter: 200,
        tol_loglik: 1e-9,
        tol_grad: 1e-5,
        grad_scale: 1.0,
    };
    let fit = newton::maximize(objective, theta0, &opts)?;

    let (vcov, hessian_warning) = newton::vcov_from_hessian(&fit.hess);

    let gamma = fit.theta.rows(0, 1 + df).into_owned();
    let beta = fit.theta.rows(1 + df, p_beta).into_owned();
    let mut model = FittedTransitionModel {
        kind: spec.kind,
        clock: spec.clock,
        baseline_knots,
        baseline_transform,
        gamma,
        terms,
        beta,
        vcov,
        loglik: fit.loglik,
        flags: FitFlags {
            hessian_warning,
            ridged: fit.ridged,
            negative_hazard_in_range: false,
        },
    };

    // Scan the data range for a negative fitted baseline hazard.
    let lo = records.iter().map(|r| r.exit).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.exit).fold(0.0f64, f64::max);
    let curve = model.curve(0.0);
    let neg = (0..=200).any(|i| {
        let t = lo + (hi - lo) * i as f64 / 200.0;
        curve.hazard(t.max(1e-12)) < 0.0
    });
    model.flags.negative_hazard_in_range = neg;
    Ok(model)
}

fn column_index(data: &SurvivalData, name: &str) -> Result<usize, SurvivalError> {
    data.covariate_names
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| SurvivalError::MissingCovariate(name.to_string()))
}

/// Log-likelihood with analytic gradient and Hessian.
///
/// Per record, with eta = g0 + b(z)'g + x'b, H = exp(eta), s' = db(z)'g,
/// lambda = s' H / tau:
///   l = d log(hstar + lambda) - H(exit) + H(entry)
/// All-cause records have hstar = 0, which reduces the event term to
/// d log lambda = d (log s' - log tau + eta).
fn loglik_eval(
    prepared: &[PreparedRecord],
    theta: &DVector<f64>,
    df: usize,
    p_beta: usize,
) -> Eval {
    let p = 1 + df + p_beta;
    let mut loglik = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    let mut u = vec![0.0; p];
    let mut v = vec![0.0; p];
    for rec in prepared {
        let mut eta = theta[0];
        let mut sprime = 0.0;
        for j in 0..df {
            eta += theta[1 + j] * rec.b_exit[j];
            sprime += theta[1 + j] * rec.db_exit[j];
        }
        for (j, &x) in rec.x.iter().enumerate() {
            eta += theta[1 + df + j] * x;
        }
        let h_exit = eta.exp();
        if !h_exit.is_finite() {
            return invalid(p);
        }
        let lambda = sprime * h_exit / rec.exit;

        // Design row for the cumulative-hazard terms: [1, b, x].
        u[0] = 1.0;
        u[1..1 + df].copy_from_slice(&rec.b_exit);
        u[1 + df..].copy_from_slice(&rec.x);

        loglik -= h_exit;
        for a in 0..p {
            grad[a] -= h_exit * u[a];
            for b in a..p {
                hess[(a, b)] -= h_exit * u[a] * u[b];
            }
        }

        if let Some(b_entry) = &rec.b_entry {
            let mut eta0 = theta[0];
            for j in 0..df {
                eta0 += theta[1 + j] * b_entry[j];
            }
            for (j, &x) in rec.x.iter().enumerate() {
                eta0 += theta[1 + df + j] * x;
            }
            let h_entry = eta0.exp();
            if !h_entry.is_finite() {
                return invalid(p);
            }
            v[0] = 1.0;
            v[1..1 + df].copy_from_slice(b_entry);
            v[1 + df..].copy_from_slice(&rec.x);
            loglik += h_entry;
            for a in 0..p {
                grad[a] += h_entry * v[a];
                for b in a..p {
                    hess[(a, b)] += h_entry * v[a] * v[b];
                }
            }
        }

        if rec.d {
            let total = rec.hstar + lambda;
            if total <= 0.0 {
                // Event with non-positive total hazard: inadmissible point;
                // step-halving retreats.
                return invalid(p);
            }
            loglik += total.ln();
            // d/dtheta log(hstar + lambda) = w * u_ev, with w = lambda/total
            // and u_ev = u + [0, db/s', 0].
            let w = lambda / total;
            v[0] = 1.0;
            for j in 0..df {
                v[1 + j] = rec.b_exit[j] + rec.db_exit[j] / sprime;
            }
            v[1 + df..].copy_from_slice(&rec.x);
            for a in 0..p {
                grad[a] += w * v[a];
            }
            let w2 = w * (1.0 - w);
            for a in 0..p {
                for b in a..p {
                    hess[(a, b)] += w2 * v[a] * v[b];
                }
            }
            // Minus the curvature of log s' itself, only on the spline block.
            for a in 0..df {
                let da = rec.db_exit[a] / sprime;
                for b in a..df {
                    let dbv = rec.db_exit[b] / sprime;
                    hess[(1 + a, 1 + b)] -= w * da * dbv;
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            hess[(a, b)] = hess[(b, a)];
        }
    }
    Eval { loglik, grad, hess }
}

fn invalid(p: usize) -> Eval {
    Eval {
        loglik: f64::NEG_INFINITY,
        grad: DVector::zeros(p),
        hess: DMatrix::zeros(p, p),
    }
}

/// Log-likelihood and analytic gradient of a fitted model's structure at an
/// arbitrary parameter point, over the given data. A diagnostic surface for
/// verifying derivatives externally; a non-finite log-likelihood marks an
/// inadmissible point.
pub fn loglik_and_gradient(
    data: &SurvivalData,
    model: &FittedTransitionModel,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>), SurvivalError> {
    let knots = &model.baseline_knots;
    let df = knots.df();
    let p_beta: usize = model.terms.iter().map(|t| t.width()).sum();
    assert_eq!(theta.len(), 1 + df + p_beta, "parameter length mismatch");
    let rinv = model.baseline_transform.as_ref().map(|t| {
        DMatrix::from_row_slice(df, df, t)
            .try_inverse()
            .expect("stored transform invertible")
    });
    let map_row = |raw: &[f64]| -> Vec<f64> {
        match &rinv {
            Some(ri) => {
                let v = DVector::from_row_slice(raw);
                (ri.transpose() * v).iter().copied().collect()
            }
            None => raw.to_vec(),
        }
    };
    let term_cols: Vec<usize> = model
        .terms
        .iter()
        .map(|t| column_index(data, t.source()))
        .collect::<Result<_, _>>()?;
    let mut buf = vec![0.0; df];
    let mut dbuf = vec![0.0; df];
    let mut tb = [0.0; 16];
    let mut prepared = Vec::with_capacity(data.records.len());
    for (i, r) in data.records.iter().enumerate() {
        if !(r.exit > r.entry && r.entry >= 0.0) {
            return Err(SurvivalError::BadInterval {
                index: i,
                entry: r.entry,
                exit: r.exit,
            });
        }
        rcs_basis_into(r.exit.ln(), knots, &mut buf);
        rcs_deriv_into(r.exit.ln(), knots, &mut dbuf);
        let b_exit = map_row(&buf);
        let db_exit = map_row(&dbuf);
        let b_entry = if r.entry > 0.0 {
            rcs_basis_into(r.entry.ln(), knots, &mut buf);
            Some(map_row(&buf))
        } else {
            None
        };
        let mut x = vec![0.0; p_beta];
        let mut k = 0;
        for (term, &ci) in model.terms.iter().zip(&term_cols) {
            let w = term.width();
            term.eval_into(r.covariates[ci], &mut tb[..w]);
            x[k..k + w].copy_from_slice(&tb[..w]);
            k += w;
        }
        prepared.push(PreparedRecord {
            d: r.status,
            b_exit,
            db_exit,
            b_entry,
            x,
            hstar: if model.kind == ModelKind::Excess {
                r.expected_rate_at_exit.unwrap_or(0.0)
            } else {
                0.0
            },
            exit: r.exit,
        });
    }
    let ev = loglik_eval(&prepared, theta, df, p_beta);
    Ok((ev.loglik, ev.grad))
}
