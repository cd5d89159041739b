//! Monte Carlo prediction engine over a fitted model set.
//!
//! Point estimates come from simulating a large sample of trajectories
//! through the transition structure; confidence intervals from repeated
//! smaller simulations, each with model parameters redrawn from a
//! multivariate normal centred at the estimates (a parametric bootstrap).
//! The expected-rate model is treated as fixed and is never resampled.

use crate::expected::{ExpectedError, ExpectedEval, ExpectedRateModel};
use crate::msm::{CovariatePattern, MsmError, TransitionKind, TransitionMatrix};
use crate::num::percentile;
use crate::survival::{Clock, FittedTransitionModel, HazardCurve, ModelKind, SurvivalError};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("model set has {got} slots but the matrix needs {expected}")]
    SlotCount { got: usize, expected: usize },
    #[error("transition {index} ({kind:?}) is incompatible with the model in slot {slot}")]
    SlotKindMismatch {
        index: usize,
        slot: usize,
        kind: TransitionKind,
    },
    #[error(
        "transition {index} clock {expected:?} does not match the fitted model's clock {got:?}"
    )]
    ClockMismatch {
        index: usize,
        expected: Clock,
        got: Clock,
    },
    #[error("expected-rate transitions must run on the forward clock (transition {0})")]
    ExpectedNeedsForwardClock(usize),
    #[error("covariate '{0}' required by a model is missing from the at-pattern")]
    MissingPatternValue(String),
    #[error(
        "parameter override for slot {slot} has length {got}, model has {expected} parameters"
    )]
    OverrideLength {
        slot: usize,
        got: usize,
        expected: usize,
    },
    #[error("parameter overrides cannot target expected-rate slots (slot {0})")]
    OverrideOnExpectedSlot(usize),
    #[error("time grid must be non-empty, sorted, and within [0, horizon]")]
    BadGrid,
    #[error("empty trajectory sample")]
    EmptySample,
    #[error("grids or state sets of the two results differ")]
    ContrastMismatch,
    #[error("the transition matrix does not partition the illness state")]
    NotPartitioned,
    #[error("reset-clock transition {0} present; the forward-equation oracle refuses semi-Markov structures")]
    ResetClockInOracle(usize),
    #[error(transparent)]
    Msm(#[from] MsmError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Expected(#[from] ExpectedError),
}

/// A filled model slot.
#[derive(Debug, Clone)]
pub enum TransitionModel {
    Expected(ExpectedRateModel),
    Flex(FittedTransitionModel),
}

/// Fitted models indexed by slot, as referenced by a transition matrix.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub slots: Vec<TransitionModel>,
}

impl ModelSet {
    pub fn new(slots: Vec<TransitionModel>) -> Self {
        ModelSet { slots }
    }
}

/// Which simulation algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMethod {
    /// One latent time per outgoing transition; take the minimum.
    Latent,
    /// One draw from the summed intensity; destination multinomial in the
    /// transition hazards at the drawn time.
    TotalHazard,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Subjects for the point-estimate run.
    pub n_point: usize,
    /// Subjects per bootstrap replicate.
    pub n_ci: usize,
    /// Bootstrap replicates.
    pub m_reps: usize,
    pub horizon: f64,
    pub time_grid: Vec<f64>,
    pub seed: u64,
    pub method: SimMethod,
    pub ci_level: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_point: 1_000_000,
            n_ci: 10_000,
            m_reps: 1_000,
            horizon: 15.0,
            time_grid: linspace(0.0, 15.0, 1000),
            seed: 0,
            method: SimMethod::Latent,
            ci_level: 0.95,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.time_grid.is_empty()
            || self.time_grid.windows(2).any(|w| w[1] < w[0])
            || self.time_grid.first().copied().unwrap_or(-1.0) < 0.0
            || self.time_grid.last().copied().unwrap_or(f64::INFINITY) > self.horizon + 1e-12
        {
            return Err(SimError::BadGrid);
        }
        Ok(())
    }
}

/// `points` equally spaced values from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![a];
    }
    (0..points)
        .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Counts of numerical interventions during simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WarningCounters {
    /// Times a non-positive instantaneous intensity was floored.
    pub hazard_floor_hits: u64,
    /// Covariate patterns whose expected-rate evaluation left the table's
    /// knot range somewhere on [0, horizon].
    pub extrapolation_flags: u64,
}

impl WarningCounters {
    fn merge(&mut self, other: WarningCounters) {
        self.hazard_floor_hits += other.hazard_floor_hits;
        self.extrapolation_flags += other.extrapolation_flags;
    }
}

/// One visited state and the diagnosis-clock time it was entered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathStep {
    pub state: u16,
    pub time: f64,
}

/// Simulated trajectories: per subject, the ordered list of states entered.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub n_states: usize,
    pub horizon: f64,
    pub paths: Vec<Vec<PathStep>>,
    pub warnings: WarningCounters,
}

/// A predicted quantity over a time grid, one series per label, with
/// optional confidence bands. Undefined points are NaN.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub kind: String,
    pub time_grid: Vec<f64>,
    pub labels: Vec<String>,
    /// `estimate[label][grid point]`
    pub estimate: Vec<Vec<f64>>,
    pub lower: Option<Vec<Vec<f64>>>,
    pub upper: Option<Vec<Vec<f64>>>,
    pub warnings: WarningCounters,
}

impl PredictionResult {
    /// Tidy export: `time state estimate lower upper` (comma separated).
    /// Undefined values are written as NA.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,state,estimate,lower,upper\n");
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v}")
            } else {
                "NA".to_string()
            }
        };
        for (li, label) in self.labels.iter().enumerate() {
            for (ti, &t) in self.time_grid.iter().enumerate() {
                let lo = self.lower.as_ref().map_or(f64::NAN, |l| l[li][ti]);
                let hi = self.upper.as_ref().map_or(f64::NAN, |u| u[li][ti]);
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    t,
                    label,
                    fmt(self.estimate[li][ti]),
                    fmt(lo),
                    fmt(hi)
                ));
            }
        }
        out
    }
}

/// Debug export of raw trajectories: `subject seq state entry_time`.
pub fn trajectories_to_csv(sample: &TrajectorySample) -> String {
    let mut out = String::from("subject,seq,state,entry_time\n");
    for (subject, path) in sample.paths.iter().enumerate() {
        for (seq, step) in path.iter().enumerate() {
            out.push_str(&format!(
                "{subject},{seq},{},{}\n",
                step.state + 1,
                step.time
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Cumulative expected hazard along the diagnosis clock for one covariate
/// pattern, with yearly prefix sums so arbitrary-time evaluation costs one
/// partial quadrature.
struct ExpectedCache<'a> {
    eval: ExpectedEval<'a>,
    a0: f64,
    c0: f64,
    x_eta: f64,
    prefix: Vec<f64>,
}

impl<'a> ExpectedCache<'a> {
    fn new(
        model: &'a ExpectedRateModel,
        at: &CovariatePattern,
        horizon: f64,
    ) -> Result<(Self, bool), SimError> {
        let mut x1 = Vec::with_capacity(model.covariate_names.len());
        for name in &model.covariate_names {
            x1.push(
                at.get(name)
                    .ok_or_else(|| SimError::MissingPatternValue(name.clone()))?,
            );
        }
        let eval = model.evaluator();
        let x_eta = eval.covariate_eta(&x1)?;
        let years = horizon.ceil().max(1.0) as usize;
        let mut prefix = Vec::with_capacity(years + 1);
        prefix.push(0.0);
        for k in 0..years {
            let inc = eval.cumhaz_eta(k as f64, (k + 1) as f64, at.a0, at.c0, x_eta);
            prefix.push(prefix[k] + inc);
        }
        // Pattern-level extrapolation scan over the horizon.
        let mut extrapolated = false;
        let mut t = 0.0;
        while t <= horizon {
            if eval.extrapolates(t, at.a0, at.c0) {
                extrapolated = true;
                break;
            }
            t += 0.25;
        }
        Ok((
            ExpectedCache {
                eval,
                a0: at.a0,
                c0: at.c0,
                x_eta,
                prefix,
            },
            extrapolated,
        ))
    }

    fn cumhaz(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let k = (t.floor() as usize).min(self.prefix.len() - 1);
        self.prefix[k]
            + self
                .eval
                .cumhaz_eta(k as f64, t, self.a0, self.c0, self.x_eta)
    }

    fn hazard(&self, t: f64) -> f64 {
        self.eval.hazard_eta(t, self.a0, self.c0, self.x_eta)
    }

    /// Solve cumhaz(T) - cumhaz(entry) = target for T in (entry, horizon].
    fn invert(&self, entry: f64, target: f64, horizon: f64) -> Option<f64> {
        let base = self.cumhaz(entry);
        if self.cumhaz(horizon) - base < target {
            return None;
        }
        let f = |t: f64| self.cumhaz(t) - base - target;
        crate::num::brent_root(f, entry, horizon, 1e-9)
            .ok()
            .map(|t| t.clamp(entry, horizon))
    }
}

enum SlotEval<'a> {
    Expected(ExpectedCache<'a>),
    Flex(HazardCurve),
}

struct EngineTransition {
    to: u16,
    slot: usize,
    clock: Clock,
}

/// A transition structure bound to concrete hazard evaluators for one
/// covariate pattern and one parameter vector per slot. Immutable during
/// simulation; shared read-only across worker threads.
pub struct Engine<'a> {
    n_states: usize,
    initial: u16,
    /// All transitions in declaration order.
    trans: Vec<EngineTransition>,
    /// Outgoing transition indices per state, ascending.
    outgoing: Vec<Vec<usize>>,
    evals: Vec<SlotEval<'a>>,
    horizon: f64,
    pattern_extrapolates: bool,
}

impl<'a> Engine<'a> {
    pub fn new(
        models: &'a ModelSet,
        tmat: &TransitionMatrix,
        at: &CovariatePattern,
        horizon: f64,
        overrides: Option<&[Option<DVector<f64>>]>,
    ) -> Result<Self, SimError> {
        let n_slots = tmat.n_slots();
        if models.slots.len() != n_slots {
            return Err(SimError::SlotCount {
                got: models.slots.len(),
                expected: n_slots,
            });
        }
        for (i, t) in tmat.transitions.iter().enumerate() {
            let index = i + 1;
            match (&models.slots[t.slot], t.kind) {
                (TransitionModel::Expected(_), TransitionKind::Expected) => {
                    if t.clock != Clock::Forward {
                        return Err(SimError::ExpectedNeedsForwardClock(index));
                    }
                }
                (TransitionModel::Flex(m), TransitionKind::Excess) => {
                    if m.kind != ModelKind::Excess {
                        return Err(SimError::SlotKindMismatch {
                            index,
                            slot: t.slot,
                            kind: t.kind,
                        });
                    }
                    if m.clock != t.clock {
                        return Err(SimError::ClockMismatch {
                            index,
                            expected: t.clock,
                            got: m.clock,
                        });
                    }
                }
                (TransitionModel::Flex(m), TransitionKind::AllCause) => {
                    if m.kind != ModelKind::AllCause {
                        return Err(SimError::SlotKindMismatch {
                            index,
                            slot: t.slot,
                            kind: t.kind,
                        });
                    }
                    if m.clock != t.clock {
                        return Err(SimError::ClockMismatch {
                            index,
                            expected: t.clock,
                            got: m.clock,
                        });
                    }
                }
                _ => {
                    return Err(SimError::SlotKindMismatch {
                        index,
                        slot: t.slot,
                        kind: t.kind,
                    })
                }
            }
        }
        if let Some(ov) = overrides {
            for (s, o) in ov.iter().enumerate() {
                if let Some(v) = o {
                    match &models.slots[s] {
                        TransitionModel::Expected(_) => {
                            return Err(SimError::OverrideOnExpectedSlot(s))
                        }
                        TransitionModel::Flex(m) => {
                            if v.len() != m.n_params() {
                                return Err(SimError::OverrideLength {
                                    slot: s,
                                    got: v.len(),
                                    expected: m.n_params(),
                                });
                            }
                        }
                    }
                }
            }
        }
        let lookup = |name: &str| at.get(name);
        let missing = |e: SurvivalError| match e {
            SurvivalError::MissingCovariate(n) => SimError::MissingPatternValue(n),
            other => SimError::Survival(other),
        };
        let mut evals = Vec::with_capacity(n_slots);
        let mut pattern_extrapolates = false;
        for (s, slot) in models.slots.iter().enumerate() {
            let ov = overrides.and_then(|o| o.get(s)).and_then(|o| o.as_ref());
            evals.push(match slot {
                TransitionModel::Expected(m) => {
                    let (cache, ex) = ExpectedCache::new(m, at, horizon)?;
                    pattern_extrapolates |= ex;
                    SlotEval::Expected(cache)
                }
                TransitionModel::Flex(m) => SlotEval::Flex(match ov {
                    Some(params) => m.curve_with_params(params, lookup).map_err(missing)?,
                    None => m.curve(m.covariate_eta(lookup).map_err(missing)?),
                }),
            });
        }
        let n_states = tmat.n_states();
        let mut trans = Vec::with_capacity(tmat.transitions.len());
        let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); n_states];
        for (i, t) in tmat.transitions.iter().enumerate() {
            trans.push(EngineTransition {
                to: t.to as u16,
                slot: t.slot,
                clock: t.clock,
            });
            outgoing[t.from].push(i);
        }
        // The total-hazard walker keeps per-transition weights on the stack.
        assert!(
            outgoing.iter().all(|o| o.len() <= 16),
            "states with more than 16 outgoing transitions are not supported"
        );
        Ok(Engine {
            n_states,
            initial: tmat.initial_state()? as u16,
            trans,
            outgoing,
            evals,
            horizon,
            pattern_extrapolates,
        })
    }

    /// Intensity of the 0-based transition `idx` at diagnosis-clock time
    /// `t`, given the entry time into its source state.
    pub fn transition_intensity(&self, idx: usize, entry: f64, t: f64) -> f64 {
        self.intensity(&self.trans[idx], entry, t)
    }

    /// Candidate event time for one transition from `entry`.
    fn candidate(&self, tr: &EngineTransition, entry: f64, draw: f64) -> Option<f64> {
        match &self.evals[tr.slot] {
            SlotEval::Expected(cache) => cache.invert(entry, draw, self.horizon),
            SlotEval::Flex(curve) => match tr.clock {
                Clock::Forward => curve
                    .invert_increment(entry, draw, self.horizon)
                    .ok()
                    .flatten(),
                Clock::Reset => curve
                    .invert_increment(0.0, draw, self.horizon - entry)
                    .ok()
                    .flatten()
                    .map(|t| entry + t),
            },
        }
    }

    /// Transition intensity at diagnosis-clock time `t` given the entry
    /// time into the current state.
    fn intensity(&self, tr: &EngineTransition, entry: f64, t: f64) -> f64 {
        match &self.evals[tr.slot] {
            SlotEval::Expected(cache) => cache.hazard(t),
            SlotEval::Flex(curve) => match tr.clock {
                Clock::Forward => curve.hazard(t),
                Clock::Reset => curve.hazard(t - entry),
            },
        }
    }

    /// Summed cumulative intensity increment over [entry, t].
    fn total_increment(&self, state: u16, entry: f64, t: f64) -> f64 {
        let mut total = 0.0;
        for &i in &self.outgoing[state as usize] {
            let tr = &self.trans[i];
            total += match &self.evals[tr.slot] {
                SlotEval::Expected(cache) => cache.cumhaz(t) - cache.cumhaz(entry),
                SlotEval::Flex(curve) => match tr.clock {
                    Clock::Forward => curve.cumhaz(t) - curve.cumhaz(entry),
                    Clock::Reset => curve.cumhaz(t - entry),
                },
            };
        }
        total
    }

    fn walk_latent<R: Rng>(&self, rng: &mut R) -> Vec<PathStep> {
        let mut path = vec![PathStep {
            state: self.initial,
            time: 0.0,
        }];
        let mut state = self.initial;
        let mut entry = 0.0f64;
        loop {
            let out = &self.outgoing[state as usize];
            if out.is_empty() || entry >= self.horizon {
                break;
            }
            let mut best: Option<(f64, u16)> = None;
            for &i in out {
                let tr = &self.trans[i];
                let e: f64 = rng.sample::<f64, _>(Exp1).max(1e-300);
                if let Some(t) = self.candidate(tr, entry, e) {
                    // Strict < keeps the lowest transition index on ties.
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, tr.to));
                    }
                }
            }
            match best {
                Some((t, to)) => {
                    let t = if t <= entry { entry + 1e-12 } else { t };
                    path.push(PathStep { state: to, time: t });
                    state = to;
                    entry = t;
                }
                None => break,
            }
        }
        path
    }

    fn walk_total<R: Rng>(&self, rng: &mut R, warnings: &mut WarningCounters) -> Vec<PathStep> {
        let mut path = vec![PathStep {
            state: self.initial,
            time: 0.0,
        }];
        let mut state = self.initial;
        let mut entry = 0.0f64;
        loop {
            let out = &self.outgoing[state as usize];
            if out.is_empty() || entry >= self.horizon {
                break;
            }
            let e: f64 = rng.sample::<f64, _>(Exp1).max(1e-300);
            if self.total_increment(state, entry, self.horizon) < e {
                break;
            }
            let f = |t: f64| self.total_increment(state, entry, t) - e;
            let Ok(t) = crate::num::brent_root(f, entry, self.horizon, 1e-9) else {
                break;
            };
            let t = t.clamp(entry, self.horizon).max(entry + 1e-12);
            // Destination proportional to the transition intensities at t,
            // floored at zero (a fitted spline hazard can dip negative).
            let mut weights = [0.0f64; 16];
            let mut total = 0.0;
            for (j, &i) in out.iter().enumerate() {
                let mut h = self.intensity(&self.trans[i], entry, t);
                if h < 0.0 {
                    warnings.hazard_floor_hits += 1;
                    h = 0.0;
                }
                weights[j] = h;
                total += h;
            }
            let to = if total <= 1e-12 {
                warnings.hazard_floor_hits += 1;
                self.trans[out[0]].to
            } else {
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = self.trans[out[out.len() - 1]].to;
                for (j, &i) in out.iter().enumerate() {
                    acc += weights[j];
                    if u < acc {
                        pick = self.trans[i].to;
                        break;
                    }
                }
                pick
            };
            path.push(PathStep { state: to, time: t });
            state = to;
            entry = t;
        }
        path
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Counter-based substream derivation: the stream for a unit of work is a
/// pure function of (seed, replicate, unit), so subject streams pair across
/// at-patterns and stay independent across subjects and replicates.
fn substream(seed: u64, replicate: u64, unit: u64) -> u64 {
    mix(mix(mix(seed).wrapping_add(replicate)).wrapping_add(unit))
}

const PARAM_STREAM_TAG: u64 = 1 << 63;

fn simulate_batch(
    engine: &Engine,
    n: usize,
    seed: u64,
    replicate: u64,
    method: SimMethod,
) -> (Vec<Vec<PathStep>>, WarningCounters) {
    // Fixed-size chunks with an ordered merge keep the output identical for
    // any thread count.
    let chunk = 4096;
    let results: Vec<(Vec<Vec<PathStep>>, WarningCounters)> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(n);
            let mut paths = Vec::with_capacity(hi - lo);
            let mut warnings = WarningCounters::default();
            for subject in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, replicate, subject as u64));
                let path = match method {
                    SimMethod::Latent => engine.walk_latent(&mut rng),
                    SimMethod::TotalHazard => engine.walk_total(&mut rng, &mut warnings),
                };
                paths.push(path);
            }
            (paths, warnings)
        })
        .collect();
    let mut paths = Vec::with_capacity(n);
    let mut warnings = WarningCounters::default();
    for (p, w) in results {
        paths.extend(p);
        warnings.merge(w);
    }
    (paths, warnings)
}

/// Simulate `config.n_point` subjects through the model set at the MLE (or
/// at per-slot `parameter_override` vectors). Reproducible: the same seed
/// and inputs give bit-identical output for any thread count.
pub fn simulate(
    models: &ModelSet,
    tmat: &TransitionMatrix,
    at: &CovariatePattern,
    config: &SimConfig,
    parameter_override: Option<&[Option<DVector<f64>>]>,
) -> Result<TrajectorySample, SimError> {
    config.validate()?;
    let engine = Engine::new(models, tmat, at, config.horizon, parameter_override)?;
    let (paths, mut warnings) =
        simulate_batch(&engine, config.n_point, config.seed, 0, config.method);
    if engine.pattern_extrapolates {
        warnings.extrapolation_flags += 1;
    }
    Ok(TrajectorySample {
        n_states: engine.n_states,
        horizon: config.horizon,
        paths,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Quantities over a trajectory sample
// ---------------------------------------------------------------------------

/// Per-state grid accumulators built in one pass over the sample.
struct GridStats {
    n: f64,
    /// occupation[s][i]: subjects in state s at grid point i.
    occupation: Vec<Vec<f64>>,
    /// ever[s][i]: subjects that have entered state s by grid point i.
    ever: Vec<Vec<f64>>,
    /// Piecewise-linear accumulators for total time in state by grid point:
    /// time[s][i] = los_const[s][i] + los_slope[s][i] * grid[i].
    los_const: Vec<Vec<f64>>,
    los_slope: Vec<Vec<f64>>,
}

fn grid_index(grid: &[f64], t: f64) -> usize {
    grid.partition_point(|&g| g < t)
}

fn grid_stats(sample: &TrajectorySample, grid: &[f64]) -> Result<GridStats, SimError> {
    if sample.paths.is_empty() {
        return Err(SimError::EmptySample);
    }
    let s = sample.n_states;
    let g = grid.len();
    let mut occ_diff = vec![vec![0.0f64; g + 1]; s];
    let mut ever_diff = vec![vec![0.0f64; g + 1]; s];
    let mut const_diff = vec![vec![0.0f64; g + 1]; s];
    let mut slope_diff = vec![vec![0.0f64; g + 1]; s];
    for path in &sample.paths {
        for (k, step) in path.iter().enumerate() {
            let st = step.state as usize;
            let t_in = step.time;
            let i_in = grid_index(grid, t_in);
            ever_diff[st][i_in] += 1.0;
            occ_diff[st][i_in] += 1.0;
            slope_diff[st][i_in] += 1.0;
            const_diff[st][i_in] -= t_in;
            if let Some(next) = path.get(k + 1) {
                let t_out = next.time;
                let i_out = grid_index(grid, t_out);
                occ_diff[st][i_out] -= 1.0;
                slope_diff[st][i_out] -= 1.0;
                const_diff[st][i_out] += t_out;
            }
        }
    }
    let prefix = |d: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        d.iter()
            .map(|row| {
                let mut acc = 0.0;
                row[..g]
                    .iter()
                    .map(|&v| {
                        acc += v;
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    Ok(GridStats {
        n: sample.paths.len() as f64,
        occupation: prefix(&occ_diff),
        ever: prefix(&ever_diff),
        los_const: prefix(&const_diff),
        los_slope: prefix(&slope_diff),
    })
}

/// State-occupation probabilities at each grid time, one series per state
/// (partition components reported separately).
pub fn transition_probabilities(
    sample: &TrajectorySample,
    tmat: &TransitionMatrix,
    grid: &[f64],
) -> Result<PredictionResult, SimError> {
    let stats = grid_stats(sample, grid)?;
    let estimate = stats
        .occupation
        .iter()
        .map(|row| row.iter().map(|&c| c / stats.n).collect())
        .collect();
    Ok(PredictionResult {
        kind: "probability".into(),
        time_grid: grid.to_vec(),
        labels: tmat.state_names.clone(),
        estimate,
        lower: None,
        upper: None,
        warnings: sample.warnings,
    })
}

/// Mean total time spent in each state during [0, t], computed exactly from
/// trajectory segments.
pub fn length_of_stay(
    sample: &TrajectorySample,
    tmat: &TransitionMatrix,
    grid: &[f64],
) -> Result<PredictionResult, SimError> {
    let stats = grid_stats(sample, grid)?;
    let estimate = (0..sample.n_states)
        .map(|s| {
            grid.iter()
                .enumerate()
                .map(|(i, &t)| (stats.los_const[s][i] + stats.los_slope[s][i] * t) / stats.n)
                .collect()
        })
        .collect();
    Ok(PredictionResult {
        kind: "length_of_stay".into(),
        time_grid: grid.to_vec(),
        labels: tmat.state_names.clone(),
        estimate,
        lower: None,
        upper: None,
        warnings: sample.warnings,
    })
}

/// Fraction of subjects whose path has entered each state by time t.
pub fn ever_visit(
    sample: &TrajectorySample,
    tmat: &TransitionMatrix,
    grid: &[f64],
) -> Result<PredictionResult, SimError> {
    let stats = grid_stats(sample, grid)?;
    let estimate = stats
        .ever
        .iter()
        .map(|row| row.iter().map(|&c| c / stats.n).collect())
        .collect();
    Ok(PredictionResult {
        kind: "ever_visit".into(),
        time_grid: grid.to_vec(),
        labels: tmat.state_names.clone(),
        estimate,
        lower: None,
        upper: None,
        warnings: sample.warnings,
    })
}

/// How the excess proportion is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProportionMode {
    /// P(in excess component) / P(in either component) at t.
    CurrentState,
    /// P(ever entered excess) / P(ever entered either) by t.
    EverVisited,
}

/// Proportion of the illness probability attributable to the excess
/// component. Points where the denominator count falls below 10 subjects
/// are reported as NaN.
pub fn proportion_excess(
    sample: &TrajectorySample,
    tmat: &TransitionMatrix,
    grid: &[f64],
    mode: ProportionMode,
) -> Result<PredictionResult, SimError> {
    let (comp_e, comp_x) = tmat.partition_pair().ok_or(SimError::NotPartitioned)?;
    let stats = grid_stats(sample, grid)?;
    let series: Vec<f64> = match mode {
        ProportionMode::CurrentState => stats.occupation[comp_x]
            .iter()
            .zip(&stats.occupation[comp_e])
            .map(|(&x, &e)| if x + e < 10.0 { f64::NAN } else { x / (x + e) })
            .collect(),
        ProportionMode::EverVisited => stats.ever[comp_x]
            .iter()
            .zip(&stats.ever[comp_e])
            .map(|(&x, &e)| if x + e < 10.0 { f64::NAN } else { x / (x + e) })
            .collect(),
    };
    Ok(PredictionResult {
        kind: "proportion_excess".into(),
        time_grid: grid.to_vec(),
        labels: vec!["proportion_excess".into()],
        estimate: vec![series],
        lower: None,
        upper: None,
        warnings: sample.warnings,
    })
}

/// Elementwise contrast of two results on identical grids and state sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastKind {
    Difference,
    Ratio,
}

/// at2 versus at1: elementwise `at2 - at1` or `at2 / at1` (0/0 is NaN).
pub fn contrast(
    at1: &PredictionResult,
    at2: &PredictionResult,
    kind: ContrastKind,
) -> Result<PredictionResult, SimError> {
    if at1.time_grid != at2.time_grid || at1.labels != at2.labels {
        return Err(SimError::ContrastMismatch);
    }
    let estimate = at1
        .estimate
        .iter()
        .zip(&at2.estimate)
        .map(|(r1, r2)| {
            r1.iter()
                .zip(r2)
                .map(|(&a, &b)| match kind {
                    ContrastKind::Difference => b - a,
                    ContrastKind::Ratio => {
                        if a == 0.0 && b == 0.0 {
                            f64::NAN
                        } else {
                            b / a
                        }
                    }
                })
                .collect()
        })
        .collect();
    let mut warnings = at1.warnings;
    warnings.merge(at2.warnings);
    Ok(PredictionResult {
        kind: match kind {
            ContrastKind::Difference => "difference".into(),
            ContrastKind::Ratio => "ratio".into(),
        },
        time_grid: at1.time_grid.clone(),
        labels: at1.labels.clone(),
        estimate,
        lower: None,
        upper: None,
        warnings,
    })
}

/// Replace the two partition-component series by their sum under a merged
/// label, leaving other series untouched.
pub fn merge_partition(
    result: &PredictionResult,
    tmat: &TransitionMatrix,
    merged_label: &str,
) -> Result<PredictionResult, SimError> {
    let (comp_e, comp_x) = tmat.partition_pair().ok_or(SimError::NotPartitioned)?;
    let mut labels = Vec::new();
    let mut estimate: Vec<Vec<f64>> = Vec::new();
    for (i, label) in result.labels.iter().enumerate() {
        if i == comp_e {
            labels.push(merged_label.to_string());
            estimate.push(
                result.estimate[comp_e]
                    .iter()
                    .zip(&result.estimate[comp_x])
                    .map(|(a, b)| a + b)
                    .collect(),
            );
        } else if i != comp_x {
            labels.push(label.clone());
            estimate.push(result.estimate[i].clone());
        }
    }
    Ok(PredictionResult {
        kind: result.kind.clone(),
        time_grid: result.time_grid.clone(),
        labels,
        estimate,
        lower: None,
        upper: None,
        warnings: result.warnings,
    })
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// What to predict.
#[derive(Debug, Clone)]
pub enum Quantity {
    Probability,
    LengthOfStay,
    EverVisit,
    ProportionExcess(ProportionMode),
}

/// A prediction request: the quantity, and optionally a second covariate
/// pattern with a contrast kind for at2-versus-at1 comparisons.
#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub quantity: Quantity,
    pub at2: Option<CovariatePattern>,
    pub contrast: Option<ContrastKind>,
}

impl PredictionRequest {
    pub fn point(quantity: Quantity) -> Self {
        PredictionRequest {
            quantity,
            at2: None,
            contrast: None,
        }
    }
}

fn compute_quantity(
    sample1: &TrajectorySample,
    sample2: Option<&TrajectorySample>,
    tmat: &TransitionMatrix,
    grid: &[f64],
    request: &PredictionRequest,
) -> Result<PredictionResult, SimError> {
    let base = |s: &TrajectorySample| -> Result<PredictionResult, SimError> {
        match request.quantity {
            Quantity::Probability => transition_probabilities(s, tmat, grid),
            Quantity::LengthOfStay => length_of_stay(s, tmat, grid),
            Quantity::EverVisit => ever_visit(s, tmat, grid),
            Quantity::ProportionExcess(mode) => proportion_excess(s, tmat, grid, mode),
        }
    };
    let r1 = base(sample1)?;
    match (sample2, request.contrast) {
        (Some(s2), Some(kind)) => contrast(&r1, &base(s2)?, kind),
        _ => Ok(r1),
    }
}

/// Point estimate at the MLE plus percentile confidence bands from the
/// parametric bootstrap: each replicate redraws every fitted slot's
/// parameters (a shared slot receives one draw used by all its
/// transitions), simulates `config.n_ci` subjects, and recomputes the
/// quantity. Expected-rate slots are never resampled. Contrast replicates
/// share parameter draws and subject RNG substreams across the two
/// patterns, so the bands are paired.
pub fn bootstrap_ci(
    models: &ModelSet,
    tmat: &TransitionMatrix,
    at: &CovariatePattern,
    request: &PredictionRequest,
    config: &SimConfig,
) -> Result<PredictionResult, SimError> {
    config.validate()?;
    let grid = &config.time_grid;
    let point1 = simulate(models, tmat, at, config, None)?;
    let point2 = match &request.at2 {
        Some(at2) => Some(simulate(models, tmat, at2, config, None)?),
        None => None,
    };
    let mut result = compute_quantity(&point1, point2.as_ref(), tmat, grid, request)?;

    if config.m_reps == 0 {
        return Ok(result);
    }

    // One parameter draw per (replicate, slot); identical across patterns.
    let n_slots = models.slots.len();
    let mut draws: Vec<Vec<Option<DVector<f64>>>> = Vec::with_capacity(config.m_reps);
    for rep in 1..=config.m_reps as u64 {
        let mut per_slot = Vec::with_capacity(n_slots);
        for (s, slot) in models.slots.iter().enumerate() {
            per_slot.push(match slot {
                TransitionModel::Expected(_) => None,
                TransitionModel::Flex(m) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(substream(
                        config.seed,
                        rep,
                        PARAM_STREAM_TAG | s as u64,
                    ));
                    Some(m.sample_parameters(&mut rng)?)
                }
            });
        }
        draws.push(per_slot);
    }

    let rep_results: Vec<Result<(PredictionResult, WarningCounters), SimError>> = draws
        .par_iter()
        .enumerate()
        .map(|(ri, per_slot)| {
            let rep = (ri + 1) as u64;
            let engine1 = Engine::new(models, tmat, at, config.horizon, Some(per_slot))?;
            let (paths1, mut w) =
                simulate_batch(&engine1, config.n_ci, config.seed, rep, config.method);
            let sample1 = TrajectorySample {
                n_states: engine1.n_states,
                horizon: config.horizon,
                paths: paths1,
                warnings: WarningCounters::default(),
            };
            let sample2 = match &request.at2 {
                Some(at2) => {
                    let engine2 = Engine::new(models, tmat, at2, config.horizon, Some(per_slot))?;
                    let (paths2, w2) =
                        simulate_batch(&engine2, config.n_ci, config.seed, rep, config.method);
                    w.merge(w2);
                    Some(TrajectorySample {
                        n_states: engine2.n_states,
                        horizon: config.horizon,
                        paths: paths2,
                        warnings: WarningCounters::default(),
                    })
                }
                None => None,
            };
            let q = compute_quantity(&sample1, sample2.as_ref(), tmat, grid, request)?;
            Ok((q, w))
        })
        .collect();

    let mut reps = Vec::with_capacity(config.m_reps);
    for r in rep_results {
        let (q, w) = r?;
        result.warnings.merge(w);
        reps.push(q);
    }

    let alpha = 1.0 - config.ci_level;
    let n_labels = result.labels.len();
    let n_grid = grid.len();
    let mut lower = vec![vec![f64::NAN; n_grid]; n_labels];
    let mut upper = vec![vec![f64::NAN; n_grid]; n_labels];
    let mut values = Vec::with_capacity(config.m_reps);
    for li in 0..n_labels {
        for ti in 0..n_grid {
            values.clear();
            for rep in &reps {
                let v = rep.estimate[li][ti];
                if v.is_finite() {
                    values.push(v);
                }
            }
            if values.len() >= 2 {
                values.sort_by(|a, b| a.total_cmp(b));
                lower[li][ti] = percentile(&values, alpha / 2.0);
                upper[li][ti] = percentile(&values, 1.0 - alpha / 2.0);
            }
        }
    }
    result.lower = Some(lower);
    result.upper = Some(upper);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msm::{illness_death_merged, illness_death_partitioned};
    use crate::survival::FittedTransitionModel as Ftm;
    use approx::assert_abs_diff_eq;

    fn pattern() -> CovariatePattern {
        CovariatePattern::new(30.0, 1995.0)
    }

    fn merged_models(l12: f64, l13: f64, mu: f64) -> ModelSet {
        ModelSet::new(vec![
            TransitionModel::Flex(Ftm::constant_rate(l12, ModelKind::AllCause, Clock::Forward)),
            TransitionModel::Flex(Ftm::constant_rate(l13, ModelKind::AllCause, Clock::Forward)),
            TransitionModel::Flex(Ftm::constant_rate(mu, ModelKind::AllCause, Clock::Reset)),
        ])
    }

    fn small_config(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_point: n,
            n_ci: 500,
            m_reps: 0,
            horizon: 15.0,
            time_grid: linspace(0.0, 15.0, 61),
            seed,
            method: SimMethod::Latent,
            ci_level: 0.95,
        }
    }

    #[test]
    fn zero_hazards_stay_in_initial_state() {
        let tmat = illness_death_merged();
        let models = merged_models(0.0, 0.0, 0.0);
        let cfg = small_config(2000, 9);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        assert!(sample.paths.iter().all(|p| p.len() == 1 && p[0].state == 0));
        let probs = transition_probabilities(&sample, &tmat, &cfg.time_grid).unwrap();
        for ti in 0..cfg.time_grid.len() {
            assert_eq!(probs.estimate[0][ti], 1.0);
        }
        // LOS in the initial state equals t exactly.
        let los = length_of_stay(&sample, &tmat, &cfg.time_grid).unwrap();
        for (ti, &t) in cfg.time_grid.iter().enumerate() {
            assert_abs_diff_eq!(los.estimate[0][ti], t, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_hazard_competing_risks_closed_form() {
        // P(still in state 1 at t) = exp(-(l12 + l13) t).
        let tmat = illness_death_merged();
        let models = merged_models(0.1, 0.2, 0.0);
        let n = 100_000;
        let cfg = small_config(n, 11);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let probs = transition_probabilities(&sample, &tmat, &cfg.time_grid).unwrap();
        let ti = cfg
            .time_grid
            .iter()
            .position(|&t| (t - 2.0).abs() < 1e-9)
            .unwrap();
        let want = (-0.6f64).exp();
        let se = (want * (1.0 - want) / n as f64).sqrt();
        assert!(
            (probs.estimate[0][ti] - want).abs() < 4.0 * se,
            "P11(2) = {} vs {want} (se {se})",
            probs.estimate[0][ti]
        );
        // Destination split among leavers: l12 / (l12 + l13) = 1/3.
        let p12 = probs.estimate[1][ti];
        let left = 1.0 - probs.estimate[0][ti];
        assert!((p12 / left - 1.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn probabilities_lie_on_the_simplex() {
        let tmat = illness_death_merged();
        let models = merged_models(0.15, 0.1, 0.3);
        let cfg = small_config(20_000, 13);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let probs = transition_probabilities(&sample, &tmat, &cfg.time_grid).unwrap();
        assert_eq!(probs.estimate[0][0], 1.0);
        for ti in 0..cfg.time_grid.len() {
            let sum: f64 = (0..4).map(|s| probs.estimate[s][ti]).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
        // Absorbing-state probabilities are non-decreasing.
        for s in [2usize, 3] {
            for w in probs.estimate[s].windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }

    #[test]
    fn los_partitions_time_exactly() {
        let tmat = illness_death_merged();
        let models = merged_models(0.2, 0.1, 0.4);
        let cfg = small_config(10_000, 17);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let los = length_of_stay(&sample, &tmat, &cfg.time_grid).unwrap();
        for (ti, &t) in cfg.time_grid.iter().enumerate() {
            let sum: f64 = (0..4).map(|s| los.estimate[s][ti]).sum();
            assert_abs_diff_eq!(sum, t, epsilon = 1e-12);
        }
    }

    #[test]
    fn los_matches_closed_form_for_pure_death() {
        // Single constant hazard out of state 1:
        // E[time in state 1 by t] = (1 - exp(-l t)) / l.
        let tmat = illness_death_merged();
        let l = 0.3;
        let models = merged_models(0.0, l, 0.0);
        let n = 100_000;
        let cfg = small_config(n, 23);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let los = length_of_stay(&sample, &tmat, &cfg.time_grid).unwrap();
        for &t in &[2.0, 5.0, 10.0] {
            let ti = cfg
                .time_grid
                .iter()
                .position(|&g| (g - t).abs() < 1e-9)
                .unwrap();
            let want = (1.0 - (-l * t).exp()) / l;
            let se = t / (n as f64).sqrt();
            assert!(
                (los.estimate[0][ti] - want).abs() < 3.0 * se,
                "LOS(1,{t}) = {} vs {want}",
                los.estimate[0][ti]
            );
        }
    }

    #[test]
    fn ever_visit_counts_entries() {
        let tmat = illness_death_merged();
        let models = merged_models(0.2, 0.0, 10.0);
        let cfg = small_config(20_000, 29);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let ever = ever_visit(&sample, &tmat, &cfg.time_grid).unwrap();
        let occ = transition_probabilities(&sample, &tmat, &cfg.time_grid).unwrap();
        let last = cfg.time_grid.len() - 1;
        // Everyone starts in state 1.
        assert_eq!(ever.estimate[0][last], 1.0);
        // Ever-visited illness >= currently-in illness, and monotone.
        for ti in 0..=last {
            assert!(ever.estimate[1][ti] >= occ.estimate[1][ti] - 1e-12);
        }
        for w in ever.estimate[1].windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    fn partitioned_models(he: f64, hx: f64, d: f64, mu: f64) -> ModelSet {
        // Synthetic expected model: constant rate he via a flat Poisson fit.
        let rows: Vec<crate::expected::RateRow> = (1990..2030)
            .flat_map(|year| {
                (18..100).map(move |age| crate::expected::RateRow {
                    year,
                    sex: 0,
                    age,
                    d: he * 100000.0,
                    y: 100000.0,
                })
            })
            .collect();
        let table = crate::expected::RateTable::new(rows).unwrap();
        let age_spec = crate::spline::SplineSpec::new(
            crate::spline::place_knots(&table.ages(), 1, false).unwrap(),
        );
        let year_spec = crate::spline::SplineSpec::new(
            crate::spline::place_knots(&table.years(), 1, false).unwrap(),
        );
        let expected = crate::expected::fit_expected(&table, age_spec, year_spec, &[]).unwrap();
        ModelSet::new(vec![
            TransitionModel::Expected(expected),
            TransitionModel::Flex(Ftm::constant_rate(hx, ModelKind::Excess, Clock::Forward)),
            TransitionModel::Flex(Ftm::constant_rate(d, ModelKind::AllCause, Clock::Forward)),
            TransitionModel::Flex(Ftm::constant_rate(mu, ModelKind::AllCause, Clock::Reset)),
        ])
    }

    #[test]
    fn symmetric_partition_components_balance() {
        // Excess hazard equal to the expected hazard, no deaths: the two
        // components are occupied equally and the proportion excess is
        // about one half.
        let rate = 0.05;
        let tmat = illness_death_partitioned();
        let models = partitioned_models(rate, rate, 0.0, 0.0);
        let n = 100_000;
        let cfg = small_config(n, 31);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let probs = transition_probabilities(&sample, &tmat, &cfg.time_grid).unwrap();
        let last = cfg.time_grid.len() - 1;
        let p_e = probs.estimate[1][last];
        let p_x = probs.estimate[2][last];
        let se = (p_e * (1.0 - p_e) / n as f64).sqrt();
        assert!(
            (p_e - p_x).abs() < 3.0 * (2.0f64).sqrt() * se,
            "{p_e} vs {p_x}"
        );

        let prop = proportion_excess(&sample, &tmat, &cfg.time_grid, ProportionMode::CurrentState)
            .unwrap();
        let p = prop.estimate[0][last];
        assert!((p - 0.5).abs() < 0.02, "proportion {p}");

        // Ever-visited mode agrees with a direct path-counting oracle.
        let prop_ever =
            proportion_excess(&sample, &tmat, &cfg.time_grid, ProportionMode::EverVisited).unwrap();
        let t = cfg.time_grid[last];
        let mut ever_x = 0usize;
        let mut ever_any = 0usize;
        for path in &sample.paths {
            let hit_x = path.iter().any(|s| s.state == 2 && s.time <= t);
            let hit_e = path.iter().any(|s| s.state == 1 && s.time <= t);
            if hit_x {
                ever_x += 1;
            }
            if hit_x || hit_e {
                ever_any += 1;
            }
        }
        assert_abs_diff_eq!(
            prop_ever.estimate[0][last],
            ever_x as f64 / ever_any as f64,
            epsilon = 1e-12
        );
    }

    #[test]
    fn proportion_excess_is_one_without_expected_entries() {
        let tmat = illness_death_partitioned();
        let models = partitioned_models(1e-12, 0.1, 0.0, 0.0);
        let cfg = small_config(20_000, 37);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let prop = proportion_excess(&sample, &tmat, &cfg.time_grid, ProportionMode::CurrentState)
            .unwrap();
        for (ti, v) in prop.estimate[0].iter().enumerate() {
            if v.is_finite() {
                assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
            } else {
                // Undefined early points while the denominator is under 10.
                assert!(cfg.time_grid[ti] < 1.0);
            }
        }
    }

    #[test]
    fn determinism_same_seed_same_paths() {
        let tmat = illness_death_partitioned();
        let models = partitioned_models(0.02, 0.03, 0.05, 0.2);
        let cfg = small_config(5_000, 99);
        let s1 = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let s2 = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        assert_eq!(s1.paths, s2.paths);
    }

    #[test]
    fn merged_partition_matches_four_state_model() {
        // Partitioned model with shared onward slot vs the merged model
        // whose illness intensity is the sum of the components.
        let he = 0.04;
        let hx = 0.06;
        let d = 0.05;
        let mu = 0.25;
        let n = 100_000;
        let tmat_p = illness_death_partitioned();
        let models_p = partitioned_models(he, hx, d, mu);
        let cfg = small_config(n, 41);
        let sample_p = simulate(&models_p, &tmat_p, &pattern(), &cfg, None).unwrap();
        let probs_p = transition_probabilities(&sample_p, &tmat_p, &cfg.time_grid).unwrap();
        let merged = merge_partition(&probs_p, &tmat_p, "illness").unwrap();

        let tmat_m = illness_death_merged();
        let models_m = merged_models(he + hx, d, mu);
        let sample_m = simulate(&models_m, &tmat_m, &pattern(), &cfg, None).unwrap();
        let probs_m = transition_probabilities(&sample_m, &tmat_m, &cfg.time_grid).unwrap();

        for &t in &[2.0, 5.0, 10.0, 15.0] {
            let ti = cfg
                .time_grid
                .iter()
                .position(|&g| (g - t).abs() < 1e-9)
                .unwrap();
            // Merged labels: alive, illness, dead_pre, dead_post.
            for (mi, pm) in [(0usize, 0usize), (1, 1), (2, 2), (3, 3)] {
                let a = merged.estimate[mi][ti];
                let b = probs_m.estimate[pm][ti];
                let se = ((a * (1.0 - a) + b * (1.0 - b)) / n as f64)
                    .sqrt()
                    .max(1e-6);
                assert!(
                    (a - b).abs() < 4.0 * se,
                    "state {mi} at t={t}: partitioned {a} vs merged {b} (se {se})"
                );
            }
        }
    }

    #[test]
    fn total_hazard_method_agrees_with_latent() {
        let tmat = illness_death_merged();
        let models = merged_models(0.12, 0.08, 0.3);
        let n = 50_000;
        let mut cfg = small_config(n, 43);
        let s_lat = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        cfg.method = SimMethod::TotalHazard;
        let s_tot = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let p_lat = transition_probabilities(&s_lat, &tmat, &cfg.time_grid).unwrap();
        let p_tot = transition_probabilities(&s_tot, &tmat, &cfg.time_grid).unwrap();
        for s in 0..4 {
            for &t in &[1.0, 5.0, 12.0] {
                let ti = cfg
                    .time_grid
                    .iter()
                    .position(|&g| (g - t).abs() < 1e-9)
                    .unwrap();
                let a = p_lat.estimate[s][ti];
                let b = p_tot.estimate[s][ti];
                let se = ((a * (1.0 - a) + b * (1.0 - b)) / n as f64)
                    .sqrt()
                    .max(1e-6);
                assert!((a - b).abs() < 4.0 * se, "state {s} t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn total_hazard_destination_split_is_proportional() {
        let tmat = illness_death_merged();
        let models = merged_models(0.3, 0.1, 0.0);
        let mut cfg = small_config(50_000, 47);
        cfg.method = SimMethod::TotalHazard;
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let mut to_ill = 0.0;
        let mut moved = 0.0;
        for p in &sample.paths {
            if p.len() > 1 {
                moved += 1.0;
                if p[1].state == 1 {
                    to_ill += 1.0;
                }
            }
        }
        let frac = to_ill / moved;
        let want: f64 = 0.3 / 0.4;
        let se = (want * (1.0 - want) / moved).sqrt();
        assert!((frac - want).abs() < 3.0 * se, "{frac} vs {want}");
    }

    #[test]
    fn total_hazard_zero_hazards_identical_to_latent() {
        let tmat = illness_death_merged();
        let models = merged_models(0.0, 0.0, 0.0);
        let mut cfg = small_config(2000, 51);
        let s_lat = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        cfg.method = SimMethod::TotalHazard;
        let s_tot = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        assert_eq!(s_lat.paths, s_tot.paths);
    }

    #[test]
    fn contrast_of_identical_results_is_null() {
        let tmat = illness_death_merged();
        let models = merged_models(0.1, 0.1, 0.2);
        let cfg = small_config(5_000, 53);
        let sample = simulate(&models, &tmat, &pattern(), &cfg, None).unwrap();
        let p = transition_probabilities(&sample, &tmat, &cfg.time_grid).unwrap();
        let d = contrast(&p, &p, ContrastKind::Difference).unwrap();
        let r = contrast(&p, &p, ContrastKind::Ratio).unwrap();
        for s in 0..4 {
            for ti in 0..cfg.time_grid.len() {
                assert_eq!(d.estimate[s][ti], 0.0);
                let v = r.estimate[s][ti];
                assert!(v.is_nan() || v == 1.0);
            }
        }
        // Differences sum to zero across states at every time.
        for ti in 0..cfg.time_grid.len() {
            let sum: f64 = (0..4).map(|s| d.estimate[s][ti]).sum();
            assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bootstrap_zero_vcov_collapses_to_point() {
        let tmat = illness_death_merged();
        let models = merged_models(0.2, 0.1, 0.3);
        let cfg = SimConfig {
            n_point: 20_000,
            n_ci: 2_000,
            m_reps: 40,
            horizon: 10.0,
            time_grid: linspace(0.0, 10.0, 21),
            seed: 57,
            method: SimMethod::Latent,
            ci_level: 0.95,
        };
        let req = PredictionRequest::point(Quantity::Probability);
        let res = bootstrap_ci(&models, &tmat, &pattern(), &req, &cfg).unwrap();
        let lower = res.lower.as_ref().unwrap();
        let upper = res.upper.as_ref().unwrap();
        // All parameter draws equal the MLE, so bands reflect only the
        // Monte Carlo noise of n_ci subjects around the point estimate.
        for s in 0..4 {
            for ti in 0..cfg.time_grid.len() {
                let p = res.estimate[s][ti];
                let se = (p.max(1e-9) * (1.0 - p).max(1e-9) / cfg.n_ci as f64).sqrt();
                assert!(lower[s][ti] >= p - 5.0 * se - 1e-9, "s={s} ti={ti}");
                assert!(upper[s][ti] <= p + 5.0 * se + 1e-9, "s={s} ti={ti}");
                assert!(lower[s][ti] <= p + 1e-12 && p - 1e-12 <= upper[s][ti]);
            }
        }
    }

    #[test]
    fn paired_contrast_of_same_pattern_has_zero_width() {
        let tmat = illness_death_merged();
        let models = merged_models(0.2, 0.1, 0.3);
        let cfg = SimConfig {
            n_point: 5_000,
            n_ci: 1_000,
            m_reps: 20,
            horizon: 10.0,
            time_grid: linspace(0.0, 10.0, 11),
            seed: 61,
            method: SimMethod::Latent,
            ci_level: 0.95,
        };
        let req = PredictionRequest {
            quantity: Quantity::Probability,
            at2: Some(pattern()),
            contrast: Some(ContrastKind::Difference),
        };
        let res = bootstrap_ci(&models, &tmat, &pattern(), &req, &cfg).unwrap();
        let lower = res.lower.as_ref().unwrap();
        let upper = res.upper.as_ref().unwrap();
        for s in 0..4 {
            for ti in 0..cfg.time_grid.len() {
                assert_eq!(res.estimate[s][ti], 0.0);
                assert_eq!(lower[s][ti], 0.0);
                assert_eq!(upper[s][ti], 0.0);
            }
        }
    }

    #[test]
    fn paired_replicates_narrower_than_unpaired() {
        // Replicate-level differences between two covariate patterns vary
        // less when the patterns share parameter draws and subject RNG
        // substreams than when each runs with independent streams.
        use crate::spline::KnotVector;
        use crate::survival::ResolvedTerm;
        use nalgebra::DMatrix;
        let knots = KnotVector::new(vec![-6.0, 4.0], false).unwrap();
        let mk = |rate: f64, kind: ModelKind, clock: Clock| {
            let mut vcov = DMatrix::zeros(3, 3);
            vcov[(0, 0)] = 0.02;
            Ftm::from_parts(
                kind,
                clock,
                knots.clone(),
                vec![rate.ln(), 1.0],
                vec![ResolvedTerm::Linear { name: "sex".into() }],
                vec![0.3],
                vcov,
            )
        };
        let tmat = illness_death_merged();
        let models = ModelSet::new(vec![
            TransitionModel::Flex(mk(0.15, ModelKind::AllCause, Clock::Forward)),
            TransitionModel::Flex(mk(0.1, ModelKind::AllCause, Clock::Forward)),
            TransitionModel::Flex(mk(0.3, ModelKind::AllCause, Clock::Reset)),
        ]);
        let at1 = pattern().with("sex", 0.0);
        let at2 = pattern().with("sex", 1.0);
        let grid = vec![5.0];
        let m = 60u64;
        let run = |at: &CovariatePattern, seed: u64, overrides: &Vec<Option<DVector<f64>>>| {
            let cfg = SimConfig {
                n_point: 2_000,
                n_ci: 1,
                m_reps: 0,
                horizon: 5.0,
                time_grid: grid.clone(),
                seed,
                method: SimMethod::Latent,
                ci_level: 0.95,
            };
            let sample = simulate(&models, &tmat, at, &cfg, Some(overrides)).unwrap();
            transition_probabilities(&sample, &tmat, &grid)
                .unwrap()
                .estimate[0][0]
        };
        let mut paired = Vec::new();
        let mut unpaired = Vec::new();
        for rep in 1..=m {
            // One parameter draw per slot, shared by both patterns.
            let mut overrides = Vec::new();
            for (s, slot) in models.slots.iter().enumerate() {
                let TransitionModel::Flex(model) = slot else {
                    unreachable!()
                };
                let mut rng = ChaCha8Rng::seed_from_u64(substream(77, rep, 900 + s as u64));
                overrides.push(Some(model.sample_parameters(&mut rng).unwrap()));
            }
            let a = run(&at1, 1000 + rep, &overrides);
            let b_paired = run(&at2, 1000 + rep, &overrides);
            let b_unpaired = run(&at2, 5_000_000 + rep, &overrides);
            paired.push(b_paired - a);
            unpaired.push(b_unpaired - a);
        }
        let var = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(
            var(&paired) <= var(&unpaired) + 1e-12,
            "paired variance {} vs unpaired {}",
            var(&paired),
            var(&unpaired)
        );
    }

    #[test]
    fn percentile_bands_match_sort_oracle() {
        // The same percentile convention as the bootstrap, checked against
        // an independent sort-based computation.
        let values: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let oracle = |p: f64| {
            let pos = p * 99.0;
            let lo = pos.floor() as usize;
            let fr = pos - lo as f64;
            sorted[lo] * (1.0 - fr) + sorted[(lo + 1).min(99)] * fr
        };
        assert_abs_diff_eq!(percentile(&sorted, 0.025), oracle(0.025), epsilon = 1e-12);
        assert_abs_diff_eq!(percentile(&sorted, 0.975), oracle(0.975), epsilon = 1e-12);
    }

    #[test]
    fn grid_outside_horizon_rejected() {
        let cfg = SimConfig {
            time_grid: linspace(0.0, 20.0, 10),
            horizon: 15.0,
            ..SimConfig::default()
        };
        let tmat = illness_death_merged();
        let models = merged_models(0.1, 0.1, 0.1);
        assert!(matches!(
            simulate(&models, &tmat, &pattern(), &cfg, None),
            Err(SimError::BadGrid)
        ));
    }

    #[test]
    fn slot_mismatch_rejected() {
        let tmat = illness_death_partitioned();
        // The merged set has 3 slots; the partitioned matrix needs 4.
        let models = merged_models(0.1, 0.1, 0.1);
        let cfg = small_config(10, 1);
        assert!(matches!(
            simulate(&models, &tmat, &pattern(), &cfg, None),
            Err(SimError::SlotCount {
                got: 3,
                expected: 4
            })
        ));
    }
}
