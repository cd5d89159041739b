//! Multi-state structure declaration and data reshaping.
//!
//! The canonical structure partitions the illness state of an illness-death
//! model into two components with separate entry hazards (a population
//! expected rate and a fitted excess rate) that are indistinguishable once
//! entered: every transition out of one component must mirror a transition
//! out of the other, sharing a single fitted model slot.

use crate::survival::Clock;
use crate::table::{Table, TableError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Days-to-years divisor used throughout.
pub const DAYS_PER_YEAR: f64 = 365.24;

/// Default minimum allowed interval length: one day, in years.
pub const MIN_INTERVAL_DEFAULT: f64 = 1.0 / DAYS_PER_YEAR;

#[derive(Debug, Error)]
pub enum MsmError {
    #[error("transition {index}: source and destination are both state {state}")]
    SelfTransition { index: usize, state: usize },
    #[error("transition {index}: state {state} out of range (n_states = {n_states})")]
    StateOutOfRange {
        index: usize,
        state: usize,
        n_states: usize,
    },
    #[error("duplicate transition from state {from} to state {to}")]
    DuplicateTransition { from: usize, to: usize },
    #[error("slot indices must be consecutive from 0; missing slot {0}")]
    SlotGap(usize),
    #[error(
        "partitioned components {a} and {b} must mirror each other's exits: \
         transitions to state {dest} do not share a model slot"
    )]
    PartitionSlotMismatch { a: usize, b: usize, dest: usize },
    #[error("partitioned components {a} and {b} have different exit destinations")]
    PartitionShapeMismatch { a: usize, b: usize },
    #[error("expected exactly one initial state (no incoming transitions), found {0}")]
    AmbiguousInitialState(usize),
    #[error("matrix shape not supported by the reshaper: {0}")]
    UnsupportedShape(String),
    #[error("record '{id}': {message}")]
    BadRecord { id: String, message: String },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("wide data must include covariate columns 'a0' and 'c0'")]
    MissingTimeOriginCovariates,
    #[error("unknown transition index {0} in long data")]
    UnknownTransition(usize),
}

/// What kind of intensity drives a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// Population expected rate on the (attained age, calendar year) scales.
    Expected,
    /// Fitted excess hazard over the expected rate.
    Excess,
    /// Fitted all-cause hazard.
    AllCause,
}

/// One directed transition in the state structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    /// 0-based source state.
    pub from: usize,
    /// 0-based destination state.
    pub to: usize,
    /// Model slot; several transitions may point at one slot.
    pub slot: usize,
    pub kind: TransitionKind,
    pub clock: Clock,
}

/// States, transitions, shared-model slots, and per-transition clock rules.
///
/// Transition indices are 1-based and consecutive in declaration order;
/// internally they are positions in `transitions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub state_names: Vec<String>,
    pub transitions: Vec<Transition>,
}

impl TransitionMatrix {
    pub fn new(state_names: Vec<String>, transitions: Vec<Transition>) -> Result<Self, MsmError> {
        let tm = TransitionMatrix {
            state_names,
            transitions,
        };
        tm.validate()?;
        Ok(tm)
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn n_slots(&self) -> usize {
        self.transitions
            .iter()
            .map(|t| t.slot + 1)
            .max()
            .unwrap_or(0)
    }

    /// Transitions out of a state, as (1-based index, transition) pairs.
    pub fn outgoing(&self, state: usize) -> Vec<(usize, &Transition)> {
        self.transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| t.from == state)
            .map(|(i, t)| (i + 1, t))
            .collect()
    }

    pub fn is_absorbing(&self, state: usize) -> bool {
        self.transitions.iter().all(|t| t.from != state)
    }

    /// The single state with no incoming transitions.
    pub fn initial_state(&self) -> Result<usize, MsmError> {
        let mut candidates = Vec::new();
        for s in 0..self.n_states() {
            if self.transitions.iter().all(|t| t.to != s) {
                candidates.push(s);
            }
        }
        if candidates.len() != 1 {
            return Err(MsmError::AmbiguousInitialState(candidates.len()));
        }
        Ok(candidates[0])
    }

    /// The (expected-component, excess-component) state pair when the
    /// structure partitions an intermediate state, if any.
    pub fn partition_pair(&self) -> Option<(usize, usize)> {
        let mut expected = None;
        let mut excess = None;
        for t in &self.transitions {
            match t.kind {
                TransitionKind::Expected => expected = Some(t),
                TransitionKind::Excess => excess = Some(t),
                TransitionKind::AllCause => {}
            }
        }
        match (expected, excess) {
            (Some(e), Some(x)) if e.from == x.from => Some((e.to, x.to)),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), MsmError> {
        let n = self.n_states();
        let mut seen = std::collections::HashSet::new();
        for (i, t) in self.transitions.iter().enumerate() {
            if t.from >= n || t.to >= n {
                return Err(MsmError::StateOutOfRange {
                    index: i + 1,
                    state: t.from.max(t.to),
                    n_states: n,
                });
            }
            if t.from == t.to {
                return Err(MsmError::SelfTransition {
                    index: i + 1,
                    state: t.from,
                });
            }
            if !seen.insert((t.from, t.to)) {
                return Err(MsmError::DuplicateTransition {
                    from: t.from,
                    to: t.to,
                });
            }
        }
        let n_slots = self.n_slots();
        for s in 0..n_slots {
            if !self.transitions.iter().any(|t| t.slot == s) {
                return Err(MsmError::SlotGap(s));
            }
        }
        // Partitioned components must mirror each other's exits with shared
        // slots: the partition is theoretical, there is one onward model.
        if let Some((comp_e, comp_x)) = self.partition_pair() {
            let out_e: BTreeMap<usize, usize> = self
                .transitions
                .iter()
                .filter(|t| t.from == comp_e)
                .map(|t| (t.to, t.slot))
                .collect();
            let out_x: BTreeMap<usize, usize> = self
                .transitions
                .iter()
                .filter(|t| t.from == comp_x)
                .map(|t| (t.to, t.slot))
                .collect();
            if out_e.keys().collect::<Vec<_>>() != out_x.keys().collect::<Vec<_>>() {
                return Err(MsmError::PartitionShapeMismatch {
                    a: comp_e,
                    b: comp_x,
                });
            }
            for (dest, slot_e) in &out_e {
                if out_x[dest] != *slot_e {
                    return Err(MsmError::PartitionSlotMismatch {
                        a: comp_e,
                        b: comp_x,
                        dest: *dest,
                    });
                }
            }
        }
        Ok(())
    }
}

/// The five-state structure with the illness state partitioned into
/// expected and excess components:
///
/// states 1 alive, 2 expected illness, 3 excess illness, 4 dead before
/// illness, 5 dead after illness; transitions 1: 1->2 (expected), 2: 1->3
/// (excess), 3: 1->4, 4: 2->5, 5: 3->5. Transitions 4 and 5 share one model
/// slot and run on the reset clock.
pub fn illness_death_partitioned() -> TransitionMatrix {
    TransitionMatrix::new(
        vec![
            "alive".into(),
            "illness_expected".into(),
            "illness_excess".into(),
            "dead_pre_illness".into(),
            "dead_post_illness".into(),
        ],
        vec![
            Transition {
                from: 0,
                to: 1,
                slot: 0,
                kind: TransitionKind::Expected,
                clock: Clock::Forward,
            },
            Transition {
                from: 0,
                to: 2,
                slot: 1,
                kind: TransitionKind::Excess,
                clock: Clock::Forward,
            },
            Transition {
                from: 0,
                to: 3,
                slot: 2,
                kind: TransitionKind::AllCause,
                clock: Clock::Forward,
            },
            Transition {
                from: 1,
                to: 4,
                slot: 3,
                kind: TransitionKind::AllCause,
                clock: Clock::Reset,
            },
            Transition {
                from: 2,
                to: 4,
                slot: 3,
                kind: TransitionKind::AllCause,
                clock: Clock::Reset,
            },
        ],
    )
    .expect("canonical matrix is valid")
}

/// The plain four-state illness-death structure (no partition), used for
/// consistency checks against the partitioned form.
pub fn illness_death_merged() -> TransitionMatrix {
    TransitionMatrix::new(
        vec![
            "alive".into(),
            "illness".into(),
            "dead_pre_illness".into(),
            "dead_post_illness".into(),
        ],
        vec![
            Transition {
                from: 0,
                to: 1,
                slot: 0,
                kind: TransitionKind::AllCause,
                clock: Clock::Forward,
            },
            Transition {
                from: 0,
                to: 2,
                slot: 1,
                kind: TransitionKind::AllCause,
                clock: Clock::Forward,
            },
            Transition {
                from: 1,
                to: 3,
                slot: 2,
                kind: TransitionKind::AllCause,
                clock: Clock::Reset,
            },
        ],
    )
    .expect("canonical matrix is valid")
}

/// One patient in wide format: at most one illness event and one death.
/// Times are years on the diagnosis clock. For patients without the illness,
/// `ill_time` must equal `death_time` (end of illness risk).
#[derive(Debug, Clone, PartialEq)]
pub struct WideRecord {
    pub id: String,
    pub ill: bool,
    pub ill_time: f64,
    pub dead: bool,
    pub death_time: f64,
    /// Aligned with `WideDataset::covariate_names`; must include a0 and c0.
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WideDataset {
    pub covariate_names: Vec<String>,
    pub records: Vec<WideRecord>,
}

/// One at-risk row of the stacked (long) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub id: String,
    /// 1-based transition index into the matrix used for reshaping.
    pub trans: usize,
    pub start: f64,
    pub stop: f64,
    pub status: bool,
    /// Aligned with `MultiStateDataset::covariate_names`.
    pub x: Vec<f64>,
    pub expected_rate_at_exit: Option<f64>,
}

/// Long-format (stacked) patient records, one row per at-risk transition.
#[derive(Debug, Clone)]
pub struct MultiStateDataset {
    pub covariate_names: Vec<String>,
    pub rows: Vec<LongRow>,
}

impl MultiStateDataset {
    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Events per 1-based transition index.
    pub fn event_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            if r.status {
                *m.entry(r.trans).or_insert(0) += 1;
            }
        }
        m
    }
}

/// How the reshaper maps observable events onto matrix transitions.
#[derive(Debug, Clone, Copy)]
pub struct ReshapePlan {
    /// Transition receiving the observed illness events (the excess one for
    /// a partitioned matrix: the two entry components are not observable
    /// separately, and the expected transition is fitted from population
    /// data only).
    pub illness_trans: usize,
    /// Transition for death before illness.
    pub death_trans: usize,
    /// Transition whose rows carry the post-illness death risk set (the
    /// lowest-indexed onward transition; all onward transitions out of the
    /// partition share its model slot).
    pub onward_trans: usize,
}

impl ReshapePlan {
    pub fn from_matrix(tmat: &TransitionMatrix) -> Result<Self, MsmError> {
        let initial = tmat.initial_state()?;
        let out = tmat.outgoing(initial);
        let illness = if let Some((_, comp_x)) = tmat.partition_pair() {
            out.iter()
                .find(|(_, t)| t.to == comp_x && t.kind == TransitionKind::Excess)
                .map(|(i, _)| *i)
        } else {
            // Merged form: the destination that itself has exits is illness.
            out.iter()
                .find(|(_, t)| !tmat.is_absorbing(t.to))
                .map(|(i, _)| *i)
        };
        let illness_trans = illness.ok_or_else(|| {
            MsmError::UnsupportedShape("no illness transition out of the initial state".into())
        })?;
        let illness_dest = tmat.transitions[illness_trans - 1].to;
        let death_trans = out
            .iter()
            .find(|(i, t)| {
                *i != illness_trans && t.kind == TransitionKind::AllCause && tmat.is_absorbing(t.to)
            })
            .map(|(i, _)| *i)
            .ok_or_else(|| {
                MsmError::UnsupportedShape(
                    "no absorbing death transition out of the initial state".into(),
                )
            })?;
        // For a partitioned matrix the onward rows may sit on either
        // component's exit (the slots are shared); use the lowest index.
        let onward_sources: Vec<usize> = match tmat.partition_pair() {
            Some((comp_e, comp_x)) => vec![comp_e, comp_x],
            None => vec![illness_dest],
        };
        let onward_trans = onward_sources
            .iter()
            .flat_map(|&s| tmat.outgoing(s).into_iter().map(|(i, _)| i))
            .min()
            .ok_or_else(|| MsmError::UnsupportedShape("illness state has no exit".into()))?;
        Ok(ReshapePlan {
            illness_trans,
            death_trans,
            onward_trans,
        })
    }
}

/// Reshape wide patient records into stacked long format: one row per
/// transition at risk.
pub fn msset(
    wide: &WideDataset,
    tmat: &TransitionMatrix,
    min_interval: f64,
) -> Result<MultiStateDataset, MsmError> {
    if wide.covariate_names.iter().all(|c| c != "a0")
        || wide.covariate_names.iter().all(|c| c != "c0")
    {
        return Err(MsmError::MissingTimeOriginCovariates);
    }
    let plan = ReshapePlan::from_matrix(tmat)?;
    // Intervals exactly equal to the minimum must pass despite rounding in
    // the caller's time arithmetic.
    let min_len = min_interval * (1.0 - 1e-9);
    let mut rows = Vec::with_capacity(wide.records.len() * 3);
    for r in &wide.records {
        let bad = |message: &str| MsmError::BadRecord {
            id: r.id.clone(),
            message: message.into(),
        };
        if !(r.ill_time.is_finite() && r.death_time.is_finite()) {
            return Err(bad("non-finite event time"));
        }
        if r.ill_time < 0.0 || r.death_time < 0.0 {
            return Err(bad("negative event time"));
        }
        if r.ill {
            if r.death_time < r.ill_time {
                return Err(bad("death or censoring precedes the illness event"));
            }
            if r.ill_time < min_len {
                return Err(bad("illness interval shorter than the minimum interval"));
            }
            if r.death_time - r.ill_time < min_len {
                return Err(bad(
                    "interval from illness to death or censoring is shorter than the minimum interval",
                ));
            }
        } else {
            if (r.ill_time - r.death_time).abs() > 1e-12 {
                return Err(bad(
                    "patients without the illness must have ill_time equal to death_time",
                ));
            }
            if r.death_time < min_len {
                return Err(bad("follow-up shorter than the minimum interval"));
            }
        }
        let first_exit = r.ill_time;
        rows.push(LongRow {
            id: r.id.clone(),
            trans: plan.illness_trans,
            start: 0.0,
            stop: first_exit,
            status: r.ill,
            x: r.covariates.clone(),
            expected_rate_at_exit: None,
        });
        rows.push(LongRow {
            id: r.id.clone(),
            trans: plan.death_trans,
            start: 0.0,
            stop: first_exit,
            status: !r.ill && r.dead,
            x: r.covariates.clone(),
            expected_rate_at_exit: None,
        });
        if r.ill {
            rows.push(LongRow {
                id: r.id.clone(),
                trans: plan.onward_trans,
                start: r.ill_time,
                stop: r.death_time,
                status: r.dead,
                x: r.covariates.clone(),
                expected_rate_at_exit: None,
            });
        }
    }
    Ok(MultiStateDataset {
        covariate_names: wide.covariate_names.clone(),
        rows,
    })
}

/// Invert `msset`: rebuild wide records from the stacked rows.
pub fn reconstruct_wide(
    long: &MultiStateDataset,
    tmat: &TransitionMatrix,
) -> Result<WideDataset, MsmError> {
    let plan = ReshapePlan::from_matrix(tmat)?;
    let mut by_id: BTreeMap<&str, Vec<&LongRow>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in &long.rows {
        let e = by_id.entry(r.id.as_str()).or_default();
        if e.is_empty() {
            order.push(r.id.as_str());
        }
        e.push(r);
    }
    let mut records = Vec::with_capacity(by_id.len());
    for id in order {
        let rows = &by_id[id];
        let find = |trans: usize| rows.iter().find(|r| r.trans == trans);
        let ill_row = find(plan.illness_trans).ok_or_else(|| MsmError::BadRecord {
            id: id.to_string(),
            message: "missing illness risk row".into(),
        })?;
        let death_row = find(plan.death_trans).ok_or_else(|| MsmError::BadRecord {
            id: id.to_string(),
            message: "missing death risk row".into(),
        })?;
        let onward = find(plan.onward_trans);
        let ill = ill_row.status;
        let (dead, death_time) = match onward {
            Some(o) => (o.status, o.stop),
            None => (death_row.status, death_row.stop),
        };
        records.push(WideRecord {
            id: id.to_string(),
            ill,
            ill_time: ill_row.stop,
            dead,
            death_time,
            covariates: ill_row.x.clone(),
        });
    }
    Ok(WideDataset {
        covariate_names: long.covariate_names.clone(),
        records,
    })
}

/// Extract the risk set of one transition as survival records on the
/// transition's own clock: forward keeps (start, stop); reset re-times to
/// (0, stop - start).
pub fn survival_data_for_transition(
    long: &MultiStateDataset,
    trans: usize,
    clock: Clock,
) -> Result<crate::survival::SurvivalData, MsmError> {
    let rows: Vec<&LongRow> = long.rows.iter().filter(|r| r.trans == trans).collect();
    if rows.is_empty() {
        return Err(MsmError::UnknownTransition(trans));
    }
    let records = rows
        .iter()
        .map(|r| {
            let (entry, exit) = match clock {
                Clock::Forward => (r.start, r.stop),
                Clock::Reset => (0.0, r.stop - r.start),
            };
            crate::survival::SurvivalRecord {
                entry,
                exit,
                status: r.status,
                covariates: r.x.clone(),
                expected_rate_at_exit: r.expected_rate_at_exit,
            }
        })
        .collect();
    Ok(crate::survival::SurvivalData {
        covariate_names: long.covariate_names.clone(),
        records,
    })
}

/// A complete covariate pattern for prediction: values for every covariate
/// any transition model requires, plus the time origins a0 and c0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePattern {
    pub a0: f64,
    pub c0: f64,
    pub values: BTreeMap<String, f64>,
}

impl CovariatePattern {
    pub fn new(a0: f64, c0: f64) -> Self {
        CovariatePattern {
            a0,
            c0,
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    /// Lookup that also resolves the reserved names a0 and c0.
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "a0" => Some(self.a0),
            "c0" => Some(self.c0),
            _ => self.values.get(name).copied(),
        }
    }
}

// ---------------------------------------------------------------------------
// Delimited-text formats
// ---------------------------------------------------------------------------

const WIDE_FIXED: [&str; 5] = ["id", "ill", "ill_time", "dead", "death_time"];
const LONG_FIXED: [&str; 5] = ["id", "trans", "start", "stop", "status"];
const EXP_RATE_COL: &str = "exp_rate";

/// Parse a wide dataset: header `id ill ill_time dead death_time` plus
/// covariate columns (must include a0 and c0).
pub fn parse_wide(text: &str) -> Result<WideDataset, MsmError> {
    let t = Table::parse(text)?;
    let idx: Vec<usize> = WIDE_FIXED
        .iter()
        .map(|c| t.column_index(c))
        .collect::<Result<_, _>>()?;
    let cov_cols: Vec<usize> = (0..t.columns.len()).filter(|i| !idx.contains(i)).collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&i| t.columns[i].clone()).collect();
    if !covariate_names.iter().any(|c| c == "a0") || !covariate_names.iter().any(|c| c == "c0") {
        return Err(MsmError::MissingTimeOriginCovariates);
    }
    let mut records = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        records.push(WideRecord {
            id: t.rows[r][idx[0]].clone(),
            ill: t.number(r, idx[1])? != 0.0,
            ill_time: t.number(r, idx[2])?,
            dead: t.number(r, idx[3])? != 0.0,
            death_time: t.number(r, idx[4])?,
            covariates: cov_cols
                .iter()
                .map(|&c| t.number(r, c))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(WideDataset {
        covariate_names,
        records,
    })
}

/// Write a wide dataset as comma-separated text.
pub fn write_wide(data: &WideDataset) -> String {
    let mut out = String::new();
    out.push_str(&WIDE_FIXED.join(","));
    for c in &data.covariate_names {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in &data.records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.id, r.ill as u8, r.ill_time, r.dead as u8, r.death_time
        ));
        for v in &r.covariates {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Parse a long dataset: header `id trans start stop status` plus covariate
/// columns; an optional `exp_rate` column restores attached expected rates.
pub fn parse_long(text: &str) -> Result<MultiStateDataset, MsmError> {
    let t = Table::parse(text)?;
    let idx: Vec<usize> = LONG_FIXED
        .iter()
        .map(|c| t.column_index(c))
        .collect::<Result<_, _>>()?;
    let exp_col = t.columns.iter().position(|c| c == EXP_RATE_COL);
    let cov_cols: Vec<usize> = (0..t.columns.len())
        .filter(|i| !idx.contains(i) && Some(*i) != exp_col)
        .collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&i| t.columns[i].clone()).collect();
    let mut rows = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let exp_rate = match exp_col {
            Some(c) => {
                let raw = t.rows[r][c].as_str();
                if raw == "NA" || raw.is_empty() {
                    None
                } else {
                    Some(t.number(r, c)?)
                }
            }
            None => None,
        };
        rows.push(LongRow {
            id: t.rows[r][idx[0]].clone(),
            trans: t.number(r, idx[1])? as usize,
            start: t.number(r, idx[2])?,
            stop: t.number(r, idx[3])?,
            status: t.number(r, idx[4])? != 0.0,
            x: cov_cols
                .iter()
                .map(|&c| t.number(r, c))
                .collect::<Result<_, _>>()?,
            expected_rate_at_exit: exp_rate,
        });
    }
    Ok(MultiStateDataset {
        covariate_names,
        rows,
    })
}

/// Write a long dataset as comma-separated text.
pub fn write_long(data: &MultiStateDataset) -> String {
    let any_rate = data.rows.iter().any(|r| r.expected_rate_at_exit.is_some());
    let mut out = String::new();
    out.push_str(&LONG_FIXED.join(","));
    for c in &data.covariate_names {
        out.push(',');
        out.push_str(c);
    }
    if any_rate {
        out.push(',');
        out.push_str(EXP_RATE_COL);
    }
    out.push('\n');
    for r in &data.rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.id, r.trans, r.start, r.stop, r.status as u8
        ));
        for v in &r.x {
            out.push_str(&format!(",{v}"));
        }
        if any_rate {
            match r.expected_rate_at_exit {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}
