//! Versioned model files. Models persist as JSON documents with a
//! schema_version field; numeric fields round-trip at full precision, so
//! save -> load -> save is byte-identical.

use crate::expected::{ExpectedRateModel, FittedSpline};
use crate::spline::KnotVector;
use crate::survival::{Clock, FitFlags, FittedTransitionModel, ModelKind, ResolvedTerm};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRANSITION_SCHEMA_VERSION: u32 = 1;
pub const EXPECTED_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot parse model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema version {got} (this build reads {expected})")]
    SchemaVersion { got: u32, expected: u32 },
    #[error("vcov has {got} entries, expected {expected}")]
    VcovShape { got: usize, expected: usize },
    #[error("coefficient vector length {got} does not match the declared structure ({expected})")]
    CoefficientLength { got: usize, expected: usize },
}

#[derive(Serialize, Deserialize)]
struct TransitionModelFile {
    schema_version: u32,
    kind: ModelKind,
    clock: Clock,
    baseline_knots: KnotVector,
    baseline_transform: Option<Vec<f64>>,
    gamma: Vec<f64>,
    terms: Vec<ResolvedTerm>,
    beta: Vec<f64>,
    /// Row-major, full square matrix over (gamma, beta).
    vcov: Vec<f64>,
    loglik: Option<f64>,
    flags: FitFlags,
}

/// Serialize a fitted transition model to its file representation.
pub fn transition_model_to_json(model: &FittedTransitionModel) -> String {
    let file = TransitionModelFile {
        schema_version: TRANSITION_SCHEMA_VERSION,
        kind: model.kind,
        clock: model.clock,
        baseline_knots: model.baseline_knots.clone(),
        baseline_transform: model.baseline_transform.clone(),
        gamma: model.gamma.iter().copied().collect(),
        terms: model.terms.clone(),
        beta: model.beta.iter().copied().collect(),
        vcov: model.vcov.transpose().iter().copied().collect(),
        loglik: model.loglik.is_finite().then_some(model.loglik),
        flags: model.flags.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serialization");
    s.push('\n');
    s
}

pub fn transition_model_from_json(text: &str) -> Result<FittedTransitionModel, FileError> {
    let file: TransitionModelFile = serde_json::from_str(text)?;
    if file.schema_version != TRANSITION_SCHEMA_VERSION {
        return Err(FileError::SchemaVersion {
            got: file.schema_version,
            expected: TRANSITION_SCHEMA_VERSION,
        });
    }
    if file.gamma.len() != file.baseline_knots.df() + 1 {
        return Err(FileError::CoefficientLength {
            got: file.gamma.len(),
            expected: file.baseline_knots.df() + 1,
        });
    }
    let p_beta: usize = file.terms.iter().map(|t| t.width()).sum();
    if file.beta.len() != p_beta {
        return Err(FileError::CoefficientLength {
            got: file.beta.len(),
            expected: p_beta,
        });
    }
    let p = file.gamma.len() + file.beta.len();
    if file.vcov.len() != p * p {
        return Err(FileError::VcovShape {
            got: file.vcov.len(),
            expected: p * p,
        });
    }
    Ok(FittedTransitionModel {
        kind: file.kind,
        clock: file.clock,
        baseline_knots: file.baseline_knots,
        baseline_transform: file.baseline_transform,
        gamma: DVector::from_vec(file.gamma),
        terms: file.terms,
        beta: DVector::from_vec(file.beta),
        vcov: DMatrix::from_row_slice(p, p, &file.vcov),
        loglik: file.loglik.unwrap_or(f64::NAN),
        flags: file.flags,
    })
}

#[derive(Serialize, Deserialize)]
struct ExpectedModelFile {
    schema_version: u32,
    age_spline: FittedSpline,
    year_spline: FittedSpline,
    covariate_names: Vec<String>,
    beta: Vec<f64>,
    /// Row-major; diagnostics only, never enters downstream computation.
    vcov: Vec<f64>,
    loglik: f64,
    deviance: f64,
    quad_points: usize,
}

pub fn expected_model_to_json(model: &ExpectedRateModel) -> String {
    let file = ExpectedModelFile {
        schema_version: EXPECTED_SCHEMA_VERSION,
        age_spline: model.age_spline.clone(),
        year_spline: model.year_spline.clone(),
        covariate_names: model.covariate_names.clone(),
        beta: model.beta.iter().copied().collect(),
        vcov: model.vcov.transpose().iter().copied().collect(),
        loglik: model.loglik,
        deviance: model.deviance,
        quad_points: model.quad_points,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serialization");
    s.push('\n');
    s
}

pub fn expected_model_from_json(text: &str) -> Result<ExpectedRateModel, FileError> {
    let file: ExpectedModelFile = serde_json::from_str(text)?;
    if file.schema_version != EXPECTED_SCHEMA_VERSION {
        return Err(FileError::SchemaVersion {
            got: file.schema_version,
            expected: EXPECTED_SCHEMA_VERSION,
        });
    }
    let p = 1 + file.age_spline.df() + file.year_spline.df() + file.covariate_names.len();
    if file.beta.len() != p {
        return Err(FileError::CoefficientLength {
            got: file.beta.len(),
            expected: p,
        });
    }
    if file.vcov.len() != p * p {
        return Err(FileError::VcovShape {
            got: file.vcov.len(),
            expected: p * p,
        });
    }
    Ok(ExpectedRateModel {
        age_spline: file.age_spline,
        year_spline: file.year_spline,
        covariate_names: file.covariate_names,
        beta: DVector::from_vec(file.beta),
        vcov: DMatrix::from_row_slice(p, p, &file.vcov),
        loglik: file.loglik,
        deviance: file.deviance,
        quad_points: file.quad_points,
    })
}
