//! Small parsers for command-line values: covariate patterns, covariate
//! term lists, time grids, and ranges.

use crate::CliError;
use multistate::msm::CovariatePattern;
use multistate::sim::linspace;
use multistate::survival::CovariateTerm;

/// "sex=0,a0=30,c0=1995" -> a pattern; a0 and c0 are required.
pub fn parse_pattern(s: &str) -> Result<CovariatePattern, CliError> {
    let mut a0 = None;
    let mut c0 = None;
    let mut values = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part.split_once('=').ok_or_else(|| {
            CliError::config(format!("bad pattern entry '{part}', want name=value"))
        })?;
        let v: f64 = value.trim().parse().map_err(|_| {
            CliError::config(format!("bad numeric value in pattern entry '{part}'"))
        })?;
        match name.trim() {
            "a0" => a0 = Some(v),
            "c0" => c0 = Some(v),
            other => values.push((other.to_string(), v)),
        }
    }
    let a0 = a0.ok_or_else(|| CliError::config("at-pattern must set a0 (age at diagnosis)"))?;
    let c0 = c0.ok_or_else(|| CliError::config("at-pattern must set c0 (year of diagnosis)"))?;
    let mut pattern = CovariatePattern::new(a0, c0);
    for (name, v) in values {
        pattern = pattern.with(&name, v);
    }
    Ok(pattern)
}

/// "sex,rcs(c0,5),rcs(a0,5,log)" -> covariate terms. Empty input is an
/// empty list.
pub fn parse_covariates(s: &str) -> Result<Vec<CovariateTerm>, CliError> {
    let mut terms = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        if let Some(body) = rest.strip_prefix("rcs(") {
            let close = body
                .find(')')
                .ok_or_else(|| CliError::config("unclosed rcs(...) in covariate list"))?;
            let inner = &body[..close];
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            if parts.len() < 2 || parts.len() > 3 {
                return Err(CliError::config(format!(
                    "rcs term needs (name, df[, log]): 'rcs({inner})'"
                )));
            }
            let df: usize = parts[1]
                .parse()
                .map_err(|_| CliError::config(format!("bad df in 'rcs({inner})'")))?;
            if df < 1 {
                return Err(CliError::config("rcs df must be >= 1"));
            }
            let log = match parts.get(2) {
                None => false,
                Some(&"log") => true,
                Some(other) => {
                    return Err(CliError::config(format!("unknown rcs option '{other}'")))
                }
            };
            terms.push(CovariateTerm::Spline {
                name: parts[0].to_string(),
                df,
                log,
            });
            rest = body[close + 1..].trim_start_matches(',').trim();
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            let name = rest[..end].trim();
            if !name.is_empty() {
                terms.push(CovariateTerm::Linear {
                    name: name.to_string(),
                });
            }
            rest = rest[end..].trim_start_matches(',').trim();
        }
    }
    Ok(terms)
}

/// "start:stop:points" -> an inclusive equally spaced grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!(
            "bad grid '{s}', want start:stop:points"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| CliError::config("bad grid start"))?;
    let stop: f64 = parts[1]
        .parse()
        .map_err(|_| CliError::config("bad grid stop"))?;
    let points: usize = parts[2]
        .parse()
        .map_err(|_| CliError::config("bad grid points"))?;
    if points == 0 || stop < start {
        return Err(CliError::config("grid needs stop >= start and points >= 1"));
    }
    Ok(linspace(start, stop, points))
}

/// "lo:hi" -> inclusive integer range.
pub fn parse_range(s: &str) -> Result<Vec<usize>, CliError> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| CliError::config(format!("bad range '{s}', want lo:hi")))?;
    let lo: usize = lo
        .parse()
        .map_err(|_| CliError::config("bad range low end"))?;
    let hi: usize = hi
        .parse()
        .map_err(|_| CliError::config("bad range high end"))?;
    if lo < 1 || hi < lo {
        return Err(CliError::config("range needs 1 <= lo <= hi"));
    }
    Ok((lo..=hi).collect())
}

/// "name=column,..." -> covariate mapping pairs.
pub fn parse_mapping(s: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (from, to) = part
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("bad mapping '{part}', want model=column")))?;
        out.push((from.trim().to_string(), to.trim().to_string()));
    }
    Ok(out)
}
