//! Kolmogorov forward-equation oracle for Markov (all clocks forward)
//! structures: solves dP/dt = P(t) Q(t) with Q built from the transition
//! hazards. A validation tool for the simulator, not a prediction path.

use crate::msm::{CovariatePattern, TransitionMatrix};
use crate::sim::{Engine, ModelSet, PredictionResult, SimError, WarningCounters};
use crate::survival::Clock;

/// Solve the forward equations over the grid with an adaptive embedded
/// Runge-Kutta (Cash-Karp 4/5) integrator at absolute tolerance 1e-8.
/// Refuses structures with any reset-clock transition.
pub fn ode_oracle(
    models: &ModelSet,
    tmat: &TransitionMatrix,
    at: &CovariatePattern,
    time_grid: &[f64],
) -> Result<PredictionResult, SimError> {
    for (i, t) in tmat.transitions.iter().enumerate() {
        if t.clock == Clock::Reset {
            return Err(SimError::ResetClockInOracle(i + 1));
        }
    }
    let horizon = time_grid.last().copied().unwrap_or(0.0);
    let engine = Engine::new(models, tmat, at, horizon.max(1.0), None)?;
    let n = tmat.n_states();
    let initial = tmat.initial_state()?;

    let mut floor_hits = 0u64;
    // Row-stochastic generator action: out[j] = sum_i p[i] q_{i,j}.
    let mut derivative = |t: f64, p: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (idx, tr) in tmat.transitions.iter().enumerate() {
            let mut h = engine.transition_intensity(idx, 0.0, t.max(1e-12));
            if h < 0.0 {
                floor_hits += 1;
                h = 0.0;
            }
            let flow = p[tr.from] * h;
            out[tr.from] -= flow;
            out[tr.to] += flow;
        }
    };

    let mut p = vec![0.0; n];
    p[initial] = 1.0;
    let mut estimate = vec![Vec::with_capacity(time_grid.len()); n];
    let mut t = 0.0;
    let abs_tol = 1e-8;
    let mut h: f64 = 1e-3;
    for &target in time_grid {
        while t < target {
            let step = h.min(target - t);
            let (p_new, err) = cash_karp_step(&mut derivative, t, &p, step);
            let scale = abs_tol;
            if err <= scale || step < 1e-12 {
                t += step;
                p = p_new;
                // Grow the step gently.
                let factor = if err > 0.0 {
                    0.9 * (scale / err).powf(0.2)
                } else {
                    2.0
                };
                h = (step * factor.clamp(0.2, 5.0)).min(1.0);
            } else {
                h = step * (0.9 * (scale / err).powf(0.25)).clamp(0.1, 0.9);
            }
        }
        for (s, series) in estimate.iter_mut().enumerate() {
            series.push(p[s]);
        }
    }
    Ok(PredictionResult {
        kind: "probability".into(),
        time_grid: time_grid.to_vec(),
        labels: tmat.state_names.clone(),
        estimate,
        lower: None,
        upper: None,
        warnings: WarningCounters {
            hazard_floor_hits: floor_hits,
            extrapolation_flags: 0,
        },
    })
}

/// One Cash-Karp 4(5) step; returns (5th-order solution, max-abs error
/// estimate against the embedded 4th-order solution).
fn cash_karp_step<F>(f: &mut F, t: f64, y: &[f64], h: f64) -> (Vec<f64>, f64)
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    const A: [f64; 6] = [0.0, 0.2, 0.3, 0.6, 1.0, 0.875];
    const B: [[f64; 5]; 6] = [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.2, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
        [0.3, -0.9, 1.2, 0.0, 0.0],
        [-11.0 / 54.0, 2.5, -70.0 / 27.0, 35.0 / 27.0, 0.0],
        [
            1631.0 / 55296.0,
            175.0 / 512.0,
            575.0 / 13824.0,
            44275.0 / 110592.0,
            253.0 / 4096.0,
        ],
    ];
    const C5: [f64; 6] = [
        37.0 / 378.0,
        0.0,
        250.0 / 621.0,
        125.0 / 594.0,
        0.0,
        512.0 / 1771.0,
    ];
    const C4: [f64; 6] = [
        2825.0 / 27648.0,
        0.0,
        18575.0 / 48384.0,
        13525.0 / 55296.0,
        277.0 / 14336.0,
        0.25,
    ];
    let n = y.len();
    let mut k = vec![vec![0.0; n]; 6];
    let mut tmp = vec![0.0; n];
    f(t, y, &mut k[0]);
    for s in 1..6 {
        for i in 0..n {
            let mut acc = y[i];
            for (j, kj) in k.iter().enumerate().take(s) {
                acc += h * B[s][j] * kj[i];
            }
            tmp[i] = acc;
        }
        let (head, tail) = k.split_at_mut(s);
        let _ = head;
        f(t + A[s] * h, &tmp, &mut tail[0]);
    }
    let mut y5 = vec![0.0; n];
    let mut err: f64 = 0.0;
    for i in 0..n {
        let mut acc5 = y[i];
        let mut acc4 = y[i];
        for s in 0..6 {
            acc5 += h * C5[s] * k[s][i];
            acc4 += h * C4[s] * k[s][i];
        }
        y5[i] = acc5;
        err = err.max((acc5 - acc4).abs());
    }
    (y5, err)
}
