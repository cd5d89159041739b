//! Synthetic cohort and population rate table with known hazards, so the
//! full pipeline is runnable without restricted registry data.
//!
//! Truth:
//! - population illness incidence: log rate = B0 + BA*ln(age) + BY*(year -
//!   2000) + BS*sex
//! - excess illness (diagnosis clock):   H(t) = SX * t^KX * hr_x
//! - death before illness (diagnosis clock): H(t) = S3 * t^K3 * hr_3
//! - death after illness (clock reset at illness): H(u) = S4 * u^K4 * hr_4
//!
//! with per-subject proportional terms hr = exp(b_age*(a0-40)/10 +
//! b_year*(c0-1995)/10 + b_sex*sex). Subjects are censored at the end of
//! study (2015.0 on the calendar scale).

use multistate::msm::DAYS_PER_YEAR;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const B0: f64 = -11.5;
pub const B_AGE: f64 = 2.0;
pub const B_YEAR: f64 = -0.004;
pub const B_SEX: f64 = 0.25;

pub const KX: f64 = 0.8;
pub const SX: f64 = 0.02;
pub const K3: f64 = 0.85;
pub const S3: f64 = 0.03;
pub const K4: f64 = 0.9;
pub const S4: f64 = 0.10;

pub const AGE_LO: f64 = 18.0;
pub const AGE_HI: f64 = 80.0;
pub const YEAR_LO: f64 = 1985.0;
pub const YEAR_HI: f64 = 2013.9;
pub const END_OF_STUDY: f64 = 2015.0;

#[derive(Serialize)]
struct Truth {
    description: &'static str,
    expected_log_rate: ExpectedTruth,
    excess_illness: WeibullTruth,
    death_pre_illness: WeibullTruth,
    death_post_illness: WeibullTruth,
}

#[derive(Serialize)]
struct ExpectedTruth {
    intercept: f64,
    log_age: f64,
    per_year: f64,
    sex: f64,
}

#[derive(Serialize)]
struct WeibullTruth {
    scale: f64,
    shape: f64,
    b_age_per_decade: f64,
    b_year_per_decade: f64,
    b_sex: f64,
}

fn hr(a0: f64, c0: f64, sex: f64, b_age: f64, b_year: f64, b_sex: f64) -> f64 {
    (b_age * (a0 - 40.0) / 10.0 + b_year * (c0 - 1995.0) / 10.0 + b_sex * sex).exp()
}

fn pop_rate(age: f64, year: f64, sex: f64) -> f64 {
    (B0 + B_AGE * age.ln() + B_YEAR * (year - 2000.0) + B_SEX * sex).exp()
}

/// Population table text (columns year sex age d y, comma separated) with
/// Poisson-sampled counts around the true rate surface.
pub fn rate_table(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("year,sex,age,d,y\n");
    for year in 1984..=2016i64 {
        for sex in 0..2i64 {
            for age in 18..=99i64 {
                // A smooth population pyramid for person-years at risk.
                let bump = (-((age as f64 - 45.0) / 25.0).powi(2)).exp();
                let y = 12_000.0 + 65_000.0 * bump;
                let mean = pop_rate(age as f64 + 0.5, year as f64 + 0.5, sex as f64) * y;
                let d = poisson_draw(&mut rng, mean);
                out.push_str(&format!("{year},{sex},{age},{d},{y:.2}\n"));
            }
        }
    }
    out
}

/// Inverse-CDF Poisson draw; means here are modest (tens to hundreds), and
/// a normal approximation takes over for large means.
fn poisson_draw<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean > 500.0 {
        let u1: f64 = rng.random::<f64>().max(1e-15);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        return (mean + mean.sqrt() * z).round().max(0.0) as u64;
    }
    let u: f64 = rng.random();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0u64;
    while u > cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

pub struct Patient {
    pub id: String,
    pub ill: bool,
    pub ill_time: f64,
    pub dead: bool,
    pub death_time: f64,
    pub a0: f64,
    pub c0: f64,
    pub sex: f64,
}

/// Simulate one cohort by latent event times from the true hazards.
pub fn cohort(patients: usize, seed: u64) -> Vec<Patient> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5D5C_DEAD_BEEF_1234);
    let min_gap = 1.5 / DAYS_PER_YEAR;
    (0..patients)
        .map(|i| {
            let a0 = AGE_LO + (AGE_HI - AGE_LO) * rng.random::<f64>();
            let c0 = YEAR_LO + (YEAR_HI - YEAR_LO) * rng.random::<f64>();
            let sex = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
            let censor = END_OF_STUDY - c0;

            // Expected illness by thinning: the rate rises with attained
            // age, so its maximum over follow-up is near the end (the year
            // trend is slight; a 5% margin covers it).
            let bound = pop_rate(a0 + censor, c0, sex).max(pop_rate(a0, c0, sex)) * 1.05;
            let mut t_exp = f64::INFINITY;
            let mut t = 0.0;
            loop {
                t += -(1.0 - rng.random::<f64>()).ln() / bound;
                if t > censor {
                    break;
                }
                if rng.random::<f64>() * bound <= pop_rate(a0 + t, c0 + t, sex) {
                    t_exp = t;
                    break;
                }
            }
            // Excess illness and pre-illness death by Weibull inversion.
            let draw_weibull = |rng: &mut ChaCha8Rng, scale: f64, shape: f64, hr: f64| -> f64 {
                let e = -(1.0 - rng.random::<f64>()).ln();
                (e / (scale * hr)).powf(1.0 / shape)
            };
            let hr_x = hr(a0, c0, sex, 0.25, -0.10, -0.20);
            let hr_3 = hr(a0, c0, sex, 0.45, -0.05, -0.15);
            let hr_4 = hr(a0, c0, sex, 0.35, -0.05, -0.10);
            let t_x = draw_weibull(&mut rng, SX, KX, hr_x);
            let t_3 = draw_weibull(&mut rng, S3, K3, hr_3);

            let first = t_exp.min(t_x).min(t_3);
            let (ill, dead, ill_time, death_time);
            if first > censor - min_gap {
                // Censored without any event (events too close to the end
                // of study are pushed into censoring).
                ill = false;
                dead = false;
                ill_time = censor;
                death_time = censor;
            } else if first == t_3 {
                ill = false;
                dead = true;
                ill_time = first.max(min_gap);
                death_time = ill_time;
            } else {
                // Illness (either component); onward death on the reset
                // clock, at least the minimum interval later.
                ill = true;
                ill_time = first.max(min_gap);
                let t4 = draw_weibull(&mut rng, S4, K4, hr_4).max(min_gap);
                if ill_time + t4 <= censor {
                    dead = true;
                    death_time = ill_time + t4;
                } else {
                    dead = false;
                    death_time = censor.max(ill_time + min_gap);
                }
            }
            Patient {
                id: format!("p{:05}", i + 1),
                ill,
                ill_time,
                dead,
                death_time,
                a0,
                c0,
                sex,
            }
        })
        .collect()
}

/// Wide-format cohort text.
pub fn cohort_csv(patients: &[Patient]) -> String {
    let mut out = String::from("id,ill,ill_time,dead,death_time,a0,c0,sex\n");
    for p in patients {
        out.push_str(&format!(
            "{},{},{:.6},{},{:.6},{:.4},{:.4},{}\n",
            p.id, p.ill as u8, p.ill_time, p.dead as u8, p.death_time, p.a0, p.c0, p.sex
        ));
    }
    out
}

/// The generator's parameters, written alongside the data.
pub fn truth_json() -> String {
    let truth = Truth {
        description:
            "synthetic cohort truth: population incidence plus Weibull transition hazards \
                      with proportional covariate effects",
        expected_log_rate: ExpectedTruth {
            intercept: B0,
            log_age: B_AGE,
            per_year: B_YEAR,
            sex: B_SEX,
        },
        excess_illness: WeibullTruth {
            scale: SX,
            shape: KX,
            b_age_per_decade: 0.25,
            b_year_per_decade: -0.10,
            b_sex: -0.20,
        },
        death_pre_illness: WeibullTruth {
            scale: S3,
            shape: K3,
            b_age_per_decade: 0.45,
            b_year_per_decade: -0.05,
            b_sex: -0.15,
        },
        death_post_illness: WeibullTruth {
            scale: S4,
            shape: K4,
            b_age_per_decade: 0.35,
            b_year_per_decade: -0.05,
            b_sex: -0.10,
        },
    };
    let mut s = serde_json::to_string_pretty(&truth).expect("truth serialization");
    s.push('\n');
    s
}
