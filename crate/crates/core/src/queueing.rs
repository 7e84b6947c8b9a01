//! M/G/1 model of the controller. Service time is the sum of `n` uniform
//! one-way message delays (an Irwin-Hall variable, shifted and scaled).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueingError {
    #[error("invalid queue parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MG1Params {
    /// Arrival rate of negotiations, 1/s.
    pub lambda_a: f64,
    pub n_uniforms: u32,
    /// Bounds of each uniform delay, s.
    pub d_min: f64,
    pub d_max: f64,
    /// Mean one-way delay, s.
    pub t_x: f64,
}

impl MG1Params {
    pub fn validate(&self) -> Result<(), QueueingError> {
        let ok = self.lambda_a >= 0.0
            && self.lambda_a.is_finite()
            && self.n_uniforms >= 1
            && 0.0 <= self.d_min
            && self.d_min <= self.d_max
            && self.t_x >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(QueueingError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MG1Results {
    pub rho_u: f64,
    /// Mean service time.
    pub t_s: f64,
    pub sigma_s2: f64,
    /// Mean waiting time in queue.
    pub t_q: f64,
    /// Mean number waiting.
    pub w_q: f64,
    /// Mean time in system.
    pub t_j: f64,
    /// Mean negotiation duration.
    pub t_neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Analysis {
    Stable(MG1Results),
    /// Utilization at or above one: no steady state.
    Saturated {
        rho_u: f64,
    },
}

impl Analysis {
    pub fn stable(&self) -> Option<&MG1Results> {
        match self {
            Analysis::Stable(r) => Some(r),
            Analysis::Saturated { .. } => None,
        }
    }

    pub fn rho_u(&self) -> f64 {
        match self {
            Analysis::Stable(r) => r.rho_u,
            Analysis::Saturated { rho_u } => *rho_u,
        }
    }
}

/// Mean and variance of the sum of `n` independent U(d_min, d_max).
pub fn irwin_hall_stats(n: u32, d_min: f64, d_max: f64) -> (f64, f64) {
    let n = n as f64;
    (n * (d_min + d_max) / 2.0, n * (d_max - d_min).powi(2) / 12.0)
}

pub fn analyze(p: &MG1Params) -> Result<Analysis, QueueingError> {
    p.validate()?;
    let (t_s, sigma_s2) = irwin_hall_stats(p.n_uniforms, p.d_min, p.d_max);
    let rho_u = p.lambda_a * t_s;
    if rho_u >= 1.0 {
        return Ok(Analysis::Saturated { rho_u });
    }
    let t_q = p.lambda_a * (t_s * t_s + sigma_s2) / (2.0 * (1.0 - rho_u));
    let w_q = p.lambda_a * t_q;
    Ok(Analysis::Stable(MG1Results {
        rho_u,
        t_s,
        sigma_s2,
        t_q,
        w_q,
        t_j: t_q + t_s,
        t_neg: 2.0 * p.t_x + t_q + t_s,
    }))
}

/// Single-server FCFS simulation over `horizon_s` seconds of arrivals.
pub fn mc_simulate(p: &MG1Params, horizon_s: f64, seed: u64) -> Result<MG1Results, QueueingError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let service = |rng: &mut ChaCha8Rng| -> f64 {
        (0..p.n_uniforms)
            .map(|_| {
                if p.d_max > p.d_min {
                    rng.gen_range(p.d_min..p.d_max)
                } else {
                    p.d_min
                }
            })
            .sum()
    };
    let mut t = 0.0;
    let mut server_free = 0.0_f64;
    let (mut count, mut sum_s, mut sum_s2, mut sum_wait, mut busy) = (0u64, 0.0, 0.0, 0.0, 0.0);
    if p.lambda_a > 0.0 {
        loop {
            t += sample_exp(&mut rng, p.lambda_a);
            if t > horizon_s {
                break;
            }
            let s = service(&mut rng);
            let start = server_free.max(t);
            sum_wait += start - t;
            server_free = start + s;
            busy += s;
            sum_s += s;
            sum_s2 += s * s;
            count += 1;
        }
    }
    if count == 0 {
        let (t_s, sigma_s2) = irwin_hall_stats(p.n_uniforms, p.d_min, p.d_max);
        return Ok(MG1Results {
            rho_u: 0.0,
            t_s,
            sigma_s2,
            t_q: 0.0,
            w_q: 0.0,
            t_j: t_s,
            t_neg: 2.0 * p.t_x + t_s,
        });
    }
    let n = count as f64;
    let t_s = sum_s / n;
    let sigma_s2 = (sum_s2 / n - t_s * t_s).max(0.0);
    let t_q = sum_wait / n;
    Ok(MG1Results {
        rho_u: busy / horizon_s,
        t_s,
        sigma_s2,
        t_q,
        // Time-average number waiting: total waiting time over the horizon.
        w_q: sum_wait / horizon_s,
        t_j: t_q + t_s,
        t_neg: 2.0 * p.t_x + t_q + t_s,
    })
}

/// Analysis for each arrival rate in `lambdas`, other parameters from `base`.
pub fn sweep(base: &MG1Params, lambdas: &[f64]) -> Result<Vec<(f64, Analysis)>, QueueingError> {
    lambdas
        .iter()
        .map(|&l| analyze(&MG1Params { lambda_a: l, ..*base }).map(|a| (l, a)))
        .collect()
}

/// CSV with columns `lambda,rho,W_q,T_neg`; saturated rows leave the last
/// two empty.
pub fn sweep_csv(rows: &[(f64, Analysis)]) -> String {
    let mut out = String::from("lambda,rho,W_q,T_neg\n");
    for (l, a) in rows {
        match a {
            Analysis::Stable(r) => {
                let _ = writeln!(out, "{l},{:.6},{:.6},{:.6}", r.rho_u, r.w_q, r.t_neg);
            }
            Analysis::Saturated { rho_u } => {
                let _ = writeln!(out, "{l},{rho_u:.6},,");
            }
        }
    }
    out
}

/// Exponential variate by inversion.
fn sample_exp<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}
