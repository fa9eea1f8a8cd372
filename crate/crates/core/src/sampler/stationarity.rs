//! Long-run check that the Langevin walk samples from its target.
//!
//! Walkers follow `x ← x + a·∇log Q + b·η` on a frozen analytic Q. After
//! burn-in, every walker position is binned and the histogram is compared
//! against the bin masses of the normalized target.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Frozen importance functions on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTarget {
    /// Three isotropic Gaussian bumps.
    GaussianMixture,
    Uniform,
    /// A logistic ramp along u from 0.25 to 1.
    Step,
}

const BUMPS: [(f64, f64); 3] = [(0.3, 0.3), (0.7, 0.35), (0.5, 0.75)];
const BUMP_SIGMA: f64 = 0.1;
const STEP_WIDTH: f64 = 0.05;

impl SyntheticTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticTarget::GaussianMixture => "gaussian-mixture",
            SyntheticTarget::Uniform => "uniform",
            SyntheticTarget::Step => "step",
        }
    }

    pub fn q(self, u: f64, v: f64) -> f64 {
        self.q_grad(u, v).0
    }

    /// Q and its gradient.
    pub fn q_grad(self, u: f64, v: f64) -> (f64, [f64; 2]) {
        match self {
            SyntheticTarget::GaussianMixture => {
                let s2 = BUMP_SIGMA * BUMP_SIGMA;
                let mut q = 0.0;
                let mut g = [0.0; 2];
                for (cu, cv) in BUMPS {
                    let (du, dv) = (u - cu, v - cv);
                    let e = (-(du * du + dv * dv) / (2.0 * s2)).exp();
                    q += e;
                    g[0] -= e * du / s2;
                    g[1] -= e * dv / s2;
                }
                (q, g)
            }
            SyntheticTarget::Uniform => (1.0, [0.0; 2]),
            SyntheticTarget::Step => {
                let s = 1.0 / (1.0 + (-(u - 0.5) / STEP_WIDTH).exp());
                (0.25 + 0.75 * s, [0.75 * s * (1.0 - s) / STEP_WIDTH, 0.0])
            }
        }
    }
}

impl FromStr for SyntheticTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" => Ok(SyntheticTarget::GaussianMixture),
            "uniform" => Ok(SyntheticTarget::Uniform),
            "step" => Ok(SyntheticTarget::Step),
            other => Err(Error::InvalidConfig(format!(
                "unknown target {other:?} (expected gaussian-mixture, uniform or step)"
            ))),
        }
    }
}

/// What a walker does when its proposal leaves the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Keep the current position.
    Stay,
    /// Jump to a fresh uniform position.
    Redraw,
}

impl FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stay" => Ok(Boundary::Stay),
            "redraw" => Ok(Boundary::Redraw),
            other => Err(Error::InvalidConfig(format!(
                "unknown boundary rule {other:?} (expected stay or redraw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityConfig {
    pub target: SyntheticTarget,
    pub a: f64,
    pub b: f64,
    pub walkers: usize,
    /// Steps per walker, burn-in included.
    pub steps: u64,
    pub burn_in: u64,
    /// Histogram bins per side.
    pub bins: usize,
    pub boundary: Boundary,
    pub seed: u64,
}

impl Default for StationarityConfig {
    /// With `b² = 2a` the walk is the Euler discretization of the Langevin
    /// diffusion whose stationary law is Q itself.
    fn default() -> Self {
        let a = 1e-4;
        Self {
            target: SyntheticTarget::GaussianMixture,
            a,
            b: (2.0 * a).sqrt(),
            walkers: 1024,
            steps: 200_000,
            burn_in: 20_000,
            bins: 16,
            boundary: Boundary::Stay,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub tv: f64,
    /// Normalized empirical histogram, row-major `bins × bins` (v rows).
    pub empirical: Vec<f64>,
    /// Normalized target bin masses.
    pub expected: Vec<f64>,
    pub samples: u64,
}

/// Target mass of each bin by midpoint quadrature, normalized.
pub fn target_bin_masses(target: SyntheticTarget, bins: usize) -> Vec<f64> {
    const SUB: usize = 32;
    let n = bins * SUB;
    let h = 1.0 / n as f64;
    let mut mass = vec![0.0; bins * bins];
    for j in 0..n {
        for i in 0..n {
            let q = target.q((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
            mass[(j / SUB) * bins + i / SUB] += q;
        }
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    mass
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn stationarity_check(cfg: &StationarityConfig) -> Result<StationarityReport> {
    if cfg.bins < 4 {
        return Err(Error::InvalidConfig("bins must be >= 4".into()));
    }
    if cfg.walkers == 0 || cfg.steps <= cfg.burn_in {
        return Err(Error::InvalidConfig(
            "need walkers >= 1 and steps > burn_in".into(),
        ));
    }
    if cfg.a.is_nan() || cfg.a <= 0.0 || cfg.b.is_nan() || cfg.b < 0.0 {
        return Err(Error::InvalidConfig("need a > 0 and b >= 0".into()));
    }
    let bins = cfg.bins;
    let mut counts = vec![0u64; bins * bins];
    let bin = |t: f64| ((t * bins as f64) as usize).min(bins - 1);
    for w in 0..cfg.walkers {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(w as u64);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        for step in 0..cfg.steps {
            let (q, g) = cfg.target.q_grad(u, v);
            let eu: f64 = rng.sample(StandardNormal);
            let ev: f64 = rng.sample(StandardNormal);
            let nu = u + cfg.a * g[0] / q + cfg.b * eu;
            let nv = v + cfg.a * g[1] / q + cfg.b * ev;
            if (0.0..=1.0).contains(&nu) && (0.0..=1.0).contains(&nv) {
                (u, v) = (nu, nv);
            } else if cfg.boundary == Boundary::Redraw {
                (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            }
            if step >= cfg.burn_in {
                counts[bin(v) * bins + bin(u)] += 1;
            }
        }
    }
    let samples: u64 = counts.iter().sum();
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / samples as f64).collect();
    let expected = target_bin_masses(cfg.target, bins);
    Ok(StationarityReport {
        tv: total_variation(&empirical, &expected),
        empirical,
        expected,
        samples,
    })
}
