//! Batch construction: the persistent Langevin walker pool, its
//! re-initialization policy, uniform mixing, and the uniform and exact
//! multinomial baselines.

use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Coord, EdgePdf};
pub use crate::mining::Provenance;

mod stationarity;

pub use stationarity::{
    stationarity_check, Boundary, StationarityConfig, StationarityReport, SyntheticTarget,
};

/// Langevin walk and pool maintenance settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmcConfig {
    /// Step size of the drift along `∇log Q`.
    pub a: f64,
    /// Standard deviation of the Gaussian kick.
    pub b: f64,
    /// Share of every batch replaced by fresh uniform samples.
    pub uniform_frac: f64,
    /// Share of the pool with the lowest Q redrawn each iteration.
    pub reinit_frac: f64,
    /// Share of redraws taken from the edge PDF; the rest are uniform.
    pub edge_mix: f64,
    /// Walker count; `None` couples it to the batch size.
    pub pool_size: Option<usize>,
    /// Guard in `∇Q / (Q + eps_q)`.
    pub eps_q: f64,
}

impl Default for LmcConfig {
    fn default() -> Self {
        Self {
            a: 1e-5,
            b: 1e-2,
            uniform_frac: 0.1,
            reinit_frac: 0.1,
            edge_mix: 0.5,
            pool_size: None,
            eps_q: 1e-8,
        }
    }
}

impl LmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || self.a <= 0.0 {
            return Err(Error::InvalidConfig("lmc a must be > 0".into()));
        }
        if !self.b.is_finite() || self.b < 0.0 {
            return Err(Error::InvalidConfig("lmc b must be >= 0".into()));
        }
        for (name, f) in [
            ("uniform_frac", self.uniform_frac),
            ("reinit_frac", self.reinit_frac),
            ("edge_mix", self.edge_mix),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.pool_size == Some(0) {
            return Err(Error::InvalidConfig("pool_size must be >= 1".into()));
        }
        if self.eps_q.is_nan() || self.eps_q <= 0.0 {
            return Err(Error::InvalidConfig("eps_q must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Uniform,
    Lmc,
    Multinomial,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::Lmc => "lmc",
            SamplerKind::Multinomial => "multinomial",
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplerKind::Uniform),
            "lmc" => Ok(SamplerKind::Lmc),
            "multinomial" => Ok(SamplerKind::Multinomial),
            other => Err(Error::InvalidConfig(format!(
                "unknown sampler {other:?} (expected uniform, lmc or multinomial)"
            ))),
        }
    }
}

/// `ceil(frac · n)`, robust to representation error in `frac`.
pub fn fraction_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Persistent Langevin walkers.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkerPool {
    coords: Vec<Coord>,
    last_q: Vec<f64>,
    seed: u64,
}

const NOISE_KEY: u64 = 0x6c6d_635f_6e6f_6973;

/// Two independent standard normals from exactly two uniform draws
/// (Box-Muller), so stream positions stay aligned with walker indices.
fn gaussian_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

impl WalkerPool {
    /// Walkers drawn i.i.d. uniform over the unit square.
    pub fn init(pool_size: usize, seed: u64) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::InvalidConfig("pool_size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..pool_size).map(|_| Coord::uniform(&mut rng)).collect();
        Ok(Self {
            coords,
            last_q: vec![0.0; pool_size],
            seed,
        })
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn last_q(&self) -> &[f64] {
        &self.last_q
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// One unadjusted Langevin step `x ← x + a·∇Q/(Q+eps) + b·η` for every
    /// walker with `active[i]`.
    ///
    /// Returns the mask of walkers whose proposal left the unit square or was
    /// not finite; those keep their old position until [`Self::reinit`].
    /// Inactive walkers are left untouched, including their `last_q`. The
    /// noise for walker `i` at `iteration` comes from its own counter-based
    /// substream, so the result does not depend on evaluation order.
    pub fn lmc_step(
        &mut self,
        grad_q: &[[f64; 2]],
        q: &[f64],
        active: &[bool],
        cfg: &LmcConfig,
        iteration: u64,
    ) -> Result<Vec<bool>> {
        let n = self.len();
        if grad_q.len() != n || q.len() != n || active.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "pool of {n} walkers got {} gradients, {} Q values, {} flags",
                grad_q.len(),
                q.len(),
                active.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ NOISE_KEY);
        rng.set_stream(iteration);
        let mut flagged = vec![false; n];
        for i in 0..n {
            // Every walker consumes exactly two words of the stream, active or
            // not, so walker i's kick depends only on (seed, iteration, i).
            let (eu, ev) = gaussian_pair(&mut rng);
            if !active[i] {
                continue;
            }
            let inv = 1.0 / (q[i] + cfg.eps_q);
            let x = self.coords[i];
            let next = Coord::new(
                x.u + cfg.a * grad_q[i][0] * inv + cfg.b * eu,
                x.v + cfg.a * grad_q[i][1] * inv + cfg.b * ev,
            );
            if q[i].is_finite() {
                self.last_q[i] = q[i];
            }
            if next.in_domain() && q[i].is_finite() {
                self.coords[i] = next;
            } else {
                flagged[i] = true;
            }
        }
        Ok(flagged)
    }

    /// Redraws every walker in `mask` plus the `reinit_frac` share with the
    /// lowest `last_q` (ties broken by index). Redraws alternate between the
    /// edge PDF and the uniform distribution in the `edge_mix` proportion.
    /// Returns the redrawn walker indices in increasing order.
    pub fn reinit<R: Rng + ?Sized>(
        &mut self,
        mask: &[bool],
        edge: &EdgePdf,
        cfg: &LmcConfig,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let n = self.len();
        if mask.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "reinit mask has {} entries for {n} walkers",
                mask.len()
            )));
        }
        let mut chosen = mask.to_vec();
        let k = fraction_count(cfg.reinit_frac, n);
        if k > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            let q = &self.last_q;
            order.select_nth_unstable_by(k - 1, |&x, &y| q[x].total_cmp(&q[y]).then(x.cmp(&y)));
            for &i in &order[..k] {
                chosen[i] = true;
            }
        }
        let redrawn: Vec<usize> = (0..n).filter(|&i| chosen[i]).collect();
        if redrawn.is_empty() {
            return Ok(redrawn);
        }
        let fresh_q = self.last_q.iter().copied().fold(0.0, f64::max);
        for (j, &i) in redrawn.iter().enumerate() {
            let from_edge =
                ((j + 1) as f64 * cfg.edge_mix).floor() > (j as f64 * cfg.edge_mix).floor();
            self.coords[i] = if from_edge {
                edge.sample_coord(rng)
            } else {
                Coord::uniform(rng)
            };
            self.last_q[i] = fresh_q;
        }
        Ok(redrawn)
    }
}

/// Coordinates of one training batch with where each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub coords: Vec<Coord>,
    pub provenance: Vec<Provenance>,
    /// Walker index for walker-provenance samples.
    pub walker: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&x| x == p).count()
    }
}

/// Batch of `n` i.i.d. uniform coordinates.
pub fn uniform_batch<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Batch {
    Batch {
        coords: (0..n).map(|_| Coord::uniform(rng)).collect(),
        provenance: vec![Provenance::Uniform; n],
        walker: vec![None; n],
    }
}

/// The first `n` walkers, with `ceil(uniform_frac · n)` randomly chosen
/// positions replaced by fresh uniform coordinates for this batch only.
pub fn compose_batch<R: Rng + ?Sized>(
    pool: &WalkerPool,
    uniform_frac: f64,
    rng: &mut R,
    n: usize,
) -> Result<Batch> {
    if n > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "batch of {n} exceeds the pool of {} walkers",
            pool.len()
        )));
    }
    let mut batch = Batch {
        coords: pool.coords[..n].to_vec(),
        provenance: vec![Provenance::Lmc; n],
        walker: (0..n).map(Some).collect(),
    };
    let k = fraction_count(uniform_frac, n);
    if k > 0 {
        let mut picked = index::sample(rng, n, k).into_vec();
        picked.sort_unstable();
        for i in picked {
            batch.coords[i] = Coord::uniform(rng);
            batch.provenance[i] = Provenance::Uniform;
            batch.walker[i] = None;
        }
    }
    Ok(batch)
}

/// Draws from the exact per-pixel PMF of Q.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialDraw {
    /// Pixel-center coordinates.
    pub coords: Vec<Coord>,
    pub pixels: Vec<usize>,
    /// Normalized PMF value of each draw.
    pub qhat: Vec<f64>,
    /// `qhat · M`, the density with respect to the uniform distribution.
    pub density: Vec<f64>,
}

/// `n` i.i.d. pixel draws with probability `q_all / Σ q_all`. All-zero (or
/// non-finite) input falls back to the uniform PMF.
pub fn multinomial_batch<R: Rng + ?Sized>(
    q_all: &[f64],
    width: usize,
    height: usize,
    n: usize,
    rng: &mut R,
) -> Result<MultinomialDraw> {
    let m = width * height;
    if q_all.len() != m || m == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} Q values for a {width}x{height} lattice",
            q_all.len()
        )));
    }
    if q_all.iter().any(|&q| q < 0.0) {
        return Err(Error::InvalidConfig("negative importance value".into()));
    }
    let pmf = EdgePdf::from_scores(width, height, q_all);
    let mut out = MultinomialDraw {
        coords: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n),
        qhat: Vec::with_capacity(n),
        density: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let i = pmf.pixel_for(rng.random::<f64>());
        let p = pmf.probs()[i];
        out.coords.push(Coord::new(
            ((i % width) as f64 + 0.5) / width as f64,
            ((i / width) as f64 + 0.5) / height as f64,
        ));
        out.pixels.push(i);
        out.qhat.push(p);
        out.density.push(p * m as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn uniform_pdf() -> EdgePdf {
        EdgePdf::from_scores(4, 4, &[0.0; 16])
    }

    #[test]
    fn init_is_seeded_and_uniform() {
        let a = WalkerPool::init(100, 3).unwrap();
        assert_eq!(a, WalkerPool::init(100, 3).unwrap());
        assert_ne!(a, WalkerPool::init(100, 4).unwrap());
        assert_eq!(WalkerPool::init(1, 0).unwrap().len(), 1);
        assert!(WalkerPool::init(0, 0).is_err());
    }

    #[test]
    fn init_mean_within_three_sigma() {
        // sd of the mean of 1e6 U(0,1) draws is sqrt(1/12)/1e3 ≈ 2.9e-4
        let pool = WalkerPool::init(1_000_000, 11).unwrap();
        let mean = pool.coords().iter().map(|c| c.u).sum::<f64>() / 1e6;
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
        assert!(pool.coords().iter().all(Coord::in_domain));
    }

    #[test]
    fn deterministic_drift_step() {
        let mut pool = WalkerPool {
            coords: vec![Coord::new(0.5, 0.5)],
            last_q: vec![0.0],
            seed: 0,
        };
        let cfg = LmcConfig {
            a: 1e-5,
            b: 0.0,
            eps_q: 1e-8,
            ..Default::default()
        };
        // ∇Q = (100, -50) with Q = 1 gives ∇log Q ≈ (100, -50)
        let mask = pool
            .lmc_step(&[[100.0, -50.0]], &[1.0], &[true], &cfg, 0)
            .unwrap();
        assert_eq!(mask, vec![false]);
        assert_relative_eq!(pool.coords()[0].u, 0.501, epsilon = 1e-9);
        assert_relative_eq!(pool.coords()[0].v, 0.4995, epsilon = 1e-9);
        assert_eq!(pool.last_q()[0], 1.0);
    }

    #[test]
    fn zero_gradient_without_noise_is_a_fixed_point() {
        let mut pool = WalkerPool::init(50, 2).unwrap();
        let before = pool.clone();
        let cfg = LmcConfig {
            b: 0.0,
            ..Default::default()
        };
        let mask = pool
            .lmc_step(&[[0.0; 2]; 50], &[0.3; 50], &[true; 50], &cfg, 9)
            .unwrap();
        assert!(mask.iter().all(|m| !m));
        assert_eq!(pool.coords(), before.coords());
    }

    #[test]
    fn leaving_the_domain_flags_the_walker() {
        let mut pool = WalkerPool {
            coords: vec![Coord::new(0.9999, 0.5), Coord::new(0.5, 0.5)],
            last_q: vec![0.0; 2],
            seed: 0,
        };
        let cfg = LmcConfig {
            b: 0.0,
            ..Default::default()
        };
        let grads = [[1e6, 0.0], [f64::NAN, 0.0]];
        let mask = pool
            .lmc_step(&grads, &[1.0, 1.0], &[true, true], &cfg, 0)
            .unwrap();
        assert_eq!(mask, vec![true, true]);
        assert_eq!(pool.coords()[0], Coord::new(0.9999, 0.5));
        assert_eq!(pool.coords()[1], Coord::new(0.5, 0.5));
        assert!(pool
            .lmc_step(&grads[..1], &[1.0], &[true], &cfg, 0)
            .is_err());
    }

    #[test]
    fn inactive_walkers_are_untouched() {
        let mut pool = WalkerPool::init(3, 5).unwrap();
        let before = pool.clone();
        pool.lmc_step(
            &[[1.0, 1.0]; 3],
            &[0.5; 3],
            &[false, true, false],
            &LmcConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(pool.coords()[0], before.coords()[0]);
        assert_eq!(pool.coords()[2], before.coords()[2]);
        assert_ne!(pool.coords()[1], before.coords()[1]);
        assert_eq!(pool.last_q(), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn noise_is_independent_of_other_walkers() {
        let cfg = LmcConfig::default();
        let mut full = WalkerPool::init(8, 1).unwrap();
        let mut part = full.clone();
        full.lmc_step(&[[0.0; 2]; 8], &[1.0; 8], &[true; 8], &cfg, 42)
            .unwrap();
        let mut active = [false; 8];
        active[5] = true;
        part.lmc_step(&[[0.0; 2]; 8], &[1.0; 8], &active, &cfg, 42)
            .unwrap();
        assert_eq!(full.coords()[5], part.coords()[5]);
    }

    #[test]
    fn reinit_redraws_everything_flagged() {
        let mut pool = WalkerPool::init(20, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let redrawn = pool
            .reinit(&[true; 20], &uniform_pdf(), &LmcConfig::default(), &mut rng)
            .unwrap();
        assert_eq!(redrawn.len(), 20);
        assert!(pool.coords().iter().all(Coord::in_domain));
    }

    #[test]
    fn reinit_noop_when_disabled() {
        let mut pool = WalkerPool::init(20, 0).unwrap();
        let before = pool.clone();
        let cfg = LmcConfig {
            reinit_frac: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(pool
            .reinit(&[false; 20], &uniform_pdf(), &cfg, &mut rng)
            .unwrap()
            .is_empty());
        assert_eq!(pool, before);
    }

    #[test]
    fn reinit_picks_the_argmin() {
        let mut pool = WalkerPool::init(10, 0).unwrap();
        pool.last_q = vec![0.5, 0.3, 0.9, 0.05, 0.7, 0.6, 0.2, 0.8, 0.4, 0.1];
        let before = pool.coords().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let redrawn = pool
            .reinit(
                &[false; 10],
                &uniform_pdf(),
                &LmcConfig::default(),
                &mut rng,
            )
            .unwrap();
        assert_eq!(redrawn, vec![3]);
        for i in (0..10).filter(|&i| i != 3) {
            assert_eq!(pool.coords()[i], before[i]);
        }
        assert_eq!(pool.last_q()[3], 0.9);
    }

    #[test]
    fn edge_redraws_land_in_the_edge_pixel() {
        let mut scores = vec![0.0; 16];
        scores[6] = 1.0; // pixel (2, 1)
        let pdf = EdgePdf::from_scores(4, 4, &scores);
        let mut pool = WalkerPool::init(100, 0).unwrap();
        let cfg = LmcConfig {
            edge_mix: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        pool.reinit(&[true; 100], &pdf, &cfg, &mut rng).unwrap();
        for c in pool.coords() {
            assert!(
                (0.5..=0.75).contains(&c.u) && (0.25..=0.5).contains(&c.v),
                "{c:?}"
            );
        }
    }

    #[test]
    fn batch_counts() {
        let pool = WalkerPool::init(1024, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = compose_batch(&pool, 0.1, &mut rng, 1024).unwrap();
        assert_eq!(b.count(Provenance::Uniform), 103);
        assert_eq!(b.count(Provenance::Lmc), 921);
        assert_eq!(b.len(), 1024);
        for (i, w) in b.walker.iter().enumerate() {
            if let Some(w) = w {
                assert_eq!(b.coords[i], pool.coords()[*w]);
            }
        }
        let exact = compose_batch(&pool, 0.0, &mut rng, 1024).unwrap();
        assert_eq!(exact.coords, pool.coords());
        assert!(compose_batch(&pool, 0.1, &mut rng, 1025).is_err());
    }

    #[test]
    fn multinomial_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = multinomial_batch(&[1.0, 3.0], 2, 1, 100_000, &mut rng).unwrap();
        let ones = d.pixels.iter().filter(|&&p| p == 1).count() as f64 / 1e5;
        assert!((ones - 0.75).abs() < 0.01, "{ones}");
        assert!(d.coords.iter().all(|c| c.u == 0.25 || c.u == 0.75));
        assert_eq!(
            d.density[d.pixels.iter().position(|&p| p == 1).unwrap()],
            1.5
        );
    }

    #[test]
    fn multinomial_degenerate_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q = vec![0.0; 9];
        q[4] = 2.0;
        let d = multinomial_batch(&q, 3, 3, 500, &mut rng).unwrap();
        assert!(d.pixels.iter().all(|&p| p == 4));
        assert!(d.coords.iter().all(|&c| c == Coord::new(0.5, 0.5)));
        let d = multinomial_batch(&[0.7; 9], 3, 3, 50, &mut rng).unwrap();
        assert!(d.qhat.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
        let d = multinomial_batch(&[0.0; 9], 3, 3, 50, &mut rng).unwrap();
        assert!(d.density.iter().all(|&p| (p - 1.0).abs() < 1e-12));
        assert!(multinomial_batch(&[1.0; 8], 3, 3, 5, &mut rng).is_err());
    }

    #[test]
    fn sampler_kind_parsing() {
        for k in [
            SamplerKind::Uniform,
            SamplerKind::Lmc,
            SamplerKind::Multinomial,
        ] {
            assert_eq!(k.as_str().parse::<SamplerKind>().unwrap(), k);
        }
        assert!("edge".parse::<SamplerKind>().is_err());
    }

    proptest! {
        #[test]
        fn pool_stays_in_domain(
            seed in any::<u64>(),
            g in prop::collection::vec((-1e7f64..1e7, -1e7f64..1e7), 16),
            q in prop::collection::vec(0.0f64..2.0, 16),
        ) {
            let mut pool = WalkerPool::init(16, seed).unwrap();
            let grads: Vec<[f64; 2]> = g.iter().map(|&(a, b)| [a, b]).collect();
            let cfg = LmcConfig { b: 0.05, ..Default::default() };
            let mask = pool.lmc_step(&grads, &q, &[true; 16], &cfg, 3).unwrap();
            prop_assert!(pool.coords().iter().all(Coord::in_domain));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pool.reinit(&mask, &uniform_pdf(), &cfg, &mut rng).unwrap();
            prop_assert!(pool.coords().iter().all(Coord::in_domain));
            prop_assert!(pool.last_q().iter().all(|q| q.is_finite()));
        }
    }
}
