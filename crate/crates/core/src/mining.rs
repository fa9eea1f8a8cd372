//! Per-sample error, importance value and the softened loss weights.

use crate::error::{Error, Result};
use crate::image::Coord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Softness of the mining once warm-up is over. 0 is hard mining, 1 is
    /// unbiased importance sampling.
    pub alpha_target: f64,
    /// Iterations over which alpha ramps linearly from 0.
    pub warmup_iters: u64,
    /// Guard added to Q before exponentiation.
    pub eps_q: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            alpha_target: 0.6,
            warmup_iters: 1000,
            eps_q: 1e-8,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_target) {
            return Err(Error::InvalidConfig("alpha must be in [0, 1]".into()));
        }
        if !self.eps_q.is_finite() || self.eps_q <= 0.0 {
            return Err(Error::InvalidConfig("eps_q must be > 0".into()));
        }
        Ok(())
    }
}

fn same_len(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} channels, target has {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Squared L2 norm of the residual.
pub fn err_sq(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum())
}

/// L1 norm of the residual; the importance value Q.
pub fn q_l1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum())
}

pub fn alpha_at(cfg: &MiningConfig, iteration: u64) -> f64 {
    if cfg.warmup_iters == 0 {
        return cfg.alpha_target;
    }
    let t = (iteration as f64 / cfg.warmup_iters as f64).min(1.0);
    cfg.alpha_target * t
}

/// `1 / (q + eps_q)^alpha`.
pub fn soft_weight(q: f64, alpha: f64, eps_q: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    (q + eps_q).powf(-alpha)
}

/// How a batch sample was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Lmc,
    Uniform,
    Multinomial,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Lmc => "lmc",
            Provenance::Uniform => "uniform",
            Provenance::Multinomial => "multinomial",
        }
    }
}

/// One training sample with its frozen loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub coord: Coord,
    pub target: Vec<f64>,
    /// Importance value the weight was built from. Never differentiated.
    pub q_detached: f64,
    pub weight: f64,
    pub provenance: Provenance,
}

impl WeightedSample {
    /// A sample drawn from the importance distribution, weighted by
    /// `1/(q + eps_q)^alpha`.
    pub fn mined(
        coord: Coord,
        target: Vec<f64>,
        q: f64,
        alpha: f64,
        eps_q: f64,
        provenance: Provenance,
    ) -> Self {
        Self {
            coord,
            target,
            q_detached: q,
            weight: soft_weight(q, alpha, eps_q),
            provenance,
        }
    }

    /// A sample drawn from the uniform distribution; weight 1.
    pub fn uniform(coord: Coord, target: Vec<f64>, q: f64) -> Self {
        Self {
            coord,
            target,
            q_detached: q,
            weight: 1.0,
            provenance: Provenance::Uniform,
        }
    }
}

/// Samples whose weights were built against one forward pass, identified by
/// the parameter stamp it ran at.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedBatch {
    pub stamp: u64,
    pub samples: Vec<WeightedSample>,
}

/// `(1/N) Σ w_n · err_sq_n` and its gradient with respect to each prediction.
///
/// `preds` is row-major `N × C` and must come from the pass at `stamp`.
pub fn weighted_loss(batch: &MinedBatch, preds: &[f64], stamp: u64) -> Result<(f64, Vec<f64>)> {
    if batch.stamp != stamp {
        return Err(Error::StaleWeights {
            built: batch.stamp,
            current: stamp,
        });
    }
    let n = batch.samples.len();
    if n == 0 {
        if !preds.is_empty() {
            return Err(Error::DimensionMismatch(
                "predictions for an empty batch".into(),
            ));
        }
        return Ok((0.0, Vec::new()));
    }
    let c = batch.samples[0].target.len();
    if preds.len() != n * c || batch.samples.iter().any(|s| s.target.len() != c) {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {n} samples of {c} channels",
            preds.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for (s, (sample, p)) in batch.samples.iter().zip(preds.chunks_exact(c)).enumerate() {
        let mut e = 0.0;
        for k in 0..c {
            let r = p[k] - sample.target[k];
            e += r * r;
            grad[s * c + k] = sample.weight * 2.0 * r * inv_n;
        }
        loss += sample.weight * e;
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn residual_norms() {
        let gt = [0.5, 0.5, 0.5];
        let pred = [0.6, 0.3, 0.7];
        assert_relative_eq!(err_sq(&pred, &gt).unwrap(), 0.09, epsilon = 1e-12);
        assert_relative_eq!(q_l1(&pred, &gt).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(err_sq(&gt, &gt).unwrap(), 0.0);
        assert_eq!(q_l1(&gt, &gt).unwrap(), 0.0);
        assert_relative_eq!(err_sq(&[1.0], &[0.5]).unwrap(), 0.25);
        assert!(err_sq(&[1.0], &gt).is_err());
        assert!(q_l1(&[1.0], &gt).is_err());
    }

    #[test]
    fn warmup_schedule() {
        let cfg = MiningConfig::default();
        assert_eq!(alpha_at(&cfg, 0), 0.0);
        assert_relative_eq!(alpha_at(&cfg, 500), 0.3);
        assert_relative_eq!(alpha_at(&cfg, 1000), 0.6);
        assert_relative_eq!(alpha_at(&cfg, 50_000), 0.6);
        let now = MiningConfig {
            warmup_iters: 0,
            ..cfg
        };
        assert_eq!(alpha_at(&now, 0), 0.6);
    }

    #[test]
    fn soft_weight_values() {
        assert_eq!(soft_weight(0.37, 0.0, 1e-8), 1.0);
        assert_relative_eq!(
            soft_weight(0.5, 0.6, 1e-8),
            1.515_716_566,
            max_relative = 1e-7
        );
        assert_relative_eq!(soft_weight(0.0, 1.0, 1e-8), 1e8, max_relative = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(MiningConfig::default().validate().is_ok());
        let bad = MiningConfig {
            alpha_target: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MiningConfig {
            eps_q: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn batch(weights: &[f64], targets: &[f64], stamp: u64) -> MinedBatch {
        MinedBatch {
            stamp,
            samples: weights
                .iter()
                .zip(targets)
                .map(|(&w, &t)| WeightedSample {
                    coord: Coord::new(0.5, 0.5),
                    target: vec![t],
                    q_detached: 0.0,
                    weight: w,
                    provenance: Provenance::Lmc,
                })
                .collect(),
        }
    }

    #[test]
    fn single_sample_soft_loss() {
        let s = WeightedSample::mined(
            Coord::new(0.1, 0.1),
            vec![0.0],
            0.5,
            0.6,
            1e-8,
            Provenance::Lmc,
        );
        let b = MinedBatch {
            stamp: 3,
            samples: vec![s],
        };
        let (loss, grad) = weighted_loss(&b, &[0.5], 3).unwrap();
        assert_relative_eq!(loss, 0.25 / 0.5f64.powf(0.6), max_relative = 1e-7);
        assert_relative_eq!(loss, 0.378_929, max_relative = 1e-5);
        assert_relative_eq!(grad[0], 2.0 * 0.5 / 0.5f64.powf(0.6), max_relative = 1e-7);
    }

    #[test]
    fn unit_weights_give_mean_squared_error() {
        let b = batch(&[1.0, 1.0], &[0.0, 1.0], 1);
        let (loss, grad) = weighted_loss(&b, &[0.2, 0.5], 1).unwrap();
        assert_relative_eq!(loss, (0.04 + 0.25) / 2.0);
        assert_relative_eq!(grad[0], 0.2);
        assert_relative_eq!(grad[1], -0.5);
    }

    #[test]
    fn uniform_samples_are_unweighted() {
        let s = WeightedSample::uniform(Coord::new(0.2, 0.2), vec![0.1], 1e-6);
        assert_eq!(s.weight, 1.0);
        assert_eq!(s.provenance, Provenance::Uniform);
    }

    #[test]
    fn stale_and_mismatched_inputs() {
        let b = batch(&[1.0], &[0.0], 1);
        assert!(matches!(
            weighted_loss(&b, &[0.2], 2),
            Err(Error::StaleWeights { .. })
        ));
        assert!(weighted_loss(&b, &[0.2, 0.1], 1).is_err());
        let empty = batch(&[], &[], 4);
        assert_eq!(weighted_loss(&empty, &[], 4).unwrap(), (0.0, vec![]));
    }

    proptest! {
        #[test]
        fn loss_is_linear_in_weights(
            w in prop::collection::vec(0.0f64..5.0, 1..20),
            seed in 0.0f64..1.0,
        ) {
            let t: Vec<f64> = (0..w.len()).map(|i| ((i as f64 + seed) * 0.37).fract()).collect();
            let p: Vec<f64> = t.iter().map(|x| 1.0 - x).collect();
            let (l1, g1) = weighted_loss(&batch(&w, &t, 0), &p, 0).unwrap();
            let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            let (l2, g2) = weighted_loss(&batch(&w2, &t, 0), &p, 0).unwrap();
            prop_assert_eq!(l2, 2.0 * l1);
            for (a, b) in g1.iter().zip(&g2) {
                prop_assert_eq!(*b, 2.0 * a);
            }
        }

        #[test]
        fn l1_dominates_l2(r in prop::collection::vec(-1.0f64..1.0, 1..4)) {
            let zero = vec![0.0; r.len()];
            prop_assert!(q_l1(&r, &zero).unwrap() >= err_sq(&r, &zero).unwrap().sqrt() - 1e-15);
        }

        #[test]
        fn soft_weight_non_increasing(q1 in 0.0f64..3.0, dq in 0.0f64..3.0, alpha in 0.01f64..1.0) {
            prop_assert!(soft_weight(q1 + dq, alpha, 1e-8) <= soft_weight(q1, alpha, 1e-8));
        }
    }
}
