//! The fitting loop: batch construction, weighted loss, parameter update,
//! walker update, periodic full-image evaluation.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{
    AdamState, EncodingConfig, FieldLayout, FieldParams, ForwardTape, LrSchedule, Real,
};
use crate::image::{mse, psnr_from_mse, sobel_edge_pdf, Coord, EdgePdf, ImageField};
use crate::mining::{
    alpha_at, soft_weight, weighted_loss, MinedBatch, MiningConfig, Provenance, WeightedSample,
};
use crate::sampler::{
    compose_batch, fraction_count, multinomial_batch, uniform_batch, Batch, LmcConfig, SamplerKind,
    WalkerPool,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub sampler: SamplerKind,
    pub mining: MiningConfig,
    pub lmc: LmcConfig,
    /// Redraw the lowest-Q share of the pool every iteration. Walkers that
    /// leave the domain are redrawn regardless.
    pub reinit: bool,
    pub encoding: EncodingConfig,
    pub hidden_width: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub target_psnr: Option<f64>,
    /// Write 0 instead of wall time so logs are byte-reproducible.
    pub reproducible: bool,
    /// Train on the center of the pixel each sample falls in instead of the
    /// bilinear target at the sample itself. Walkers keep moving continuously.
    pub snap_to_pixels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 1024,
            eval_every: 100,
            sampler: SamplerKind::Lmc,
            mining: MiningConfig::default(),
            lmc: LmcConfig::default(),
            reinit: true,
            encoding: EncodingConfig::default(),
            hidden_width: 64,
            lr: LrSchedule::default(),
            seed: 0,
            target_psnr: None,
            reproducible: false,
            snap_to_pixels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.lr.base.is_nan() || self.lr.base <= 0.0 {
            return Err(Error::InvalidConfig("lr must be > 0".into()));
        }
        self.mining.validate()?;
        self.lmc.validate()?;
        self.encoding.validate()?;
        if let Some(p) = self.lmc.pool_size {
            if p < self.batch_size {
                return Err(Error::InvalidConfig(format!(
                    "pool_size {p} is smaller than batch_size {}",
                    self.batch_size
                )));
            }
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.lmc.pool_size.unwrap_or(self.batch_size)
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRecord {
    pub iteration: u64,
    /// Mean weighted training loss since the previous record.
    pub train_loss: f64,
    pub psnr_db: f64,
    pub elapsed_s: f64,
    pub alpha_effective: f64,
}

pub const CSV_HEADER: &str = "iteration,train_loss,psnr_db,elapsed_s,alpha_effective";

impl ConvergenceRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.6},{:.3},{:.6}",
            self.iteration, self.train_loss, self.psnr_db, self.elapsed_s, self.alpha_effective
        )
    }
}

pub fn records_to_csv(records: &[ConvergenceRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<ConvergenceRecord>,
    pub params: FieldParams<f32>,
    pub iterations_to_target: Option<u64>,
}

impl RunResult {
    pub fn final_psnr(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.psnr_db)
    }

    /// PSNR of the record at `iteration`, if one was taken.
    pub fn psnr_at(&self, iteration: u64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.iteration == iteration)
            .map(|r| r.psnr_db)
    }
}

/// First record whose PSNR reaches `target_db`.
pub fn iterations_to_target(records: &[ConvergenceRecord], target_db: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.psnr_db >= target_db)
        .map(|r| r.iteration)
}

/// State of the batch that produced a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceSnapshot {
    pub iteration: u64,
    pub loss: f64,
    pub coords: Vec<Coord>,
    pub preds: Vec<f64>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl fmt::Display for DivergenceSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loss {} at iteration {} over {} samples (max weight {:e})",
            self.loss,
            self.iteration,
            self.coords.len(),
            self.weights.iter().copied().fold(0.0, f64::max)
        )
    }
}

/// Full-image render compared against the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub psnr_db: f64,
    /// Per-pixel squared L2 error, row-major.
    pub error_map: Vec<f64>,
    pub render: ImageField,
}

/// Renders the field at every pixel center of `img` and scores it.
pub fn evaluate_full(params: &FieldParams<f32>, img: &ImageField) -> Result<Evaluation> {
    let centers = img.pixel_centers();
    evaluate_at(params, img, &centers)
}

fn evaluate_at(
    params: &FieldParams<f32>,
    img: &ImageField,
    centers: &[Coord],
) -> Result<Evaluation> {
    if params.layout().out_channels != img.channels() {
        return Err(Error::DimensionMismatch(format!(
            "field has {} channels, image has {}",
            params.layout().out_channels,
            img.channels()
        )));
    }
    let pred = params.predict(centers)?;
    let c = img.channels();
    let error_map = pred
        .chunks_exact(c)
        .zip(img.data().chunks_exact(c))
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let psnr_db = psnr_from_mse(mse(&pred, img.data()));
    let render = ImageField::new(
        img.width(),
        img.height(),
        c,
        pred.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )?;
    Ok(Evaluation {
        psnr_db,
        error_map,
        render,
    })
}

/// Hooks called during training.
pub trait Observer {
    fn evaluation(&mut self, _record: &ConvergenceRecord, _eval: &Evaluation) -> Result<()> {
        Ok(())
    }

    /// Called after the walker update of every iteration.
    fn walkers(&mut self, _iteration: u64, _pool: &WalkerPool) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// What one iteration did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub alpha: f64,
    pub batch: MinedBatch,
    /// Walkers redrawn after the update.
    pub redrawn: usize,
}

const BATCH_STREAM: u64 = 1;
const REINIT_STREAM: u64 = 2;
const POOL_KEY: u64 = 0x706f_6f6c;

/// A training run that can be advanced one iteration at a time.
pub struct Trainer<'a> {
    img: &'a ImageField,
    cfg: TrainConfig,
    params: FieldParams<f32>,
    adam: AdamState<f32>,
    tape: ForwardTape<f32>,
    grad: Vec<f32>,
    pool: Option<WalkerPool>,
    edge: Option<EdgePdf>,
    batch_rng: ChaCha8Rng,
    reinit_rng: ChaCha8Rng,
    centers: Vec<Coord>,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(img: &'a ImageField, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = FieldLayout::new(cfg.encoding, cfg.hidden_width, img.channels())?;
        let params = FieldParams::init(layout, cfg.seed);
        let adam = AdamState::new(params.len());
        let (pool, edge) = if cfg.sampler == SamplerKind::Lmc {
            (
                Some(WalkerPool::init(cfg.pool_size(), cfg.seed ^ POOL_KEY)?),
                Some(sobel_edge_pdf(img)),
            )
        } else {
            (None, None)
        };
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        };
        Ok(Self {
            img,
            params,
            adam,
            tape: ForwardTape::default(),
            grad: Vec::new(),
            pool,
            edge,
            batch_rng: stream(BATCH_STREAM),
            reinit_rng: stream(REINIT_STREAM),
            centers: img.pixel_centers(),
            iteration: 0,
            cfg,
        })
    }

    pub fn params(&self) -> &FieldParams<f32> {
        &self.params
    }

    pub fn pool(&self) -> Option<&WalkerPool> {
        self.pool.as_ref()
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_params(self) -> FieldParams<f32> {
        self.params
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate_at(&self.params, self.img, &self.centers)
    }

    fn draw_batch(&mut self) -> Result<(Batch, Vec<f64>)> {
        let n = self.cfg.batch_size;
        match self.cfg.sampler {
            SamplerKind::Uniform => Ok((uniform_batch(n, &mut self.batch_rng), vec![1.0; n])),
            SamplerKind::Lmc => {
                let pool = self.pool.as_ref().expect("lmc sampler owns a pool");
                let b = compose_batch(pool, self.cfg.lmc.uniform_frac, &mut self.batch_rng, n)?;
                Ok((b, vec![f64::NAN; n]))
            }
            SamplerKind::Multinomial => {
                let c = self.img.channels();
                let pred = self.params.predict(&self.centers)?;
                let q_all: Vec<f64> = pred
                    .chunks_exact(c)
                    .zip(self.img.data().chunks_exact(c))
                    .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum())
                    .collect();
                let k = fraction_count(self.cfg.lmc.uniform_frac, n);
                let draw = multinomial_batch(
                    &q_all,
                    self.img.width(),
                    self.img.height(),
                    n - k,
                    &mut self.batch_rng,
                )?;
                let extra = uniform_batch(k, &mut self.batch_rng);
                let mut density = draw.density;
                density.extend(std::iter::repeat_n(1.0, k));
                let mut provenance = vec![Provenance::Multinomial; n - k];
                provenance.extend(extra.provenance);
                let mut coords = draw.coords;
                coords.extend(extra.coords);
                Ok((
                    Batch {
                        coords,
                        provenance,
                        walker: vec![None; n],
                    },
                    density,
                ))
            }
        }
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let it = self.iteration;
        let alpha = alpha_at(&self.cfg.mining, it);
        let eps_q = self.cfg.mining.eps_q;
        let c = self.img.channels();
        let (mut batch, density) = self.draw_batch()?;
        if self.cfg.snap_to_pixels {
            for x in &mut batch.coords {
                *x = self.img.snap_to_center(*x);
            }
        }
        let n = batch.len();
        let lmc = self.cfg.sampler == SamplerKind::Lmc;

        let mut targets = vec![0.0; n * c];
        let mut gt_grad = if lmc {
            vec![0.0; n * 2 * c]
        } else {
            Vec::new()
        };
        for (s, x) in batch.coords.iter().enumerate() {
            let out = &mut targets[s * c..(s + 1) * c];
            if lmc && !self.cfg.snap_to_pixels && batch.walker[s].is_some() {
                self.img
                    .sample_into(*x, out, Some(&mut gt_grad[s * 2 * c..(s + 1) * 2 * c]))?;
            } else {
                self.img.sample_into(*x, out, None)?;
            }
        }

        let preds = self.params.forward_into(&batch.coords, &mut self.tape)?;
        let stamp = self.tape.stamp();
        let mut q = vec![0.0; n];
        let mut samples = Vec::with_capacity(n);
        for s in 0..n {
            let p = &preds[s * c..(s + 1) * c];
            let t = &targets[s * c..(s + 1) * c];
            q[s] = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum();
            let sample = match batch.provenance[s] {
                Provenance::Uniform => WeightedSample::uniform(batch.coords[s], t.to_vec(), q[s]),
                Provenance::Lmc => WeightedSample::mined(
                    batch.coords[s],
                    t.to_vec(),
                    q[s],
                    alpha,
                    eps_q,
                    Provenance::Lmc,
                ),
                Provenance::Multinomial => WeightedSample {
                    coord: batch.coords[s],
                    target: t.to_vec(),
                    q_detached: density[s],
                    weight: soft_weight(density[s], alpha, eps_q),
                    provenance: Provenance::Multinomial,
                },
            };
            samples.push(sample);
        }
        let mined = MinedBatch { stamp, samples };
        let (loss, upstream) = weighted_loss(&mined, &preds, stamp)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(Box::new(DivergenceSnapshot {
                iteration: it,
                loss,
                coords: batch.coords.clone(),
                preds,
                targets,
                weights: mined.samples.iter().map(|s| s.weight).collect(),
            })));
        }
        self.params
            .backward_params_into(&mut self.tape, &upstream, &mut self.grad)?;

        // Taken before the update invalidates the tape.
        let grad_rows = if lmc {
            let rows: Vec<bool> = batch.walker.iter().map(Option::is_some).collect();
            q_coord_gradient(
                &self.params,
                &mut self.tape,
                &preds,
                &targets,
                &gt_grad,
                &rows,
            )?
        } else {
            Vec::new()
        };

        self.adam
            .step(&mut self.params, &self.grad, self.cfg.lr.at(it))?;

        let mut redrawn = 0;
        if lmc {
            let pool = self.pool.as_mut().expect("lmc sampler owns a pool");
            let m = pool.len();
            let mut grad_q = vec![[0.0; 2]; m];
            let mut walker_q = vec![0.0; m];
            let mut active = vec![false; m];
            for s in 0..n {
                let Some(w) = batch.walker[s] else { continue };
                grad_q[w] = grad_rows[s];
                walker_q[w] = q[s];
                active[w] = true;
            }
            let mask = pool.lmc_step(&grad_q, &walker_q, &active, &self.cfg.lmc, it)?;
            let reinit_cfg = if self.cfg.reinit {
                self.cfg.lmc
            } else {
                LmcConfig {
                    reinit_frac: 0.0,
                    ..self.cfg.lmc
                }
            };
            let edge = self.edge.as_ref().expect("lmc sampler owns an edge pdf");
            redrawn = pool
                .reinit(&mask, edge, &reinit_cfg, &mut self.reinit_rng)?
                .len();
        }

        self.iteration += 1;
        Ok(StepOutcome {
            loss,
            alpha,
            batch: mined,
            redrawn,
        })
    }
}

/// Coordinate gradient of Q = Σ_c |pred_c - gt_c| for the rows flagged in
/// `rows`; other rows get zero. `gt_grad` holds (∂u, ∂v) per channel per row,
/// `tape` must come from the forward pass that produced `preds`.
pub fn q_coord_gradient<T: Real>(
    params: &FieldParams<T>,
    tape: &mut ForwardTape<T>,
    preds: &[f64],
    targets: &[f64],
    gt_grad: &[f64],
    rows: &[bool],
) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let c = params.layout().out_channels;
    if preds.len() != n * c || targets.len() != n * c || gt_grad.len() != n * 2 * c {
        return Err(Error::DimensionMismatch(format!(
            "q gradient over {n} rows of {c} channels got {} preds, {} targets, {} gt gradients",
            preds.len(),
            targets.len(),
            gt_grad.len()
        )));
    }
    let mut signs = vec![0.0; n * c];
    for s in (0..n).filter(|&s| rows[s]) {
        for k in 0..c {
            let r = preds[s * c + k] - targets[s * c + k];
            signs[s * c + k] = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    let mut g = params.backward_coords(tape, &signs)?;
    for s in (0..n).filter(|&s| rows[s]) {
        for k in 0..c {
            let sign = signs[s * c + k];
            g[s][0] -= sign * gt_grad[s * 2 * c + 2 * k];
            g[s][1] -= sign * gt_grad[s * 2 * c + 2 * k + 1];
        }
    }
    Ok(g)
}

pub fn train(img: &ImageField, cfg: &TrainConfig) -> Result<RunResult> {
    train_with(img, cfg, &mut ())
}

/// Trains for `cfg.iterations`, evaluating at every multiple of
/// `eval_every` and after the last iteration.
pub fn train_with(
    img: &ImageField,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<RunResult> {
    let start = Instant::now();
    let mut trainer = Trainer::new(img, cfg.clone())?;
    let mut records = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    while trainer.iteration() < cfg.iterations {
        let out = trainer.step()?;
        loss_sum += out.loss;
        loss_n += 1;
        if let Some(pool) = trainer.pool() {
            observer.walkers(trainer.iteration(), pool)?;
        }
        let t = trainer.iteration();
        if t % cfg.eval_every == 0 || t == cfg.iterations {
            let eval = trainer.evaluate()?;
            let record = ConvergenceRecord {
                iteration: t,
                train_loss: loss_sum / loss_n as f64,
                psnr_db: eval.psnr_db,
                elapsed_s: if cfg.reproducible {
                    0.0
                } else {
                    start.elapsed().as_secs_f64()
                },
                alpha_effective: out.alpha,
            };
            observer.evaluation(&record, &eval)?;
            records.push(record);
            (loss_sum, loss_n) = (0.0, 0);
        }
    }
    let iterations_to_target = cfg
        .target_psnr
        .and_then(|t| iterations_to_target(&records, t));
    Ok(RunResult {
        records,
        params: trainer.into_params(),
        iterations_to_target,
    })
}
