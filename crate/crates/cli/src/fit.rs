use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use softmine::image::save_heatmap;
use softmine::sampler::WalkerPool;
use softmine::trainer::{
    records_to_csv, train_with, ConvergenceRecord, Evaluation, Observer, RunResult,
};
use softmine::ImageField;

use crate::config::{config_error, ExperimentConfig};

pub fn load_image(cfg: &ExperimentConfig) -> anyhow::Result<ImageField> {
    let path = cfg
        .image
        .as_ref()
        .ok_or_else(|| config_error("missing required key \"image\""))?;
    ImageField::load(path).map_err(|e| config_error(format!("image: {e}")))
}

/// Writes per-evaluation rasters and the walker trace.
struct RunObserver {
    images: Option<PathBuf>,
    walkers: Option<BufWriter<File>>,
    walker_every: u64,
    width: usize,
    height: usize,
}

impl Observer for RunObserver {
    fn evaluation(
        &mut self,
        record: &ConvergenceRecord,
        eval: &Evaluation,
    ) -> softmine::Result<()> {
        if let Some(dir) = &self.images {
            let it = record.iteration;
            eval.render.save(dir.join(format!("render_{it:06}.png")))?;
            save_heatmap(
                &eval.error_map,
                self.width,
                self.height,
                dir.join(format!("error_{it:06}.png")),
            )?;
        }
        Ok(())
    }

    fn walkers(&mut self, iteration: u64, pool: &WalkerPool) -> softmine::Result<()> {
        let Some(w) = self.walkers.as_mut() else {
            return Ok(());
        };
        if !iteration.is_multiple_of(self.walker_every) {
            return Ok(());
        }
        let io = |e| softmine::Error::Io {
            path: PathBuf::from("walkers.csv"),
            source: e,
        };
        for (i, (c, q)) in pool.coords().iter().zip(pool.last_q()).enumerate() {
            writeln!(w, "{iteration},{i},{:.9},{:.9},{:.9e}", c.u, c.v, q).map_err(io)?;
        }
        Ok(())
    }
}

/// Runs one configured fit and writes its artifacts into `cfg.out`.
pub fn run_fit(cfg: &ExperimentConfig, img: &ImageField) -> anyhow::Result<RunResult> {
    cfg.validate()?;
    let out = &cfg.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("metadata.txt"), cfg.to_metadata().as_bytes())?;

    let images = if cfg.dump_images {
        let dir = out.join("images");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Some(dir)
    } else {
        None
    };
    let walkers = if cfg.walker_dump_every > 0 {
        let path = out.join("walkers.csv");
        let mut w = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        writeln!(w, "iteration,walker,u,v,last_q")?;
        Some(w)
    } else {
        None
    };
    let mut observer = RunObserver {
        images,
        walkers,
        walker_every: cfg.walker_dump_every.max(1),
        width: img.width(),
        height: img.height(),
    };

    let result = train_with(img, &cfg.train, &mut observer);
    if let Some(mut w) = observer.walkers.take() {
        w.flush()?;
    }
    let result = result?;
    write_file(
        &out.join("convergence.csv"),
        records_to_csv(&result.records).as_bytes(),
    )?;
    result.params.save(out.join("checkpoint.bin"))?;
    softmine::trainer::evaluate_full(&result.params, img)?
        .render
        .save(out.join("render.png"))?;
    Ok(result)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
