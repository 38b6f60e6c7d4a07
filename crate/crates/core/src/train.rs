//! The training loop.

use std::fmt::Write as _;

use rand::RngCore;

use crate::config::TrainConfig;
use crate::data::{self, SyntheticScene};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{self, CpNet};
use crate::ops::norm::Mode;
use crate::optim::{poly_lr, Sgd};
use crate::param::ParamStore;
use crate::rng::{self, Rng};

/// Losses of one optimisation step. `step` counts completed steps, so the
/// first record has step 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub seg: f32,
    pub aux: f32,
    pub unary: f32,
    pub global: f32,
    /// `λu·L_u + λg·L_g`; zero for the no-prior ablation.
    pub affinity: f32,
    pub total: f32,
}

pub const CSV_HEADER: &str = "step,lr,seg,aux,unary,global,total";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.seg, self.aux, self.unary, self.global, self.total
        )
    }
}

pub fn records_to_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(out, "{}", r.csv_line()).unwrap();
    }
    out
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: CpNet,
    pub store: ParamStore<f32>,
    pub optimizer: Sgd<f32>,
    /// Draws one batch seed per step.
    pub rng: Rng,
    pub step: usize,
    pub train_set: Vec<SyntheticScene>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = CpNet::new(config.network(), &mut store, config.seed)?;
        let optimizer = Sgd::new(config.sgd(), &store);
        let train_set = data::gen_dataset(config.data_seed, config.train_scenes, &config.scene())?;
        Ok(Trainer {
            rng: rng::seeded(config.seed ^ 0x7a11_5eed),
            config,
            net,
            store,
            optimizer,
            step: 0,
            train_set,
        })
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.iterations
    }

    /// Augmented batch for `batch_seed`.
    pub fn sample_batch(&self, batch_seed: u64) -> Result<Vec<SyntheticScene>> {
        let mut rng = rng::seeded(batch_seed);
        let aug = self.config.augment();
        (0..self.config.batch_size)
            .map(|_| {
                let idx = rng::below(&mut rng, 0, self.train_set.len());
                data::augment(&self.train_set[idx], &mut rng, &aug)
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.done() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let lr = poly_lr(self.step, self.config.iterations, self.config.base_lr, self.config.power)?;
        let batch_seed = self.rng.next_u64();
        let scenes = self.sample_batch(batch_seed)?;
        let (images, labels) = data::batch(&scenes)?;

        let mut g = Graph::new();
        let x = g.input(images);
        let (out, maps) = network::cpnet_forward(&self.net, &mut g, &mut self.store, x, &labels, Mode::Train)?;
        let (loss, terms) = network::total_loss(&mut g, &out, &maps, &labels, self.config.loss_weights())?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at step {} (batch seed {batch_seed:#018x})",
                terms.total,
                self.step + 1
            )));
        }
        self.store.zero_grad();
        g.backward(loss, &mut self.store)?;
        if let Some(p) = self.store.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at step {} (batch seed {batch_seed:#018x})",
                p.name,
                self.step + 1
            )));
        }
        self.optimizer.step(&mut self.store, lr)?;
        self.step += 1;

        let (unary, global) = terms.affinity.map_or((0.0, 0.0), |a| (a.unary, a.global));
        Ok(StepRecord {
            step: self.step,
            lr,
            seg: terms.seg,
            aux: terms.aux,
            unary,
            global,
            affinity: terms.prior,
            total: terms.total,
        })
    }

    /// Runs the remaining steps, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(self.config.iterations - self.step);
        while !self.done() {
            let r = self.train_step()?;
            on_step(self, &r)?;
            records.push(r);
        }
        Ok(records)
    }
}

/// Where [`train_to_dir`] puts its outputs.
pub mod layout {
    pub const CONFIG: &str = "config.txt";
    pub const LOSS_LOG: &str = "loss.csv";
    pub const EVAL_LOG: &str = "eval.csv";
    pub const FINAL_CHECKPOINT: &str = "final";
    /// Written when training aborts on a non-finite loss or gradient.
    pub const FAILURE: &str = "nonfinite.txt";

    pub fn step_checkpoint(step: usize) -> String {
        format!("step-{step:06}")
    }
}

pub const EVAL_HEADER: &str = "step,pix_acc,mean_iou";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    /// `(step, report)` of every periodic evaluation.
    pub evals: Vec<(usize, crate::eval::EvalReport)>,
}

/// Trains from scratch, writing the loss log, periodic evaluations and
/// checkpoints under `out`, and the final checkpoint to `out/final`. With
/// zero iterations only the initial checkpoint is written.
pub fn train_to_dir(config: TrainConfig, out: &std::path::Path) -> Result<RunSummary> {
    use crate::checkpoint::Checkpoint;
    use crate::io;

    io::create_dir(out)?;
    io::write_bytes(&out.join(layout::CONFIG), config.to_text().as_bytes())?;
    let val = if config.eval_every > 0 {
        data::gen_dataset(config.val_seed(), config.val_scenes, &config.scene())?
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(config)?;
    let mut loss_log = String::from(CSV_HEADER);
    loss_log.push('\n');
    let mut eval_log = String::from(EVAL_HEADER);
    eval_log.push('\n');
    let mut evals = Vec::new();

    let result = trainer.run(|t, r| {
        writeln!(loss_log, "{}", r.csv_line()).unwrap();
        let cfg = &t.config;
        if cfg.eval_every > 0 && r.step % cfg.eval_every == 0 && !val.is_empty() {
            let report = crate::eval::evaluate(&t.net, &t.store, &val, &cfg.eval_scales, cfg.eval_flip)?;
            writeln!(eval_log, "{},{:e},{:e}", r.step, report.pix_acc, report.mean_iou).unwrap();
            evals.push((r.step, report));
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
            Checkpoint::from_trainer(t).save(&out.join(layout::step_checkpoint(r.step)))?;
        }
        Ok(())
    });
    io::write_bytes(&out.join(layout::LOSS_LOG), loss_log.as_bytes())?;
    if !evals.is_empty() {
        io::write_bytes(&out.join(layout::EVAL_LOG), eval_log.as_bytes())?;
    }
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            if let Error::NonFinite(msg) = &e {
                io::write_bytes(&out.join(layout::FAILURE), format!("{msg}\n").as_bytes())?;
            }
            return Err(e);
        }
    };
    Checkpoint::from_trainer(&trainer).save(&out.join(layout::FINAL_CHECKPOINT))?;
    Ok(RunSummary { records, evals })
}
