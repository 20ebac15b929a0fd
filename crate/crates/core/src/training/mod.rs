//! Pretraining loop: batch assembly, loss, backward, clipping, AdamW, memory
//! bank maintenance, metrics and checkpoints.

mod checkpoint;
mod optim;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{adamw_config, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
pub use schedule::{lr_at, warmup_steps};

use crate::autodiff::{Graph, Tensor};
use crate::config::RunConfig;
use crate::datagen::{make_batch, Augment, TripleBatch, TripleRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{LossConfig, MemoryBank};
use crate::params::ParamStore;
use crate::rng::{self, Domain};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub incl: f64,
    pub secl: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Gradient norm restricted to the location MLP.
    pub loc_grad_norm: f64,
    pub bank_len: usize,
    pub wall_ms: f64,
}

/// Forward, backward and update for one batch. The batch's location
/// embeddings enter the bank only after the loss is computed.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    optimizer: &mut AdamW<f32>,
    bank: &mut MemoryBank<f32>,
    batch: &TripleBatch<f32>,
    loss_cfg: &LossConfig,
    lr: f64,
    clip_norm: f64,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let mut g = Graph::new();
    let lv = model.losses(&mut g, store, batch, bank, loss_cfg)?;
    let total = g.value(lv.total).item() as f64;
    let incl = g.value(lv.incl).item() as f64;
    let secl = g.value(lv.secl).item() as f64;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (incl {incl}, secl {secl})"
        )));
    }
    g.backward(lv.total)?;
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
    for (id, var) in g.bound_params() {
        if g.requires_grad(var) {
            grads[id.index()] = Some(
                g.grad(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(id).shape())),
            );
        }
    }
    let loc_ids = model.loc_mlp_params();
    let loc_grads: Vec<Option<Tensor<f32>>> = loc_ids.iter().map(|id| grads[id.index()].clone()).collect();
    let loc_grad_norm = global_norm(&loc_grads);
    let grad_norm = clip_global_norm(&mut grads, clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    optimizer.step(store, &grads, lr)?;
    let detached = g.value(lv.embeddings.e).clone();
    drop(g);
    bank.push(&detached)?;
    Ok(StepMetrics {
        step: 0,
        lr,
        incl,
        secl,
        total,
        grad_norm,
        loc_grad_norm,
        bank_len: bank.len(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Owns every piece of mutable training state.
pub struct Trainer<'a> {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub bank: MemoryBank<f32>,
    pub step: u64,
    records: &'a [TripleRecord],
    train_indices: Vec<usize>,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

/// Indices used for training: everything except the trailing `holdout` records.
pub fn train_split(count: usize, holdout: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if holdout >= count {
        return Err(Error::Config(format!(
            "holdout {holdout} leaves no training records out of {count}"
        )));
    }
    let cut = count - holdout;
    Ok(((0..cut).collect(), (cut..count).collect()))
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, records: &'a [TripleRecord]) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::init::<f32>(config.model(), config.seed)?;
        let optimizer = AdamW::new(adamw_config(&config), &store);
        let bank = MemoryBank::new(config.bank_capacity, config.embed_dim)?;
        Self::assemble(config, records, model, store, optimizer, bank, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, records: &'a [TripleRecord]) -> Result<Self> {
        let config = ckpt.config.clone();
        config.validate()?;
        let (model, store) = ckpt.restore_model()?;
        if ckpt.rng_seed != config.seed || ckpt.rng_counter != ckpt.step {
            return Err(Error::Contract("checkpoint RNG state disagrees with its step".into()));
        }
        Self::assemble(config, records, model, store, ckpt.optimizer, ckpt.bank, ckpt.step)
    }

    fn assemble(
        config: RunConfig,
        records: &'a [TripleRecord],
        model: Model,
        store: ParamStore<f32>,
        optimizer: AdamW<f32>,
        bank: MemoryBank<f32>,
        step: u64,
    ) -> Result<Self> {
        let (train_indices, _) = train_split(records.len(), config.holdout)?;
        if train_indices.len() < config.batch_size {
            return Err(Error::Config(format!(
                "{} training records cannot fill a batch of {}",
                train_indices.len(),
                config.batch_size
            )));
        }
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            bank,
            step,
            records,
            train_indices,
            epoch_cache: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.train_indices.len() / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order = self.train_indices.clone();
            order.shuffle(&mut rng::stream(self.config.seed, Domain::Epoch, epoch));
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("just filled").1
    }

    /// Batch for a given global step; a pure function of (seed, step).
    pub fn batch_for_step(&mut self, step: u64) -> Result<TripleBatch<f32>> {
        let spe = self.steps_per_epoch();
        let n = self.config.batch_size;
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let indices = self.epoch_order(epoch)[k * n..(k + 1) * n].to_vec();
        let augment = if self.config.augment { Augment::TRAIN } else { Augment::NONE };
        let mut rng = rng::stream(self.config.seed, Domain::Augment, step);
        make_batch(self.records, &indices, &mut rng, augment)
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_at(
            self.config.lr,
            self.config.warmup,
            self.config.schedule,
            step,
            self.total_steps(),
        )
    }

    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batch = self.batch_for_step(step)?;
        let lr = self.lr(step);
        let mut m = train_step(
            &self.model,
            &mut self.store,
            &mut self.optimizer,
            &mut self.bank,
            &batch,
            &self.config.loss(),
            lr,
            self.config.clip_norm,
        )?;
        m.step = step;
        self.step += 1;
        Ok(m)
    }

    /// Trains until `until` steps (capped at the schedule's total), calling
    /// `on_step` after every update.
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        let end = until.min(self.total_steps());
        while self.step < end {
            let m = self.step_once()?;
            on_step(self, &m)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            bank: self.bank.clone(),
            rng_seed: self.config.seed,
            rng_counter: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, WorldModel};

    fn records(cfg: &RunConfig) -> Vec<TripleRecord> {
        gen_dataset(&WorldModel::generate(cfg.world()).unwrap()).unwrap()
    }

    #[test]
    fn bank_fills_fifo_and_steps_are_counted() {
        let cfg = RunConfig::small();
        let recs = records(&cfg);
        let mut t = Trainer::new(cfg.clone(), &recs).unwrap();
        assert_eq!(t.steps_per_epoch(), 8);
        let mut seen = Vec::new();
        t.run(6, |_, m| {
            seen.push((m.step, m.bank_len));
            Ok(())
        })
        .unwrap();
        for (k, &(step, len)) in seen.iter().enumerate() {
            assert_eq!(step, k as u64);
            assert_eq!(len, ((k + 1) * cfg.batch_size).min(cfg.bank_capacity));
        }
    }

    #[test]
    fn zero_lambda_leaves_location_encoder_untouched() {
        let cfg = RunConfig {
            lambda: 0.0,
            ..RunConfig::small()
        };
        let recs = records(&cfg);
        let mut t = Trainer::new(cfg, &recs).unwrap();
        let before: Vec<Tensor<f32>> = t.model.loc_mlp_params().iter().map(|&id| t.store.value(id).clone()).collect();
        let wd = t.config.weight_decay;
        t.config.weight_decay = 0.0;
        t.optimizer.cfg.weight_decay = 0.0;
        t.run(3, |_, m| {
            assert_eq!(m.loc_grad_norm, 0.0);
            assert!(m.secl.is_finite() && m.secl > 0.0);
            Ok(())
        })
        .unwrap();
        for (&id, b) in t.model.loc_mlp_params().iter().zip(&before) {
            assert_eq!(t.store.value(id), b);
        }
        assert!(wd > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = RunConfig::small();
        let recs = records(&cfg);
        let run = || {
            let mut t = Trainer::new(cfg.clone(), &recs).unwrap();
            let mut losses = Vec::new();
            t.run(5, |_, m| {
                losses.push(m.total);
                Ok(())
            })
            .unwrap();
            (t.checkpoint().encode(), losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let cfg = RunConfig::small();
        let recs = records(&cfg);
        let mut straight = Trainer::new(cfg.clone(), &recs).unwrap();
        let total = straight.total_steps();
        straight.run(total, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = Trainer::new(cfg, &recs).unwrap();
        first.run(5, |_, _| Ok(())).unwrap();
        first.checkpoint().save(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), &recs).unwrap();
        assert_eq!(resumed.step, 5);
        resumed.run(total, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint().encode(), straight.checkpoint().encode());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let cfg = RunConfig::small();
        let recs = records(&cfg);
        let mut t = Trainer::new(cfg, &recs).unwrap();
        t.run(3, |_, _| Ok(())).unwrap();
        let ckpt = t.checkpoint();
        let bytes = ckpt.encode();
        assert_eq!(&bytes[..8], b"GAIRCKPT");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let cfg = RunConfig::small();
        let recs = records(&cfg);
        let bytes = Trainer::new(cfg, &recs).unwrap().checkpoint().encode();
        for cut in [0, 5, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        for pos in [20, bytes.len() / 3, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { .. })), "flip {pos}");
        }
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Version { found: 2, .. })));
        let mut bad = bytes;
        bad[..8].copy_from_slice(b"NOTACKPT");
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn split_and_batch_contracts() {
        assert_eq!(train_split(5, 2).unwrap(), (vec![0, 1, 2], vec![3, 4]));
        assert!(train_split(3, 3).is_err());
        let cfg = RunConfig {
            count: 20,
            holdout: 15,
            ..RunConfig::small()
        };
        let recs = records(&cfg);
        assert!(matches!(Trainer::new(cfg, &recs), Err(Error::Config(_))));
    }

    #[test]
    fn lr_follows_the_schedule() {
        let cfg = RunConfig::small();
        let recs = records(&cfg);
        let t = Trainer::new(cfg.clone(), &recs).unwrap();
        let total = t.total_steps();
        assert_eq!(t.lr(0), 0.0);
        let w = warmup_steps(cfg.warmup, total);
        assert_eq!(t.lr(w), cfg.lr);
        assert!(t.lr(total) < 1e-12);
    }
}
