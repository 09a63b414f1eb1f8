//! Supervised training of both classifiers with a shared AdamW optimizer.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use conformer_tensor::{Element, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Conformer, ForwardOptions};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub warmup_steps: u64,
    /// Weights of the CNN and transformer cross-entropy terms.
    pub loss_weights: [f64; 2],
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables snapshots.
    pub snapshot_interval: u64,
    /// Exempt norm parameters and the class token from weight decay.
    pub decay_exclusions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            warmup_steps: 0,
            loss_weights: [1.0, 1.0],
            seed: 0,
            snapshot_interval: 0,
            decay_exclusions: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Argument(what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.loss_weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.weight_decay < 0.0 || self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("weight decay must be non-negative and betas in [0, 1)");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Weighted sum of the two heads' cross-entropies. A missing head contributes nothing.
pub fn dual_loss<T: Element>(
    tape: &Tape<T>,
    cnn_logits: Option<Var>,
    trans_logits: Option<Var>,
    labels: &[usize],
    weights: [f64; 2],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (logits, w) in [(cnn_logits, weights[0]), (trans_logits, weights[1])] {
        if let Some(l) = logits {
            let ce = tape.cross_entropy(l, labels)?;
            let term = tape.scale(ce, T::from_f64(w))?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::Contract("model has no classifier".into()))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Element>(scores: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax(scores).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the update just applied.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub cnn_acc: Option<f64>,
    pub trans_acc: Option<f64>,
    pub summed_acc: f64,
}

pub struct Trainer {
    pub model: Conformer,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Seed of the shuffle stream; epoch `e` uses stream `e` of this key.
    rng: [u8; 32],
    order: Option<(u64, Vec<usize>)>,
}

fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig { weight_decay: cfg.weight_decay, betas: (cfg.betas[0], cfg.betas[1]), ..Default::default() }
}

impl Trainer {
    pub fn new(model: Conformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = AdamW::new(&model.params, adamw_config(&config));
        optimizer.exclude_norms = config.decay_exclusions;
        let rng = ChaCha8Rng::seed_from_u64(config.seed).gen::<[u8; 32]>();
        Ok(Trainer { model, optimizer, config, rng, order: None })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Updates per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, len: usize) -> u64 {
        (len / self.config.batch_size.min(len).max(1)).max(1) as u64
    }

    pub fn total_steps(&self, len: usize) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch(len)
    }

    fn epoch_order(&mut self, epoch: u64, len: usize) -> &[usize] {
        if self.order.as_ref().map(|(e, o)| (*e, o.len())) != Some((epoch, len)) {
            let mut rng = ChaCha8Rng::from_seed(self.rng);
            rng.set_stream(epoch);
            let mut idx: Vec<usize> = (0..len).collect();
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// Applies one update and returns its record.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if data.num_classes() > self.model.config.num_classes {
            return Err(Error::Data(format!(
                "dataset has {} classes but the model predicts {}",
                data.num_classes(),
                self.model.config.num_classes
            )));
        }
        let step = self.optimizer.step;
        let spe = self.steps_per_epoch(data.len());
        let total = self.total_steps(data.len());
        let batch = self.config.batch_size.min(data.len());
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let indices = self.epoch_order(epoch, data.len())[pos * batch..(pos + 1) * batch].to_vec();
        let (images, labels) = data.batch(&indices)?;
        let lr = cosine_lr(step, total, self.config.lr, self.config.warmup_steps);

        let tape = Tape::new();
        let vars = self.model.bind(&tape, true);
        let img = tape.constant(images);
        let pass = self.model.forward_on(&tape, &vars, img, ForwardOptions { train: true, taps: false })?;
        let loss = dual_loss(&tape, pass.cnn_logits, pass.trans_logits, &labels, self.config.loss_weights)?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            let what = tape.first_non_finite().map(|(_, d)| d).unwrap_or_else(|| "the loss".into());
            return Err(Error::NonFinite(format!(
                "step {}: loss is {loss_value}; first non-finite value is {what}",
                step + 1
            )));
        }
        let grads = tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor<f32>> = vars.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect();
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            let origin =
                tape.first_non_finite().map(|(_, d)| format!("; first non-finite value is {d}")).unwrap_or_default();
            return Err(Error::NonFinite(format!("step {}: gradient of `{name}` is not finite{origin}", step + 1)));
        }
        self.optimizer.update(&mut self.model.params, &grads, lr)?;
        self.model.apply_batch_stats(&pass.bn_stats)?;

        let cnn = pass.cnn_logits.map(|v| tape.value(v));
        let trans = pass.trans_logits.map(|v| tape.value(v));
        let summed = crate::model::Logits { cnn: cnn.clone(), trans: trans.clone() }.predict()?;
        Ok(StepRecord {
            step: step + 1,
            epoch,
            lr,
            loss: loss_value,
            cnn_acc: cnn.map(|c| accuracy(&c, &labels)),
            trans_acc: trans.map(|t| accuracy(&t, &labels)),
            summed_acc: accuracy(&summed, &labels),
        })
    }

    /// Trains until the schedule ends or `until` updates have been applied,
    /// handing every record to `on_step`.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: Option<u64>,
        mut on_step: impl FnMut(&StepRecord, &Trainer) -> Result<()>,
    ) -> Result<()> {
        let total = self.total_steps(data.len());
        let stop = until.map_or(total, |u| u.min(total));
        while self.optimizer.step < stop {
            let rec = self.train_step(data)?;
            on_step(&rec, self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let groups = [
            ("param/", &self.model.params),
            ("buffer/", &self.model.buffers),
            ("adam.m/", &self.optimizer.m),
            ("adam.v/", &self.optimizer.v),
        ];
        for (prefix, group) in groups {
            for (k, v) in group {
                tensors.insert(format!("{prefix}{k}"), v.clone());
            }
        }
        Checkpoint { config: self.model.config.clone(), step: self.optimizer.step, tensors, rng: self.rng }
    }

    /// Restores model, optimizer and shuffle state; training continues exactly
    /// where the checkpoint left off.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(Conformer::new(ckpt.config.clone(), 0)?, config)?;
        let fill = |prefix: &str, group: &mut BTreeMap<String, Tensor<f32>>| -> Result<()> {
            for (k, v) in group.iter_mut() {
                let key = format!("{prefix}{k}");
                let saved =
                    ckpt.tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if saved.shape() != v.shape() {
                    return Err(Error::Checkpoint(format!(
                        "`{key}` has shape {:?}, expected {:?}",
                        saved.shape(),
                        v.shape()
                    )));
                }
                *v = saved.clone();
            }
            Ok(())
        };
        fill("param/", &mut t.model.params)?;
        fill("buffer/", &mut t.model.buffers)?;
        fill("adam.m/", &mut t.optimizer.m)?;
        fill("adam.v/", &mut t.optimizer.v)?;
        let expected = t.model.params.len() * 3 + t.model.buffers.len();
        if ckpt.tensors.len() != expected {
            return Err(Error::Checkpoint(format!("{} tensors, expected {expected}", ckpt.tensors.len())));
        }
        t.optimizer.step = ckpt.step;
        t.rng = ckpt.rng;
        Ok(t)
    }
}

/// JSON-lines metrics written to a file and optionally echoed to stdout.
pub struct MetricsWriter {
    file: BufWriter<File>,
    echo: bool,
}

impl MetricsWriter {
    pub fn create(path: &Path, echo: bool) -> Result<Self> {
        Ok(MetricsWriter { file: BufWriter::new(File::create(path)?), echo })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.file, "{line}")?;
        if self.echo {
            println!("{line}");
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConformerConfig;
    use crate::data::synth_shapes;

    #[test]
    fn uniform_logits_give_twice_log_classes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([3, 10]));
        let b = tape.constant(Tensor::zeros([3, 10]));
        let l = dual_loss(&tape, Some(a), Some(b), &[0, 4, 9], [1.0, 1.0]).unwrap();
        assert!((tape.value(l).item() - 2.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_select_branch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new([1, 2], vec![0.0, 5.0]).unwrap());
        let only_cnn = tape.value(dual_loss(&tape, Some(a), Some(b), &[0], [1.0, 0.0]).unwrap()).item();
        let ce = tape.value(tape.cross_entropy(a, &[0]).unwrap()).item();
        assert_eq!(only_cnn, ce);
        let same = tape.value(dual_loss(&tape, Some(a), Some(a), &[0], [1.0, 1.0]).unwrap()).item();
        assert_eq!(same, 2.0 * ce);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { loss_weights: [1.0, -0.5], ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn lr_stream_follows_schedule() {
        let data = synth_shapes(4, 64, 16, 0, "train").unwrap();
        let model = Conformer::new(ConformerConfig::preset("micro").unwrap(), 0).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, warmup_steps: 1, ..Default::default() };
        let mut t = Trainer::new(model, cfg).unwrap();
        let mut lrs = Vec::new();
        t.run(&data, None, |r, _| {
            lrs.push(r.lr);
            Ok(())
        })
        .unwrap();
        let want: Vec<f64> = (0..4).map(|s| cosine_lr(s, 4, 1e-3, 1)).collect();
        assert_eq!(lrs, want);
    }
}
