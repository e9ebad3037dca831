//! Optimization loop.
//!
//! Batches are built per complex: the native plus a slice of that complex's
//! decoys, so the contrastive and ranking terms always have something to
//! work with. The batch list of an epoch is a pure function of the seed and
//! the epoch number, which is what makes checkpoint resume exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::{InterfacePairSample, PumbaModel};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_bce: f64,
    pub w_supcon: f64,
    pub w_rank: f64,
    pub temperature: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bce: 1.0,
            w_supcon: 0.5,
            w_rank: 0.5,
            temperature: 0.1,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = [self.w_bce, self.w_supcon, self.w_rank]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok || !(self.temperature > 0.0) || !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 and temperature, margin > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Apply a random rotation or reflection to every training image.
    pub augment: bool,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 10,
            seed: 0,
            augment: true,
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// Per-term loss values of one step. `total` is the weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub supcon: f64,
    pub rank: f64,
}

/// Sample indices of every batch of `epoch`, in training order.
pub fn epoch_batches(samples: &[InterfacePairSample], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut by_complex: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let entry = by_complex.entry(s.complex_id.as_str()).or_default();
        if s.native {
            entry.0.push(i);
        } else {
            entry.1.push(i);
        }
    }
    let mut batches = Vec::new();
    for (natives, mut decoys) in by_complex.into_values() {
        decoys.shuffle(&mut rng);
        match natives.first() {
            Some(_) if decoys.is_empty() => batches.push(natives.clone()),
            Some(&n) => {
                for chunk in decoys.chunks(batch_size - 1) {
                    let mut b = vec![n];
                    b.extend_from_slice(chunk);
                    batches.push(b);
                }
                // remaining natives of a multi-native complex ride along
                for (k, &extra) in natives[1..].iter().enumerate() {
                    let slot = k % batches.len();
                    batches[slot].push(extra);
                }
            }
            None => batches.extend(decoys.chunks(batch_size).map(<[usize]>::to_vec)),
        }
    }
    batches.shuffle(&mut rng);
    batches
}

/// Element `k ∈ 0..8` of the dihedral group applied to each `a×a` plane of
/// a `[C×a×a]` image: `k % 4` quarter turns, then a transpose when `k ≥ 4`.
pub fn dihedral(image: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let (c, a) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    Tensor::from_fn([c, a, a], |i| {
        let (ch, y, x) = (i / (a * a), i / a % a, i % a);
        let (y, x) = if k >= 4 { (x, y) } else { (y, x) };
        // inverse quarter turns map the output pixel back to its source
        let (sy, sx) = match k % 4 {
            0 => (y, x),
            1 => (a - 1 - x, y),
            2 => (a - 1 - y, a - 1 - x),
            _ => (x, a - 1 - y),
        };
        src[ch * a * a + sy * a + sx]
    })
}

fn finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, value })
    }
}

/// Loss of `batch` on a fresh tape plus the gradient of every parameter.
pub fn loss_and_gradients(
    model: &PumbaModel,
    batch: &[&InterfacePairSample],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape, true);
    let fwd = model.forward_batch(&mut tape, &p, batch)?;
    let labels: Vec<bool> = batch.iter().map(|s| s.native).collect();
    let ids: Vec<&str> = batch.iter().map(|s| s.complex_id.as_str()).collect();
    let bce = loss::bce(&mut tape, fwd.scores, &labels)?;
    let supcon = loss::supcon(&mut tape, fwd.embeddings, &labels, weights.temperature)?;
    let pairs = loss::within_complex_pairs(&ids, &labels);
    let rank = loss::margin_rank(&mut tape, fwd.scores, &pairs, weights.margin)?;

    let value = |v| f64::from(tape.value(v).data()[0]);
    let terms = LossBreakdown {
        bce: finite("bce", value(bce))?,
        supcon: finite("supcon", value(supcon))?,
        rank: finite("rank", value(rank))?,
        total: 0.0,
    };
    let terms = LossBreakdown {
        total: finite(
            "total",
            weights.w_bce * terms.bce + weights.w_supcon * terms.supcon + weights.w_rank * terms.rank,
        )?,
        ..terms
    };

    let parts = [
        tape.scale(bce, weights.w_bce as f32),
        tape.scale(supcon, weights.w_supcon as f32),
        tape.scale(rank, weights.w_rank as f32),
    ];
    let total = tape.add(parts[0], parts[1])?;
    let total = tape.add(total, parts[2])?;
    let grads = tape.backward(total)?;
    let g = model
        .params
        .ids()
        .map(|id| grads.wrt(p.var(id)))
        .collect();
    Ok((terms, g))
}

/// One AdamW step on `batch`.
pub fn train_step(
    model: &mut PumbaModel,
    opt: &mut OptimizerState,
    batch: &[&InterfacePairSample],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (terms, grads) = loss_and_gradients(model, batch, weights)?;
    opt.step(&mut model.params, &grads)?;
    Ok(terms)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,epoch,total,bce,supcon,rank";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.loss.total, self.loss.bce, self.loss.supcon, self.loss.rank
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// Model, optimizer and position in the batch schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PumbaModel,
    pub opt: OptimizerState,
    pub config: TrainConfig,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
}

impl Trainer {
    pub fn new(model: PumbaModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = OptimizerState::new(config.optimizer, &model.params);
        Ok(Self {
            model,
            opt,
            config,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Trains on the next batch of the schedule. Returns `None` once every
    /// epoch has run.
    pub fn step(&mut self, samples: &[InterfacePairSample]) -> Result<Option<LogRow>> {
        if samples.is_empty() {
            return Err(Error::Contract("no training samples".into()));
        }
        while !self.finished() {
            let batches = epoch_batches(samples, self.config.batch_size, self.config.seed, self.epoch);
            if let Some(idx) = batches.get(self.batch_in_epoch) {
                let batch: Vec<InterfacePairSample> = if self.config.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(u64::MAX - self.opt.step);
                    idx.iter()
                        .map(|&i| {
                            let mut s = samples[i].clone();
                            s.image = dihedral(&s.image, rng.random_range(0..8));
                            s
                        })
                        .collect()
                } else {
                    idx.iter().map(|&i| samples[i].clone()).collect()
                };
                let batch: Vec<&InterfacePairSample> = batch.iter().collect();
                let loss = train_step(&mut self.model, &mut self.opt, &batch, &self.config.loss)?;
                let row = LogRow {
                    step: self.opt.step,
                    epoch: self.epoch,
                    loss,
                };
                self.batch_in_epoch += 1;
                if self.batch_in_epoch == batches.len() {
                    self.epoch += 1;
                    self.batch_in_epoch = 0;
                }
                return Ok(Some(row));
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
        Ok(None)
    }

    /// Runs until the schedule ends or `keep_going` returns false.
    pub fn fit(
        &mut self,
        samples: &[InterfacePairSample],
        mut keep_going: impl FnMut(&LogRow) -> bool,
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while let Some(row) = self.step(samples)? {
            rows.push(row);
            if !keep_going(&row) {
                break;
            }
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::CapriCategory;

    fn fake(complex: &str, model: &str, native: bool) -> InterfacePairSample {
        InterfacePairSample {
            complex_id: complex.into(),
            model_id: model.into(),
            native,
            capri: CapriCategory::Incorrect,
            image: Tensor::zeros([1, 1, 1]),
            energies: vec![],
        }
    }

    #[test]
    fn batches_cover_each_sample_and_hold_a_native() {
        let mut samples = vec![fake("a", "n", true), fake("b", "n", true)];
        for k in 0..10 {
            samples.push(fake("a", &format!("d{k}"), false));
            samples.push(fake("b", &format!("d{k}"), false));
        }
        let batches = epoch_batches(&samples, 4, 7, 0);
        let mut decoys: Vec<usize> = batches.iter().flatten().copied().filter(|&i| !samples[i].native).collect();
        decoys.sort();
        assert_eq!(decoys, (0..samples.len()).filter(|&i| !samples[i].native).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 4);
            assert_eq!(b.iter().filter(|&&i| samples[i].native).count(), 1);
            assert!(b.iter().all(|&i| samples[i].complex_id == samples[b[0]].complex_id));
        }
        assert_eq!(batches, epoch_batches(&samples, 4, 7, 0));
        assert_ne!(batches, epoch_batches(&samples, 4, 7, 1));
    }

    #[test]
    fn dihedral_group_laws() {
        let img = Tensor::from_fn([2, 3, 3], |i| i as f32);
        assert_eq!(dihedral(&img, 0), img);
        // a quarter turn applied four times is the identity
        let mut r = img.clone();
        for _ in 0..4 {
            r = dihedral(&r, 1);
        }
        assert_eq!(r, img);
        // transposes are involutions
        for k in 4..8 {
            assert_eq!(dihedral(&dihedral(&img, k), k), img);
        }
        let all: Vec<_> = (0..8).map(|k| dihedral(&img, k)).collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
        // quarter turn: top-left moves to top-right
        assert_eq!(dihedral(&img, 1).data()[2], 0.0);
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = LossWeights {
            temperature: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            w_rank: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
