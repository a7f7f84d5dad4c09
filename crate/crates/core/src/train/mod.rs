//! Training loop: weighted cross-entropy, Adam, per-batch sample
//! reweighting, early stopping and checkpoints.

mod checkpoint;
mod config;
mod model;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Preset, TrainConfig, DEFAULT_D_OUT};
pub use model::{Forward, Model};

use crate::autodiff::{Array, Graph, Var};
use crate::data::{EncodedDataset, FieldSchema};
use crate::error::{Error, Result};
use crate::metrics::{auc, logloss, PROB_CLAMP};
use crate::sce::{optimize_weights, GlobalMemory, SceConfig};

/// `-sum w [y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce(y: &[u8], p: &[f64], w: &[f64]) -> Result<f64> {
    if y.len() != p.len() || y.len() != w.len() {
        return Err(Error::Shape(format!("lengths {}, {}, {}", y.len(), p.len(), w.len())));
    }
    Ok(y.iter()
        .zip(p)
        .zip(w)
        .map(|((&y, &p), &w)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -w * if y == 1 { p.ln() } else { (1.0 - p).ln() }
        })
        .sum())
}

/// Tape version of [`weighted_bce`] on logits `[B]`.
pub fn weighted_bce_loss(g: &mut Graph, logit: Var, y: &[u8], w: &[f64]) -> Result<Var> {
    let n = y.len();
    if g.shape(logit) != [n] || w.len() != n {
        return Err(Error::Shape(format!("logits {:?}, {} labels, {} weights", g.shape(logit), n, w.len())));
    }
    let p = g.sigmoid(logit)?;
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let lp = g.log(p)?;
    let neg = g.neg(p)?;
    let one = g.constant(Array::scalar(1.0));
    let q = g.add(neg, one)?;
    let lq = g.log(q)?;
    let yv: Vec<f64> = y.iter().map(|&l| l as f64).collect();
    let ya = g.constant(Array::vector(yv.iter().map(|l| l * 1.0).collect()));
    let na = g.constant(Array::vector(yv.iter().map(|l| 1.0 - l).collect()));
    let a = g.mul(lp, ya)?;
    let b = g.mul(lq, na)?;
    let ll = g.add(a, b)?;
    let wa = g.constant(Array::vector(w.to_vec()));
    let wl = g.mul(ll, wa)?;
    let s = g.sum_all(wl)?;
    g.neg(s)
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} params, {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return Err(Error::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Source of per-sample loss weights for each training batch.
pub trait Reweighter {
    /// Weights for a batch with detached stream features `fm: [B, m]`.
    fn weights(&mut self, fm: &Array) -> Result<Vec<f64>>;
    /// Called after the parameter update with the weights that were used.
    fn observe(&mut self, _fm: &Array, _w: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Every weight is one.
pub struct Uniform;

impl Reweighter for Uniform {
    fn weights(&mut self, fm: &Array) -> Result<Vec<f64>> {
        Ok(vec![1.0; fm.shape()[0]])
    }
}

/// Decorrelating weights against a running feature memory.
pub struct SceReweighter {
    cfg: SceConfig,
    memory: GlobalMemory,
}

impl SceReweighter {
    pub fn new(cfg: SceConfig) -> Self {
        SceReweighter {
            cfg,
            memory: GlobalMemory::new(),
        }
    }

    pub fn memory(&self) -> &GlobalMemory {
        &self.memory
    }
}

impl Reweighter for SceReweighter {
    fn weights(&mut self, fm: &Array) -> Result<Vec<f64>> {
        Ok(optimize_weights(fm, &self.memory, &self.cfg)?.weights)
    }

    fn observe(&mut self, fm: &Array, w: &[f64]) -> Result<()> {
        self.memory.update(fm, w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    /// Wall-clock time; not serialized so same-seed histories are identical.
    #[serde(skip)]
    pub seconds: f64,
}

pub fn write_history<W: Write>(w: &mut W, history: &[EpochRecord]) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the epoch with the best validation AUC.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence(format!("non-finite value in {}", what)),
        other => other,
    }
}

/// One optimization step on `rows`; returns the summed weighted loss.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    rw: &mut dyn Reweighter,
    indices: &[u32],
    labels: &[u8],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let fw = model.forward(&mut g, &p, indices).map_err(divergence)?;
    let fm = model::concat_rows(g.value(fw.deep), g.value(fw.shallow));
    let w = rw.weights(&fm)?;
    let loss = weighted_bce_loss(&mut g, fw.logit, labels, &w).map_err(divergence)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::Divergence(format!("training loss is {}", lv)));
    }
    g.backward(loss);
    let grads = p.grads(&g);
    if grads.iter().any(|a| !a.all_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    adam.step(model.params_mut().values_mut(), &grads)?;
    rw.observe(&fm, &w)?;
    Ok(lv)
}

pub fn evaluate(model: &Model, ds: &EncodedDataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::UndefinedMetric("evaluation set is empty".into()));
    }
    let p = model.predict(ds, model.config().batch_size).map_err(divergence)?;
    Ok((auc(ds.labels(), &p)?, logloss(ds.labels(), &p)?))
}

/// Trains with weights from `sce_enabled` (decorrelating or uniform).
pub fn fit(
    train: &EncodedDataset,
    val: &EncodedDataset,
    schema: &FieldSchema,
    schema_hash: [u8; 8],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    let mut rw: Box<dyn Reweighter> = if cfg.sce_enabled {
        Box::new(SceReweighter::new(cfg.sce()))
    } else {
        Box::new(Uniform)
    };
    fit_with(train, val, schema, schema_hash, cfg, rw.as_mut(), |_| {})
}

/// [`fit`] with an explicit weight source and a per-epoch callback.
pub fn fit_with(
    train: &EncodedDataset,
    val: &EncodedDataset,
    schema: &FieldSchema,
    schema_hash: [u8; 8],
    cfg: &TrainConfig,
    rw: &mut dyn Reweighter,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    let mut model = Model::new(cfg, schema, schema_hash)?;
    train.validate(schema)?;
    val.validate(schema)?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let f = schema.num_fields();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut idx = Vec::with_capacity(cfg.batch_size * f);
    let mut lab = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            idx.clear();
            lab.clear();
            for &r in batch {
                idx.extend_from_slice(train.row(r));
                lab.push(train.labels()[r]);
            }
            total += train_step(&mut model, &mut adam, rw, &idx, &lab)?;
        }
        let (val_auc, val_logloss) = evaluate(&model, val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_auc,
            val_logloss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        let improved = best.as_ref().is_none_or(|b| val_auc > b.0);
        if improved {
            best = Some((val_auc, epoch, model.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(FitResult {
        model: best_model,
        history,
        best_epoch,
    })
}
