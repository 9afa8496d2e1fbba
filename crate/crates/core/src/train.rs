//! Mini-batch training and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_batch, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::metrics::{macro_metrics, MetricsReport};
use crate::model::{forward, init_parameters, loss_and_grads_parallel, ForwardTrace, ModelConfig};
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed of the per-epoch batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optim: AdamWConfig::default(), batch_size: 16, epochs: 30, seed: 42 }
    }
}

/// Short stable digest of any serializable config.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Predictions and traces for `records`, in order.
pub fn predict_records(
    params: &ParamStore,
    cfg: &ModelConfig,
    records: &[EmbeddingRecord],
    batch_size: usize,
) -> Result<(Vec<u8>, f64, Vec<ForwardTrace>)> {
    let chunks: Vec<&[EmbeddingRecord]> = records.chunks(batch_size.max(1)).collect();
    let outputs: Vec<Result<_>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch = make_batch(chunk, cfg.n_max)?;
            let out = forward(&batch, params, cfg)?;
            Ok((out.predictions(), out.loss * chunk.len() as f64, out.traces))
        })
        .collect();
    let mut preds = Vec::with_capacity(records.len());
    let mut traces = Vec::with_capacity(records.len());
    let mut loss = 0.0;
    for o in outputs {
        let (p, l, t) = o?;
        preds.extend(p);
        loss += l;
        traces.extend(t);
    }
    Ok((preds, loss / records.len().max(1) as f64, traces))
}

/// Metrics of `params` on `records`, with the mean loss filled in.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, records: &[EmbeddingRecord], batch_size: usize) -> Result<MetricsReport> {
    let (preds, loss, _) = predict_records(params, cfg, records, batch_size)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let mut report = macro_metrics(&preds, &labels)?;
    report.loss = Some(loss);
    report.config_hash = config_hash(cfg);
    report.seed = cfg.seed;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation macro-F1 (initial ones if no epoch ran).
    pub best_params: ParamStore,
    pub final_params: ParamStore,
    pub best_epoch: Option<usize>,
    /// Mean training loss of the initial parameters.
    pub initial_loss: f64,
    /// One validation report per epoch, with the epoch's mean training loss.
    pub epochs: Vec<MetricsReport>,
}

/// Trains from the config's initialization. Must be called inside the rayon
/// pool that should do the work.
pub fn train(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[EmbeddingRecord],
    val_set: &[EmbeddingRecord],
    mut on_epoch: impl FnMut(&MetricsReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation sets".into()));
    }
    if train_cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = init_parameters(cfg);
    let mut best_params = params.clone();
    let (_, initial_loss, _) = predict_records(&params, cfg, train_set, train_cfg.batch_size)?;
    let mut opt = OptimizerState::new(train_cfg.optim);
    let order_rng = Rng::new(train_cfg.seed);

    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order_rng.fork(epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(train_cfg.batch_size).enumerate() {
            let records: Vec<EmbeddingRecord> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let batch = make_batch(&records, cfg.n_max)?;
            let (loss, grads) = loss_and_grads_parallel(&batch, &params, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            opt.step(&mut params, &grads)?;
            loss_sum += loss * records.len() as f64;
        }

        let mut report = evaluate(&params, cfg, val_set, train_cfg.batch_size)?;
        report.name = Some(format!("epoch-{}", epoch + 1));
        report.epoch = Some(epoch + 1);
        report.loss = Some(loss_sum / train_set.len() as f64);
        on_epoch(&report);
        if best.is_none_or(|(_, f1)| report.macro_f1 > f1) {
            best = Some((epoch + 1, report.macro_f1));
            best_params = params.clone();
        }
        epochs.push(report);
    }

    Ok(TrainOutcome { best_params, final_params: params, best_epoch: best.map(|(e, _)| e), initial_loss, epochs })
}
