//! Deterministic training loop: seeded shuffling, AdamW with decoupled weight
//! decay, the decaying auxiliary-loss schedule, dataset-level validation and
//! best-checkpoint selection.
//!
//! Everything observable is a pure function of (seed, config, data): shuffle
//! order derives from the seed and epoch index, parameter updates are plain
//! f64 arithmetic, and validation runs in a fixed order.

use crate::data::{DataError, UtteranceRecord};
use crate::geometry::{GeometryError, RegionPartition};
use crate::losses::{
    ccc_loss, combined_loss, inverse_frequency_weights, lambda_schedule, weighted_cross_entropy,
    ClassWeights, LossError, ScheduleConfig,
};
use crate::metrics::{EvalReport, MetricsError};
use crate::nn::{Model, ModelConfig, NnError, Parameters};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: &'static str },
    #[error("no trainable batches (every batch had fewer than 2 samples)")]
    NoTrainableBatches,
    #[error("record {id} appears in both the training and validation sets")]
    TrainValOverlap { id: String },
    #[error("record {id}: category `{category}` is not in the vocabulary")]
    UnknownCategory { id: String, category: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Which auxiliary classification task accompanies the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxMode {
    /// Classify the angular region of the normalized VAD target.
    SphericalRegion,
    /// Classify the categorical label instead.
    Categorical,
    /// Regression only.
    None,
}

/// Whether the auxiliary cross-entropy uses inverse-frequency class weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WceMode {
    Weighted,
    Unweighted,
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleConfig,
    pub aux_mode: AuxMode,
    pub wce_mode: WceMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: ScheduleConfig::default(),
            aux_mode: AuxMode::SphericalRegion,
            wce_mode: WceMode::Weighted,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be >= 2 (batch CCC needs at least 2 samples)".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config("lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// AdamW.

/// First/second moment accumulators plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Parameters,
    pub v: Parameters,
}

impl AdamState {
    pub fn new(model_cfg: &ModelConfig) -> Self {
        AdamState {
            step: 0,
            m: Parameters::zeros(model_cfg),
            v: Parameters::zeros(model_cfg),
        }
    }
}

/// One AdamW update on a flat parameter slice: decoupled weight decay first,
/// then the bias-corrected moment step.
pub fn adamw_update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &TrainConfig,
) {
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        params[i] -= cfg.lr * cfg.weight_decay * params[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies AdamW across every model parameter. Rejects non-finite gradients,
/// naming the offending parameter.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, tensor) in grads.tensors() {
        if !tensor.all_finite() {
            return Err(TrainError::NonFiniteGradient { param: name });
        }
    }
    state.step += 1;
    let step = state.step;
    let mut p_list = params.tensors_mut();
    let g_list = grads.tensors();
    let mut m_list = state.m.tensors_mut();
    let mut v_list = state.v.tensors_mut();
    debug_assert_eq!(p_list.len(), g_list.len());
    for idx in 0..p_list.len() {
        adamw_update_slice(
            p_list[idx].1.data_mut(),
            g_list[idx].1.data(),
            m_list[idx].1.data_mut(),
            v_list[idx].1.data_mut(),
            step,
            cfg,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// In-memory datasets.

/// One utterance with its features resident in memory.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub id: String,
    /// `[T, feat_dim]`.
    pub features: Tensor,
    pub frames: usize,
    pub vad_norm: [f64; 3],
    pub region: usize,
    pub category_id: usize,
}

/// A fully loaded split plus the label spaces shared across splits.
#[derive(Debug, Clone)]
pub struct LoadedSet {
    pub items: Vec<LoadedUtterance>,
    pub feat_dim: usize,
    pub partition: RegionPartition,
    /// Sorted category vocabulary (shared between train and val).
    pub categories: Vec<String>,
}

/// Sorted unique categories across the given record sets.
pub fn build_category_vocab(sets: &[&[UtteranceRecord]]) -> Vec<String> {
    let mut vocab: Vec<String> = sets
        .iter()
        .flat_map(|records| records.iter().map(|r| r.category.clone()))
        .collect();
    vocab.sort_unstable();
    vocab.dedup();
    vocab
}

impl LoadedSet {
    /// Loads every record's feature file and resolves its labels.
    pub fn load(
        records: &[UtteranceRecord],
        partition: RegionPartition,
        feat_dim: usize,
        categories: &[String],
    ) -> Result<Self, TrainError> {
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            let features = crate::data::load_features(&r.feature_path, feat_dim)?;
            let frames = features.shape()[0];
            let category_id = categories
                .binary_search(&r.category)
                .map_err(|_| TrainError::UnknownCategory {
                    id: r.id.clone(),
                    category: r.category.clone(),
                })?;
            items.push(LoadedUtterance {
                id: r.id.clone(),
                features,
                frames,
                vad_norm: r.vad_normalized()?,
                region: r.region(&partition)?,
                category_id,
            });
        }
        Ok(LoadedSet {
            items,
            feat_dim,
            partition,
            categories: categories.to_vec(),
        })
    }

    /// Width of the auxiliary label space under the mode.
    pub fn aux_classes(&self, mode: AuxMode) -> usize {
        match mode {
            AuxMode::Categorical => self.categories.len(),
            // With the auxiliary task disabled the classifier head still
            // exists and reports region metrics.
            AuxMode::SphericalRegion | AuxMode::None => self.partition.n_regions(),
        }
    }

    fn aux_target(&self, item: &LoadedUtterance, mode: AuxMode) -> usize {
        match mode {
            AuxMode::Categorical => item.category_id,
            AuxMode::SphericalRegion | AuxMode::None => item.region,
        }
    }

    fn aux_counts(&self, mode: AuxMode) -> Vec<u64> {
        let mut counts = vec![0u64; self.aux_classes(mode)];
        for item in &self.items {
            counts[self.aux_target(item, mode)] += 1;
        }
        counts
    }
}

/// Class weights for the auxiliary loss, computed from the training split.
pub fn auxiliary_weights(
    train: &LoadedSet,
    cfg: &TrainConfig,
) -> Result<ClassWeights, TrainError> {
    match cfg.wce_mode {
        WceMode::Unweighted => Ok(ClassWeights::uniform(train.aux_classes(cfg.aux_mode))),
        WceMode::Weighted => {
            Ok(inverse_frequency_weights(&train.aux_counts(cfg.aux_mode))?)
        }
    }
}

// ---------------------------------------------------------------------------
// Epoch loop.

/// Losses accumulated over one training epoch (sample-weighted means).
#[derive(Debug, Clone, Copy)]
pub struct EpochTrainStats {
    pub total_loss: f64,
    pub ccc_loss: f64,
    /// Lambda-scaled auxiliary contribution; exactly 0 past the cutoff.
    pub aux_weighted_loss: f64,
    pub lambda: f64,
    pub batches: usize,
    /// Trailing batches of one sample, dropped because batch CCC is undefined.
    pub dropped_singletons: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Batches of item indices: seeded shuffle, then grouping by frame count so
/// every batch has a uniform T, then fixed-size chunks.
fn plan_batches(
    set: &LoadedSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, usize) {
    let mut order: Vec<usize> = (0..set.items.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for idx in order {
        buckets.entry(set.items[idx].frames).or_default().push(idx);
    }
    let mut batches = Vec::new();
    let mut dropped = 0;
    for bucket in buckets.values() {
        for chunk in bucket.chunks(batch_size) {
            if chunk.len() < 2 {
                dropped += 1;
            } else {
                batches.push(chunk.to_vec());
            }
        }
    }
    (batches, dropped)
}

fn assemble_batch(set: &LoadedSet, indices: &[usize], mode: AuxMode) -> (Tensor, Tensor, Vec<usize>) {
    let frames = set.items[indices[0]].frames;
    let mut features = Tensor::zeros(&[indices.len(), frames, set.feat_dim]);
    let mut vad = Tensor::zeros(&[indices.len(), 3]);
    let mut aux = Vec::with_capacity(indices.len());
    for (slot, &idx) in indices.iter().enumerate() {
        let item = &set.items[idx];
        debug_assert_eq!(item.frames, frames);
        for t in 0..frames {
            features
                .frame_mut(slot, t)
                .copy_from_slice(&item.features.row2(t));
        }
        for (d, &v) in item.vad_norm.iter().enumerate() {
            let at = vad.at2(slot, d);
            vad.data_mut()[at] = v;
        }
        aux.push(set.aux_target(item, mode));
    }
    (features, vad, aux)
}

/// One optimization pass over the set.
pub fn train_epoch(
    model: &mut Model,
    set: &LoadedSet,
    weights: &ClassWeights,
    cfg: &TrainConfig,
    state: &mut AdamState,
    epoch: usize,
) -> Result<EpochTrainStats, TrainError> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let (batches, dropped_singletons) = plan_batches(set, cfg.batch_size, &mut rng);
    if batches.is_empty() {
        return Err(TrainError::NoTrainableBatches);
    }

    let mut total_sum = 0.0;
    let mut ccc_sum = 0.0;
    let mut aux_sum = 0.0;
    let mut samples = 0usize;
    for batch in &batches {
        let (features, vad_target, aux_targets) = assemble_batch(set, batch, cfg.aux_mode);
        let out = model.forward(&features)?;
        let regression = ccc_loss(&out.vad_pred, &vad_target)?;
        let auxiliary = match cfg.aux_mode {
            AuxMode::None => None,
            _ => Some(weighted_cross_entropy(
                &out.region_logits,
                &aux_targets,
                weights,
            )?),
        };
        let combined = combined_loss(regression, auxiliary, epoch, &cfg.schedule);
        let grads = model.backward(combined.logit_grad.as_ref(), &combined.vad_grad)?;
        adamw_step(model.parameters_mut(), &grads, state, cfg)?;

        let b = batch.len() as f64;
        total_sum += combined.value * b;
        ccc_sum += combined.ccc_value * b;
        aux_sum += combined.lambda * combined.aux_value * b;
        samples += batch.len();
    }
    let n = samples as f64;
    Ok(EpochTrainStats {
        total_loss: total_sum / n,
        ccc_loss: ccc_sum / n,
        aux_weighted_loss: aux_sum / n,
        lambda: lambda_schedule(epoch, &cfg.schedule),
        batches: batches.len(),
        dropped_singletons,
    })
}

// ---------------------------------------------------------------------------
// Validation and the fit loop.

/// Dataset-level validation outcome for one epoch.
#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    /// Combined loss over the whole split at the epoch's lambda.
    pub loss: f64,
    pub ccc_loss: f64,
    pub aux_weighted_loss: f64,
    pub lambda: f64,
    pub report: EvalReport,
}

/// Evaluates the model over the whole set in one deterministic pass.
pub fn validate(
    model: &Model,
    set: &LoadedSet,
    weights: &ClassWeights,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ValidationOutcome, TrainError> {
    let n_aux = set.aux_classes(cfg.aux_mode);
    let m = set.items.len();
    if m < 2 {
        return Err(TrainError::Config(
            "validation needs at least 2 samples".into(),
        ));
    }

    // Group by frame count; within a group keep dataset order.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, item) in set.items.iter().enumerate() {
        groups.entry(item.frames).or_default().push(idx);
    }

    let mut preds = Tensor::zeros(&[m, 3]);
    let mut logits = Tensor::zeros(&[m, n_aux]);
    let mut targets = Tensor::zeros(&[m, 3]);
    let mut aux_targets = vec![0usize; m];
    let mut pred_labels = vec![0usize; m];
    for group in groups.values() {
        for chunk in group.chunks(cfg.batch_size.max(2)) {
            let (features, vad, aux) = assemble_batch(set, chunk, cfg.aux_mode);
            let out = model.infer(&features)?;
            for (slot, &idx) in chunk.iter().enumerate() {
                for d in 0..3 {
                    let at = preds.at2(idx, d);
                    preds.data_mut()[at] = out.vad_pred.get2(slot, d);
                    let at = targets.at2(idx, d);
                    targets.data_mut()[at] = vad.get2(slot, d);
                }
                let logit_row = out.region_logits.row2(slot);
                let dst = idx * n_aux;
                logits.data_mut()[dst..dst + n_aux].copy_from_slice(logit_row);
                pred_labels[idx] = argmax(logit_row);
                aux_targets[idx] = aux[slot];
            }
        }
    }

    let regression = ccc_loss(&preds, &targets)?;
    let auxiliary = match cfg.aux_mode {
        AuxMode::None => None,
        _ => Some(weighted_cross_entropy(&logits, &aux_targets, weights)?),
    };
    let combined = combined_loss(regression, auxiliary, epoch, &cfg.schedule);
    let report = EvalReport::new(&preds, &targets, &pred_labels, &aux_targets, n_aux)?;
    Ok(ValidationOutcome {
        loss: combined.value,
        ccc_loss: combined.ccc_value,
        aux_weighted_loss: combined.lambda * combined.aux_value,
        lambda: combined.lambda,
        report,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Everything recorded about one epoch.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lambda: f64,
    pub train: EpochTrainStats,
    pub val_loss: f64,
    pub val: EvalReport,
}

#[derive(Debug)]
pub struct FitResult {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint_path: PathBuf,
}

/// Full training run: per epoch, one optimization pass and one validation
/// pass; the checkpoint is rewritten whenever the validation loss improves
/// strictly on the best seen so far.
pub fn fit(
    model: &mut Model,
    train: &LoadedSet,
    val: &LoadedSet,
    cfg: &TrainConfig,
    checkpoint_path: &Path,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    let val_ids: std::collections::HashSet<&str> =
        val.items.iter().map(|i| i.id.as_str()).collect();
    if let Some(overlap) = train.items.iter().find(|i| val_ids.contains(i.id.as_str())) {
        return Err(TrainError::TrainValOverlap {
            id: overlap.id.clone(),
        });
    }

    let weights = auxiliary_weights(train, cfg)?;
    let mut state = AdamState::new(model.config());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    for epoch in 0..cfg.epochs {
        let train_stats = train_epoch(model, train, &weights, cfg, &mut state, epoch)?;
        let outcome = validate(model, val, &weights, cfg, epoch)?;
        if outcome.loss < best_val_loss {
            best_val_loss = outcome.loss;
            best_epoch = epoch;
            model.save(checkpoint_path)?;
        }
        history.push(EpochStats {
            epoch,
            lambda: train_stats.lambda,
            train: train_stats,
            val_loss: outcome.loss,
            val: outcome.report,
        });
    }
    Ok(FitResult {
        history,
        best_epoch,
        best_val_loss,
        checkpoint_path: checkpoint_path.to_path_buf(),
    })
}

/// Tab-separated history log with a header row, for external plotting.
pub fn history_to_tsv(history: &[EpochStats]) -> String {
    let mut out = String::from(
        "epoch\ttrain_loss\tval_loss\tlambda\tval_ccc_v\tval_ccc_a\tval_ccc_d\tval_ccc_mean\tval_macro_f1\tval_accuracy\n",
    );
    for stats in history {
        out.push_str(&format!(
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\n",
            stats.epoch,
            stats.train.total_loss,
            stats.val_loss,
            stats.lambda,
            stats.val.ccc_v,
            stats.val.ccc_a,
            stats.val.ccc_d,
            stats.val.ccc_mean,
            stats.val.macro_f1,
            stats.val.accuracy,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SynthConfig};
    use crate::geometry::make_partition;
    use crate::nn::PoolingKind;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn adamw_scalar_oracle() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        adamw_update_slice(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
        // Bias correction at t=1 gives m_hat = 1, v_hat = 1.
        assert_close(p[0], 0.900000001, 1e-12);
    }

    #[test]
    fn adamw_decay_only() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        adamw_update_slice(&mut p, &[0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p[0], 0.99);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = [1.5, -2.5];
        let mut m = [0.0, 0.0];
        let mut v = [0.0, 0.0];
        adamw_update_slice(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p, [1.5, -2.5]);
    }

    #[test]
    fn adamw_rejects_nan_gradients() {
        let model_cfg = ModelConfig {
            feat_dim: 4,
            hidden_dim: 4,
            n_heads: 1,
            kernel_size: 3,
            n_regions: 2,
            pooling: PoolingKind::StylePooling,
            seed: 0,
        };
        let mut params = Parameters::seeded(&model_cfg);
        let mut grads = Parameters::zeros(&model_cfg);
        grads.fc1_w.data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&model_cfg);
        match adamw_step(&mut params, &grads, &mut state, &TrainConfig::default()) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, "fc1.weight"),
            other => panic!("expected gradient error, got {other:?}"),
        }
    }

    struct Fixture {
        dir: std::path::PathBuf,
        train: LoadedSet,
        val: LoadedSet,
        model_cfg: ModelConfig,
    }

    impl Drop for Fixture {
        fn drop(&mut self) {
            std::fs::remove_dir_all(&self.dir).ok();
        }
    }

    fn fixture(tag: &str, n: usize, noise: f64) -> Fixture {
        let dir = std::env::temp_dir().join(format!(
            "vadsphere-trainer-{tag}-{}",
            std::process::id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        let partition = make_partition(90.0).unwrap();
        let ds = synthesize_dataset(
            &dir,
            &SynthConfig {
                n,
                feat_dim: 8,
                frames: 5,
                noise,
                seed: 13,
                partition,
            },
        )
        .unwrap();
        let split = crate::data::split_per_category(&ds.records, 2, 5);
        let vocab = build_category_vocab(&[&split.val, &split.test]);
        let val = LoadedSet::load(&split.val, partition, 8, &vocab).unwrap();
        let train = LoadedSet::load(&split.test, partition, 8, &vocab).unwrap();
        let model_cfg = ModelConfig {
            feat_dim: 8,
            hidden_dim: 8,
            n_heads: 2,
            kernel_size: 3,
            n_regions: partition.n_regions(),
            pooling: PoolingKind::StylePooling,
            seed: 1,
        };
        Fixture {
            dir,
            train,
            val,
            model_cfg,
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let fx = fixture("zerolr", 48, 0.1);
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut model = Model::new(fx.model_cfg).unwrap();
        let before = model.parameters().clone();
        let weights = auxiliary_weights(&fx.train, &cfg).unwrap();
        let mut state = AdamState::new(&fx.model_cfg);
        train_epoch(&mut model, &fx.train, &weights, &cfg, &mut state, 0).unwrap();
        assert_eq!(model.parameters(), &before);
    }

    #[test]
    fn aux_contribution_is_exactly_zero_past_cutoff() {
        let fx = fixture("cutoff", 48, 0.1);
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut model = Model::new(fx.model_cfg).unwrap();
        let weights = auxiliary_weights(&fx.train, &cfg).unwrap();
        let mut state = AdamState::new(&fx.model_cfg);
        for epoch in 0..7 {
            let stats =
                train_epoch(&mut model, &fx.train, &weights, &cfg, &mut state, epoch).unwrap();
            if epoch >= 5 {
                assert_eq!(stats.aux_weighted_loss, 0.0);
                assert_eq!(stats.total_loss, stats.ccc_loss);
                assert_eq!(stats.lambda, 0.0);
            } else {
                assert!(stats.aux_weighted_loss > 0.0);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_trajectories() {
        let fx = fixture("determinism", 40, 0.1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = |tag: &str| {
            let path = fx.dir.join(format!("{tag}.ckpt"));
            let mut model = Model::new(fx.model_cfg).unwrap();
            let result = fit(&mut model, &fx.train, &fx.val, &cfg, &path).unwrap();
            (history_to_tsv(&result.history), result.best_val_loss)
        };
        let (log_a, best_a) = run("a");
        let (log_b, best_b) = run("b");
        assert_eq!(log_a, log_b);
        assert_eq!(best_a, best_b);
    }

    #[test]
    fn best_checkpoint_tracks_minimum_val_loss() {
        let fx = fixture("best", 40, 0.1);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let path = fx.dir.join("best.ckpt");
        let mut model = Model::new(fx.model_cfg).unwrap();
        let result = fit(&mut model, &fx.train, &fx.val, &cfg, &path).unwrap();
        let min_loss = result
            .history
            .iter()
            .map(|s| s.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(result.best_val_loss, min_loss);
        assert_eq!(
            result.history[result.best_epoch].val_loss,
            result.best_val_loss
        );
        assert!(path.exists());
    }

    #[test]
    fn disjointness_is_enforced() {
        let fx = fixture("overlap", 24, 0.1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let path = fx.dir.join("overlap.ckpt");
        let mut model = Model::new(fx.model_cfg).unwrap();
        let result = fit(&mut model, &fx.train, &fx.train, &cfg, &path);
        assert!(matches!(result, Err(TrainError::TrainValOverlap { .. })));
    }

    #[test]
    fn aux_none_and_decayed_aux_coincide_from_a_shared_state() {
        let fx = fixture("ablation", 40, 0.1);
        let base = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut model = Model::new(fx.model_cfg).unwrap();
        let weights = auxiliary_weights(&fx.train, &base).unwrap();
        let mut state = AdamState::new(&fx.model_cfg);
        for epoch in 0..5 {
            train_epoch(&mut model, &fx.train, &weights, &base, &mut state, epoch).unwrap();
        }

        // Fork the exact state at the cutoff and continue under both modes.
        let mut model_aux =
            Model::from_parameters(fx.model_cfg, model.parameters().clone()).unwrap();
        let mut state_aux = state.clone();
        let none_cfg = TrainConfig {
            aux_mode: AuxMode::None,
            ..base
        };
        for epoch in 5..8 {
            train_epoch(&mut model_aux, &fx.train, &weights, &base, &mut state_aux, epoch)
                .unwrap();
            train_epoch(&mut model, &fx.train, &weights, &none_cfg, &mut state, epoch).unwrap();
        }
        assert_eq!(model.parameters(), model_aux.parameters());
    }

    #[test]
    fn training_reduces_the_loss_on_an_easy_task() {
        let fx = fixture("learns", 64, 0.0);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let path = fx.dir.join("learns.ckpt");
        let mut model = Model::new(fx.model_cfg).unwrap();
        let result = fit(&mut model, &fx.train, &fx.val, &cfg, &path).unwrap();
        let first = result.history.first().unwrap().train.total_loss;
        let last = result.history.last().unwrap().train.ccc_loss;
        assert!(
            last < first,
            "training did not reduce the loss: {first} -> {last}"
        );
    }
}
