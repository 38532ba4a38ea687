//! Central finite-difference verification of every analytic gradient.
//!
//! Each layer is checked in isolation: a random upstream projection turns the
//! layer output into a scalar, the analytic backward pass produces gradients
//! for the layer input and every parameter, and each element is compared
//! against `(f(x + h) - f(x - h)) / 2h`. The composed model is checked the
//! same way through the full combined loss. The numeric path only ever calls
//! forward code, so it stays independent of the backward implementations it
//! judges.

use crate::losses::{ccc_loss, weighted_cross_entropy, ClassWeights};
use crate::nn::layers::*;
use crate::nn::{
    gated_conv_backward, gated_conv_forward, spectral_fc_backward, spectral_fc_forward, Model,
    ModelConfig, PoolingKind,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Settings for one full verification run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Number of independent random seeds per check.
    pub seeds: u64,
    /// Central-difference step.
    pub fd_step: f64,
    /// Elementwise relative-error bound for isolated layers.
    pub layer_tolerance: f64,
    /// Relative-error bound for the composed model.
    pub model_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seeds: 20,
            fd_step: 1e-5,
            layer_tolerance: 1e-4,
            model_tolerance: 1e-3,
        }
    }
}

/// Aggregated result for one layer (or the composed model) across all seeds.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<LayerCheck>,
    pub seeds: u64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LayerCheck::passed)
    }

    /// The failing (or otherwise worst) check, by error-to-tolerance ratio.
    pub fn worst(&self) -> Option<&LayerCheck> {
        self.checks.iter().max_by(|a, b| {
            (a.max_rel_err / a.tolerance)
                .partial_cmp(&(b.max_rel_err / b.tolerance))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    }
}

/// Guarded relative error; the additive floor keeps near-zero gradients from
/// amplifying finite-difference noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-scale..scale)).collect())
        .expect("length matches shape")
}

fn projected(output: &Tensor, projection: &Tensor) -> f64 {
    output
        .data()
        .iter()
        .zip(projection.data())
        .map(|(&a, &b)| a * b)
        .sum()
}

/// Checks one operation: `forward` maps the tensor list to an output,
/// `backward` returns the analytic gradient for every listed tensor given the
/// upstream projection. Returns the max guarded relative error.
fn check_op(
    tensors: &[Tensor],
    forward: &dyn Fn(&[Tensor]) -> Tensor,
    backward: &dyn Fn(&[Tensor], &Tensor) -> Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    step: f64,
) -> f64 {
    let output = forward(tensors);
    let projection = rand_tensor(output.shape(), rng, 1.0);
    let analytic = backward(tensors, &projection);
    assert_eq!(analytic.len(), tensors.len(), "gradient per input tensor");

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = tensors.to_vec();
    for (idx, grad) in analytic.iter().enumerate() {
        for elem in 0..grad.len() {
            let original = work[idx].data()[elem];
            work[idx].data_mut()[elem] = original + step;
            let plus = projected(&forward(&work), &projection);
            work[idx].data_mut()[elem] = original - step;
            let minus = projected(&forward(&work), &projection);
            work[idx].data_mut()[elem] = original;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(grad.data()[elem], numeric));
        }
    }
    worst
}

fn check_layer_norm(rng: &mut ChaCha8Rng, step: f64) -> f64 {
    let tensors = vec![
        rand_tensor(&[2, 3, 5], rng, 1.5),
        rand_tensor(&[5], rng, 1.0),
        rand_tensor(&[5], rng, 0.5),
    ];
    check_op(
        &tensors,
        &|t| layer_norm_forward(&t[0], &t[1], &t[2]).0,
        &|t, dy| {
            let (_, cache) = layer_norm_forward(&t[0], &t[1], &t[2]);
            let (dx, dg, db) = layer_norm_backward(&cache, &t[1], dy);
            vec![dx, dg, db]
        },
        rng,
        step,
    )
}

fn check_spectral_fc(rng: &mut ChaCha8Rng, step: f64) -> f64 {
    let (d, h) = (5, 6);
    let tensors = vec![
        rand_tensor(&[2, 3, d], rng, 1.0),
        rand_tensor(&[d, h], rng, 0.7),
        rand_tensor(&[h], rng, 0.5),
        rand_tensor(&[h, h], rng, 0.7),
        rand_tensor(&[h], rng, 0.5),
    ];
    check_op(
        &tensors,
        &|t| spectral_fc_forward(&t[0], &t[1], &t[2], &t[3], &t[4]).0,
        &|t, dy| {
            let (_, cache) = spectral_fc_forward(&t[0], &t[1], &t[2], &t[3], &t[4]);
            let (dx, dw1, db1, dw2, db2) = spectral_fc_backward(&t[0], &cache, &t[1], &t[3], dy);
            vec![dx, dw1, db1, dw2, db2]
        },
        rng,
        step,
    )
}

fn check_gated_conv(rng: &mut ChaCha8Rng, step: f64) -> f64 {
    let (h, k) = (4, 3);
    let tensors = vec![
        rand_tensor(&[2, 5, h], rng, 1.0),
        rand_tensor(&[2 * h, h, k], rng, 0.6),
        rand_tensor(&[2 * h], rng, 0.4),
        rand_tensor(&[2 * h, h, k], rng, 0.6),
        rand_tensor(&[2 * h], rng, 0.4),
    ];
    check_op(
        &tensors,
        &|t| gated_conv_forward(&t[0], &t[1], &t[2], &t[3], &t[4]).0,
        &|t, dy| {
            let (_, cache) = gated_conv_forward(&t[0], &t[1], &t[2], &t[3], &t[4]);
            let (dx, dw1, db1, dw2, db2) = gated_conv_backward(&t[0], &cache, &t[1], &t[3], dy);
            vec![dx, dw1, db1, dw2, db2]
        },
        rng,
        step,
    )
}

fn mhsa_params(t: &[Tensor]) -> MhsaParams<'_> {
    MhsaParams {
        wq: &t[1],
        bq: &t[2],
        wk: &t[3],
        bk: &t[4],
        wv: &t[5],
        bv: &t[6],
        wo: &t[7],
        bo: &t[8],
    }
}

fn check_mhsa(rng: &mut ChaCha8Rng, step: f64) -> f64 {
    let h = 6;
    let n_heads = 2;
    let mut tensors = vec![rand_tensor(&[2, 4, h], rng, 1.0)];
    for _ in 0..4 {
        tensors.push(rand_tensor(&[h, h], rng, 0.7));
        tensors.push(rand_tensor(&[h], rng, 0.4));
    }
    check_op(
        &tensors,
        &|t| mhsa_forward(&t[0], &mhsa_params(t), n_heads).0,
        &|t, dy| {
            let p = mhsa_params(t);
            let (_, cache) = mhsa_forward(&t[0], &p, n_heads);
            let (dx, g) = mhsa_backward(&t[0], &p, &cache, dy, n_heads);
            vec![dx, g.wq, g.bq, g.wk, g.bk, g.wv, g.bv, g.wo, g.bo]
        },
        rng,
        step,
    )
}

fn check_avg_pool(rng: &mut ChaCha8Rng, step: f64) -> f64 {
    let tensors = vec![rand_tensor(&[2, 5, 4], rng, 1.0)];
    check_op(
        &tensors,
        &|t| avg_pool_forward(&t[0]),
        &|t, dy| vec![avg_pool_backward(t[0].shape()[1], dy)],
        rng,
        step,
    )
}

fn att_stats_params(t: &[Tensor]) -> AttStatsParams<'_> {
    AttStatsParams {
        score_w1: &t[1],
        score_b1: &t[2],
        score_w2: &t[3],
        score_b2: &t[4],
        proj_w: &t[5],
        proj_b: &t[6],
    }
}

fn check_attentive_stats(rng: &mut ChaCha8Rng, step: f64) -> f64 {
    let h = 4;
    let tensors = vec![
        rand_tensor(&[2, 5, h], rng, 1.0),
        rand_tensor(&[h, h], rng, 0.7),
        rand_tensor(&[h], rng, 0.4),
        rand_tensor(&[h], rng, 0.7),
        rand_tensor(&[1], rng, 0.4),
        rand_tensor(&[2 * h, h], rng, 0.7),
        rand_tensor(&[h], rng, 0.4),
    ];
    check_op(
        &tensors,
        &|t| attentive_stats_forward(&t[0], &att_stats_params(t)).0,
        &|t, dy| {
            let p = att_stats_params(t);
            let (_, cache) = attentive_stats_forward(&t[0], &p);
            let (dx, g) = attentive_stats_backward(&t[0], &p, &cache, dy);
            vec![
                dx, g.score_w1, g.score_b1, g.score_w2, g.score_b2, g.proj_w, g.proj_b,
            ]
        },
        rng,
        step,
    )
}

fn check_linear_head(rng: &mut ChaCha8Rng, step: f64) -> f64 {
    let tensors = vec![
        rand_tensor(&[3, 6], rng, 1.0),
        rand_tensor(&[6, 4], rng, 0.7),
        rand_tensor(&[4], rng, 0.4),
    ];
    check_op(
        &tensors,
        &|t| linear2_forward(&t[0], &t[1], &t[2]),
        &|t, dy| {
            let (dx, dw, db) = linear2_backward(&t[0], &t[1], dy);
            vec![dx, dw, db]
        },
        rng,
        step,
    )
}

/// Model instance used for the composed check: small enough for exhaustive
/// per-parameter finite differences, large enough to exercise every stage.
pub fn composed_model_config(pooling: PoolingKind, seed: u64) -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        hidden_dim: 16,
        n_heads: 2,
        kernel_size: 5,
        n_regions: 8,
        pooling,
        seed,
    }
}

/// Combined loss of the composed check: CCC regression plus 0.7x weighted
/// cross-entropy, so both heads contribute gradient.
const COMPOSED_LAMBDA: f64 = 0.7;

fn composed_loss(
    model: &Model,
    features: &Tensor,
    vad_target: &Tensor,
    region_targets: &[usize],
    weights: &ClassWeights,
) -> f64 {
    let out = model.infer(features).expect("forward");
    let reg = ccc_loss(&out.vad_pred, vad_target).expect("ccc loss");
    let aux = weighted_cross_entropy(&out.region_logits, region_targets, weights).expect("wce");
    reg.value + COMPOSED_LAMBDA * aux.value
}

/// Exhaustive finite-difference check of the composed model's parameter
/// gradients under the combined loss. Returns the max guarded relative error.
pub fn check_composed_model(pooling: PoolingKind, seed: u64, step: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(11));
    let cfg = composed_model_config(pooling, seed);
    let (batch, frames) = (4, 7);
    let mut model = Model::new(cfg).expect("valid config");
    let features = rand_tensor(&[batch, frames, cfg.feat_dim], &mut rng, 1.0);
    let vad_target = rand_tensor(&[batch, 3], &mut rng, 1.0);
    let region_targets: Vec<usize> =
        (0..batch).map(|_| rng.gen_range(0..cfg.n_regions)).collect();
    let counts: Vec<u64> = (0..cfg.n_regions).map(|_| rng.gen_range(1..50)).collect();
    let weights = crate::losses::inverse_frequency_weights(&counts).expect("valid counts");

    // Analytic gradients through the cached forward pass.
    let out = model.forward(&features).expect("forward");
    let reg = ccc_loss(&out.vad_pred, &vad_target).expect("ccc loss");
    let mut aux =
        weighted_cross_entropy(&out.region_logits, &region_targets, &weights).expect("wce");
    aux.gradient.scale(COMPOSED_LAMBDA);
    let analytic = model
        .backward(Some(&aux.gradient), &reg.gradient)
        .expect("backward");

    let mut worst: f64 = 0.0;
    let analytic_tensors: Vec<(&'static str, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.data().to_vec()))
        .collect();
    for (idx, (_, grad)) in analytic_tensors.iter().enumerate() {
        for elem in 0..grad.len() {
            let original = {
                let mut tensors = model.parameters_mut().tensors_mut();
                let v = tensors[idx].1.data()[elem];
                tensors[idx].1.data_mut()[elem] = v + step;
                v
            };
            let plus = composed_loss(&model, &features, &vad_target, &region_targets, &weights);
            model.parameters_mut().tensors_mut()[idx].1.data_mut()[elem] = original - step;
            let minus = composed_loss(&model, &features, &vad_target, &region_targets, &weights);
            model.parameters_mut().tensors_mut()[idx].1.data_mut()[elem] = original;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(grad[elem], numeric));
        }
    }
    worst
}

/// Runs every layer check and the composed-model check across the configured
/// seeds, aggregating the worst relative error per check.
pub fn run_suite(cfg: &GradCheckConfig) -> GradCheckReport {
    let layer_checks: [(&'static str, fn(&mut ChaCha8Rng, f64) -> f64); 7] = [
        ("layer_norm", check_layer_norm),
        ("spectral_fc", check_spectral_fc),
        ("gated_conv", check_gated_conv),
        ("mhsa", check_mhsa),
        ("temporal_avg_pool", check_avg_pool),
        ("attentive_stats_pool", check_attentive_stats),
        ("linear_head", check_linear_head),
    ];

    let mut checks = Vec::new();
    for (name, check) in layer_checks {
        let mut worst: f64 = 0.0;
        for seed in 0..cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            worst = worst.max(check(&mut rng, cfg.fd_step));
        }
        checks.push(LayerCheck {
            name,
            max_rel_err: worst,
            tolerance: cfg.layer_tolerance,
        });
    }

    let mut style_worst: f64 = 0.0;
    let mut att_worst: f64 = 0.0;
    for seed in 0..cfg.seeds {
        // Alternate pooling modes so both composed paths see >= seeds/2 runs.
        if seed % 2 == 0 {
            style_worst =
                style_worst.max(check_composed_model(PoolingKind::StylePooling, seed, cfg.fd_step));
        } else {
            att_worst =
                att_worst.max(check_composed_model(PoolingKind::AttentiveStats, seed, cfg.fd_step));
        }
    }
    checks.push(LayerCheck {
        name: "composed_model_style_pooling",
        max_rel_err: style_worst,
        tolerance: cfg.model_tolerance,
    });
    checks.push(LayerCheck {
        name: "composed_model_attentive_stats",
        max_rel_err: att_worst,
        tolerance: cfg.model_tolerance,
    });

    GradCheckReport {
        checks,
        seeds: cfg.seeds,
    }
}
