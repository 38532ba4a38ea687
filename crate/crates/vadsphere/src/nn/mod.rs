//! A small differentiable network that pools frame-level features into an
//! utterance vector and predicts both an angular region (logits) and the
//! three continuous VAD values.
//!
//! Pipeline: layer norm over the input features, two frame-wise FC layers
//! with Mish, two gated temporal convolution blocks with residuals,
//! multi-head self-attention with a residual, one more frame-wise FC, then
//! temporal average pooling (or attentive-statistics pooling as the ablation
//! baseline) and the two linear heads. The regression head is unsquashed;
//! targets live on the normalized `[-1, 1]` scale.
//!
//! Forward caches activations on the model; [`Model::backward`] consumes the
//! cache and returns parameter gradients shaped like [`Parameters`]. A model
//! being trained is single-writer; [`Model::infer`] never touches the cache
//! and is safe on a shared snapshot.

pub mod layers;

use crate::tensor::Tensor;
use layers::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Magic bytes that open every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSPHMDL1";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("hidden_dim {hidden} is not divisible by n_heads {heads}")]
    HiddenNotDivisible { hidden: usize, heads: usize },
    #[error("kernel_size {0} must be odd")]
    EvenKernel(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward called without a cached forward pass")]
    BackwardWithoutForward,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Frame-to-utterance pooling variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    /// Layer-norm / FC / gated-conv / attention stack with average pooling.
    StylePooling,
    /// Attention-weighted mean and standard deviation (ablation baseline).
    AttentiveStats,
}

/// Architecture hyperparameters.
///
/// Desk defaults keep every dimension small; the reference scale
/// (hidden 1024, 2 heads, kernel 5) is reachable purely through the fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub kernel_size: usize,
    pub n_regions: usize,
    pub pooling: PoolingKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 16,
            hidden_dim: 32,
            n_heads: 2,
            kernel_size: 5,
            n_regions: 8,
            pooling: PoolingKind::StylePooling,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.feat_dim == 0 || self.hidden_dim == 0 || self.n_regions == 0 || self.n_heads == 0 {
            return Err(NnError::InvalidConfig(
                "dimensions and head count must be positive".into(),
            ));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(NnError::HiddenNotDivisible {
                hidden: self.hidden_dim,
                heads: self.n_heads,
            });
        }
        if self.kernel_size % 2 == 0 {
            return Err(NnError::EvenKernel(self.kernel_size));
        }
        Ok(())
    }
}

/// Parameters of the attentive-statistics pooling head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttPoolParams {
    pub score_w1: Tensor,
    pub score_b1: Tensor,
    pub score_w2: Tensor,
    pub score_b2: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

/// Every learnable tensor of the model, in the fixed checkpoint order.
///
/// The same struct doubles as the gradient container: gradients returned by
/// [`Model::backward`] and optimizer moments are `Parameters` filled with
/// per-tensor values of identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub attn_q_w: Tensor,
    pub attn_q_b: Tensor,
    pub attn_k_w: Tensor,
    pub attn_k_b: Tensor,
    pub attn_v_w: Tensor,
    pub attn_v_b: Tensor,
    pub attn_o_w: Tensor,
    pub attn_o_b: Tensor,
    pub fc3_w: Tensor,
    pub fc3_b: Tensor,
    pub head_region_w: Tensor,
    pub head_region_b: Tensor,
    pub head_vad_w: Tensor,
    pub head_vad_b: Tensor,
    /// Present only when the config selects attentive-statistics pooling.
    pub pool: Option<AttPoolParams>,
}

impl Parameters {
    /// All-zero parameters shaped for the config (gradient/moment container).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.feat_dim;
        let h = cfg.hidden_dim;
        let k = cfg.kernel_size;
        let n = cfg.n_regions;
        Parameters {
            ln_gain: Tensor::zeros(&[d]),
            ln_bias: Tensor::zeros(&[d]),
            fc1_w: Tensor::zeros(&[d, h]),
            fc1_b: Tensor::zeros(&[h]),
            fc2_w: Tensor::zeros(&[h, h]),
            fc2_b: Tensor::zeros(&[h]),
            conv1_w: Tensor::zeros(&[2 * h, h, k]),
            conv1_b: Tensor::zeros(&[2 * h]),
            conv2_w: Tensor::zeros(&[2 * h, h, k]),
            conv2_b: Tensor::zeros(&[2 * h]),
            attn_q_w: Tensor::zeros(&[h, h]),
            attn_q_b: Tensor::zeros(&[h]),
            attn_k_w: Tensor::zeros(&[h, h]),
            attn_k_b: Tensor::zeros(&[h]),
            attn_v_w: Tensor::zeros(&[h, h]),
            attn_v_b: Tensor::zeros(&[h]),
            attn_o_w: Tensor::zeros(&[h, h]),
            attn_o_b: Tensor::zeros(&[h]),
            fc3_w: Tensor::zeros(&[h, h]),
            fc3_b: Tensor::zeros(&[h]),
            head_region_w: Tensor::zeros(&[h, n]),
            head_region_b: Tensor::zeros(&[n]),
            head_vad_w: Tensor::zeros(&[h, 3]),
            head_vad_b: Tensor::zeros(&[3]),
            pool: match cfg.pooling {
                PoolingKind::StylePooling => None,
                PoolingKind::AttentiveStats => Some(AttPoolParams {
                    score_w1: Tensor::zeros(&[h, h]),
                    score_b1: Tensor::zeros(&[h]),
                    score_w2: Tensor::zeros(&[h]),
                    score_b2: Tensor::zeros(&[1]),
                    proj_w: Tensor::zeros(&[2 * h, h]),
                    proj_b: Tensor::zeros(&[h]),
                }),
            },
        }
    }

    /// Seeded initialization: weights and biases drawn from
    /// `U(-sqrt(1/fan_in), sqrt(1/fan_in))`; layer-norm gain 1 and bias 0.
    pub fn seeded(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Parameters::zeros(cfg);
        let h = cfg.hidden_dim;
        p.ln_gain.fill(1.0);

        let mut draw = |t: &mut Tensor, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        draw(&mut p.fc1_w, cfg.feat_dim);
        draw(&mut p.fc1_b, cfg.feat_dim);
        draw(&mut p.fc2_w, h);
        draw(&mut p.fc2_b, h);
        let conv_fan = h * cfg.kernel_size;
        draw(&mut p.conv1_w, conv_fan);
        draw(&mut p.conv1_b, conv_fan);
        draw(&mut p.conv2_w, conv_fan);
        draw(&mut p.conv2_b, conv_fan);
        draw(&mut p.attn_q_w, h);
        draw(&mut p.attn_q_b, h);
        draw(&mut p.attn_k_w, h);
        draw(&mut p.attn_k_b, h);
        draw(&mut p.attn_v_w, h);
        draw(&mut p.attn_v_b, h);
        draw(&mut p.attn_o_w, h);
        draw(&mut p.attn_o_b, h);
        draw(&mut p.fc3_w, h);
        draw(&mut p.fc3_b, h);
        draw(&mut p.head_region_w, h);
        draw(&mut p.head_region_b, h);
        draw(&mut p.head_vad_w, h);
        draw(&mut p.head_vad_b, h);
        if let Some(pool) = p.pool.as_mut() {
            draw(&mut pool.score_w1, h);
            draw(&mut pool.score_b1, h);
            draw(&mut pool.score_w2, h);
            draw(&mut pool.score_b2, h);
            draw(&mut pool.proj_w, 2 * h);
            draw(&mut pool.proj_b, 2 * h);
        }
        p
    }

    /// Named views of every tensor, in the fixed checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut list = vec![
            ("ln.gain", &self.ln_gain),
            ("ln.bias", &self.ln_bias),
            ("fc1.weight", &self.fc1_w),
            ("fc1.bias", &self.fc1_b),
            ("fc2.weight", &self.fc2_w),
            ("fc2.bias", &self.fc2_b),
            ("conv1.weight", &self.conv1_w),
            ("conv1.bias", &self.conv1_b),
            ("conv2.weight", &self.conv2_w),
            ("conv2.bias", &self.conv2_b),
            ("attn.q.weight", &self.attn_q_w),
            ("attn.q.bias", &self.attn_q_b),
            ("attn.k.weight", &self.attn_k_w),
            ("attn.k.bias", &self.attn_k_b),
            ("attn.v.weight", &self.attn_v_w),
            ("attn.v.bias", &self.attn_v_b),
            ("attn.out.weight", &self.attn_o_w),
            ("attn.out.bias", &self.attn_o_b),
            ("fc3.weight", &self.fc3_w),
            ("fc3.bias", &self.fc3_b),
            ("head.region.weight", &self.head_region_w),
            ("head.region.bias", &self.head_region_b),
            ("head.vad.weight", &self.head_vad_w),
            ("head.vad.bias", &self.head_vad_b),
        ];
        if let Some(pool) = &self.pool {
            list.push(("pool.score1.weight", &pool.score_w1));
            list.push(("pool.score1.bias", &pool.score_b1));
            list.push(("pool.score2.weight", &pool.score_w2));
            list.push(("pool.score2.bias", &pool.score_b2));
            list.push(("pool.proj.weight", &pool.proj_w));
            list.push(("pool.proj.bias", &pool.proj_b));
        }
        list
    }

    /// Mutable counterpart of [`Parameters::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut list = vec![
            ("ln.gain", &mut self.ln_gain),
            ("ln.bias", &mut self.ln_bias),
            ("fc1.weight", &mut self.fc1_w),
            ("fc1.bias", &mut self.fc1_b),
            ("fc2.weight", &mut self.fc2_w),
            ("fc2.bias", &mut self.fc2_b),
            ("conv1.weight", &mut self.conv1_w),
            ("conv1.bias", &mut self.conv1_b),
            ("conv2.weight", &mut self.conv2_w),
            ("conv2.bias", &mut self.conv2_b),
            ("attn.q.weight", &mut self.attn_q_w),
            ("attn.q.bias", &mut self.attn_q_b),
            ("attn.k.weight", &mut self.attn_k_w),
            ("attn.k.bias", &mut self.attn_k_b),
            ("attn.v.weight", &mut self.attn_v_w),
            ("attn.v.bias", &mut self.attn_v_b),
            ("attn.out.weight", &mut self.attn_o_w),
            ("attn.out.bias", &mut self.attn_o_b),
            ("fc3.weight", &mut self.fc3_w),
            ("fc3.bias", &mut self.fc3_b),
            ("head.region.weight", &mut self.head_region_w),
            ("head.region.bias", &mut self.head_region_b),
            ("head.vad.weight", &mut self.head_vad_w),
            ("head.vad.bias", &mut self.head_vad_b),
        ];
        if let Some(pool) = &mut self.pool {
            list.push(("pool.score1.weight", &mut pool.score_w1));
            list.push(("pool.score1.bias", &mut pool.score_b1));
            list.push(("pool.score2.weight", &mut pool.score_w2));
            list.push(("pool.score2.bias", &mut pool.score_b2));
            list.push(("pool.proj.weight", &mut pool.proj_w));
            list.push(("pool.proj.bias", &mut pool.proj_b));
        }
        list
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub region_logits: Tensor,
    pub vad_pred: Tensor,
    pub pooled: Tensor,
}

// ---------------------------------------------------------------------------
// Composite stages, exposed for the gradient-check harness.

pub struct SpectralCache {
    pub fc1_pre: Tensor,
    pub fc1_act: Tensor,
    pub fc2_pre: Tensor,
}

/// Two frame-wise affine layers with Mish between and after.
pub fn spectral_fc_forward(
    x: &Tensor,
    fc1_w: &Tensor,
    fc1_b: &Tensor,
    fc2_w: &Tensor,
    fc2_b: &Tensor,
) -> (Tensor, SpectralCache) {
    let fc1_pre = linear3_forward(x, fc1_w, fc1_b);
    let fc1_act = mish_forward(&fc1_pre);
    let fc2_pre = linear3_forward(&fc1_act, fc2_w, fc2_b);
    let out = mish_forward(&fc2_pre);
    (
        out,
        SpectralCache {
            fc1_pre,
            fc1_act,
            fc2_pre,
        },
    )
}

/// Returns `(dx, dfc1_w, dfc1_b, dfc2_w, dfc2_b)`.
pub fn spectral_fc_backward(
    x: &Tensor,
    cache: &SpectralCache,
    fc1_w: &Tensor,
    fc2_w: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let d_fc2_pre = mish_backward(&cache.fc2_pre, dy);
    let (d_fc1_act, dfc2_w, dfc2_b) = linear3_backward(&cache.fc1_act, fc2_w, &d_fc2_pre);
    let d_fc1_pre = mish_backward(&cache.fc1_pre, &d_fc1_act);
    let (dx, dfc1_w, dfc1_b) = linear3_backward(x, fc1_w, &d_fc1_pre);
    (dx, dfc1_w, dfc1_b, dfc2_w, dfc2_b)
}

pub struct GatedConvCache {
    pub pre1: Tensor,
    pub block1_out: Tensor,
    pub pre2: Tensor,
}

/// Two gated temporal convolution blocks, each with a residual connection.
pub fn gated_conv_forward(
    x: &Tensor,
    conv1_w: &Tensor,
    conv1_b: &Tensor,
    conv2_w: &Tensor,
    conv2_b: &Tensor,
) -> (Tensor, GatedConvCache) {
    let pre1 = conv1d_forward(x, conv1_w, conv1_b);
    let mut block1_out = glu_forward(&pre1);
    block1_out.add_scaled(x, 1.0).expect("residual shape");
    let pre2 = conv1d_forward(&block1_out, conv2_w, conv2_b);
    let mut out = glu_forward(&pre2);
    out.add_scaled(&block1_out, 1.0).expect("residual shape");
    (
        out,
        GatedConvCache {
            pre1,
            block1_out,
            pre2,
        },
    )
}

/// Returns `(dx, dconv1_w, dconv1_b, dconv2_w, dconv2_b)`.
pub fn gated_conv_backward(
    x: &Tensor,
    cache: &GatedConvCache,
    conv1_w: &Tensor,
    conv2_w: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let d_pre2 = glu_backward(&cache.pre2, dy);
    let (dx_conv2, dconv2_w, dconv2_b) = conv1d_backward(&cache.block1_out, conv2_w, &d_pre2);
    let mut d_block1 = dy.clone();
    d_block1.add_scaled(&dx_conv2, 1.0).expect("same shape");

    let d_pre1 = glu_backward(&cache.pre1, &d_block1);
    let (dx_conv1, dconv1_w, dconv1_b) = conv1d_backward(x, conv1_w, &d_pre1);
    let mut dx = d_block1;
    dx.add_scaled(&dx_conv1, 1.0).expect("same shape");
    (dx, dconv1_w, dconv1_b, dconv2_w, dconv2_b)
}

// ---------------------------------------------------------------------------
// The model itself.

enum PoolCache {
    Avg { t_len: usize },
    Att(AttStatsCache),
}

struct ForwardCache {
    input: Tensor,
    ln: LayerNormCache,
    ln_out: Tensor,
    spectral: SpectralCache,
    spectral_out: Tensor,
    conv: GatedConvCache,
    conv_out: Tensor,
    mhsa: MhsaCache,
    mhsa_out: Tensor,
    fc3_out: Tensor,
    pool: PoolCache,
    pooled: Tensor,
}

pub struct Model {
    cfg: ModelConfig,
    params: Parameters,
    cache: Option<ForwardCache>,
}

impl Model {
    /// Builds a model with seeded uniform fan-in initialization.
    pub fn new(cfg: ModelConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            params: Parameters::seeded(&cfg),
            cache: None,
        })
    }

    /// Wraps existing parameters (used by checkpoint loading and tests).
    pub fn from_parameters(cfg: ModelConfig, params: Parameters) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            params,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        self.cache = None;
        &mut self.params
    }

    fn run_forward(&self, features: &Tensor) -> Result<(ModelOutput, ForwardCache), NnError> {
        let shape = features.shape();
        if shape.len() != 3 || shape[2] != self.cfg.feat_dim || shape[0] == 0 || shape[1] == 0 {
            return Err(NnError::ShapeMismatch {
                expected: vec![shape.first().copied().unwrap_or(1).max(1), 1, self.cfg.feat_dim],
                got: shape.to_vec(),
            });
        }
        let p = &self.params;
        let (ln_out, ln) = layer_norm_forward(features, &p.ln_gain, &p.ln_bias);
        let (spectral_out, spectral) =
            spectral_fc_forward(&ln_out, &p.fc1_w, &p.fc1_b, &p.fc2_w, &p.fc2_b);
        let (conv_out, conv) =
            gated_conv_forward(&spectral_out, &p.conv1_w, &p.conv1_b, &p.conv2_w, &p.conv2_b);
        let mhsa_params = MhsaParams {
            wq: &p.attn_q_w,
            bq: &p.attn_q_b,
            wk: &p.attn_k_w,
            bk: &p.attn_k_b,
            wv: &p.attn_v_w,
            bv: &p.attn_v_b,
            wo: &p.attn_o_w,
            bo: &p.attn_o_b,
        };
        let (mhsa_out, mhsa) = mhsa_forward(&conv_out, &mhsa_params, self.cfg.n_heads);
        let fc3_out = linear3_forward(&mhsa_out, &p.fc3_w, &p.fc3_b);

        let (pooled, pool) = match (&self.cfg.pooling, &p.pool) {
            (PoolingKind::StylePooling, _) => (
                avg_pool_forward(&fc3_out),
                PoolCache::Avg {
                    t_len: shape[1],
                },
            ),
            (PoolingKind::AttentiveStats, Some(att)) => {
                let att_params = AttStatsParams {
                    score_w1: &att.score_w1,
                    score_b1: &att.score_b1,
                    score_w2: &att.score_w2,
                    score_b2: &att.score_b2,
                    proj_w: &att.proj_w,
                    proj_b: &att.proj_b,
                };
                let (pooled, cache) = attentive_stats_forward(&fc3_out, &att_params);
                (pooled, PoolCache::Att(cache))
            }
            (PoolingKind::AttentiveStats, None) => {
                return Err(NnError::InvalidConfig(
                    "attentive-stats pooling selected but pooling parameters are absent".into(),
                ))
            }
        };

        let region_logits = linear2_forward(&pooled, &p.head_region_w, &p.head_region_b);
        let vad_pred = linear2_forward(&pooled, &p.head_vad_w, &p.head_vad_b);
        let output = ModelOutput {
            region_logits,
            vad_pred,
            pooled: pooled.clone(),
        };
        let cache = ForwardCache {
            input: features.clone(),
            ln,
            ln_out,
            spectral,
            spectral_out,
            conv,
            conv_out,
            mhsa,
            mhsa_out,
            fc3_out,
            pool,
            pooled,
        };
        Ok((output, cache))
    }

    /// Forward pass that caches activations for a following [`Model::backward`].
    pub fn forward(&mut self, features: &Tensor) -> Result<ModelOutput, NnError> {
        let (output, cache) = self.run_forward(features)?;
        self.cache = Some(cache);
        Ok(output)
    }

    /// Cache-free forward pass; safe on a shared immutable model.
    pub fn infer(&self, features: &Tensor) -> Result<ModelOutput, NnError> {
        Ok(self.run_forward(features)?.0)
    }

    /// Reverse pass over the cached activations.
    ///
    /// `d_region_logits == None` means the classifier head received no
    /// gradient (auxiliary task disabled or already decayed to zero).
    pub fn backward(
        &self,
        d_region_logits: Option<&Tensor>,
        d_vad_pred: &Tensor,
    ) -> Result<Parameters, NnError> {
        let cache = self.cache.as_ref().ok_or(NnError::BackwardWithoutForward)?;
        let p = &self.params;
        let mut grads = Parameters::zeros(&self.cfg);

        // Heads into the pooled vector.
        let (mut d_pooled, dw_vad, db_vad) =
            linear2_backward(&cache.pooled, &p.head_vad_w, d_vad_pred);
        grads.head_vad_w = dw_vad;
        grads.head_vad_b = db_vad;
        if let Some(d_logits) = d_region_logits {
            let (d_pooled_region, dw_region, db_region) =
                linear2_backward(&cache.pooled, &p.head_region_w, d_logits);
            d_pooled.add_scaled(&d_pooled_region, 1.0).expect("shape");
            grads.head_region_w = dw_region;
            grads.head_region_b = db_region;
        }

        // Pooling back to frame space.
        let d_fc3_out = match &cache.pool {
            PoolCache::Avg { t_len } => avg_pool_backward(*t_len, &d_pooled),
            PoolCache::Att(att_cache) => {
                let att = p.pool.as_ref().expect("pooling params present");
                let att_params = AttStatsParams {
                    score_w1: &att.score_w1,
                    score_b1: &att.score_b1,
                    score_w2: &att.score_w2,
                    score_b2: &att.score_b2,
                    proj_w: &att.proj_w,
                    proj_b: &att.proj_b,
                };
                let (dx, att_grads) =
                    attentive_stats_backward(&cache.fc3_out, &att_params, att_cache, &d_pooled);
                grads.pool = Some(AttPoolParams {
                    score_w1: att_grads.score_w1,
                    score_b1: att_grads.score_b1,
                    score_w2: att_grads.score_w2,
                    score_b2: att_grads.score_b2,
                    proj_w: att_grads.proj_w,
                    proj_b: att_grads.proj_b,
                });
                dx
            }
        };

        let (d_mhsa_out, dfc3_w, dfc3_b) = linear3_backward(&cache.mhsa_out, &p.fc3_w, &d_fc3_out);
        grads.fc3_w = dfc3_w;
        grads.fc3_b = dfc3_b;

        let mhsa_params = MhsaParams {
            wq: &p.attn_q_w,
            bq: &p.attn_q_b,
            wk: &p.attn_k_w,
            bk: &p.attn_k_b,
            wv: &p.attn_v_w,
            bv: &p.attn_v_b,
            wo: &p.attn_o_w,
            bo: &p.attn_o_b,
        };
        let (d_conv_out, mhsa_grads) = mhsa_backward(
            &cache.conv_out,
            &mhsa_params,
            &cache.mhsa,
            &d_mhsa_out,
            self.cfg.n_heads,
        );
        grads.attn_q_w = mhsa_grads.wq;
        grads.attn_q_b = mhsa_grads.bq;
        grads.attn_k_w = mhsa_grads.wk;
        grads.attn_k_b = mhsa_grads.bk;
        grads.attn_v_w = mhsa_grads.wv;
        grads.attn_v_b = mhsa_grads.bv;
        grads.attn_o_w = mhsa_grads.wo;
        grads.attn_o_b = mhsa_grads.bo;

        let (d_spectral_out, dconv1_w, dconv1_b, dconv2_w, dconv2_b) = gated_conv_backward(
            &cache.spectral_out,
            &cache.conv,
            &p.conv1_w,
            &p.conv2_w,
            &d_conv_out,
        );
        grads.conv1_w = dconv1_w;
        grads.conv1_b = dconv1_b;
        grads.conv2_w = dconv2_w;
        grads.conv2_b = dconv2_b;

        let (d_ln_out, dfc1_w, dfc1_b, dfc2_w, dfc2_b) = spectral_fc_backward(
            &cache.ln_out,
            &cache.spectral,
            &p.fc1_w,
            &p.fc2_w,
            &d_spectral_out,
        );
        grads.fc1_w = dfc1_w;
        grads.fc1_b = dfc1_b;
        grads.fc2_w = dfc2_w;
        grads.fc2_b = dfc2_b;

        let (_d_input, dln_gain, dln_bias) = layer_norm_backward(&cache.ln, &p.ln_gain, &d_ln_out);
        grads.ln_gain = dln_gain;
        grads.ln_bias = dln_bias;
        debug_assert_eq!(cache.input.shape(), _d_input.shape());

        Ok(grads)
    }

    // -----------------------------------------------------------------------
    // Checkpointing.
    //
    // Layout (all integers little-endian):
    //   magic "VSPHMDL1" | u32 version | u32 feat_dim | u32 hidden_dim |
    //   u32 n_heads | u32 kernel_size | u32 n_regions | u8 pooling |
    //   u64 seed | u32 tensor count | per tensor: u64 element count,
    //   elements as f64 LE, in the order of [`Parameters::tensors`].

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for dim in [
            self.cfg.feat_dim,
            self.cfg.hidden_dim,
            self.cfg.n_heads,
            self.cfg.kernel_size,
            self.cfg.n_regions,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&[match self.cfg.pooling {
            PoolingKind::StylePooling => 0u8,
            PoolingKind::AttentiveStats => 1u8,
        }])?;
        w.write_all(&self.cfg.seed.to_le_bytes())?;

        let tensors = self.params.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (_, tensor) in tensors {
            w.write_all(&(tensor.len() as u64).to_le_bytes())?;
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::BadVersion(version));
        }
        let feat_dim = read_u32(&mut r)? as usize;
        let hidden_dim = read_u32(&mut r)? as usize;
        let n_heads = read_u32(&mut r)? as usize;
        let kernel_size = read_u32(&mut r)? as usize;
        let n_regions = read_u32(&mut r)? as usize;
        let mut pooling_byte = [0u8; 1];
        r.read_exact(&mut pooling_byte)?;
        let pooling = match pooling_byte[0] {
            0 => PoolingKind::StylePooling,
            1 => PoolingKind::AttentiveStats,
            other => return Err(NnError::Corrupt(format!("unknown pooling tag {other}"))),
        };
        let mut seed_bytes = [0u8; 8];
        r.read_exact(&mut seed_bytes)?;
        let cfg = ModelConfig {
            feat_dim,
            hidden_dim,
            n_heads,
            kernel_size,
            n_regions,
            pooling,
            seed: u64::from_le_bytes(seed_bytes),
        };
        cfg.validate()
            .map_err(|e| NnError::Corrupt(format!("invalid stored config: {e}")))?;

        let mut params = Parameters::zeros(&cfg);
        let expected = params.tensors().len() as u32;
        let count = read_u32(&mut r)?;
        if count != expected {
            return Err(NnError::Corrupt(format!(
                "expected {expected} tensors, file lists {count}"
            )));
        }
        for (name, tensor) in params.tensors_mut() {
            let mut len_bytes = [0u8; 8];
            r.read_exact(&mut len_bytes)?;
            let len = u64::from_le_bytes(len_bytes) as usize;
            if len != tensor.len() {
                return Err(NnError::Corrupt(format!(
                    "tensor {name}: expected {} elements, file has {len}",
                    tensor.len()
                )));
            }
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            for (v, chunk) in tensor.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(NnError::Corrupt("trailing bytes after parameters".into()));
        }
        Model::from_parameters(cfg, params)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
