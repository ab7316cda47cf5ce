//! Model assembly: the full parameter state (frontend + encoder + pooling +
//! head), flat parameter-group access for the optimizer, and the batched
//! forward/backward step that joins every stage.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    self, attention_pool, attention_pool_backward, encode_backward_batch, encode_batch,
    max_pool_backward, max_pool_global, AttentionPoolParams, EncMode, EncoderConfig,
    EncoderGrads, EncoderParams, EncoderStatsUpdate,
};
use crate::encoder::attention::{AttnCache, AttnGrads};
use crate::error::{Error, Result};
use crate::fft::FftCache;
use crate::frontend::{
    self, compress, gabor, pool, FrontendConfig, FrontendParams, Mode,
};
use crate::head::{
    self, classify, classify_backward, cross_entropy, meta_branch, meta_branch_backward,
    ClassifyGrads, HeadParams, MetaGrads,
};
use crate::real::{r, Real};
use crate::types::{ClassLabel, CtdsvStats};

/// Feature-map reduction used between the encoder and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Attention,
    Max,
}

impl PoolingMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolingMode::Attention => "attention",
            PoolingMode::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(PoolingMode::Attention),
            "max" => Some(PoolingMode::Max),
            _ => None,
        }
    }
}

/// Everything needed to rebuild a model's shape (stored verbatim in
/// checkpoints).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub n_samples: usize,
    pub n_filters: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub kernel_width: usize,
    pub hop: usize,
    pub encoder_channels: Vec<usize>,
    pub attention_dim: usize,
    pub pooling: PoolingMode,
    pub use_ctdsv: bool,
}

impl ModelConfig {
    pub fn frontend_config(&self) -> FrontendConfig {
        let mut cfg = FrontendConfig::new(self.sample_rate, self.n_filters);
        cfg.f_min_hz = self.f_min_hz;
        cfg.f_max_hz = self.f_max_hz;
        cfg.kernel_width = self.kernel_width;
        cfg.hop = self.hop;
        cfg.sigma_max = self.kernel_width as f64 / 2.0;
        cfg.rho_max = 4.0 * self.hop as f64;
        cfg
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::new(self.encoder_channels.clone())
    }

    pub fn n_frames(&self) -> usize {
        self.n_samples / self.hop
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend_config().validate()?;
        if self.n_samples < self.kernel_width {
            return Err(Error::Config(format!(
                "clip length {} is shorter than the kernel width {}",
                self.n_samples, self.kernel_width
            )));
        }
        if self.encoder_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.pooling == PoolingMode::Attention && self.attention_dim == 0 {
            return Err(Error::Config("attention_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// The complete trainable state plus the static shape configuration and the
/// metadata normalization statistics.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub frontend: FrontendParams<T>,
    pub encoder: EncoderParams<T>,
    pub attention: Option<AttentionPoolParams<T>>,
    pub head: HeadParams<T>,
    pub ctdsv_stats: CtdsvStats<T>,
}

impl<T: Real> ModelState<T> {
    /// Builds a freshly initialized model from a seed. The RNG consumption
    /// order is fixed (encoder, attention, head) so a seed pins every
    /// initial parameter.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let frontend = frontend::init_filterbank(&config.frontend_config())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&config.encoder_config(), &mut rng);
        let channels = encoder.out_channels();
        let attention = match config.pooling {
            PoolingMode::Attention => Some(AttentionPoolParams::init(
                channels,
                config.attention_dim,
                &mut rng,
            )),
            PoolingMode::Max => None,
        };
        let head = HeadParams::init(channels, config.use_ctdsv, &mut rng);
        Ok(ModelState {
            config,
            frontend,
            encoder,
            attention,
            head,
            ctdsv_stats: CtdsvStats::identity(),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.out_channels()
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            frontend: self.frontend.cast(),
            encoder: self.encoder.cast(),
            attention: self.attention.as_ref().map(|a| a.cast()),
            head: self.head.cast(),
            ctdsv_stats: self.ctdsv_stats.cast(),
        }
    }

    /// Mutable views of every learnable parameter group, in the fixed order
    /// shared with [`ModelGrads::slots`]. Clamp bounds accompany the
    /// frontend groups that have them.
    pub fn param_slots_mut(&mut self) -> Vec<ParamSlotMut<'_, T>> {
        let fcfg = self.config.frontend_config();
        let mut slots = Vec::new();
        slots.push(ParamSlotMut {
            name: "frontend.mu".into(),
            values: &mut self.frontend.gabor.mu,
            clamp: Some(fcfg.mu_bounds()),
        });
        slots.push(ParamSlotMut {
            name: "frontend.sigma".into(),
            values: &mut self.frontend.gabor.sigma,
            clamp: Some(fcfg.sigma_bounds()),
        });
        slots.push(ParamSlotMut {
            name: "frontend.rho".into(),
            values: &mut self.frontend.pool.rho,
            clamp: Some(fcfg.rho_bounds()),
        });
        slots.push(ParamSlotMut {
            name: "frontend.log_gain".into(),
            values: &mut self.frontend.comp.log_gain,
            clamp: None,
        });
        slots.push(ParamSlotMut {
            name: "frontend.gamma".into(),
            values: &mut self.frontend.comp.gamma,
            clamp: None,
        });
        slots.push(ParamSlotMut {
            name: "frontend.beta".into(),
            values: &mut self.frontend.comp.beta,
            clamp: None,
        });
        for (i, block) in self.encoder.blocks.iter_mut().enumerate() {
            slots.push(ParamSlotMut {
                name: format!("encoder.block{i}.weight"),
                values: block.weight.as_slice_mut().expect("contiguous"),
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: format!("encoder.block{i}.bias"),
                values: &mut block.bias,
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: format!("encoder.block{i}.gamma"),
                values: &mut block.gamma,
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: format!("encoder.block{i}.beta"),
                values: &mut block.beta,
                clamp: None,
            });
        }
        if let Some(attn) = self.attention.as_mut() {
            slots.push(ParamSlotMut {
                name: "attention.query".into(),
                values: &mut attn.query,
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: "attention.key_w".into(),
                values: attn.key_w.as_slice_mut().expect("contiguous"),
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: "attention.key_b".into(),
                values: &mut attn.key_b,
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: "attention.value_w".into(),
                values: attn.value_w.as_slice_mut().expect("contiguous"),
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: "attention.value_b".into(),
                values: &mut attn.value_b,
                clamp: None,
            });
        }
        if self.head.use_ctdsv {
            slots.push(ParamSlotMut {
                name: "head.meta_w1".into(),
                values: self.head.meta_w1.as_slice_mut().expect("contiguous"),
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: "head.meta_b1".into(),
                values: &mut self.head.meta_b1,
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: "head.meta_w2".into(),
                values: self.head.meta_w2.as_slice_mut().expect("contiguous"),
                clamp: None,
            });
            slots.push(ParamSlotMut {
                name: "head.meta_b2".into(),
                values: &mut self.head.meta_b2,
                clamp: None,
            });
        }
        slots.push(ParamSlotMut {
            name: "head.fc_w".into(),
            values: self.head.fc_w.as_slice_mut().expect("contiguous"),
            clamp: None,
        });
        slots.push(ParamSlotMut {
            name: "head.fc_b".into(),
            values: &mut self.head.fc_b,
            clamp: None,
        });
        slots
    }

    pub fn n_params(&mut self) -> usize {
        self.param_slots_mut().iter().map(|s| s.values.len()).sum()
    }
}

/// A named mutable parameter group with optional post-step clamp bounds.
pub struct ParamSlotMut<'a, T> {
    pub name: String,
    pub values: &'a mut [T],
    pub clamp: Option<(T, T)>,
}

/// Gradients for every learnable parameter, mirroring [`ModelState`].
pub struct ModelGrads<T> {
    pub d_mu: Vec<T>,
    pub d_sigma: Vec<T>,
    pub d_rho: Vec<T>,
    pub d_log_gain: Vec<T>,
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
    pub encoder: EncoderGrads<T>,
    pub attention: Option<AttnGrads<T>>,
    pub meta: Option<MetaGrads<T>>,
    pub d_fc_w: Array2<T>,
    pub d_fc_b: Vec<T>,
}

impl<T: Real> ModelGrads<T> {
    /// Read-only gradient views in the exact order of
    /// [`ModelState::param_slots_mut`].
    pub fn slots(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![
            ("frontend.mu".into(), &self.d_mu),
            ("frontend.sigma".into(), &self.d_sigma),
            ("frontend.rho".into(), &self.d_rho),
            ("frontend.log_gain".into(), &self.d_log_gain),
            ("frontend.gamma".into(), &self.d_gamma),
            ("frontend.beta".into(), &self.d_beta),
        ];
        for i in 0..self.encoder.d_weight.len() {
            out.push((
                format!("encoder.block{i}.weight"),
                self.encoder.d_weight[i].as_slice().expect("contiguous"),
            ));
            out.push((format!("encoder.block{i}.bias"), &self.encoder.d_bias[i]));
            out.push((format!("encoder.block{i}.gamma"), &self.encoder.d_gamma[i]));
            out.push((format!("encoder.block{i}.beta"), &self.encoder.d_beta[i]));
        }
        if let Some(attn) = &self.attention {
            out.push(("attention.query".into(), &attn.d_query));
            out.push((
                "attention.key_w".into(),
                attn.d_key_w.as_slice().expect("contiguous"),
            ));
            out.push(("attention.key_b".into(), &attn.d_key_b));
            out.push((
                "attention.value_w".into(),
                attn.d_value_w.as_slice().expect("contiguous"),
            ));
            out.push(("attention.value_b".into(), &attn.d_value_b));
        }
        if let Some(meta) = &self.meta {
            out.push((
                "head.meta_w1".into(),
                meta.d_w1.as_slice().expect("contiguous"),
            ));
            out.push(("head.meta_b1".into(), &meta.d_b1));
            out.push((
                "head.meta_w2".into(),
                meta.d_w2.as_slice().expect("contiguous"),
            ));
            out.push(("head.meta_b2".into(), &meta.d_b2));
        }
        out.push(("head.fc_w".into(), self.d_fc_w.as_slice().expect("contiguous")));
        out.push(("head.fc_b".into(), &self.d_fc_b));
        out
    }
}

/// One clip ready for the model: fixed-length samples, z-scored metadata,
/// and the target label.
#[derive(Debug, Clone)]
pub struct ClipInput<T> {
    pub samples: Vec<T>,
    pub ctdsv: [T; 5],
    pub label: ClassLabel,
}

/// Output of one batched step.
pub struct StepOutput<T> {
    pub mean_loss: T,
    pub logits: Vec<Vec<T>>,
    pub grads: Option<ModelGrads<T>>,
    pub frontend_stats: compress::TbnStats<T>,
    pub encoder_stats: Option<EncoderStatsUpdate<T>>,
}

struct ClipFrontend<T> {
    gabor_cache: gabor::GaborCache<T>,
    energy: Array2<T>,
    pooled: Array2<T>,
    compressed: Array2<T>,
}

enum PoolCache<T> {
    Attention(AttnCache<T>),
    Max(Vec<(usize, usize)>, (usize, usize, usize)),
}

/// Runs the model over a batch: frontend, batch-coupled normalization,
/// encoder, pooling, optional metadata fusion, classification, and loss.
/// With `want_grads` the full analytic backward pass runs as well. The
/// model itself is never mutated; batch statistics are returned so the
/// training loop can fold them into the running estimates.
///
/// Per-clip work fans out across worker threads; every cross-clip reduction
/// happens in clip order, so results are independent of thread count.
pub fn model_step<T: Real>(
    model: &ModelState<T>,
    batch: &[ClipInput<T>],
    mode: Mode,
    want_grads: bool,
    ffts: &FftCache<T>,
) -> Result<StepOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let cfg = &model.config;
    for (i, clip) in batch.iter().enumerate() {
        if clip.samples.len() != cfg.n_samples {
            return Err(Error::Data(format!(
                "clip {i} has {} samples, model expects {}",
                clip.samples.len(),
                cfg.n_samples
            )));
        }
    }
    if mode == Mode::Train && want_grads && batch.len() < 2 {
        // Single-clip batches are legal (last partial batch) but the
        // normalization still works over time frames only.
    }

    let kernels = gabor::GaborKernels::new(&model.frontend.gabor, cfg.n_samples, ffts)?;
    let pool_kernels = pool::PoolKernels::new(&model.frontend.pool)?;

    // Frontend stage A (per clip, parallel): conv -> energy -> pool -> log.
    let fronts: Vec<ClipFrontend<T>> = batch
        .par_iter()
        .map(|clip| -> Result<ClipFrontend<T>> {
            let (energy, gabor_cache) =
                gabor::gabor_forward_with(&clip.samples, &kernels, ffts)?;
            let pooled = pool::gaussian_pool_with(&energy, &model.frontend.pool, &pool_kernels)?;
            let compressed = compress::log_compress(&pooled, &model.frontend.comp.log_gain)?;
            Ok(ClipFrontend {
                gabor_cache,
                energy,
                pooled,
                compressed,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Temporal BatchNorm over the whole batch.
    let compressed_refs: Vec<&Array2<T>> = fronts.iter().map(|f| &f.compressed).collect();
    let frontend_stats = match mode {
        Mode::Train => compress::tbn_batch_stats(&compressed_refs),
        Mode::Eval => {
            if !model.frontend.comp.initialized {
                return Err(Error::Config(
                    "eval requested before training initialized the frontend statistics".into(),
                ));
            }
            compress::TbnStats {
                mean: model.frontend.comp.running_mean.clone(),
                var: model.frontend.comp.running_var.clone(),
                count: 0,
            }
        }
    };
    let normalized: Vec<Array2<T>> = fronts
        .par_iter()
        .map(|f| compress::tbn_apply(&f.compressed, &frontend_stats, &model.frontend.comp))
        .collect();

    // Encoder over the batch (1-channel images).
    let enc_inputs: Vec<Array3<T>> = normalized
        .par_iter()
        .map(|z| {
            let (c, t) = z.dim();
            let mut img = Array3::zeros((1, c, t));
            for k in 0..c {
                for f in 0..t {
                    img[(0, k, f)] = z[(k, f)];
                }
            }
            img
        })
        .collect();
    let enc_mode = match mode {
        Mode::Train => EncMode::Train,
        Mode::Eval => EncMode::Eval,
    };
    let (features, enc_cache) = encode_batch(&enc_inputs, &model.encoder, enc_mode)?;

    // Pooling + head per clip.
    struct ClipHead<T> {
        embedding: Vec<T>,
        pool_cache: PoolCache<T>,
        meta: Option<(Vec<T>, head::MetaCache<T>)>,
        logits: Vec<T>,
        grad_logits: Vec<T>,
        loss: T,
    }
    let heads: Vec<ClipHead<T>> = features
        .par_iter()
        .zip(batch.par_iter())
        .map(|(fmap, clip)| -> Result<ClipHead<T>> {
            let (embedding, pool_cache) = match cfg.pooling {
                PoolingMode::Attention => {
                    let attn = model
                        .attention
                        .as_ref()
                        .expect("attention params exist in attention mode");
                    let (emb, _, cache) = attention_pool(fmap, attn)?;
                    (emb, PoolCache::Attention(cache))
                }
                PoolingMode::Max => {
                    let (emb, argmax) = max_pool_global(fmap);
                    (emb, PoolCache::Max(argmax, fmap.dim()))
                }
            };
            let meta = if cfg.use_ctdsv {
                let (m, mc) = meta_branch(clip.ctdsv, &model.head)?;
                Some((m, mc))
            } else {
                None
            };
            let logits = classify(
                &embedding,
                meta.as_ref().map(|(m, _)| m.as_slice()),
                &model.head,
            )?;
            let (loss, grad_logits) = cross_entropy(&logits, clip.label)?;
            Ok(ClipHead {
                embedding,
                pool_cache,
                meta,
                logits,
                grad_logits,
                loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let b = batch.len();
    let mean_loss = heads.iter().map(|h| h.loss).sum::<T>() / r::<T>(b as f64);
    if !mean_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {mean_loss}")));
    }
    let logits: Vec<Vec<T>> = heads.iter().map(|h| h.logits.clone()).collect();

    let encoder_stats = match mode {
        Mode::Train => Some(enc_cache.stats_update()),
        Mode::Eval => None,
    };

    if !want_grads {
        return Ok(StepOutput {
            mean_loss,
            logits,
            grads: None,
            frontend_stats,
            encoder_stats,
        });
    }

    // ---- Backward ----
    let scale = T::one() / r::<T>(b as f64);

    // Head backward, accumulated in clip order.
    let mut d_fc_w = Array2::zeros(model.head.fc_w.dim());
    let mut d_fc_b = vec![T::zero(); model.head.fc_b.len()];
    let mut meta_grads = if cfg.use_ctdsv {
        Some(MetaGrads::zeros())
    } else {
        None
    };
    let mut d_embeddings: Vec<Vec<T>> = Vec::with_capacity(b);
    for h in &heads {
        let gl: Vec<T> = h.grad_logits.iter().map(|&g| g * scale).collect();
        let cg: ClassifyGrads<T> = classify_backward(
            &gl,
            &h.embedding,
            h.meta.as_ref().map(|(m, _)| m.as_slice()),
            &model.head,
        );
        d_fc_w = d_fc_w + &cg.d_fc_w;
        for (a, g) in d_fc_b.iter_mut().zip(&cg.d_fc_b) {
            *a += *g;
        }
        if let (Some(mg), Some((_, mc)), Some(dm)) =
            (meta_grads.as_mut(), h.meta.as_ref(), cg.d_meta.as_ref())
        {
            meta_branch_backward(dm, mc, &model.head, mg);
        }
        d_embeddings.push(cg.d_audio);
    }

    // Pooling backward per clip (parallel), attention grads reduced in order.
    let pool_results: Vec<(Array3<T>, Option<AttnGrads<T>>)> = heads
        .par_iter()
        .zip(d_embeddings.par_iter())
        .map(|(h, ge)| match &h.pool_cache {
            PoolCache::Attention(cache) => {
                let attn = model.attention.as_ref().expect("attention mode");
                let (gf, ag) = attention_pool_backward(ge, cache, attn);
                (gf, Some(ag))
            }
            PoolCache::Max(argmax, dims) => (max_pool_backward(ge, argmax, *dims), None),
        })
        .collect();
    let mut attn_grads = model.attention.as_ref().map(|a| AttnGrads {
        d_query: vec![T::zero(); a.query.len()],
        d_key_w: Array2::zeros(a.key_w.dim()),
        d_key_b: vec![T::zero(); a.key_b.len()],
        d_value_w: Array2::zeros(a.value_w.dim()),
        d_value_b: vec![T::zero(); a.value_b.len()],
    });
    let mut feature_grads = Vec::with_capacity(b);
    for (gf, ag) in pool_results {
        if let (Some(acc), Some(g)) = (attn_grads.as_mut(), ag) {
            for (a, v) in acc.d_query.iter_mut().zip(&g.d_query) {
                *a += *v;
            }
            acc.d_key_w = acc.d_key_w.clone() + &g.d_key_w;
            for (a, v) in acc.d_key_b.iter_mut().zip(&g.d_key_b) {
                *a += *v;
            }
            acc.d_value_w = acc.d_value_w.clone() + &g.d_value_w;
            for (a, v) in acc.d_value_b.iter_mut().zip(&g.d_value_b) {
                *a += *v;
            }
        }
        feature_grads.push(gf);
    }

    // Encoder backward (batch-norm coupling inside).
    let (enc_input_grads, encoder_grads) =
        encode_backward_batch(&feature_grads, &enc_cache, &model.encoder);

    // Back to C x T maps, then TBN backward over the batch.
    let z_grads: Vec<Array2<T>> = enc_input_grads
        .par_iter()
        .map(|g| {
            let (_, c, t) = g.dim();
            let mut m = Array2::zeros((c, t));
            for k in 0..c {
                for f in 0..t {
                    m[(k, f)] = g[(0, k, f)];
                }
            }
            m
        })
        .collect();
    let z_grad_refs: Vec<&Array2<T>> = z_grads.iter().collect();
    let tbn = compress::tbn_backward(
        &compressed_refs,
        &z_grad_refs,
        &frontend_stats,
        &model.frontend.comp,
    );

    // Frontend stage A backward per clip (parallel), reduced in clip order.
    struct FrontPartial<T> {
        d_mu: Vec<T>,
        d_sigma: Vec<T>,
        d_rho: Vec<T>,
        d_a: Vec<T>,
    }
    let partials: Vec<FrontPartial<T>> = fronts
        .par_iter()
        .zip(tbn.grad_inputs.par_iter())
        .map(|(front, gy)| -> Result<FrontPartial<T>> {
            let (grad_pooled, d_a) =
                compress::log_compress_backward(&front.pooled, &model.frontend.comp.log_gain, gy);
            let (grad_energy, d_rho) = pool::gaussian_pool_backward_with(
                &front.energy,
                &grad_pooled,
                &model.frontend.pool,
                &pool_kernels,
            )?;
            let g = gabor::gabor_backward_with(
                &grad_energy,
                &front.gabor_cache,
                &model.frontend.gabor,
                &kernels,
                ffts,
                false,
            )?;
            Ok(FrontPartial {
                d_mu: g.d_mu,
                d_sigma: g.d_sigma,
                d_rho,
                d_a,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let nf = model.frontend.n_filters();
    let mut d_mu = vec![T::zero(); nf];
    let mut d_sigma = vec![T::zero(); nf];
    let mut d_rho = vec![T::zero(); nf];
    let mut d_log_gain = vec![T::zero(); nf];
    for part in &partials {
        for k in 0..nf {
            d_mu[k] += part.d_mu[k];
            d_sigma[k] += part.d_sigma[k];
            d_rho[k] += part.d_rho[k];
            d_log_gain[k] += part.d_a[k];
        }
    }

    Ok(StepOutput {
        mean_loss,
        logits,
        grads: Some(ModelGrads {
            d_mu,
            d_sigma,
            d_rho,
            d_log_gain,
            d_gamma: tbn.d_gamma,
            d_beta: tbn.d_beta,
            encoder: encoder_grads,
            attention: attn_grads,
            meta: meta_grads,
            d_fc_w,
            d_fc_b,
        }),
        frontend_stats,
        encoder_stats,
    })
}

/// Applies the batch statistics captured by a train-mode step to the running
/// estimates (frontend TBN and the encoder block norms).
pub fn apply_stats_update<T: Real>(model: &mut ModelState<T>, out: &StepOutput<T>) {
    compress::tbn_update_running(&mut model.frontend.comp, &out.frontend_stats);
    if let Some(enc) = &out.encoder_stats {
        encoder::encoder_update_running(&mut model.encoder, enc);
    }
}

/// Small-model configuration used across tests.
pub fn test_config(pooling: PoolingMode, use_ctdsv: bool) -> ModelConfig {
    ModelConfig {
        sample_rate: 8000,
        n_samples: 1000,
        n_filters: 4,
        f_min_hz: 60.0,
        f_max_hz: 3600.0,
        kernel_width: 101,
        hop: 100,
        encoder_channels: vec![4, 8],
        attention_dim: 8,
        pooling,
        use_ctdsv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::r;

    fn batch(n: usize, n_samples: usize) -> Vec<ClipInput<f64>> {
        (0..n)
            .map(|i| ClipInput {
                samples: (0..n_samples)
                    .map(|t| {
                        0.4 * ((0.05 + 0.11 * i as f64) * t as f64).sin()
                            + 0.2 * ((0.91 + 0.13 * i as f64) * t as f64).sin()
                    })
                    .collect(),
                ctdsv: [
                    0.3 + i as f64,
                    -0.2,
                    0.5 * i as f64,
                    1.0,
                    -0.7 + 0.1 * i as f64,
                ],
                label: ClassLabel::from_index(i % 5).unwrap(),
            })
            .collect()
    }

    #[test]
    fn grad_slots_align_with_param_slots() {
        for (pooling, ctdsv) in [
            (PoolingMode::Attention, true),
            (PoolingMode::Attention, false),
            (PoolingMode::Max, true),
            (PoolingMode::Max, false),
        ] {
            let mut model = ModelState::<f64>::init(test_config(pooling, ctdsv), 3).unwrap();
            let ffts = FftCache::new();
            let clips = batch(2, model.config.n_samples);
            let out = model_step(&model, &clips, Mode::Train, true, &ffts).unwrap();
            let grads = out.grads.unwrap();
            let gslots = grads.slots();
            let pslots = model.param_slots_mut();
            assert_eq!(gslots.len(), pslots.len());
            for (g, p) in gslots.iter().zip(pslots.iter()) {
                assert_eq!(g.0, p.name, "slot order mismatch");
                assert_eq!(g.1.len(), p.values.len(), "slot {} length", g.0);
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let model = ModelState::<f64>::init(test_config(PoolingMode::Attention, true), 9).unwrap();
        let clips = batch(3, model.config.n_samples);
        let run = |threads: usize| -> (f64, Vec<f64>) {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let ffts = FftCache::new();
                let out = model_step(&model, &clips, Mode::Train, true, &ffts).unwrap();
                let g = out.grads.unwrap();
                let flat: Vec<f64> = g.slots().iter().flat_map(|(_, s)| s.to_vec()).collect();
                (out.mean_loss, flat)
            })
        };
        let (l1, g1) = run(1);
        let (l2, g2) = run(4);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn eval_before_training_errors() {
        let model = ModelState::<f64>::init(test_config(PoolingMode::Max, false), 5).unwrap();
        let ffts = FftCache::new();
        let clips = batch(2, model.config.n_samples);
        assert!(model_step(&model, &clips, Mode::Eval, false, &ffts).is_err());
    }

    #[test]
    fn ctdsv_disabled_output_is_independent_of_metadata() {
        let model = ModelState::<f64>::init(test_config(PoolingMode::Max, false), 5).unwrap();
        let ffts = FftCache::new();
        let mut clips = batch(2, model.config.n_samples);
        let out1 = model_step(&model, &clips, Mode::Train, false, &ffts).unwrap();
        for c in clips.iter_mut() {
            c.ctdsv = [9.9, -9.9, 3.3, 0.0, 123.0];
        }
        let out2 = model_step(&model, &clips, Mode::Train, false, &ffts).unwrap();
        assert_eq!(out1.mean_loss.to_bits(), out2.mean_loss.to_bits());
        for (a, b) in out1.logits.iter().flatten().zip(out2.logits.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn full_model_gradcheck_spot() {
        // Fuller sweeps live in the acceptance suite; this covers a few
        // parameters from each group end to end.
        let config = test_config(PoolingMode::Attention, true);
        let mut model = ModelState::<f64>::init(config, 17).unwrap();
        // Keep pooling widths away from truncation boundaries.
        model.frontend.pool.rho = vec![3.3, 5.2, 7.1, 9.4];
        let clips = batch(3, model.config.n_samples);
        let ffts = FftCache::new();

        let out = model_step(&model, &clips, Mode::Train, true, &ffts).unwrap();
        let grads = out.grads.unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .slots()
            .iter()
            .map(|(n, s)| (n.clone(), s.to_vec()))
            .collect();

        let step = 1e-5;
        let mut checked = 0usize;
        let n_groups = analytic.len();
        for gi in 0..n_groups {
            let (name, gvec) = &analytic[gi];
            // First and last element of each group.
            for &ei in &[0usize, gvec.len().saturating_sub(1)] {
                let mut lp = 0.0;
                let mut lm = 0.0;
                for (sign, target) in [(1.0, &mut lp), (-1.0, &mut lm)] {
                    let mut m = model.clone();
                    {
                        let mut slots = m.param_slots_mut();
                        slots[gi].values[ei] += r::<f64>(sign * step);
                    }
                    let o = model_step(&m, &clips, Mode::Train, false, &ffts).unwrap();
                    *target = o.mean_loss;
                }
                let fd = (lp - lm) / (2.0 * step);
                crate::testutil::assert_grad_close(&format!("{name}[{ei}]"), gvec[ei], fd);
                checked += 1;
            }
        }
        assert!(checked >= 2 * n_groups);
    }
}
