//! Classification head: environmental-metadata branch, embedding fusion,
//! linear classifier, and cross-entropy loss.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::types::{ClassLabel, N_CLASSES};

/// Width of the metadata embedding produced by the feed-forward branch.
pub const META_DIM: usize = 16;

/// Head parameters: a 5 -> 16 -> 16 metadata MLP (ReLU after the first
/// layer) and the final linear classifier over the fused embedding.
#[derive(Debug, Clone)]
pub struct HeadParams<T> {
    pub meta_w1: Array2<T>,
    pub meta_b1: Vec<T>,
    pub meta_w2: Array2<T>,
    pub meta_b2: Vec<T>,
    /// `5 x fused_dim` classifier; `fused_dim = embedding_dim (+ 16)`.
    pub fc_w: Array2<T>,
    pub fc_b: Vec<T>,
    pub use_ctdsv: bool,
}

impl<T: Real> HeadParams<T> {
    pub fn init(embedding_dim: usize, use_ctdsv: bool, rng: &mut ChaCha8Rng) -> Self {
        let fused = embedding_dim + if use_ctdsv { META_DIM } else { 0 };
        let s1 = (2.0 / 5.0f64).sqrt();
        let s2 = (2.0 / META_DIM as f64).sqrt();
        let sf = 1.0 / (fused as f64).sqrt();
        HeadParams {
            meta_w1: Array2::from_shape_fn((META_DIM, 5), |_| {
                r::<T>(crate::encoder::sample_normal(rng) * s1)
            }),
            meta_b1: vec![T::zero(); META_DIM],
            meta_w2: Array2::from_shape_fn((META_DIM, META_DIM), |_| {
                r::<T>(crate::encoder::sample_normal(rng) * s2)
            }),
            meta_b2: vec![T::zero(); META_DIM],
            fc_w: Array2::from_shape_fn((N_CLASSES, fused), |_| {
                r::<T>(crate::encoder::sample_normal(rng) * sf)
            }),
            fc_b: vec![T::zero(); N_CLASSES],
            use_ctdsv,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.fc_w.ncols()
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            meta_w1: self.meta_w1.mapv(|v| r::<U>(v.as_f64())),
            meta_b1: self.meta_b1.iter().map(|v| r::<U>(v.as_f64())).collect(),
            meta_w2: self.meta_w2.mapv(|v| r::<U>(v.as_f64())),
            meta_b2: self.meta_b2.iter().map(|v| r::<U>(v.as_f64())).collect(),
            fc_w: self.fc_w.mapv(|v| r::<U>(v.as_f64())),
            fc_b: self.fc_b.iter().map(|v| r::<U>(v.as_f64())).collect(),
            use_ctdsv: self.use_ctdsv,
        }
    }
}

/// Forward intermediates of the metadata branch.
pub struct MetaCache<T> {
    pub input: [T; 5],
    pub hidden: Vec<T>,
}

/// Metadata branch forward: `W2 relu(W1 v + b1) + b2`. Errors if the head
/// was configured without metadata fusion.
pub fn meta_branch<T: Real>(v: [T; 5], p: &HeadParams<T>) -> Result<(Vec<T>, MetaCache<T>)> {
    if !p.use_ctdsv {
        return Err(Error::Config(
            "metadata branch invoked on a head configured with use_ctdsv = false".into(),
        ));
    }
    let mut hidden = vec![T::zero(); META_DIM];
    for i in 0..META_DIM {
        let mut acc = p.meta_b1[i];
        for j in 0..5 {
            acc += p.meta_w1[(i, j)] * v[j];
        }
        hidden[i] = acc.max(T::zero());
    }
    let mut out = vec![T::zero(); META_DIM];
    for i in 0..META_DIM {
        let mut acc = p.meta_b2[i];
        for j in 0..META_DIM {
            acc += p.meta_w2[(i, j)] * hidden[j];
        }
        out[i] = acc;
    }
    Ok((out, MetaCache { input: v, hidden }))
}

/// Gradients for the metadata branch parameters.
pub struct MetaGrads<T> {
    pub d_w1: Array2<T>,
    pub d_b1: Vec<T>,
    pub d_w2: Array2<T>,
    pub d_b2: Vec<T>,
}

impl<T: Real> MetaGrads<T> {
    pub fn zeros() -> Self {
        MetaGrads {
            d_w1: Array2::zeros((META_DIM, 5)),
            d_b1: vec![T::zero(); META_DIM],
            d_w2: Array2::zeros((META_DIM, META_DIM)),
            d_b2: vec![T::zero(); META_DIM],
        }
    }
}

/// Backward through the metadata branch; accumulates into `grads`.
pub fn meta_branch_backward<T: Real>(
    grad_out: &[T],
    cache: &MetaCache<T>,
    p: &HeadParams<T>,
    grads: &mut MetaGrads<T>,
) {
    let mut g_hidden = vec![T::zero(); META_DIM];
    for i in 0..META_DIM {
        let g = grad_out[i];
        grads.d_b2[i] += g;
        for j in 0..META_DIM {
            grads.d_w2[(i, j)] += g * cache.hidden[j];
            g_hidden[j] += g * p.meta_w2[(i, j)];
        }
    }
    for j in 0..META_DIM {
        if cache.hidden[j] <= T::zero() {
            continue;
        }
        let g = g_hidden[j];
        grads.d_b1[j] += g;
        for k in 0..5 {
            grads.d_w1[(j, k)] += g * cache.input[k];
        }
    }
}

/// Classifier forward: logits from the (optionally fused) embedding.
/// Softmax is applied only inside the loss / at prediction time.
pub fn classify<T: Real>(
    audio_emb: &[T],
    meta_emb: Option<&[T]>,
    p: &HeadParams<T>,
) -> Result<Vec<T>> {
    let fused_len = audio_emb.len() + meta_emb.map_or(0, |m| m.len());
    if fused_len != p.fused_dim() {
        return Err(Error::Config(format!(
            "classifier expects a fused dim of {}, got {} (audio {}, meta {})",
            p.fused_dim(),
            fused_len,
            audio_emb.len(),
            meta_emb.map_or(0, |m| m.len())
        )));
    }
    if p.use_ctdsv != meta_emb.is_some() {
        return Err(Error::Config(format!(
            "metadata embedding {} but use_ctdsv = {}",
            if meta_emb.is_some() { "provided" } else { "missing" },
            p.use_ctdsv
        )));
    }
    let mut logits = vec![T::zero(); N_CLASSES];
    for i in 0..N_CLASSES {
        let mut acc = p.fc_b[i];
        for (j, &v) in audio_emb.iter().enumerate() {
            acc += p.fc_w[(i, j)] * v;
        }
        if let Some(meta) = meta_emb {
            let off = audio_emb.len();
            for (j, &v) in meta.iter().enumerate() {
                acc += p.fc_w[(i, off + j)] * v;
            }
        }
        logits[i] = acc;
    }
    Ok(logits)
}

/// Gradients for the classifier parameters plus the upstream embeddings.
pub struct ClassifyGrads<T> {
    pub d_fc_w: Array2<T>,
    pub d_fc_b: Vec<T>,
    pub d_audio: Vec<T>,
    pub d_meta: Option<Vec<T>>,
}

pub fn classify_backward<T: Real>(
    grad_logits: &[T],
    audio_emb: &[T],
    meta_emb: Option<&[T]>,
    p: &HeadParams<T>,
) -> ClassifyGrads<T> {
    let mut d_fc_w = Array2::zeros(p.fc_w.dim());
    let mut d_fc_b = vec![T::zero(); N_CLASSES];
    let mut d_audio = vec![T::zero(); audio_emb.len()];
    let mut d_meta = meta_emb.map(|m| vec![T::zero(); m.len()]);
    let off = audio_emb.len();
    for i in 0..N_CLASSES {
        let g = grad_logits[i];
        d_fc_b[i] += g;
        for (j, &v) in audio_emb.iter().enumerate() {
            d_fc_w[(i, j)] += g * v;
            d_audio[j] += g * p.fc_w[(i, j)];
        }
        if let (Some(meta), Some(dm)) = (meta_emb, d_meta.as_mut()) {
            for (j, &v) in meta.iter().enumerate() {
                d_fc_w[(i, off + j)] += g * v;
                dm[j] += g * p.fc_w[(i, off + j)];
            }
        }
    }
    ClassifyGrads {
        d_fc_w,
        d_fc_b,
        d_audio,
        d_meta,
    }
}

/// Cross-entropy loss with the max-shifted log-sum-exp trick. Returns the
/// loss and `dL/d logits = softmax(logits) - onehot(label)`.
pub fn cross_entropy<T: Real>(logits: &[T], label: ClassLabel) -> Result<(T, Vec<T>)> {
    if logits.len() != N_CLASSES {
        return Err(Error::Config(format!(
            "expected {N_CLASSES} logits, got {}",
            logits.len()
        )));
    }
    for (i, &l) in logits.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit at class {i}")));
        }
    }
    let max = logits.iter().copied().fold(logits[0], T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let log_total = total.ln();
    let loss = log_total - (logits[label.index()] - max);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / total).collect();
    grad[label.index()] -= T::one();
    Ok((loss, grad))
}

/// Deterministic prediction: argmax of the logits, ties resolved toward the
/// lower class index.
pub fn predict<T: Real>(logits: &[T]) -> ClassLabel {
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    ClassLabel::from_index(best).expect("logit vector has N_CLASSES entries")
}
