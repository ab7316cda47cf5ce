//! Learnable log compression `y = log(1 + 10^a * x)` followed by Temporal
//! BatchNorm: per-channel normalization over the batch and time axes with
//! per-channel affine weights.
//!
//! `eps` acts as a variance floor: the divisor is `sqrt(max(var, eps))`, so
//! channels with healthy variance normalize to exactly unit variance and
//! degenerate (constant) channels stay bounded.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::types::{Stage, TimeFreqMap};

/// Train vs eval behavior for normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-band compression and normalization parameters. `log_gain` is the
/// trainable exponent `a_k`; `gamma`/`beta` are the affine weights;
/// running statistics serve eval mode.
#[derive(Debug, Clone)]
pub struct CompressionParams<T> {
    pub log_gain: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    /// False until the first train-mode statistics update.
    pub initialized: bool,
}

impl<T: Real> CompressionParams<T> {
    pub fn new(n_filters: usize, eps: f64, momentum: f64) -> Self {
        CompressionParams {
            log_gain: vec![T::zero(); n_filters],
            gamma: vec![T::one(); n_filters],
            beta: vec![T::zero(); n_filters],
            running_mean: vec![T::zero(); n_filters],
            running_var: vec![T::zero(); n_filters],
            eps: r(eps),
            momentum: r(momentum),
            initialized: false,
        }
    }

    pub fn n_filters(&self) -> usize {
        self.log_gain.len()
    }
}

/// Log-compression stage: `y = ln(1 + 10^{a_k} x)`. Negative inputs are an
/// input error (the pooled energy is nonnegative by construction).
pub fn log_compress<T: Real>(x: &Array2<T>, log_gain: &[T]) -> Result<Array2<T>> {
    let (nf, frames) = x.dim();
    if log_gain.len() != nf {
        return Err(Error::Data(format!(
            "log_gain length {} does not match {nf} channels",
            log_gain.len()
        )));
    }
    let ten = r::<T>(10.0);
    let mut out = Array2::zeros((nf, frames));
    for k in 0..nf {
        let gain = ten.powf(log_gain[k]);
        for t in 0..frames {
            let v = x[(k, t)];
            if v < T::zero() {
                return Err(Error::Data(format!(
                    "negative input {v} at ({k},{t}) in compression stage"
                )));
            }
            out[(k, t)] = (T::one() + gain * v).ln();
        }
    }
    Ok(out)
}

/// Backward of the log stage: returns `dL/dx` and `dL/da`.
pub fn log_compress_backward<T: Real>(
    x: &Array2<T>,
    log_gain: &[T],
    grad_y: &Array2<T>,
) -> (Array2<T>, Vec<T>) {
    let (nf, frames) = x.dim();
    debug_assert_eq!(grad_y.dim(), (nf, frames));
    let ten = r::<T>(10.0);
    let ln10 = r::<T>(std::f64::consts::LN_10);
    let mut grad_x = Array2::zeros((nf, frames));
    let mut d_a = vec![T::zero(); nf];
    for k in 0..nf {
        let gain = ten.powf(log_gain[k]);
        let mut ga = T::zero();
        for t in 0..frames {
            let v = x[(k, t)];
            let g = grad_y[(k, t)];
            let denom = T::one() + gain * v;
            grad_x[(k, t)] = g * gain / denom;
            ga += g * v * gain * ln10 / denom;
        }
        d_a[k] = ga;
    }
    (grad_x, d_a)
}

/// Per-channel mean/variance over the batch-and-time axes of a set of maps.
#[derive(Debug, Clone)]
pub struct TbnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Batch statistics over `maps` (all `C x T`), reduced in deterministic
/// order: channel by channel, map by map, frame by frame.
pub fn tbn_batch_stats<T: Real>(maps: &[&Array2<T>]) -> TbnStats<T> {
    assert!(!maps.is_empty(), "batch statistics need at least one map");
    let (nf, frames) = maps[0].dim();
    let count = maps.len() * frames;
    let denom = r::<T>(count as f64);
    let mut mean = vec![T::zero(); nf];
    let mut var = vec![T::zero(); nf];
    for k in 0..nf {
        let mut acc = T::zero();
        for m in maps {
            for t in 0..frames {
                acc += m[(k, t)];
            }
        }
        let mu = acc / denom;
        let mut vacc = T::zero();
        for m in maps {
            for t in 0..frames {
                let d = m[(k, t)] - mu;
                vacc += d * d;
            }
        }
        mean[k] = mu;
        var[k] = vacc / denom;
    }
    TbnStats { mean, var, count }
}

/// Applies normalization with the given statistics:
/// `z = gamma * (y - mean)/sqrt(max(var, eps)) + beta`.
pub fn tbn_apply<T: Real>(
    y: &Array2<T>,
    stats: &TbnStats<T>,
    c: &CompressionParams<T>,
) -> Array2<T> {
    let (nf, frames) = y.dim();
    let mut out = Array2::zeros((nf, frames));
    for k in 0..nf {
        let inv = T::one() / stats.var[k].max(c.eps).sqrt();
        for t in 0..frames {
            out[(k, t)] = c.gamma[k] * (y[(k, t)] - stats.mean[k]) * inv + c.beta[k];
        }
    }
    out
}

/// Eval-mode normalization with running statistics. Errors if no training
/// step has initialized them yet.
pub fn tbn_apply_eval<T: Real>(y: &Array2<T>, c: &CompressionParams<T>) -> Result<Array2<T>> {
    if !c.initialized {
        return Err(Error::Config(
            "eval-mode normalization requested before any training step initialized the running statistics".into(),
        ));
    }
    let stats = TbnStats {
        mean: c.running_mean.clone(),
        var: c.running_var.clone(),
        count: 0,
    };
    Ok(tbn_apply(y, &stats, c))
}

/// Folds the batch statistics into the running estimates.
pub fn tbn_update_running<T: Real>(c: &mut CompressionParams<T>, stats: &TbnStats<T>) {
    let m = c.momentum;
    if !c.initialized {
        c.running_mean.copy_from_slice(&stats.mean);
        c.running_var.copy_from_slice(&stats.var);
        c.initialized = true;
        return;
    }
    for k in 0..c.n_filters() {
        c.running_mean[k] = (T::one() - m) * c.running_mean[k] + m * stats.mean[k];
        c.running_var[k] = (T::one() - m) * c.running_var[k] + m * stats.var[k];
    }
}

/// Gradients produced by the train-mode normalization backward pass.
pub struct TbnGrads<T> {
    pub grad_inputs: Vec<Array2<T>>,
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
}

/// Train-mode backward through the batch-coupled normalization. `ys` are the
/// pre-normalization inputs of the whole batch, `grads` the per-map output
/// gradients, `stats` the batch statistics from the forward pass. When a
/// channel's variance sits on the floor, the variance chain contributes no
/// gradient (the divisor is constant there).
pub fn tbn_backward<T: Real>(
    ys: &[&Array2<T>],
    grads: &[&Array2<T>],
    stats: &TbnStats<T>,
    c: &CompressionParams<T>,
) -> TbnGrads<T> {
    let b = ys.len();
    assert_eq!(b, grads.len());
    let (nf, frames) = ys[0].dim();
    let m_count = r::<T>((b * frames) as f64);

    let mut d_gamma = vec![T::zero(); nf];
    let mut d_beta = vec![T::zero(); nf];
    let mut grad_inputs: Vec<Array2<T>> = (0..b).map(|_| Array2::zeros((nf, frames))).collect();

    for k in 0..nf {
        let var_active = stats.var[k] > c.eps;
        let inv = T::one() / stats.var[k].max(c.eps).sqrt();
        let gamma = c.gamma[k];
        let mut sum_g = T::zero();
        let mut sum_g_centered = T::zero();
        let mut sum_centered = T::zero();
        for (y, g) in ys.iter().zip(grads.iter()) {
            for t in 0..frames {
                let centered = y[(k, t)] - stats.mean[k];
                let gz = g[(k, t)];
                sum_g += gz;
                sum_g_centered += gz * centered;
                sum_centered += centered;
            }
        }
        d_gamma[k] = sum_g_centered * inv;
        d_beta[k] = sum_g;

        let gvar = if var_active {
            sum_g_centered * gamma * (-r::<T>(0.5)) * inv * inv * inv
        } else {
            T::zero()
        };
        let gmean = -sum_g * gamma * inv + gvar * (-r::<T>(2.0) / m_count) * sum_centered;

        for (gi, (y, g)) in grad_inputs.iter_mut().zip(ys.iter().zip(grads.iter())) {
            for t in 0..frames {
                let centered = y[(k, t)] - stats.mean[k];
                gi[(k, t)] = g[(k, t)] * gamma * inv
                    + gvar * r::<T>(2.0) * centered / m_count
                    + gmean / m_count;
            }
        }
    }
    TbnGrads {
        grad_inputs,
        d_gamma,
        d_beta,
    }
}

/// Spec-level single-map operation: log compression then normalization.
/// Train mode uses this map's own time frames as the batch and updates the
/// running statistics; eval mode applies the stored running statistics.
pub fn compress_normalize<T: Real>(
    x: &TimeFreqMap<T>,
    c: &mut CompressionParams<T>,
    mode: Mode,
) -> Result<TimeFreqMap<T>> {
    if x.stage != Stage::Pooled {
        return Err(Error::Data(format!(
            "compress_normalize expects a pooled-stage map, got {:?}",
            x.stage
        )));
    }
    let y = log_compress(&x.values, &c.log_gain)?;
    let z = match mode {
        Mode::Train => {
            let stats = tbn_batch_stats(&[&y]);
            let z = tbn_apply(&y, &stats, c);
            tbn_update_running(c, &stats);
            z
        }
        Mode::Eval => tbn_apply_eval(&y, c)?,
    };
    Ok(TimeFreqMap::new(z, Stage::Normalized))
}
