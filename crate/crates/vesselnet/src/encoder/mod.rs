//! Compact convolutional encoder: stride-2 3x3 conv blocks with per-channel
//! batch normalization (same floor-eps mechanism as the frontend TBN) and
//! ReLU, plus the two pooling heads that reduce the feature map to an
//! embedding.

pub mod attention;

pub use attention::{attention_pool, attention_pool_backward, AttentionPoolParams};

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{r, Real};

/// Encoder shape configuration: output channel widths per stride-2 block.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl EncoderConfig {
    pub fn new(channels: Vec<usize>) -> Self {
        EncoderConfig {
            channels,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// One conv block: 3x3 stride-2 convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    /// `[out_channels, in_channels, 3, 3]`.
    pub weight: Array4<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub bn_eps: T,
    pub bn_momentum: T,
    pub initialized: bool,
}

impl<T: Real> EncoderParams<T> {
    /// He-normal initialization of the conv weights; biases zero, affine
    /// weights identity, running statistics zeroed.
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut in_c = 1usize;
        for &out_c in &cfg.channels {
            let fan_in = (in_c * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let weight = Array4::from_shape_fn((out_c, in_c, 3, 3), |_| {
                r::<T>(sample_normal(rng) * std)
            });
            blocks.push(ConvBlock {
                weight,
                bias: vec![T::zero(); out_c],
                gamma: vec![T::one(); out_c],
                beta: vec![T::zero(); out_c],
                running_mean: vec![T::zero(); out_c],
                running_var: vec![T::zero(); out_c],
            });
            in_c = out_c;
        }
        EncoderParams {
            blocks,
            bn_eps: r(cfg.bn_eps),
            bn_momentum: r(cfg.bn_momentum),
            initialized: false,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.gamma.len())
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    weight: b.weight.mapv(|v| r::<U>(v.as_f64())),
                    bias: b.bias.iter().map(|v| r::<U>(v.as_f64())).collect(),
                    gamma: b.gamma.iter().map(|v| r::<U>(v.as_f64())).collect(),
                    beta: b.beta.iter().map(|v| r::<U>(v.as_f64())).collect(),
                    running_mean: b.running_mean.iter().map(|v| r::<U>(v.as_f64())).collect(),
                    running_var: b.running_var.iter().map(|v| r::<U>(v.as_f64())).collect(),
                })
                .collect(),
            bn_eps: r(self.bn_eps.as_f64()),
            bn_momentum: r(self.bn_momentum.as_f64()),
            initialized: self.initialized,
        }
    }
}

/// Standard-normal draw made in f64 so parameter initialization does not
/// depend on the runtime precision.
pub(crate) fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Output spatial dim of a stride-2 same-padded conv: `ceil(n/2)`.
pub fn conv_out_dim(n: usize) -> usize {
    n.div_ceil(2)
}

fn pad_before(n: usize) -> usize {
    // Total padding is 1 for even input (0 before, 1 after) and 2 for odd
    // (1 each side), giving ceil(n/2) outputs.
    if n % 2 == 0 {
        0
    } else {
        1
    }
}

/// Output-column range `[lo, hi)` and first input column for a kernel
/// offset: solves `0 <= 2*ox + k - pad < in_w`.
#[inline]
fn col_range(k: usize, pad: usize, in_w: usize, out_w: usize) -> (usize, usize, usize) {
    let lo = if k < pad { (pad - k).div_ceil(2) } else { 0 };
    let hi = (((in_w + pad).saturating_sub(k + 1)) / 2 + 1).min(out_w);
    let first_ix = if hi > lo { 2 * lo + k - pad } else { 0 };
    (lo, hi, first_ix)
}

fn conv_forward<T: Real>(input: &Array3<T>, weight: &Array4<T>, bias: &[T]) -> Array3<T> {
    let (in_c, in_h, in_w) = input.dim();
    let (out_c, w_in_c, _, _) = weight.dim();
    debug_assert_eq!(in_c, w_in_c);
    let out_h = conv_out_dim(in_h);
    let out_w = conv_out_dim(in_w);
    let (pt, pl) = (pad_before(in_h), pad_before(in_w));
    let in_s = input.as_slice().expect("contiguous");
    let w_s = weight.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); out_c * out_h * out_w];
    for oc in 0..out_c {
        let out_base = oc * out_h * out_w;
        for row in out[out_base..out_base + out_h * out_w].iter_mut() {
            *row = bias[oc];
        }
        for ic in 0..in_c {
            let w_base = (oc * in_c + ic) * 9;
            let in_base = ic * in_h * in_w;
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w_s[w_base + ky * 3 + kx];
                    let (lo, hi, first_ix) = col_range(kx, pl, in_w, out_w);
                    if hi <= lo {
                        continue;
                    }
                    for oy in 0..out_h {
                        let iy = (oy * 2 + ky) as isize - pt as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let in_row = &in_s[in_base + iy as usize * in_w..][..in_w];
                        let out_row =
                            &mut out[out_base + oy * out_w..][..out_w];
                        for (o, &iv) in out_row[lo..hi]
                            .iter_mut()
                            .zip(in_row[first_ix..].iter().step_by(2))
                        {
                            *o += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((out_c, out_h, out_w), out).expect("shape")
}

struct ConvGrads<T> {
    d_weight: Array4<T>,
    d_bias: Vec<T>,
    d_input: Array3<T>,
}

fn conv_backward<T: Real>(
    input: &Array3<T>,
    weight: &Array4<T>,
    grad_out: &Array3<T>,
) -> ConvGrads<T> {
    let (in_c, in_h, in_w) = input.dim();
    let (out_c, _, _, _) = weight.dim();
    let (_, out_h, out_w) = grad_out.dim();
    let (pt, pl) = (pad_before(in_h), pad_before(in_w));
    let in_s = input.as_slice().expect("contiguous");
    let w_s = weight.as_slice().expect("contiguous");
    let g_s = grad_out.as_slice().expect("contiguous");
    let mut d_weight = vec![T::zero(); out_c * in_c * 9];
    let mut d_bias = vec![T::zero(); out_c];
    let mut d_input = vec![T::zero(); in_c * in_h * in_w];
    for oc in 0..out_c {
        let g_base = oc * out_h * out_w;
        d_bias[oc] = g_s[g_base..g_base + out_h * out_w]
            .iter()
            .copied()
            .sum();
        for ic in 0..in_c {
            let w_base = (oc * in_c + ic) * 9;
            let in_base = ic * in_h * in_w;
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w_s[w_base + ky * 3 + kx];
                    let (lo, hi, first_ix) = col_range(kx, pl, in_w, out_w);
                    if hi <= lo {
                        continue;
                    }
                    let mut wacc = T::zero();
                    for oy in 0..out_h {
                        let iy = (oy * 2 + ky) as isize - pt as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let g_row = &g_s[g_base + oy * out_w..][..out_w];
                        let in_row = &in_s[in_base + iy as usize * in_w..][..in_w];
                        let din_row = &mut d_input[in_base + iy as usize * in_w..][..in_w];
                        let mut ix = first_ix;
                        for &g in &g_row[lo..hi] {
                            wacc += g * in_row[ix];
                            din_row[ix] += g * wv;
                            ix += 2;
                        }
                    }
                    d_weight[w_base + ky * 3 + kx] += wacc;
                }
            }
        }
    }
    ConvGrads {
        d_weight: Array4::from_shape_vec((out_c, in_c, 3, 3), d_weight).expect("shape"),
        d_bias,
        d_input: Array3::from_shape_vec((in_c, in_h, in_w), d_input).expect("shape"),
    }
}

/// Per-channel batch statistics over clips and spatial positions.
#[derive(Debug, Clone)]
pub struct Bn2dStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[inline]
fn plane<T: Real>(m: &Array3<T>, ch: usize, hw: usize) -> &[T] {
    &m.as_slice().expect("contiguous")[ch * hw..(ch + 1) * hw]
}

fn bn2d_stats<T: Real>(maps: &[Array3<T>]) -> Bn2dStats<T> {
    let (c, h, w) = maps[0].dim();
    let hw = h * w;
    let denom = r::<T>((maps.len() * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for m in maps {
            for &v in plane(m, ch, hw) {
                acc += v;
            }
        }
        let mu = acc / denom;
        let mut vacc = T::zero();
        for m in maps {
            for &v in plane(m, ch, hw) {
                let d = v - mu;
                vacc += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = vacc / denom;
    }
    Bn2dStats { mean, var }
}

fn bn2d_apply<T: Real>(
    x: &Array3<T>,
    stats: &Bn2dStats<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Array3<T> {
    let (c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let inv = T::one() / stats.var[ch].max(eps).sqrt();
        let scale = gamma[ch] * inv;
        let shift = beta[ch] - gamma[ch] * stats.mean[ch] * inv;
        for (o, &v) in out[ch * hw..(ch + 1) * hw]
            .iter_mut()
            .zip(&xs[ch * hw..(ch + 1) * hw])
        {
            *o = scale * v + shift;
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("shape")
}

/// Forward cache of one encoder pass over a batch.
pub struct EncoderCache<T> {
    block_inputs: Vec<Vec<Array3<T>>>,
    conv_outputs: Vec<Vec<Array3<T>>>,
    stats: Vec<Bn2dStats<T>>,
    activations: Vec<Vec<Array3<T>>>,
}

/// Per-block statistics captured during a train-mode pass, for the running
/// updates applied by the training loop.
pub struct EncoderStatsUpdate<T> {
    pub stats: Vec<Bn2dStats<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncMode {
    Train,
    Eval,
}

/// Runs the encoder over a batch of `1 x C x T` inputs. Conv and activation
/// stages fan out across clips; normalization statistics reduce in clip
/// order so results do not depend on thread count.
pub fn encode_batch<T: Real>(
    inputs: &[Array3<T>],
    p: &EncoderParams<T>,
    mode: EncMode,
) -> Result<(Vec<Array3<T>>, EncoderCache<T>)> {
    if inputs.is_empty() {
        return Err(Error::Data("encoder batch is empty".into()));
    }
    let dims = inputs[0].dim();
    if dims.0 != 1 {
        return Err(Error::Data(format!(
            "encoder expects single-channel input maps, got {} channels",
            dims.0
        )));
    }
    for (i, m) in inputs.iter().enumerate() {
        if m.dim() != dims {
            return Err(Error::Data(format!(
                "encoder batch shape mismatch at clip {i}: {:?} vs {:?}",
                m.dim(),
                dims
            )));
        }
    }
    if mode == EncMode::Eval && !p.initialized {
        return Err(Error::Config(
            "encoder eval requested before any training step initialized the running statistics"
                .into(),
        ));
    }

    let mut current: Vec<Array3<T>> = inputs.to_vec();
    let mut block_inputs = Vec::with_capacity(p.blocks.len());
    let mut conv_outputs = Vec::with_capacity(p.blocks.len());
    let mut stats_all = Vec::with_capacity(p.blocks.len());
    let mut activations = Vec::with_capacity(p.blocks.len());

    for block in &p.blocks {
        let conv: Vec<Array3<T>> = current
            .par_iter()
            .map(|x| conv_forward(x, &block.weight, &block.bias))
            .collect();
        let stats = match mode {
            EncMode::Train => bn2d_stats(&conv),
            EncMode::Eval => Bn2dStats {
                mean: block.running_mean.clone(),
                var: block.running_var.clone(),
            },
        };
        let act: Vec<Array3<T>> = conv
            .par_iter()
            .map(|x| {
                let mut z = bn2d_apply(x, &stats, &block.gamma, &block.beta, p.bn_eps);
                z.mapv_inplace(|v| v.max(T::zero()));
                z
            })
            .collect();
        block_inputs.push(current);
        conv_outputs.push(conv);
        stats_all.push(stats);
        activations.push(act.clone());
        current = act;
    }

    Ok((
        current,
        EncoderCache {
            block_inputs,
            conv_outputs,
            stats: stats_all,
            activations,
        },
    ))
}

impl<T: Real> EncoderCache<T> {
    pub fn stats_update(&self) -> EncoderStatsUpdate<T> {
        EncoderStatsUpdate {
            stats: self.stats.clone(),
        }
    }
}

/// Folds captured batch statistics into the running estimates.
pub fn encoder_update_running<T: Real>(p: &mut EncoderParams<T>, update: &EncoderStatsUpdate<T>) {
    let m = p.bn_momentum;
    for (block, stats) in p.blocks.iter_mut().zip(&update.stats) {
        if !p.initialized {
            block.running_mean.copy_from_slice(&stats.mean);
            block.running_var.copy_from_slice(&stats.var);
        } else {
            for c in 0..block.gamma.len() {
                block.running_mean[c] = (T::one() - m) * block.running_mean[c] + m * stats.mean[c];
                block.running_var[c] = (T::one() - m) * block.running_var[c] + m * stats.var[c];
            }
        }
    }
    p.initialized = true;
}

/// Gradients for every encoder parameter.
pub struct EncoderGrads<T> {
    pub d_weight: Vec<Array4<T>>,
    pub d_bias: Vec<Vec<T>>,
    pub d_gamma: Vec<Vec<T>>,
    pub d_beta: Vec<Vec<T>>,
}

/// Backward through the whole encoder for a batch (train-mode batch-norm
/// coupling included). Returns per-clip input gradients and parameter
/// gradients accumulated in clip order.
pub fn encode_backward_batch<T: Real>(
    grads_out: &[Array3<T>],
    cache: &EncoderCache<T>,
    p: &EncoderParams<T>,
) -> (Vec<Array3<T>>, EncoderGrads<T>) {
    let n_blocks = p.blocks.len();
    let batch = grads_out.len();
    let mut grads: Vec<Array3<T>> = grads_out.to_vec();
    let mut d_weight = Vec::with_capacity(n_blocks);
    let mut d_bias = Vec::with_capacity(n_blocks);
    let mut d_gamma = Vec::with_capacity(n_blocks);
    let mut d_beta = Vec::with_capacity(n_blocks);

    for bi in (0..n_blocks).rev() {
        let block = &p.blocks[bi];
        let stats = &cache.stats[bi];
        let convs = &cache.conv_outputs[bi];
        let acts = &cache.activations[bi];
        let (c, h, w) = convs[0].dim();
        let m_count = r::<T>((batch * h * w) as f64);

        let hw = h * w;

        // ReLU mask.
        let masked: Vec<Array3<T>> = grads
            .par_iter()
            .zip(acts.par_iter())
            .map(|(g, a)| {
                let mut out = g.clone();
                for (v, &av) in out
                    .as_slice_mut()
                    .expect("contiguous")
                    .iter_mut()
                    .zip(a.as_slice().expect("contiguous"))
                {
                    if av <= T::zero() {
                        *v = T::zero();
                    }
                }
                out
            })
            .collect();

        // Batch-norm backward, channel by channel with clip-ordered sums.
        let mut gamma_grad = vec![T::zero(); c];
        let mut beta_grad = vec![T::zero(); c];
        let mut bn_grads: Vec<Array3<T>> = (0..batch).map(|_| Array3::zeros((c, h, w))).collect();
        for ch in 0..c {
            let var_active = stats.var[ch] > p.bn_eps;
            let inv = T::one() / stats.var[ch].max(p.bn_eps).sqrt();
            let gamma = block.gamma[ch];
            let mean = stats.mean[ch];
            let mut sum_g = T::zero();
            let mut sum_g_centered = T::zero();
            let mut sum_centered = T::zero();
            for (conv, g) in convs.iter().zip(&masked) {
                for (&cv, &gz) in plane(conv, ch, hw).iter().zip(plane(g, ch, hw)) {
                    let centered = cv - mean;
                    sum_g += gz;
                    sum_g_centered += gz * centered;
                    sum_centered += centered;
                }
            }
            gamma_grad[ch] = sum_g_centered * inv;
            beta_grad[ch] = sum_g;
            let gvar = if var_active {
                sum_g_centered * gamma * (-r::<T>(0.5)) * inv * inv * inv
            } else {
                T::zero()
            };
            let gmean = -sum_g * gamma * inv + gvar * (-r::<T>(2.0) / m_count) * sum_centered;
            let two_gvar = gvar * r::<T>(2.0) / m_count;
            let mean_term = gmean / m_count;
            for (gi, (conv, g)) in bn_grads.iter_mut().zip(convs.iter().zip(&masked)) {
                let dst = &mut gi.as_slice_mut().expect("contiguous")[ch * hw..(ch + 1) * hw];
                for ((o, &cv), &gz) in dst
                    .iter_mut()
                    .zip(plane(conv, ch, hw))
                    .zip(plane(g, ch, hw))
                {
                    *o = gz * gamma * inv + two_gvar * (cv - mean) + mean_term;
                }
            }
        }

        // Conv backward per clip, parameter grads summed in clip order.
        let per_clip: Vec<ConvGrads<T>> = cache.block_inputs[bi]
            .par_iter()
            .zip(bn_grads.par_iter())
            .map(|(input, g)| conv_backward(input, &block.weight, g))
            .collect();
        let mut w_acc = Array4::zeros(block.weight.dim());
        let mut b_acc = vec![T::zero(); block.bias.len()];
        let mut next_grads = Vec::with_capacity(batch);
        for cg in per_clip {
            w_acc = w_acc + &cg.d_weight;
            for (a, b) in b_acc.iter_mut().zip(&cg.d_bias) {
                *a += *b;
            }
            next_grads.push(cg.d_input);
        }
        grads = next_grads;
        d_weight.push(w_acc);
        d_bias.push(b_acc);
        d_gamma.push(gamma_grad);
        d_beta.push(beta_grad);
    }

    d_weight.reverse();
    d_bias.reverse();
    d_gamma.reverse();
    d_beta.reverse();
    (
        grads,
        EncoderGrads {
            d_weight,
            d_bias,
            d_gamma,
            d_beta,
        },
    )
}

/// Global max pooling: per-channel maximum over all spatial positions, with
/// the argmax (first in row-major order on ties) recorded for the backward
/// subgradient.
pub fn max_pool_global<T: Real>(f: &Array3<T>) -> (Vec<T>, Vec<(usize, usize)>) {
    let (c, h, w) = f.dim();
    let mut emb = Vec::with_capacity(c);
    let mut arg = Vec::with_capacity(c);
    for ch in 0..c {
        let mut best = f[(ch, 0, 0)];
        let mut pos = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = f[(ch, y, x)];
                if v > best {
                    best = v;
                    pos = (y, x);
                }
            }
        }
        emb.push(best);
        arg.push(pos);
    }
    (emb, arg)
}

/// Backward of global max pooling: the gradient routes to the recorded
/// argmax position of each channel.
pub fn max_pool_backward<T: Real>(
    grad_emb: &[T],
    argmax: &[(usize, usize)],
    dims: (usize, usize, usize),
) -> Array3<T> {
    let mut out = Array3::zeros(dims);
    for (ch, (&g, &(y, x))) in grad_emb.iter().zip(argmax.iter()).enumerate() {
        out[(ch, y, x)] = g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_encoder(channels: Vec<usize>, seed: u64) -> EncoderParams<f64> {
        let cfg = EncoderConfig::new(channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::init(&cfg, &mut rng)
    }

    #[test]
    fn output_dims_follow_ceil_stride_rule() {
        let p = small_encoder(vec![4, 8, 16], 7);
        let input = vec![Array3::<f64>::zeros((1, 32, 100))];
        let (out, _) = encode_batch(&input, &p, EncMode::Train).unwrap();
        assert_eq!(out[0].dim(), (16, 4, 13));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let p = small_encoder(vec![4, 8], 3);
        let input = vec![Array3::<f64>::zeros((1, 16, 20))];
        let (out, _) = encode_batch(&input, &p, EncMode::Train).unwrap();
        assert!(out[0].iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn eval_requires_initialized_stats() {
        let p = small_encoder(vec![4], 3);
        let input = vec![Array3::<f64>::zeros((1, 8, 8))];
        assert!(encode_batch(&input, &p, EncMode::Eval).is_err());
    }

    #[test]
    fn max_pool_behaviors() {
        let mut f = Array3::<f64>::from_elem((2, 3, 4), 0.5);
        // Constant map: embedding = constant, argmax = first position.
        let (emb, arg) = max_pool_global(&f);
        assert_eq!(emb, vec![0.5, 0.5]);
        assert_eq!(arg, vec![(0, 0), (0, 0)]);
        // Spike dominates its channel.
        f[(0, 2, 1)] = 3.0;
        let (emb, arg) = max_pool_global(&f);
        assert_eq!(emb[0], 3.0);
        assert_eq!(arg[0], (2, 1));
        // Permuting spatial positions leaves the embedding unchanged.
        let mut g = Array3::<f64>::zeros((2, 3, 4));
        for ch in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    g[(ch, 2 - y, 3 - x)] = f[(ch, y, x)];
                }
            }
        }
        let (emb2, _) = max_pool_global(&g);
        assert_eq!(emb, emb2);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let p = small_encoder(vec![3, 5], 11);
        let batch: Vec<Array3<f64>> = (0..2)
            .map(|i| {
                Array3::from_shape_fn((1, 10, 14), |(_, y, x)| {
                    0.4 * ((y * 14 + x + i * 37) as f64 * 0.23).sin()
                })
            })
            .collect();
        // Fixed projection weights make the scalar loss sensitive to
        // every output element.
        let loss = |p: &EncoderParams<f64>, batch: &[Array3<f64>]| -> f64 {
            let (out, _) = encode_batch(batch, p, EncMode::Train).unwrap();
            out.iter()
                .enumerate()
                .map(|(i, o)| {
                    o.indexed_iter()
                        .map(|((c, y, x), v)| {
                            let w = (((c * 31 + y * 7 + x * 3 + i * 13) % 17) as f64) / 17.0 - 0.5;
                            v * w
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let (out, cache) = encode_batch(&batch, &p, EncMode::Train).unwrap();
        let grads_out: Vec<Array3<f64>> = out
            .iter()
            .enumerate()
            .map(|(i, o)| {
                Array3::from_shape_fn(o.dim(), |(c, y, x)| {
                    (((c * 31 + y * 7 + x * 3 + i * 13) % 17) as f64) / 17.0 - 0.5
                })
            })
            .collect();
        let (d_inputs, grads) = encode_backward_batch(&grads_out, &cache, &p);

        let step = 1e-6;
        // Spot-check conv weights, biases, affine weights in both blocks.
        for bi in 0..2 {
            let wdim = p.blocks[bi].weight.dim();
            for &idx in &[
                (0usize, 0usize, 0usize, 0usize),
                (wdim.0 - 1, wdim.1 - 1, 2, 2),
                (wdim.0 / 2, 0, 1, 1),
            ] {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.blocks[bi].weight[idx] += step;
                pm.blocks[bi].weight[idx] -= step;
                let fd = (loss(&pp, &batch) - loss(&pm, &batch)) / (2.0 * step);
                crate::testutil::assert_grad_close(
                    &format!("block{bi}.weight{idx:?}"),
                    grads.d_weight[bi][idx],
                    fd,
                );
            }
            for ch in 0..p.blocks[bi].bias.len() {
                for (name, analytic) in [
                    ("bias", grads.d_bias[bi][ch]),
                    ("gamma", grads.d_gamma[bi][ch]),
                    ("beta", grads.d_beta[bi][ch]),
                ] {
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    match name {
                        "bias" => {
                            pp.blocks[bi].bias[ch] += step;
                            pm.blocks[bi].bias[ch] -= step;
                        }
                        "gamma" => {
                            pp.blocks[bi].gamma[ch] += step;
                            pm.blocks[bi].gamma[ch] -= step;
                        }
                        _ => {
                            pp.blocks[bi].beta[ch] += step;
                            pm.blocks[bi].beta[ch] -= step;
                        }
                    }
                    let fd = (loss(&pp, &batch) - loss(&pm, &batch)) / (2.0 * step);
                    crate::testutil::assert_grad_close(
                        &format!("block{bi}.{name}[{ch}]"),
                        analytic,
                        fd,
                    );
                }
            }
        }
        // Input gradients.
        for &(i, y, x) in &[(0usize, 0usize, 0usize), (1, 5, 9), (0, 9, 13)] {
            let mut bp = batch.clone();
            let mut bm = batch.clone();
            bp[i][(0, y, x)] += step;
            bm[i][(0, y, x)] -= step;
            let fd = (loss(&p, &bp) - loss(&p, &bm)) / (2.0 * step);
            crate::testutil::assert_grad_close(
                &format!("input[{i}]({y},{x})"),
                d_inputs[i][(0, y, x)],
                fd,
            );
        }
    }

    #[test]
    fn max_pool_gradient_matches_finite_differences() {
        let f = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| {
            ((c * 20 + y * 5 + x) as f64 * 0.713).sin()
        });
        let (emb, arg) = max_pool_global(&f);
        let ge: Vec<f64> = (0..3).map(|i| 0.3 + 0.2 * i as f64).collect();
        let grad = max_pool_backward(&ge, &arg, f.dim());
        let loss = |f: &Array3<f64>| -> f64 {
            let (e, _) = max_pool_global(f);
            e.iter().zip(&ge).map(|(a, w)| a * w).sum()
        };
        let step = 1e-6;
        for (ch, &(y, x)) in arg.iter().enumerate() {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[(ch, y, x)] += step;
            fm[(ch, y, x)] -= step;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * step);
            crate::testutil::assert_grad_close(&format!("argmax[{ch}]"), grad[(ch, y, x)], fd);
        }
        let _ = emb;
    }
}
