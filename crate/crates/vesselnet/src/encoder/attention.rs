//! 2-D attention pooling: a single learned query scores every spatial
//! position of the feature map; the embedding is the softmax-weighted sum of
//! per-position value projections.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::{r, Real};

/// Attention pooling parameters: learned query plus key/value projections
/// from the encoder channel dimension. The value projection maps back to
/// the embedding dimension (= encoder channels).
#[derive(Debug, Clone)]
pub struct AttentionPoolParams<T> {
    pub query: Vec<T>,
    /// `d x c` key projection.
    pub key_w: Array2<T>,
    pub key_b: Vec<T>,
    /// `c x c` value projection.
    pub value_w: Array2<T>,
    pub value_b: Vec<T>,
    pub temperature: T,
}

impl<T: Real> AttentionPoolParams<T> {
    /// Initializes with scaled-normal projections and temperature
    /// `1/sqrt(d)`.
    pub fn init(channels: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std_kv = 1.0 / (channels as f64).sqrt();
        AttentionPoolParams {
            query: (0..dim)
                .map(|_| r::<T>(super::sample_normal(rng) * 0.1))
                .collect(),
            key_w: Array2::from_shape_fn((dim, channels), |_| {
                r::<T>(super::sample_normal(rng) * std_kv)
            }),
            key_b: vec![T::zero(); dim],
            value_w: Array2::from_shape_fn((channels, channels), |_| {
                r::<T>(super::sample_normal(rng) * std_kv)
            }),
            value_b: vec![T::zero(); channels],
            temperature: r(1.0 / (dim as f64).sqrt()),
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.query.len()
    }

    pub fn channels(&self) -> usize {
        self.value_b.len()
    }

    pub fn cast<U: Real>(&self) -> AttentionPoolParams<U> {
        AttentionPoolParams {
            query: self.query.iter().map(|v| r::<U>(v.as_f64())).collect(),
            key_w: self.key_w.mapv(|v| r::<U>(v.as_f64())),
            key_b: self.key_b.iter().map(|v| r::<U>(v.as_f64())).collect(),
            value_w: self.value_w.mapv(|v| r::<U>(v.as_f64())),
            value_b: self.value_b.iter().map(|v| r::<U>(v.as_f64())).collect(),
            temperature: r(self.temperature.as_f64()),
        }
    }
}

/// Forward intermediates for the backward pass.
pub struct AttnCache<T> {
    /// Flattened input columns, `P x c`.
    pub feat: Array2<T>,
    /// Key projections, `P x d`.
    pub keys: Array2<T>,
    /// Value projections, `P x c`.
    pub values: Array2<T>,
    /// Softmax weights, length `P`.
    pub weights: Vec<T>,
    pub spatial: (usize, usize),
}

/// Pools a `c x F x T` feature map into a `c`-dim embedding. Returns the
/// embedding, the `F x T` weight map (a probability simplex), and the cache.
pub fn attention_pool<T: Real>(
    f: &Array3<T>,
    p: &AttentionPoolParams<T>,
) -> Result<(Vec<T>, Array2<T>, AttnCache<T>)> {
    let (c, fh, fw) = f.dim();
    if c != p.key_w.ncols() || c != p.value_w.ncols() {
        return Err(Error::Config(format!(
            "attention projections expect {} channels, feature map has {c}",
            p.key_w.ncols()
        )));
    }
    let d = p.attention_dim();
    let positions = fh * fw;

    let mut feat = Array2::zeros((positions, c));
    for y in 0..fh {
        for x in 0..fw {
            for ch in 0..c {
                feat[(y * fw + x, ch)] = f[(ch, y, x)];
            }
        }
    }

    let mut keys = Array2::zeros((positions, d));
    let mut values = Array2::zeros((positions, c));
    let mut scores = vec![T::zero(); positions];
    for pos in 0..positions {
        let mut s = T::zero();
        for i in 0..d {
            let mut acc = p.key_b[i];
            for ch in 0..c {
                acc += p.key_w[(i, ch)] * feat[(pos, ch)];
            }
            keys[(pos, i)] = acc;
            s += p.query[i] * acc;
        }
        let score = s * p.temperature;
        if !score.is_finite() {
            let (y, x) = (pos / fw, pos % fw);
            return Err(Error::Numeric(format!(
                "non-finite attention score at position ({y},{x})"
            )));
        }
        scores[pos] = score;
        for i in 0..c {
            let mut acc = p.value_b[i];
            for ch in 0..c {
                acc += p.value_w[(i, ch)] * feat[(pos, ch)];
            }
            values[(pos, i)] = acc;
        }
    }

    // Max-shifted softmax over all positions.
    let max_s = scores.iter().copied().fold(scores[0], T::max);
    let mut weights: Vec<T> = scores.iter().map(|&s| (s - max_s).exp()).collect();
    let total: T = weights.iter().copied().sum();
    for w in weights.iter_mut() {
        *w = *w / total;
    }

    let mut emb = vec![T::zero(); c];
    for pos in 0..positions {
        for i in 0..c {
            emb[i] += weights[pos] * values[(pos, i)];
        }
    }

    let mut wmap = Array2::zeros((fh, fw));
    for y in 0..fh {
        for x in 0..fw {
            wmap[(y, x)] = weights[y * fw + x];
        }
    }

    Ok((
        emb,
        wmap,
        AttnCache {
            feat,
            keys,
            values,
            weights,
            spatial: (fh, fw),
        },
    ))
}

/// Gradients for the attention parameters.
pub struct AttnGrads<T> {
    pub d_query: Vec<T>,
    pub d_key_w: Array2<T>,
    pub d_key_b: Vec<T>,
    pub d_value_w: Array2<T>,
    pub d_value_b: Vec<T>,
}

/// Backward through attention pooling; returns the feature-map gradient and
/// parameter gradients.
pub fn attention_pool_backward<T: Real>(
    grad_emb: &[T],
    cache: &AttnCache<T>,
    p: &AttentionPoolParams<T>,
) -> (Array3<T>, AttnGrads<T>) {
    let (fh, fw) = cache.spatial;
    let positions = fh * fw;
    let c = p.channels();
    let d = p.attention_dim();

    // Value path.
    let mut d_value_w = Array2::zeros((c, c));
    let mut d_value_b = vec![T::zero(); c];
    let mut gfeat = Array2::zeros((positions, c));
    let mut gscore_raw = vec![T::zero(); positions]; // dL/d weights before softmax jacobian
    for pos in 0..positions {
        let w = cache.weights[pos];
        let mut dot = T::zero();
        for i in 0..c {
            let gv = w * grad_emb[i];
            d_value_b[i] += gv;
            for ch in 0..c {
                d_value_w[(i, ch)] += gv * cache.feat[(pos, ch)];
                gfeat[(pos, ch)] += gv * p.value_w[(i, ch)];
            }
            dot += grad_emb[i] * cache.values[(pos, i)];
        }
        gscore_raw[pos] = dot;
    }

    // Softmax jacobian: gs = w * (gw - sum_q w_q gw_q).
    let mean: T = cache
        .weights
        .iter()
        .zip(&gscore_raw)
        .map(|(&w, &g)| w * g)
        .sum();
    let mut d_query = vec![T::zero(); d];
    let mut d_key_w = Array2::zeros((d, c));
    let mut d_key_b = vec![T::zero(); d];
    for pos in 0..positions {
        let gs = cache.weights[pos] * (gscore_raw[pos] - mean) * p.temperature;
        if gs == T::zero() {
            continue;
        }
        for i in 0..d {
            d_query[i] += gs * cache.keys[(pos, i)];
            let gk = gs * p.query[i];
            d_key_b[i] += gk;
            for ch in 0..c {
                d_key_w[(i, ch)] += gk * cache.feat[(pos, ch)];
                gfeat[(pos, ch)] += gk * p.key_w[(i, ch)];
            }
        }
    }

    let mut grad_f = Array3::zeros((c, fh, fw));
    for y in 0..fh {
        for x in 0..fw {
            for ch in 0..c {
                grad_f[(ch, y, x)] = gfeat[(y * fw + x, ch)];
            }
        }
    }
    (
        grad_f,
        AttnGrads {
            d_query,
            d_key_w,
            d_key_b,
            d_value_w,
            d_value_b,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(c: usize, d: usize, seed: u64) -> AttentionPoolParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionPoolParams::init(c, d, &mut rng)
    }

    #[test]
    fn identical_positions_give_uniform_weights() {
        let p = params(4, 8, 5);
        let f = Array3::from_elem((4, 3, 5), 0.7);
        let (emb, wmap, _) = attention_pool(&f, &p).unwrap();
        let expect = 1.0 / 15.0;
        for &w in wmap.iter() {
            assert!((w - expect).abs() < 1e-12);
        }
        // Embedding = value projection of the common column.
        let col = vec![0.7; 4];
        for i in 0..4 {
            let mut v = p.value_b[i];
            for ch in 0..4 {
                v += p.value_w[(i, ch)] * col[ch];
            }
            assert!((emb[i] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_gets_weight_one() {
        let p = params(3, 4, 2);
        let f = Array3::from_shape_fn((3, 1, 1), |(c, _, _)| 0.2 + c as f64 * 0.3);
        let (emb, wmap, _) = attention_pool(&f, &p).unwrap();
        assert!((wmap[(0, 0)] - 1.0).abs() < 1e-15);
        for i in 0..3 {
            let mut v = p.value_b[i];
            for ch in 0..3 {
                v += p.value_w[(i, ch)] * f[(ch, 0, 0)];
            }
            assert!((emb[i] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_form_a_simplex_and_shift_invariant() {
        let mut p = params(4, 6, 9);
        let f = Array3::from_shape_fn((4, 5, 7), |(c, y, x)| {
            ((c * 35 + y * 7 + x) as f64 * 0.31).sin()
        });
        let (_, w1, _) = attention_pool(&f, &p).unwrap();
        let sum: f64 = w1.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(w1.iter().all(|&w| w >= 0.0));
        // Adding a constant to every score via the key bias leaves the
        // weights unchanged (the query picks it up as a uniform shift)...
        // equivalent check: shift all scores by adjusting key_b along query.
        let q_norm: f64 = p.query.iter().map(|v| v * v).sum();
        if q_norm > 0.0 {
            let shift = 0.37 / p.temperature;
            for (i, b) in p.key_b.iter_mut().enumerate() {
                *b += shift * p.query[i] / q_norm;
            }
            let (_, w2, _) = attention_pool(&f, &p).unwrap();
            for (a, b) in w1.iter().zip(w2.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn embedding_stays_in_value_hull() {
        let p = params(3, 5, 13);
        let f = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            ((c + y + x) as f64 * 0.77).cos() * 0.5
        });
        let (emb, _, cache) = attention_pool(&f, &p).unwrap();
        for i in 0..3 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for pos in 0..16 {
                lo = lo.min(cache.values[(pos, i)]);
                hi = hi.max(cache.values[(pos, i)]);
            }
            assert!(emb[i] >= lo - 1e-12 && emb[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = params(3, 4, 21);
        let f = Array3::from_shape_fn((3, 2, 3), |(c, y, x)| {
            0.4 * ((c * 6 + y * 3 + x) as f64 * 0.53).sin()
        });
        let ge: Vec<f64> = vec![0.7, -0.3, 0.5];
        let loss = |p: &AttentionPoolParams<f64>, f: &Array3<f64>| -> f64 {
            let (emb, _, _) = attention_pool(f, p).unwrap();
            emb.iter().zip(&ge).map(|(a, w)| a * w).sum()
        };
        let (_, _, cache) = attention_pool(&f, &p).unwrap();
        let (gf, grads) = attention_pool_backward(&ge, &cache, &p);

        let step = 1e-6;
        for i in 0..p.query.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.query[i] += step;
            pm.query[i] -= step;
            let fd = (loss(&pp, &f) - loss(&pm, &f)) / (2.0 * step);
            crate::testutil::assert_grad_close(&format!("query[{i}]"), grads.d_query[i], fd);
        }
        for idx in [(0usize, 0usize), (3, 2), (1, 1)] {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.key_w[idx] += step;
            pm.key_w[idx] -= step;
            let fd = (loss(&pp, &f) - loss(&pm, &f)) / (2.0 * step);
            crate::testutil::assert_grad_close(&format!("key_w{idx:?}"), grads.d_key_w[idx], fd);
        }
        for idx in [(0usize, 0usize), (2, 1)] {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.value_w[idx] += step;
            pm.value_w[idx] -= step;
            let fd = (loss(&pp, &f) - loss(&pm, &f)) / (2.0 * step);
            crate::testutil::assert_grad_close(
                &format!("value_w{idx:?}"),
                grads.d_value_w[idx],
                fd,
            );
        }
        for i in 0..3 {
            for (name, gslice) in [("key_b", &grads.d_key_b), ("value_b", &grads.d_value_b)] {
                if i >= gslice.len() {
                    continue;
                }
                let mut pp = p.clone();
                let mut pm = p.clone();
                match name {
                    "key_b" => {
                        pp.key_b[i] += step;
                        pm.key_b[i] -= step;
                    }
                    _ => {
                        pp.value_b[i] += step;
                        pm.value_b[i] -= step;
                    }
                }
                let fd = (loss(&pp, &f) - loss(&pm, &f)) / (2.0 * step);
                crate::testutil::assert_grad_close(&format!("{name}[{i}]"), gslice[i], fd);
            }
        }
        for &(c, y, x) in &[(0usize, 0usize, 0usize), (2, 1, 2), (1, 0, 1)] {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[(c, y, x)] += step;
            fm[(c, y, x)] -= step;
            let fd = (loss(&p, &fp) - loss(&p, &fm)) / (2.0 * step);
            crate::testutil::assert_grad_close(&format!("f({c},{y},{x})"), gf[(c, y, x)], fd);
        }
    }
}
