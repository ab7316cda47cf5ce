//! Learnable Gaussian pooling: per-channel smoothing with a unit-sum
//! Gaussian window of trainable width, followed by temporal subsampling.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::types::{reflect_index, Stage, TimeFreqMap};

/// Pooling parameters: per-filter window width `rho` (samples, learnable),
/// frame stride `hop`, and the truncation multiplier for the window support.
#[derive(Debug, Clone)]
pub struct PoolingParams<T> {
    pub rho: Vec<T>,
    pub hop: usize,
    pub window_span: f64,
}

/// Normalized pooling windows for one parameter snapshot, shared across the
/// clips of a batch. `weights[k][radius + m]` is the window value at offset
/// `m`; `m2[k]` is its second moment and `moment_weights[k]` the premixed
/// `w[m] * (m^2 - m2)` kernel used by the `rho` gradient.
pub struct PoolKernels<T> {
    pub weights: Vec<Vec<T>>,
    pub moment_weights: Vec<Vec<T>>,
    pub radius: Vec<usize>,
    pub m2: Vec<T>,
}

impl<T: Real> PoolKernels<T> {
    pub fn new(p: &PoolingParams<T>) -> Result<Self> {
        if p.hop == 0 {
            return Err(Error::Config("pooling hop must be >= 1".into()));
        }
        let mut weights = Vec::with_capacity(p.rho.len());
        let mut moment_weights = Vec::with_capacity(p.rho.len());
        let mut radius = Vec::with_capacity(p.rho.len());
        let mut m2 = Vec::with_capacity(p.rho.len());
        for (k, &rho) in p.rho.iter().enumerate() {
            if rho <= T::zero() {
                return Err(Error::Config(format!(
                    "pooling width rho[{k}] = {rho} must be positive (clamping violated)"
                )));
            }
            let rad = (p.window_span * rho.as_f64()).floor() as usize;
            let mut w = Vec::with_capacity(2 * rad + 1);
            let mut sum = T::zero();
            for m in -(rad as isize)..=(rad as isize) {
                let mf = T::from_isize(m).unwrap();
                let v = (-(mf * mf) / (r::<T>(2.0) * rho * rho)).exp();
                w.push(v);
                sum += v;
            }
            let mut second = T::zero();
            for (i, v) in w.iter_mut().enumerate() {
                *v = *v / sum;
                let m = T::from_isize(i as isize - rad as isize).unwrap();
                second += *v * m * m;
            }
            let moments: Vec<T> = w
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let m = T::from_isize(i as isize - rad as isize).unwrap();
                    v * (m * m - second)
                })
                .collect();
            weights.push(w);
            moment_weights.push(moments);
            radius.push(rad);
            m2.push(second);
        }
        Ok(PoolKernels {
            weights,
            moment_weights,
            radius,
            m2,
        })
    }
}

/// Materializes a reflect-padded copy of a row: `rad` mirrored samples on
/// each side.
fn padded_row<T: Real>(row: &[T], rad: usize) -> Vec<T> {
    let n = row.len();
    let mut out = Vec::with_capacity(n + 2 * rad);
    for i in 0..(n + 2 * rad) {
        out.push(row[reflect_index(i as isize - rad as isize, n)]);
    }
    out
}

/// Four-lane dot product; the split accumulators let the compiler
/// vectorize the reduction.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Number of output frames for an input of `n_samples` at stride `hop`.
pub fn n_frames(n_samples: usize, hop: usize) -> usize {
    n_samples / hop
}

/// Forward pooling against prebuilt windows: frame `f` of channel `k` is the
/// window-weighted average of the reflect-padded energy row centered at
/// `f * hop`.
pub fn gaussian_pool_with<T: Real>(
    energy: &Array2<T>,
    p: &PoolingParams<T>,
    kernels: &PoolKernels<T>,
) -> Result<Array2<T>> {
    let (nf, n) = energy.dim();
    if p.hop > n {
        return Err(Error::Config(format!(
            "hop {} exceeds signal length {n}",
            p.hop
        )));
    }
    let frames = n_frames(n, p.hop);
    let mut out = Array2::zeros((nf, frames));
    for k in 0..nf {
        let rad = kernels.radius[k];
        if rad >= n {
            return Err(Error::Config(format!(
                "pooling window radius {rad} exceeds signal length {n}"
            )));
        }
        let w = &kernels.weights[k];
        let row = energy.row(k);
        let padded = padded_row(row.as_slice().expect("contiguous row"), rad);
        let width = 2 * rad + 1;
        for f in 0..frames {
            let start = f * p.hop;
            out[(k, f)] = dot(w, &padded[start..start + width]);
        }
    }
    Ok(out)
}

/// Backward pooling: routes `dL/d pooled` back to the energy rows and
/// accumulates the analytic `rho` gradient (through window shape and
/// normalization).
pub fn gaussian_pool_backward_with<T: Real>(
    energy: &Array2<T>,
    grad_pooled: &Array2<T>,
    p: &PoolingParams<T>,
    kernels: &PoolKernels<T>,
) -> Result<(Array2<T>, Vec<T>)> {
    let (nf, n) = energy.dim();
    let frames = n_frames(n, p.hop);
    if grad_pooled.dim() != (nf, frames) {
        return Err(Error::Data(format!(
            "pooled gradient shape {:?} does not match ({nf}, {frames})",
            grad_pooled.dim()
        )));
    }
    let mut grad_energy = Array2::zeros((nf, n));
    let mut d_rho = vec![T::zero(); nf];
    for k in 0..nf {
        let rad = kernels.radius[k];
        let w = &kernels.weights[k];
        let wm = &kernels.moment_weights[k];
        let rho = p.rho[k];
        let rho3 = rho * rho * rho;
        let width = 2 * rad + 1;
        let row = energy.row(k);
        let padded = padded_row(row.as_slice().expect("contiguous row"), rad);
        // Accumulate into a padded gradient buffer, fold the reflected
        // borders back afterwards.
        let mut gpad = vec![T::zero(); n + 2 * rad];
        let mut gr = T::zero();
        for f in 0..frames {
            let g = grad_pooled[(k, f)];
            if g == T::zero() {
                continue;
            }
            let start = f * p.hop;
            let window = &padded[start..start + width];
            let dst = &mut gpad[start..start + width];
            for i in 0..width {
                dst[i] += g * w[i];
            }
            gr += g * dot(wm, window);
        }
        let grow = grad_energy.row_mut(k).into_slice().expect("contiguous row");
        for (i, &gv) in gpad.iter().enumerate() {
            if gv != T::zero() {
                grow[reflect_index(i as isize - rad as isize, n)] += gv;
            }
        }
        d_rho[k] = gr / rho3;
    }
    Ok((grad_energy, d_rho))
}

/// Spec-level single-map pooling: validates the stage tag and builds the
/// windows on the fly.
pub fn gaussian_pool<T: Real>(
    e: &TimeFreqMap<T>,
    p: &PoolingParams<T>,
) -> Result<TimeFreqMap<T>> {
    if e.stage != Stage::Energy {
        return Err(Error::Data(format!(
            "gaussian_pool expects an energy-stage map, got {:?}",
            e.stage
        )));
    }
    let kernels = PoolKernels::new(p)?;
    let pooled = gaussian_pool_with(&e.values, p, &kernels)?;
    Ok(TimeFreqMap::new(pooled, Stage::Pooled))
}
