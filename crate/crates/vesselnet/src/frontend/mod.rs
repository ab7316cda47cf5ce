//! Differentiable filterbank frontend: complex Gabor convolution, energy,
//! learnable Gaussian pooling, learnable log compression, and Temporal
//! BatchNorm, with forward and analytic backward passes.

pub mod compress;
pub mod gabor;
pub mod pool;

use ndarray::Array2;

pub use compress::{compress_normalize, CompressionParams, Mode};
pub use gabor::{gabor_forward, GaborFilterParams, GaborKernels};
pub use pool::{gaussian_pool, PoolingParams};

use crate::error::{Error, Result};
use crate::fft::FftCache;
use crate::real::{r, Real};
use crate::types::{Stage, TimeFreqMap, Waveform};

/// Mel scale used for filter center initialization.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Gaussian FWHM-to-sigma conversion factor, `2 sqrt(2 ln 2)`.
const FWHM_FACTOR: f64 = 2.354_820_045_030_949_3;

/// Static configuration of the frontend (everything that is not learned).
#[derive(Debug, Clone)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_filters: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Odd Gabor kernel tap count.
    pub kernel_width: usize,
    /// Pooling stride in samples.
    pub hop: usize,
    /// Pooling window truncation multiplier.
    pub window_span: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub rho_min: f64,
    pub rho_max: f64,
}

impl FrontendConfig {
    /// Defaults for a given sample rate and filter count: 401-tap kernels,
    /// 10 ms hop, 25 ms initial pooling window.
    pub fn new(sample_rate: u32, n_filters: usize) -> Self {
        let kernel_width = 401;
        let hop = (sample_rate as f64 * 0.010).round().max(1.0) as usize;
        FrontendConfig {
            sample_rate,
            n_filters,
            f_min_hz: 60.0,
            f_max_hz: sample_rate as f64 / 2.0,
            kernel_width,
            hop,
            window_span: 4.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            sigma_min: 1.5,
            sigma_max: kernel_width as f64 / 2.0,
            mu_min: 2.0 * std::f64::consts::PI * 10.0 / sample_rate as f64,
            mu_max: 0.999 * std::f64::consts::PI,
            rho_min: 1.0,
            rho_max: 4.0 * hop as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_filters == 0 {
            return Err(Error::Config("n_filters must be >= 1".into()));
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz) {
            return Err(Error::Config(format!(
                "require 0 <= f_min < f_max, got f_min = {} Hz, f_max = {} Hz",
                self.f_min_hz, self.f_max_hz
            )));
        }
        if self.f_max_hz > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "f_max = {} Hz exceeds Nyquist ({} Hz)",
                self.f_max_hz,
                self.sample_rate as f64 / 2.0
            )));
        }
        if self.kernel_width == 0 || self.kernel_width % 2 == 0 {
            return Err(Error::Config("kernel_width must be odd".into()));
        }
        if self.hop == 0 {
            return Err(Error::Config("hop must be >= 1".into()));
        }
        Ok(())
    }

    /// Clamp bounds applied to `mu` after every optimizer step.
    pub fn mu_bounds<T: Real>(&self) -> (T, T) {
        (r(self.mu_min), r(self.mu_max))
    }

    pub fn sigma_bounds<T: Real>(&self) -> (T, T) {
        (r(self.sigma_min), r(self.sigma_max))
    }

    pub fn rho_bounds<T: Real>(&self) -> (T, T) {
        (r(self.rho_min), r(self.rho_max))
    }
}

/// The full learnable frontend parameter set.
#[derive(Debug, Clone)]
pub struct FrontendParams<T> {
    pub gabor: GaborFilterParams<T>,
    pub pool: PoolingParams<T>,
    pub comp: CompressionParams<T>,
}

impl<T: Real> FrontendParams<T> {
    pub fn n_filters(&self) -> usize {
        self.gabor.n_filters()
    }

    /// Converts a center frequency from radians/sample to Hz.
    pub fn center_freq_hz(&self, k: usize, sample_rate: u32) -> f64 {
        self.gabor.mu[k].as_f64() * sample_rate as f64 / (2.0 * std::f64::consts::PI)
    }

    /// Casts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> FrontendParams<U> {
        fn cv<T: Real, U: Real>(v: &[T]) -> Vec<U> {
            v.iter().map(|x| r::<U>(x.as_f64())).collect()
        }
        FrontendParams {
            gabor: GaborFilterParams {
                mu: cv(&self.gabor.mu),
                sigma: cv(&self.gabor.sigma),
                kernel_width: self.gabor.kernel_width,
            },
            pool: PoolingParams {
                rho: cv(&self.pool.rho),
                hop: self.pool.hop,
                window_span: self.pool.window_span,
            },
            comp: CompressionParams {
                log_gain: cv(&self.comp.log_gain),
                gamma: cv(&self.comp.gamma),
                beta: cv(&self.comp.beta),
                running_mean: cv(&self.comp.running_mean),
                running_var: cv(&self.comp.running_var),
                eps: r(self.comp.eps.as_f64()),
                momentum: r(self.comp.momentum.as_f64()),
                initialized: self.comp.initialized,
            },
        }
    }
}

/// Initializes the filterbank: centers mel-uniform at interior fractions
/// `i/(K+1)` of the `[mel(f_min), mel(f_max)]` span, envelope widths matched
/// to the local mel bin spacing (FWHM), a 25 ms pooling window, zero log
/// gain, and identity affine weights.
pub fn init_filterbank<T: Real>(cfg: &FrontendConfig) -> Result<FrontendParams<T>> {
    cfg.validate()?;
    let k = cfg.n_filters;
    let sr = cfg.sample_rate as f64;
    let mel_lo = hz_to_mel(cfg.f_min_hz);
    let mel_hi = hz_to_mel(cfg.f_max_hz);
    let span = mel_hi - mel_lo;
    let gap = span / (k + 1) as f64;

    let mut mu = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for i in 1..=k {
        let mel_c = mel_lo + gap * i as f64;
        let f_c = mel_to_hz(mel_c);
        let omega = 2.0 * std::f64::consts::PI * f_c / sr;
        mu.push(r::<T>(omega.clamp(cfg.mu_min, cfg.mu_max)));

        // FWHM of the envelope's frequency response matches the local mel
        // bin spacing; sigma in samples is the reciprocal of the frequency
        // std in radians/sample.
        let f_lo = mel_to_hz(mel_c - gap / 2.0);
        let f_hi = mel_to_hz(mel_c + gap / 2.0);
        let fwhm_omega = 2.0 * std::f64::consts::PI * (f_hi - f_lo) / sr;
        let sigma_omega = fwhm_omega / FWHM_FACTOR;
        let sigma_t = (1.0 / sigma_omega).clamp(cfg.sigma_min, cfg.sigma_max);
        sigma.push(r::<T>(sigma_t));
    }

    let rho_init = (0.025 * sr / FWHM_FACTOR).clamp(cfg.rho_min, cfg.rho_max);
    Ok(FrontendParams {
        gabor: GaborFilterParams {
            mu,
            sigma,
            kernel_width: cfg.kernel_width,
        },
        pool: PoolingParams {
            rho: vec![r(rho_init); k],
            hop: cfg.hop,
            window_span: cfg.window_span,
        },
        comp: CompressionParams::new(k, cfg.bn_eps, cfg.bn_momentum),
    })
}

/// Forward intermediates of a full single-clip frontend pass.
pub struct FrontendCache<T> {
    pub gabor: gabor::GaborCache<T>,
    pub energy: Array2<T>,
    pub pooled: Array2<T>,
    pub compressed: Array2<T>,
    pub stats: compress::TbnStats<T>,
}

/// Gradients for every frontend parameter plus the input waveform.
#[derive(Debug, Clone)]
pub struct FrontendGrads<T> {
    pub d_mu: Vec<T>,
    pub d_sigma: Vec<T>,
    pub d_rho: Vec<T>,
    pub d_log_gain: Vec<T>,
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
    pub d_input: Option<Vec<T>>,
}

/// Runs the full frontend on one clip. Train mode normalizes with the
/// clip's own statistics (and does not mutate the running estimates; use
/// [`compress::tbn_update_running`] for that); eval mode requires
/// initialized running statistics.
pub fn frontend_forward<T: Real>(
    x: &Waveform<T>,
    p: &FrontendParams<T>,
    mode: Mode,
    ffts: &FftCache<T>,
) -> Result<(TimeFreqMap<T>, FrontendCache<T>)> {
    let kernels = GaborKernels::new(&p.gabor, x.n_samples(), ffts)?;
    let pool_kernels = pool::PoolKernels::new(&p.pool)?;
    let (energy, gcache) = gabor::gabor_forward_with(&x.samples, &kernels, ffts)?;
    let pooled = pool::gaussian_pool_with(&energy, &p.pool, &pool_kernels)?;
    let compressed = compress::log_compress(&pooled, &p.comp.log_gain)?;
    let (z, stats) = match mode {
        Mode::Train => {
            let stats = compress::tbn_batch_stats(&[&compressed]);
            (compress::tbn_apply(&compressed, &stats, &p.comp), stats)
        }
        Mode::Eval => {
            let z = compress::tbn_apply_eval(&compressed, &p.comp)?;
            let stats = compress::TbnStats {
                mean: p.comp.running_mean.clone(),
                var: p.comp.running_var.clone(),
                count: 0,
            };
            (z, stats)
        }
    };
    Ok((
        TimeFreqMap::new(z, Stage::Normalized),
        FrontendCache {
            gabor: gcache,
            energy,
            pooled,
            compressed,
            stats,
        },
    ))
}

/// Single-clip backward pass through the whole frontend (train-mode
/// normalization over this clip's frames). Returns analytic gradients for
/// every learnable frontend parameter and, when requested, the waveform.
pub fn frontend_backward<T: Real>(
    grad_out: &Array2<T>,
    cache: &FrontendCache<T>,
    p: &FrontendParams<T>,
    ffts: &FftCache<T>,
    want_input_grad: bool,
) -> Result<FrontendGrads<T>> {
    if grad_out.dim() != cache.compressed.dim() {
        return Err(Error::Data(format!(
            "gradient shape {:?} does not match frontend output {:?}",
            grad_out.dim(),
            cache.compressed.dim()
        )));
    }
    let tbn = compress::tbn_backward(
        &[&cache.compressed],
        &[grad_out],
        &cache.stats,
        &p.comp,
    );
    let (grad_pooled, d_log_gain) =
        compress::log_compress_backward(&cache.pooled, &p.comp.log_gain, &tbn.grad_inputs[0]);
    let pool_kernels = pool::PoolKernels::new(&p.pool)?;
    let (grad_energy, d_rho) =
        pool::gaussian_pool_backward_with(&cache.energy, &grad_pooled, &p.pool, &pool_kernels)?;
    let kernels = GaborKernels::new(&p.gabor, cache.energy.ncols(), ffts)?;
    let ggrads = gabor::gabor_backward_with(
        &grad_energy,
        &cache.gabor,
        &p.gabor,
        &kernels,
        ffts,
        want_input_grad,
    )?;
    Ok(FrontendGrads {
        d_mu: ggrads.d_mu,
        d_sigma: ggrads.d_sigma,
        d_rho,
        d_log_gain,
        d_gamma: tbn.d_gamma,
        d_beta: tbn.d_beta,
        d_input: ggrads.d_input,
    })
}
