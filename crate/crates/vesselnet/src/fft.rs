//! FFT plan cache shared across worker threads, plus convolution-length
//! helpers.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::real::Real;

/// Caches forward/inverse FFT plans by length. Plans are `Arc`-shared and
/// thread-safe; planning happens once per distinct length.
pub struct FftCache<T: Real> {
    planner: Mutex<FftPlanner<T>>,
    forward: RwLock<HashMap<usize, Arc<dyn Fft<T>>>>,
    inverse: RwLock<HashMap<usize, Arc<dyn Fft<T>>>>,
}

impl<T: Real> FftCache<T> {
    pub fn new() -> Self {
        FftCache {
            planner: Mutex::new(FftPlanner::new()),
            forward: RwLock::new(HashMap::new()),
            inverse: RwLock::new(HashMap::new()),
        }
    }

    fn plan(&self, len: usize, inverse: bool) -> Arc<dyn Fft<T>> {
        let map = if inverse { &self.inverse } else { &self.forward };
        if let Some(p) = map.read().unwrap().get(&len) {
            return Arc::clone(p);
        }
        let mut planner = self.planner.lock().unwrap();
        let plan = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        map.write().unwrap().insert(len, Arc::clone(&plan));
        plan
    }

    /// In-place forward FFT (unscaled).
    pub fn fft(&self, buf: &mut [Complex<T>]) {
        self.plan(buf.len(), false).process(buf);
    }

    /// In-place inverse FFT, scaled by `1/N` so that `ifft(fft(x)) == x`.
    pub fn ifft(&self, buf: &mut [Complex<T>]) {
        let n = buf.len();
        self.plan(n, true).process(buf);
        let scale = T::one() / crate::real::r::<T>(n as f64);
        for v in buf.iter_mut() {
            *v = *v * scale;
        }
    }

    /// In-place inverse FFT without the `1/N` normalization; callers fold
    /// the scale into an adjacent pass.
    pub fn ifft_raw(&self, buf: &mut [Complex<T>]) {
        self.plan(buf.len(), true).process(buf);
    }
}

impl<T: Real> Default for FftCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Smallest 7-smooth integer `>= n` (lengths rustfft handles with fast
/// mixed-radix kernels).
pub fn next_fast_len(n: usize) -> usize {
    fn is_smooth(mut x: usize) -> bool {
        for p in [2usize, 3, 5, 7] {
            while x % p == 0 {
                x /= p;
            }
        }
        x == 1
    }
    let mut n = n.max(1);
    loop {
        if is_smooth(n) {
            return n;
        }
        n += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::r;

    #[test]
    fn fast_lengths() {
        assert_eq!(next_fast_len(1), 1);
        assert_eq!(next_fast_len(1400), 1400); // 2^3 * 5^2 * 7
        assert_eq!(next_fast_len(16401), 16464); // 2^4 * 3 * 7^3
        assert_eq!(next_fast_len(17), 18);
    }

    #[test]
    fn fft_roundtrip() {
        let cache = FftCache::<f64>::new();
        let mut buf: Vec<Complex<f64>> = (0..240)
            .map(|i| Complex::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let orig = buf.clone();
        cache.fft(&mut buf);
        cache.ifft(&mut buf);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).norm() < r(1e-12));
        }
    }
}
