//! Filter-activation analysis: per-clip activation tensors from the
//! frontend alone, class-conditional mean activations, per-filter delta
//! curves and time-resolved delta spectrograms, active-filter counting, and
//! CSV export.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fft::FftCache;
use crate::frontend::{self, FrontendParams, Mode};
use crate::real::Real;
use crate::types::{ClassLabel, ScenarioId, Stage, TimeFreqMap, Waveform};

/// Which frontend stage the activations are taken from. `Normalized` is the
/// post-TBN eval-mode output (what downstream layers see); `PooledEnergy`
/// exposes the pre-compression pooled energy instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationStage {
    Normalized,
    PooledEnergy,
}

/// One clip's frontend activations, channels already in ascending-center-
/// frequency order.
#[derive(Debug, Clone)]
pub struct ActivationTensor<T> {
    pub values: Array2<T>,
    pub class: ClassLabel,
    pub scenario: ScenarioId,
}

/// Channel indices sorted by learned center frequency (training order is
/// preserved inside the model; analysis reports in frequency order).
pub fn channel_order<T: Real>(p: &FrontendParams<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.n_filters()).collect();
    order.sort_by(|&a, &b| {
        p.gabor.mu[a]
            .partial_cmp(&p.gabor.mu[b])
            .expect("finite center frequencies")
    });
    order
}

/// Sorted center frequencies in Hz matching [`channel_order`].
pub fn sorted_center_freqs<T: Real>(p: &FrontendParams<T>, sample_rate: u32) -> Vec<f64> {
    channel_order(p)
        .into_iter()
        .map(|k| p.center_freq_hz(k, sample_rate))
        .collect()
}

fn reorder_rows<T: Real>(m: &Array2<T>, order: &[usize]) -> Array2<T> {
    let (c, t) = m.dim();
    debug_assert_eq!(c, order.len());
    let mut out = Array2::zeros((c, t));
    for (dst, &src) in order.iter().enumerate() {
        for j in 0..t {
            out[(dst, j)] = m[(src, j)];
        }
    }
    out
}

/// Runs the frontend alone over clips and returns activation tensors.
/// `Normalized` stage uses eval-mode statistics and therefore requires a
/// trained frontend; `PooledEnergy` works on an initialized one too.
pub fn activation_tensors<T: Real>(
    p: &FrontendParams<T>,
    expected_rate: u32,
    clips: &[(Waveform<T>, ClassLabel, ScenarioId)],
    stage: ActivationStage,
    ffts: &FftCache<T>,
) -> Result<Vec<ActivationTensor<T>>> {
    let order = channel_order(p);
    let mut out = Vec::with_capacity(clips.len());
    for (wave, class, scenario) in clips {
        if wave.sample_rate != expected_rate {
            return Err(Error::Data(format!(
                "clip sample rate {} does not match configured {expected_rate}",
                wave.sample_rate
            )));
        }
        let values = match stage {
            ActivationStage::Normalized => {
                let (map, _) = frontend::frontend_forward(wave, p, Mode::Eval, ffts)?;
                map.values
            }
            ActivationStage::PooledEnergy => {
                let energy = frontend::gabor::gabor_forward(wave, &p.gabor)?;
                let pooled = frontend::pool::gaussian_pool(
                    &TimeFreqMap::new(energy.values, Stage::Energy),
                    &p.pool,
                )?;
                pooled.values
            }
        };
        out.push(ActivationTensor {
            values: reorder_rows(&values, &order),
            class: *class,
            scenario: *scenario,
        });
    }
    Ok(out)
}

/// Class-conditional mean activation: the double average over clips of the
/// class and time frames, per channel.
pub fn class_mean_activation<T: Real>(
    tensors: &[ActivationTensor<T>],
    class: ClassLabel,
) -> Result<Vec<T>> {
    let members: Vec<&ActivationTensor<T>> =
        tensors.iter().filter(|t| t.class == class).collect();
    if members.is_empty() {
        return Err(Error::Data(format!("no activation tensors for class {class}")));
    }
    let (c, frames) = members[0].values.dim();
    let denom = crate::real::r::<T>((members.len() * frames) as f64);
    let mut mean = vec![T::zero(); c];
    for t in &members {
        if t.values.dim() != (c, frames) {
            return Err(Error::Data("activation tensor shape mismatch".into()));
        }
        for k in 0..c {
            for j in 0..frames {
                mean[k] += t.values[(k, j)];
            }
        }
    }
    for m in mean.iter_mut() {
        *m = *m / denom;
    }
    Ok(mean)
}

/// Per-filter difference of class-conditional mean activations, with the
/// matching sorted center frequencies.
#[derive(Debug, Clone)]
pub struct DeltaCurve<T> {
    pub delta: Vec<T>,
    pub center_freq_hz: Vec<f64>,
    pub scenario: ScenarioId,
}

pub fn delta_curve<T: Real>(
    mean_pos: &[T],
    mean_neg: &[T],
    center_freq_hz: Vec<f64>,
    scenario: ScenarioId,
) -> Result<DeltaCurve<T>> {
    if mean_pos.len() != mean_neg.len() || mean_pos.len() != center_freq_hz.len() {
        return Err(Error::Data(format!(
            "delta curve inputs disagree: {} vs {} channels ({} frequencies)",
            mean_pos.len(),
            mean_neg.len(),
            center_freq_hz.len()
        )));
    }
    Ok(DeltaCurve {
        delta: mean_pos
            .iter()
            .zip(mean_neg)
            .map(|(&a, &b)| a - b)
            .collect(),
        center_freq_hz,
        scenario,
    })
}

/// Time-resolved difference of mean activations (averaged over clips only).
#[derive(Debug, Clone)]
pub struct DeltaSpectrogram<T> {
    pub values: Array2<T>,
    pub scenario: ScenarioId,
}

fn clip_mean<T: Real>(tensors: &[&ActivationTensor<T>]) -> Result<Array2<T>> {
    let (c, frames) = tensors[0].values.dim();
    let denom = crate::real::r::<T>(tensors.len() as f64);
    let mut mean = Array2::zeros((c, frames));
    for t in tensors {
        if t.values.dim() != (c, frames) {
            return Err(Error::Data("activation tensor shape mismatch".into()));
        }
        for k in 0..c {
            for j in 0..frames {
                mean[(k, j)] += t.values[(k, j)];
            }
        }
    }
    mean.mapv_inplace(|v| v / denom);
    Ok(mean)
}

pub fn delta_spectrogram<T: Real>(
    tensors: &[ActivationTensor<T>],
    class_pos: ClassLabel,
    class_neg: ClassLabel,
    scenario: ScenarioId,
) -> Result<DeltaSpectrogram<T>> {
    let pos: Vec<&ActivationTensor<T>> = tensors
        .iter()
        .filter(|t| t.class == class_pos && t.scenario == scenario)
        .collect();
    let neg: Vec<&ActivationTensor<T>> = tensors
        .iter()
        .filter(|t| t.class == class_neg && t.scenario == scenario)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "delta spectrogram needs clips of both classes in {scenario} ({} vs {})",
            pos.len(),
            neg.len()
        )));
    }
    let mp = clip_mean(&pos)?;
    let mn = clip_mean(&neg)?;
    if mp.dim() != mn.dim() {
        return Err(Error::Data("class means disagree in shape".into()));
    }
    Ok(DeltaSpectrogram {
        values: mp - mn,
        scenario,
    })
}

/// Number of filters whose |delta| reaches `threshold` times the maximum
/// |delta|. An all-zero curve counts zero active filters by convention.
pub fn active_filter_count<T: Real>(delta: &[T], threshold: f64) -> Result<usize> {
    if threshold <= 0.0 {
        return Err(Error::Config(format!(
            "active-filter threshold {threshold} must be positive"
        )));
    }
    let max_abs = delta.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    if max_abs == T::zero() {
        return Ok(0);
    }
    let cut = crate::real::r::<T>(threshold) * max_abs;
    Ok(delta.iter().filter(|&&v| v.abs() >= cut).count())
}

/// Default relative threshold for active-filter counting.
pub const ACTIVE_FILTER_THRESHOLD: f64 = 0.2;

/// Writes one delta-curve CSV and one delta-spectrogram CSV per scenario.
/// Values use the shortest round-trip decimal form, so parsing them back
/// recovers the numbers exactly.
pub fn export_analysis<T: Real>(
    curves: &[DeltaCurve<T>],
    spectrograms: &[DeltaSpectrogram<T>],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for curve in curves {
        let path = out_dir.join(format!("delta_curve_{}.csv", curve.scenario));
        let mut body = String::from("filter_index,center_freq_hz,delta\n");
        for (i, (&d, &f)) in curve.delta.iter().zip(&curve.center_freq_hz).enumerate() {
            body.push_str(&format!("{i},{f},{d}\n"));
        }
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    for spec in spectrograms {
        let path = out_dir.join(format!("delta_spectrogram_{}.csv", spec.scenario));
        let (c, frames) = spec.values.dim();
        let mut body = String::from("filter_index");
        for j in 0..frames {
            body.push_str(&format!(",frame_{j}"));
        }
        body.push('\n');
        for k in 0..c {
            body.push_str(&k.to_string());
            for j in 0..frames {
                body.push_str(&format!(",{}", spec.values[(k, j)]));
            }
            body.push('\n');
        }
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{init_filterbank, FrontendConfig};

    fn tensor(
        values: Array2<f64>,
        class: ClassLabel,
        scenario: ScenarioId,
    ) -> ActivationTensor<f64> {
        ActivationTensor {
            values,
            class,
            scenario,
        }
    }

    #[test]
    fn class_means_match_hand_arithmetic() {
        // Two 2x2 tensors with constants 1 and 3 average to 2; a hand-built
        // asymmetric pair checks the double average.
        let t1 = tensor(Array2::from_elem((2, 2), 1.0), ClassLabel::Tug, ScenarioId::S1);
        let t2 = tensor(Array2::from_elem((2, 2), 3.0), ClassLabel::Tug, ScenarioId::S1);
        let mean = class_mean_activation(&[t1, t2], ClassLabel::Tug).unwrap();
        assert_eq!(mean, vec![2.0, 2.0]);

        let t3 = tensor(
            Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ClassLabel::Cargo,
            ScenarioId::S1,
        );
        let mean = class_mean_activation(&[t3], ClassLabel::Cargo).unwrap();
        assert_eq!(mean, vec![1.5, 3.5]);

        assert!(class_mean_activation::<f64>(&[], ClassLabel::Tug).is_err());
    }

    #[test]
    fn deltas_are_differences_and_time_average_recomposes() {
        let mk = |c: f64, class, n: usize| -> Vec<ActivationTensor<f64>> {
            (0..n)
                .map(|i| {
                    tensor(
                        Array2::from_shape_fn((3, 4), |(k, t)| {
                            c + 0.1 * (k as f64) + 0.01 * (t as f64) + 0.001 * i as f64
                        }),
                        class,
                        ScenarioId::S2,
                    )
                })
                .collect()
        };
        let mut tensors = mk(2.0, ClassLabel::Tug, 3);
        tensors.extend(mk(1.0, ClassLabel::Background, 2));

        let m_tug = class_mean_activation(&tensors, ClassLabel::Tug).unwrap();
        let m_bg = class_mean_activation(&tensors, ClassLabel::Background).unwrap();
        let curve = delta_curve(&m_tug, &m_bg, vec![100.0, 200.0, 300.0], ScenarioId::S2).unwrap();
        let spec = delta_spectrogram(
            &tensors,
            ClassLabel::Tug,
            ClassLabel::Background,
            ScenarioId::S2,
        )
        .unwrap();

        // Time-averaging the spectrogram reproduces the curve exactly.
        for k in 0..3 {
            let row_mean: f64 = spec.values.row(k).iter().sum::<f64>() / 4.0;
            assert!((row_mean - curve.delta[k]).abs() < 1e-12);
        }

        // Swapping class roles negates every delta.
        let swapped = delta_curve(&m_bg, &m_tug, vec![100.0, 200.0, 300.0], ScenarioId::S2).unwrap();
        for (a, b) in curve.delta.iter().zip(&swapped.delta) {
            assert_eq!(*a, -*b);
        }
        let spec_swapped = delta_spectrogram(
            &tensors,
            ClassLabel::Background,
            ClassLabel::Tug,
            ScenarioId::S2,
        )
        .unwrap();
        for (a, b) in spec.values.iter().zip(spec_swapped.values.iter()) {
            assert_eq!(*a, -*b);
        }

        // Duplicating the clip list leaves the means unchanged.
        let mut doubled = tensors.clone();
        doubled.extend(tensors.clone());
        let m2 = class_mean_activation(&doubled, ClassLabel::Tug).unwrap();
        for (a, b) in m_tug.iter().zip(&m2) {
            assert!((a - b).abs() < 1e-12);
        }

        // Identical class statistics give an all-zero delta.
        let zero = delta_curve(&m_tug, &m_tug, vec![100.0, 200.0, 300.0], ScenarioId::S2).unwrap();
        assert!(zero.delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn active_filter_counting() {
        assert_eq!(active_filter_count(&[1.0f64, 0.0, 0.0], 0.5).unwrap(), 1);
        assert_eq!(active_filter_count(&[0.4f64, 0.4, 0.4, 0.4], 0.2).unwrap(), 4);
        assert_eq!(active_filter_count(&[0.0f64; 8], 0.2).unwrap(), 0);
        assert_eq!(
            active_filter_count(&[-1.0f64, 0.3, 0.1], 0.25).unwrap(),
            2
        );
        assert!(active_filter_count(&[1.0f64], 0.0).is_err());
    }

    #[test]
    fn tensors_report_in_ascending_frequency_order() {
        let mut cfg = FrontendConfig::new(8000, 4);
        cfg.kernel_width = 101;
        cfg.hop = 80;
        cfg.f_max_hz = 3500.0;
        let mut p = init_filterbank::<f64>(&cfg).unwrap();
        // Scramble the training order.
        p.gabor.mu.swap(0, 3);
        p.gabor.sigma.swap(0, 3);
        let order = channel_order(&p);
        assert_eq!(order, vec![3, 1, 2, 0]);
        let freqs = sorted_center_freqs(&p, 8000);
        for w in freqs.windows(2) {
            assert!(w[0] < w[1]);
        }

        // Pooled-energy tensors work without trained statistics, match
        // frontend config dims, and identical clips give identical tensors.
        let wave = Waveform::new(
            (0..800).map(|i| 0.3 * (0.2 * i as f64).sin()).collect(),
            8000,
        )
        .unwrap();
        let ffts = FftCache::new();
        let clips = vec![
            (wave.clone(), ClassLabel::Tug, ScenarioId::S1),
            (wave, ClassLabel::Tug, ScenarioId::S1),
        ];
        let tensors =
            activation_tensors(&p, 8000, &clips, ActivationStage::PooledEnergy, &ffts).unwrap();
        assert_eq!(tensors[0].values.dim(), (4, 10));
        assert_eq!(tensors[0].values, tensors[1].values);

        // Normalized stage without trained stats is the documented error.
        assert!(activation_tensors(&p, 8000, &clips, ActivationStage::Normalized, &ffts).is_err());
        // Wrong sample rate is an input error.
        assert!(activation_tensors(&p, 16000, &clips, ActivationStage::PooledEnergy, &ffts)
            .is_err());
    }

    #[test]
    fn export_roundtrip_recovers_values() {
        let dir = tempfile::tempdir().unwrap();
        let curve = DeltaCurve {
            delta: vec![0.1234567890123_f64, -7.5e-11, 3.0],
            center_freq_hz: vec![100.5, 230.25, 801.125],
            scenario: ScenarioId::S1,
        };
        let spec = DeltaSpectrogram {
            values: Array2::from_shape_fn((3, 4), |(k, t)| (k as f64 - 1.0) * 0.017 + t as f64),
            scenario: ScenarioId::S1,
        };
        let files = export_analysis(&[curve.clone()], &[spec.clone()], dir.path()).unwrap();
        assert_eq!(files.len(), 2);

        let curve_text = fs::read_to_string(&files[0]).unwrap();
        let mut lines = curve_text.lines();
        assert_eq!(lines.next().unwrap(), "filter_index,center_freq_hz,delta");
        let mut prev_freq = f64::NEG_INFINITY;
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            assert_eq!(parts[0].parse::<usize>().unwrap(), i);
            let f: f64 = parts[1].parse().unwrap();
            let d: f64 = parts[2].parse().unwrap();
            assert!(f > prev_freq);
            prev_freq = f;
            assert!((d - curve.delta[i]).abs() <= 1e-9 * curve.delta[i].abs().max(1.0));
        }

        let spec_text = fs::read_to_string(&files[1]).unwrap();
        let mut lines = spec_text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "filter_index,frame_0,frame_1,frame_2,frame_3"
        );
        for (k, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            for t in 0..4 {
                let v: f64 = parts[t + 1].parse().unwrap();
                assert_eq!(v, spec.values[(k, t)]);
            }
        }
    }
}
