//! Shared domain types: waveforms, time-frequency maps, class labels,
//! scenarios, and environmental metadata vectors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Number of target classes.
pub const N_CLASSES: usize = 5;

/// Five-way clip label: four vessel types plus ambient background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Tug,
    Tanker,
    Cargo,
    Passengership,
    Background,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; N_CLASSES] = [
        ClassLabel::Tug,
        ClassLabel::Tanker,
        ClassLabel::Cargo,
        ClassLabel::Passengership,
        ClassLabel::Background,
    ];

    /// Stable class index, 0..4 in declaration order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Tug => "Tug",
            ClassLabel::Tanker => "Tanker",
            ClassLabel::Cargo => "Cargo",
            ClassLabel::Passengership => "Passengership",
            ClassLabel::Background => "Background",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == s)
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Recording scenario, defined by vessel inclusion/exclusion radii.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    S1,
    S2,
    S3,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [ScenarioId::S1, ScenarioId::S2, ScenarioId::S3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::S1 => "S1",
            ScenarioId::S2 => "S2",
            ScenarioId::S3 => "S3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|x| x.name() == s)
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One mono audio clip with unit-normalized samples.
#[derive(Debug, Clone)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    /// Builds a waveform, validating the amplitude invariant: every sample
    /// finite and within `[-1, 1]`.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Data(format!("non-finite sample at index {i}")));
            }
            if s.abs() > T::one() {
                return Err(Error::Data(format!(
                    "sample amplitude {} at index {i} exceeds 1",
                    s
                )));
            }
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Processing stage of a filterbank output map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Squared-modulus filter output at full rate; nonnegative.
    Energy,
    /// Gaussian-smoothed and subsampled energy; nonnegative.
    Pooled,
    /// After per-band log compression.
    Compressed,
    /// After temporal batch normalization and affine.
    Normalized,
}

/// A channels-by-frames real matrix tagged with its processing stage.
#[derive(Debug, Clone)]
pub struct TimeFreqMap<T> {
    pub values: Array2<T>,
    pub stage: Stage,
}

impl<T: Real> TimeFreqMap<T> {
    pub fn new(values: Array2<T>, stage: Stage) -> Self {
        TimeFreqMap { values, stage }
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Environmental metadata quintuple. Units are raw (S/m, degC, m, PSU, m/s)
/// until z-scored by the data pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtdsvVector<T> {
    pub conductivity: T,
    pub temperature: T,
    pub depth: T,
    pub salinity: T,
    pub sound_velocity: T,
}

impl<T: Real> CtdsvVector<T> {
    pub fn from_array(a: [T; 5]) -> Self {
        CtdsvVector {
            conductivity: a[0],
            temperature: a[1],
            depth: a[2],
            salinity: a[3],
            sound_velocity: a[4],
        }
    }

    pub fn to_array(self) -> [T; 5] {
        [
            self.conductivity,
            self.temperature,
            self.depth,
            self.salinity,
            self.sound_velocity,
        ]
    }
}

/// Z-score statistics for the metadata quintuple, computed on the training
/// split and stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtdsvStats<T> {
    pub mean: [T; 5],
    pub std: [T; 5],
}

impl<T: Real> CtdsvStats<T> {
    /// Pass-through statistics (mean 0, std 1).
    pub fn identity() -> Self {
        CtdsvStats {
            mean: [T::zero(); 5],
            std: [T::one(); 5],
        }
    }

    pub fn normalize(&self, raw: [T; 5]) -> [T; 5] {
        let mut out = [T::zero(); 5];
        for i in 0..5 {
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
        out
    }

    pub fn cast<U: Real>(&self) -> CtdsvStats<U> {
        let mut mean = [U::zero(); 5];
        let mut std = [U::zero(); 5];
        for i in 0..5 {
            mean[i] = crate::real::r(self.mean[i].as_f64());
            std[i] = crate::real::r(self.std[i].as_f64());
        }
        CtdsvStats { mean, std }
    }
}

/// Train/validation/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|x| x.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Reflect-pad index mapping without edge repetition: `-1 -> 1`,
/// `n -> n-2`. Valid for any overhang when `n >= 2` (wraps periodically
/// with period `2n-2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_label_roundtrip() {
        for c in ClassLabel::ALL {
            assert_eq!(ClassLabel::parse(c.name()), Some(c));
            assert_eq!(ClassLabel::from_index(c.index()), Some(c));
        }
        assert_eq!(ClassLabel::parse("Sailboat"), None);
    }

    #[test]
    fn waveform_rejects_bad_samples() {
        assert!(Waveform::new(vec![0.0f64, f64::NAN], 16000).is_err());
        assert!(Waveform::new(vec![0.0f64, 1.5], 16000).is_err());
        assert!(Waveform::new(vec![0.5f64, -1.0, 1.0], 16000).is_ok());
    }

    #[test]
    fn reflect_mapping() {
        // n = 5: indices reflect as -1->1, -2->2, 5->3, 6->2.
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        // Deep overhang wraps with period 2n-2 = 8.
        assert_eq!(reflect_index(8, 5), 0);
        assert_eq!(reflect_index(9, 5), 1);
    }
}
