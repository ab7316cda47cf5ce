//! Manifest-driven corpus ingestion: CSV manifest loading with itemized
//! validation, clip loading/normalization, metadata statistics, and
//! deterministic epoch batching.

pub mod wav;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::types::{reflect_index, ClassLabel, CtdsvStats, ScenarioId, Split, Waveform};

/// Exact manifest header, in column order.
pub const MANIFEST_HEADER: [&str; 10] = [
    "path",
    "label",
    "scenario",
    "distance_km",
    "conductivity",
    "temperature",
    "depth",
    "salinity",
    "sound_velocity",
    "split",
];

/// One manifest row. `distance_km` is empty for background clips.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub path: String,
    pub label: ClassLabel,
    pub scenario: ScenarioId,
    pub distance_km: Option<f64>,
    pub ctdsv: [f64; 5],
    pub split: Split,
}

/// A validated manifest with its base directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row indices belonging to a split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Restricts the dataset to a scenario subset, preserving row order.
    pub fn filter_scenarios(&self, subset: &[ScenarioId]) -> Dataset {
        Dataset {
            root: self.root.clone(),
            rows: self
                .rows
                .iter()
                .filter(|row| subset.contains(&row.scenario))
                .cloned()
                .collect(),
        }
    }

    /// Per-(class, scenario) row counts, indexed `[class][scenario]`.
    pub fn cell_counts(&self) -> [[usize; 3]; 5] {
        let mut counts = [[0usize; 3]; 5];
        for row in &self.rows {
            counts[row.label.index()][row.scenario.index()] += 1;
        }
        counts
    }

    /// Classes that have no rows in the given split.
    pub fn empty_classes(&self, split: Split) -> Vec<ClassLabel> {
        let mut seen = [false; 5];
        for row in self.rows.iter().filter(|row| row.split == split) {
            seen[row.label.index()] = true;
        }
        ClassLabel::ALL
            .into_iter()
            .filter(|c| !seen[c.index()])
            .collect()
    }
}

/// Loads and validates a manifest. Every problem is reported with its line
/// number; the dataset is returned only when the error list is empty.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let expected: Vec<&str> = MANIFEST_HEADER.to_vec();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Data(format!(
            "{}: header mismatch: expected `{}`, got `{}`",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut seen_paths: HashSet<String> = HashSet::new();
    for record in reader.records() {
        let record = match record {
            Ok(rec) => rec,
            Err(e) => {
                errors.push(format!("{e}"));
                continue;
            }
        };
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();

        let rel_path = field(0);
        if rel_path.is_empty() {
            errors.push(format!("line {line}: empty path"));
            continue;
        }
        if !seen_paths.insert(rel_path.clone()) {
            errors.push(format!("line {line}: duplicate path `{rel_path}`"));
            continue;
        }
        if !root.join(&rel_path).is_file() {
            errors.push(format!("line {line}: missing file `{rel_path}`"));
        }
        let label = match ClassLabel::parse(&field(1)) {
            Some(label) => label,
            None => {
                errors.push(format!("line {line}: unknown label `{}`", field(1)));
                continue;
            }
        };
        let scenario = match ScenarioId::parse(&field(2)) {
            Some(s) => s,
            None => {
                errors.push(format!("line {line}: unknown scenario `{}`", field(2)));
                continue;
            }
        };
        let distance_km = {
            let raw = field(3);
            if raw.is_empty() {
                None
            } else {
                match raw.parse::<f64>() {
                    Ok(d) => Some(d),
                    Err(_) => {
                        errors.push(format!("line {line}: bad distance `{raw}`"));
                        continue;
                    }
                }
            }
        };
        let mut ctdsv = [0.0f64; 5];
        let mut ok = true;
        for (j, slot) in ctdsv.iter_mut().enumerate() {
            let raw = field(4 + j);
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => *slot = v,
                _ => {
                    errors.push(format!(
                        "line {line}: bad {} value `{raw}`",
                        MANIFEST_HEADER[4 + j]
                    ));
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let split = match Split::parse(&field(9)) {
            Some(s) => s,
            None => {
                errors.push(format!("line {line}: unknown split `{}`", field(9)));
                continue;
            }
        };
        rows.push(ManifestRow {
            path: rel_path,
            label,
            scenario,
            distance_km,
            ctdsv,
            split,
        });
    }

    if rows.is_empty() && errors.is_empty() {
        errors.push("no rows".into());
    }
    if !errors.is_empty() {
        return Err(Error::Data(format!(
            "{}: {} validation error(s): {}",
            path.display(),
            errors.len(),
            errors.join("; ")
        )));
    }
    Ok(Dataset { root, rows })
}

/// Loads one clip: PCM-16 mono at the expected rate, scaled by 1/32768,
/// reflect-padded or center-cropped to exactly `n_samples`.
pub fn load_clip<T: Real>(
    root: &Path,
    row: &ManifestRow,
    expected_rate: u32,
    n_samples: usize,
) -> Result<Waveform<T>> {
    let path = root.join(&row.path);
    let (pcm, rate, channels) = wav::read_wav_pcm16(&path)?;
    if channels != 1 {
        return Err(Error::Data(format!(
            "{}: expected mono, got {channels} channels",
            path.display()
        )));
    }
    if rate != expected_rate {
        return Err(Error::Data(format!(
            "{}: sample rate {rate} does not match configured {expected_rate} (no resampling)",
            path.display()
        )));
    }
    if pcm.is_empty() {
        return Err(Error::Data(format!("{}: empty audio", path.display())));
    }
    let scale = T::one() / r::<T>(32768.0);
    let unit: Vec<T> = pcm.iter().map(|&q| r::<T>(q as f64) * scale).collect();
    let samples = if unit.len() == n_samples {
        unit
    } else if unit.len() > n_samples {
        let start = (unit.len() - n_samples) / 2;
        unit[start..start + n_samples].to_vec()
    } else {
        (0..n_samples)
            .map(|i| unit[reflect_index(i as isize, unit.len())])
            .collect()
    };
    Waveform::new(samples, expected_rate)
}

/// A dataset with all audio resident in memory (stored as `f32`, which is
/// exact for PCM-16 data).
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub samples: Vec<Vec<f32>>,
    pub sample_rate: u32,
    pub n_samples: usize,
}

/// Loads every clip in parallel; results land at their row index so loader
/// parallelism never changes anything.
pub fn load_all_clips(ds: Dataset, expected_rate: u32, n_samples: usize) -> Result<LoadedDataset> {
    let samples: Vec<Vec<f32>> = ds
        .rows
        .par_iter()
        .map(|row| load_clip::<f32>(&ds.root, row, expected_rate, n_samples).map(|w| w.samples))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        dataset: ds,
        samples,
        sample_rate: expected_rate,
        n_samples,
    })
}

/// Z-score statistics over the given rows (train split), population
/// variance. Constant fields pass through with a unit divisor and a
/// recorded warning.
pub fn ctdsv_stats(ds: &Dataset, indices: &[usize]) -> (CtdsvStats<f64>, Vec<String>) {
    assert!(!indices.is_empty(), "statistics need a non-empty split");
    let n = indices.len() as f64;
    let mut mean = [0.0f64; 5];
    for &i in indices {
        for j in 0..5 {
            mean[j] += ds.rows[i].ctdsv[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut std = [0.0f64; 5];
    for &i in indices {
        for j in 0..5 {
            let d = ds.rows[i].ctdsv[j] - mean[j];
            std[j] += d * d;
        }
    }
    let mut warnings = Vec::new();
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            warnings.push(format!(
                "{} is constant over the training split; normalizing with unit divisor",
                MANIFEST_HEADER[4 + j]
            ));
            *s = 1.0;
        }
    }
    (CtdsvStats { mean, std }, warnings)
}

/// Deterministic epoch permutation drawn from `(epoch_seed, epoch)`.
pub fn epoch_permutation(n: usize, epoch_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Splits a permutation into batches, keeping the last partial batch.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.csv");
        let header = MANIFEST_HEADER.join(",");
        fs::write(&path, format!("{header}\n{body}")).unwrap();
        path
    }

    fn write_tone(dir: &Path, name: &str, n: usize, rate: u32) {
        let samples: Vec<f32> = (0..n).map(|i| 0.4 * (0.3 * i as f32).sin()).collect();
        wav::write_wav_pcm16(&dir.join(name), &samples, rate).unwrap();
    }

    #[test]
    fn toy_manifest_roundtrip_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.wav", "b.wav", "c.wav"] {
            write_tone(dir.path(), name, 800, 8000);
        }
        let body = "\
a.wav,Tug,S1,1.5,3.2,9.0,50.0,30.0,1480.0,train
b.wav,Background,S2,,3.4,10.0,100.0,31.0,1485.0,train
c.wav,Cargo,S3,2.0,3.6,11.0,150.0,32.0,1490.0,train";
        let path = write_manifest(dir.path(), body);
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.rows[1].distance_km, None);

        // Frozen hand-computed statistics (population std).
        let idx: Vec<usize> = vec![0, 1, 2];
        let (stats, warnings) = ctdsv_stats(&ds, &idx);
        assert!(warnings.is_empty());
        let expect_mean = [3.4, 10.0, 100.0, 31.0, 1485.0];
        let expect_std = [
            0.16329931618554516,
            0.816496580927726,
            40.824829046386306,
            0.816496580927726,
            4.08248290463863,
        ];
        for j in 0..5 {
            assert!((stats.mean[j] - expect_mean[j]).abs() < 1e-12);
            assert!((stats.std[j] - expect_std[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_warns_and_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.wav", "b.wav"] {
            write_tone(dir.path(), name, 100, 8000);
        }
        let body = "\
a.wav,Tug,S1,1.0,3.0,9.0,50.0,30.0,1480.0,train
b.wav,Tug,S1,1.2,3.0,10.0,60.0,31.0,1482.0,train";
        let ds = load_manifest(&write_manifest(dir.path(), body)).unwrap();
        let (stats, warnings) = ctdsv_stats(&ds, &[0, 1]);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("conductivity"));
        assert_eq!(stats.std[0], 1.0);
        // Normalized value of the constant field is 0.
        let z = stats.normalize(ds.rows[0].ctdsv);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn validation_errors_name_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write_tone(dir.path(), "a.wav", 100, 8000);
        let body = "\
a.wav,Tug,S1,1.0,3.0,9.0,50.0,30.0,1480.0,train
a.wav,Sailboat,S9,1.0,3.0,9.0,50.0,30.0,1480.0,dev
ghost.wav,Tug,S1,1.0,3.0,9.0,50.0,30.0,1480.0,train";
        let err = load_manifest(&write_manifest(dir.path(), body)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("duplicate path") || msg.contains("Sailboat"), "{msg}");
        assert!(msg.contains("line 4") && msg.contains("missing file"), "{msg}");
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&write_manifest(dir.path(), "")).unwrap_err();
        assert!(err.to_string().contains("no rows"));
    }

    #[test]
    fn pcm_scaling_and_length_rules() {
        let dir = tempfile::tempdir().unwrap();
        // Full-scale negative sample maps to exactly -1.0.
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let p = dir.path().join("edge.wav");
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for q in [-32768i16, 0, 16384, 32767] {
            w.write_sample(q).unwrap();
        }
        w.finalize().unwrap();
        let row = ManifestRow {
            path: "edge.wav".into(),
            label: ClassLabel::Tug,
            scenario: ScenarioId::S1,
            distance_km: None,
            ctdsv: [0.0; 5],
            split: Split::Train,
        };
        let wave = load_clip::<f64>(dir.path(), &row, 8000, 4).unwrap();
        assert_eq!(wave.samples[0], -1.0);
        assert_eq!(wave.samples[1], 0.0);
        assert_eq!(wave.samples[2], 0.5);

        // Half-length file reflect-pads to the requested length.
        write_tone(dir.path(), "short.wav", 400, 8000);
        let row = ManifestRow {
            path: "short.wav".into(),
            ..row.clone()
        };
        let wave = load_clip::<f64>(dir.path(), &row, 8000, 800).unwrap();
        assert_eq!(wave.samples.len(), 800);
        // Reflection: sample 400 mirrors sample 398 (no edge repeat).
        assert_eq!(wave.samples[400], wave.samples[398]);

        // Long file center-crops.
        write_tone(dir.path(), "long.wav", 1000, 8000);
        let row = ManifestRow {
            path: "long.wav".into(),
            ..row.clone()
        };
        let wave = load_clip::<f64>(dir.path(), &row, 8000, 800).unwrap();
        assert_eq!(wave.samples.len(), 800);

        // Wrong sample rate is an error, never resampled.
        let row = ManifestRow {
            path: "long.wav".into(),
            ..row
        };
        assert!(load_clip::<f64>(dir.path(), &row, 16000, 800).is_err());
    }

    #[test]
    fn batching_and_permutations() {
        let order = epoch_permutation(10, 42, 0);
        let again = epoch_permutation(10, 42, 0);
        assert_eq!(order, again);
        let other_epoch = epoch_permutation(10, 42, 1);
        assert_eq!(other_epoch.len(), 10);

        let b = batches(&order, 4);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].len(), 4);
        assert_eq!(b[1].len(), 4);
        assert_eq!(b[2].len(), 2);

        // The permutation is a permutation.
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stats_ignore_other_splits() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.wav", "b.wav", "c.wav", "d.wav"] {
            write_tone(dir.path(), name, 100, 8000);
        }
        let body = "\
a.wav,Tug,S1,1.0,3.0,9.0,50.0,30.0,1480.0,train
b.wav,Tug,S1,1.0,3.5,9.5,55.0,30.5,1483.0,train
c.wav,Tug,S1,1.0,99.0,99.0,99.0,99.0,9999.0,val
d.wav,Tug,S1,1.0,77.0,77.0,77.0,77.0,7777.0,test";
        let ds = load_manifest(&write_manifest(dir.path(), body)).unwrap();
        let train_idx = ds.split_indices(Split::Train);
        let (stats_full, _) = ctdsv_stats(&ds, &train_idx);
        // Deleting the val/test rows leaves the statistics untouched.
        let trimmed = Dataset {
            root: ds.root.clone(),
            rows: ds.rows[..2].to_vec(),
        };
        let (stats_trim, _) = ctdsv_stats(&trimmed, &[0, 1]);
        assert_eq!(stats_full, stats_trim);
    }
}
