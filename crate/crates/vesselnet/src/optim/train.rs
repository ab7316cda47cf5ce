//! Joint training loop: shuffled mini-batches, one Adam update over the
//! frontend and classifier parameters per step, running-statistic updates,
//! per-epoch validation, and best-checkpoint retention.

use crate::dataio::{self, LoadedDataset};
use crate::error::{Error, Result};
use crate::fft::FftCache;
use crate::frontend::Mode;
use crate::model::{apply_stats_update, model_step, ModelConfig, ModelState};
use crate::optim::adam::{adam_step, AdamConfig, AdamState};
use crate::optim::metrics::{clip_inputs, evaluate};
use crate::real::Real;
use crate::types::{ScenarioId, Split};

/// Training hyperparameters (model shape lives in [`ModelConfig`]).
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One history row.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub per_scenario: [Option<f64>; 3],
}

/// Per-run history: the training-row count, one record per epoch, and any
/// warnings (constant metadata fields, empty classes).
#[derive(Debug, Clone, Default)]
pub struct History {
    pub train_rows: usize,
    pub records: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl History {
    /// History CSV: a `# train_rows=N` comment line, a header, then one row
    /// per epoch with blank per-scenario columns where a scenario is absent.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# train_rows={}\n", self.train_rows);
        out.push_str("epoch,train_loss,val_accuracy,val_accuracy_S1,val_accuracy_S2,val_accuracy_S3\n");
        for rec in &self.records {
            let scen: Vec<String> = rec
                .per_scenario
                .iter()
                .map(|s| s.map(|v| v.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                rec.epoch,
                rec.train_loss,
                rec.val_accuracy,
                scen[0],
                scen[1],
                scen[2]
            ));
        }
        out
    }
}

/// Result of a training run: the best-validation model, the final model,
/// and the history.
pub struct TrainOutput<T> {
    pub best: ModelState<T>,
    pub last: ModelState<T>,
    pub best_val_accuracy: f64,
    pub history: History,
}

/// Trains a freshly initialized model on the train split, validating per
/// epoch. Deterministic for a fixed seed: initialization, shuffling, and
/// every reduction are order-pinned.
pub fn train<T: Real>(
    config: ModelConfig,
    data: &LoadedDataset,
    settings: &TrainSettings,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    if settings.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if data.sample_rate != config.sample_rate {
        return Err(Error::Data(format!(
            "dataset loaded at {} Hz but config expects {} Hz",
            data.sample_rate, config.sample_rate
        )));
    }
    let train_idx = data.dataset.split_indices(Split::Train);
    let val_idx = data.dataset.split_indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::Data("val split is empty".into()));
    }

    let mut history = History {
        train_rows: train_idx.len(),
        ..Default::default()
    };
    for class in data.dataset.empty_classes(Split::Train) {
        history
            .warnings
            .push(format!("class {class} has no rows in the train split"));
    }

    let mut model: ModelState<T> = ModelState::init(config, settings.seed)?;
    let (stats, stat_warnings) = dataio::ctdsv_stats(&data.dataset, &train_idx);
    history.warnings.extend(stat_warnings);
    model.ctdsv_stats = stats.cast();

    let mut adam = AdamState::new(&mut model);
    let ffts = FftCache::new();
    let mut best: Option<(f64, ModelState<T>)> = None;

    for epoch in 0..settings.epochs {
        let order = dataio::epoch_permutation(train_idx.len(), settings.seed, epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(settings.batch_size.max(1)).enumerate() {
            let rows: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let clips = clip_inputs(&model, data, &rows);
            let out = model_step(&model, &clips, Mode::Train, true, &ffts).map_err(|e| {
                match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("epoch {epoch} batch {bi}: {msg}"))
                    }
                    other => other,
                }
            })?;
            apply_stats_update(&mut model, &out);
            let grads = out.grads.expect("gradients requested");
            adam_step(&mut model, &grads, &mut adam, &settings.adam)?;
            loss_sum += out.mean_loss.as_f64();
            n_batches += 1;
        }

        let val = evaluate(&model, data, Split::Val, settings.batch_size, &ffts)?;
        let mut per_scenario = [None; 3];
        for s in ScenarioId::ALL {
            per_scenario[s.index()] = val.per_scenario.get(s.name()).copied();
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_accuracy: val.accuracy,
            per_scenario,
        });
        let better = match &best {
            Some((acc, _)) => val.accuracy > *acc,
            None => true,
        };
        if better {
            best = Some((val.accuracy, model.clone()));
        }
    }

    let (best_val_accuracy, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutput {
        best: best_model,
        last: model,
        best_val_accuracy,
        history,
    })
}
