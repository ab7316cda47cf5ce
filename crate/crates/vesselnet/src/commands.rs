//! Command implementations behind the CLI: dataset generation, training,
//! evaluation, the pooling/metadata ablation grid, and filter analysis.
//! Each command writes its resolved configuration snapshot into the output
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{
    self, activation_tensors, active_filter_count, class_mean_activation, delta_curve,
    delta_spectrogram, export_analysis, ActivationStage,
};
use crate::config::{parse_scenarios, subset_tag, RunConfig};
use crate::dataio::{self, LoadedDataset};
use crate::error::{Error, Result};
use crate::fft::FftCache;
use crate::model::{ModelConfig, ModelState, PoolingMode};
use crate::optim::metrics::Metrics;
use crate::optim::{self, TrainSettings};
use crate::synthgen;
use crate::types::{ClassLabel, ScenarioId, Split, Waveform};

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .data
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory configured".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn load_filtered(
    manifest: &Path,
    subset: &[ScenarioId],
    sample_rate: u32,
    n_samples: usize,
) -> Result<LoadedDataset> {
    let ds = dataio::load_manifest(manifest)?;
    let filtered = ds.filter_scenarios(subset);
    if filtered.is_empty() {
        return Err(Error::Data(format!(
            "no manifest rows left after filtering to {}",
            subset_tag(subset)
        )));
    }
    dataio::load_all_clips(filtered, sample_rate, n_samples)
}

pub struct GenSummary {
    pub manifest: PathBuf,
    pub n_rows: usize,
}

/// Generates the synthetic dataset into the output directory.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary> {
    let dir = out_dir(cfg)?;
    write_snapshot(cfg, &dir)?;
    let synth = cfg.synth_config();
    let manifest = with_pool(cfg.train.threads, || synthgen::gen_dataset(&synth, &dir))?;
    let n_rows = synth.clips_per_cell * 15;
    Ok(GenSummary { manifest, n_rows })
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub best_val_accuracy: f64,
    pub train_rows: usize,
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest configured".into()))
}

/// Trains on the configured scenario subset and writes the best-validation
/// checkpoint plus the history CSV.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let dir = out_dir(cfg)?;
    write_snapshot(cfg, &dir)?;
    let model_config = cfg.model_config()?;
    let subset = cfg.scenario_subset()?;
    let settings = cfg.train_settings();
    let manifest = manifest_path(cfg)?;

    let (output, train_rows) = with_pool(cfg.train.threads, || {
        let data = load_filtered(
            &manifest,
            &subset,
            model_config.sample_rate,
            model_config.n_samples,
        )?;
        let out = optim::train::<f32>(model_config.clone(), &data, &settings)?;
        Ok((out, data.dataset.split_indices(Split::Train).len()))
    })?;

    let checkpoint = dir.join("model.ckpt");
    optim::save_checkpoint(&output.best, &checkpoint)?;
    let history = dir.join("history.csv");
    fs::write(&history, output.history.to_csv()).map_err(|e| Error::io(&history, e))?;
    Ok(TrainSummary {
        checkpoint,
        history,
        best_val_accuracy: output.best_val_accuracy,
        train_rows,
    })
}

/// Evaluates a checkpoint on the test split. Explicitly requested pooling
/// or metadata settings that contradict the checkpoint's stored
/// configuration are configuration errors.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    requested_pooling: Option<PoolingMode>,
    requested_ctdsv: Option<bool>,
) -> Result<(PathBuf, Metrics)> {
    let dir = out_dir(cfg)?;
    write_snapshot(cfg, &dir)?;
    let model = optim::load_checkpoint(checkpoint)?;
    if let Some(p) = requested_pooling {
        if p != model.config.pooling {
            return Err(Error::Config(format!(
                "checkpoint was trained with {} pooling but {} was requested",
                model.config.pooling.name(),
                p.name()
            )));
        }
    }
    if let Some(c) = requested_ctdsv {
        if c != model.config.use_ctdsv {
            return Err(Error::Config(format!(
                "checkpoint was trained with use_ctdsv = {} but {} was requested",
                model.config.use_ctdsv, c
            )));
        }
    }
    let subset = cfg.scenario_subset()?;
    let manifest = manifest_path(cfg)?;
    let metrics = with_pool(cfg.train.threads, || {
        let data = load_filtered(
            &manifest,
            &subset,
            model.config.sample_rate,
            model.config.n_samples,
        )?;
        let ffts = FftCache::new();
        optim::evaluate(&model, &data, Split::Test, cfg.train.batch_size, &ffts)
    })?;
    let path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok((path, metrics))
}

/// One ablation-grid result row.
#[derive(Debug, Clone)]
pub struct AblateRow {
    pub subset: String,
    pub pooling: PoolingMode,
    pub use_ctdsv: bool,
    pub median_accuracy: f64,
    pub n_seeds: usize,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains and evaluates one configuration cell; used by the ablation grid
/// and directly by the acceptance suite.
pub fn train_eval_cell(
    base: &ModelConfig,
    data: &LoadedDataset,
    settings: &TrainSettings,
    pooling: PoolingMode,
    use_ctdsv: bool,
) -> Result<(f64, ModelState<f32>)> {
    let mut mc = base.clone();
    mc.pooling = pooling;
    mc.use_ctdsv = use_ctdsv;
    let out = optim::train::<f32>(mc, data, settings)?;
    let ffts = FftCache::new();
    let metrics = optim::evaluate(&out.best, data, Split::Test, settings.batch_size, &ffts)?;
    Ok((metrics.accuracy, out.best))
}

/// Runs the 2x2 {attention, max} x {metadata, none} grid over the
/// configured scenario subsets and seeds, writing per-run details and the
/// per-cell medians.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(PathBuf, Vec<AblateRow>)> {
    let dir = out_dir(cfg)?;
    write_snapshot(cfg, &dir)?;
    let base = cfg.model_config()?;
    let manifest = manifest_path(cfg)?;
    let mut settings = cfg.train_settings();
    if let Some(epochs) = cfg.ablate.epochs {
        settings.epochs = epochs;
    }
    let cells = [
        (PoolingMode::Attention, true),
        (PoolingMode::Attention, false),
        (PoolingMode::Max, true),
        (PoolingMode::Max, false),
    ];

    let mut rows = Vec::new();
    let mut detail = String::from("subset,pooling,use_ctdsv,seed,test_accuracy\n");
    for subset_names in &cfg.ablate.subsets {
        let subset = parse_scenarios(subset_names)?;
        let tag = subset_tag(&subset);
        let data = with_pool(cfg.train.threads, || {
            load_filtered(&manifest, &subset, base.sample_rate, base.n_samples)
        })?;
        for (pooling, use_ctdsv) in cells {
            let mut accs = Vec::new();
            for &seed in &cfg.ablate.seeds {
                let mut s = settings.clone();
                s.seed = seed;
                let (acc, _) = with_pool(cfg.train.threads, || {
                    train_eval_cell(&base, &data, &s, pooling, use_ctdsv)
                })?;
                detail.push_str(&format!(
                    "{tag},{},{},{seed},{acc}\n",
                    pooling.name(),
                    use_ctdsv
                ));
                accs.push(acc);
            }
            rows.push(AblateRow {
                subset: tag.clone(),
                pooling,
                use_ctdsv,
                median_accuracy: median(accs.clone()),
                n_seeds: accs.len(),
            });
        }
    }

    let detail_path = dir.join("ablation_runs.csv");
    fs::write(&detail_path, detail).map_err(|e| Error::io(&detail_path, e))?;
    let path = dir.join("ablation.csv");
    let mut body = String::from("subset,pooling,use_ctdsv,median_test_accuracy,n_seeds\n");
    for row in &rows {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            row.subset,
            row.pooling.name(),
            row.use_ctdsv,
            row.median_accuracy,
            row.n_seeds
        ));
    }
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok((path, rows))
}

/// Filter-activation analysis over the test split of each scenario:
/// Tug-vs-Background delta curves, delta spectrograms, and active-filter
/// counts, exported as CSV.
pub fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    write_snapshot(cfg, &dir)?;
    let model = optim::load_checkpoint(checkpoint)?;
    let manifest = manifest_path(cfg)?;
    let subset = cfg.scenario_subset()?;

    with_pool(cfg.train.threads, || {
        let data = load_filtered(
            &manifest,
            &subset,
            model.config.sample_rate,
            model.config.n_samples,
        )?;
        let ffts = FftCache::new();
        let test_idx = data.dataset.split_indices(Split::Test);

        let mut curves = Vec::new();
        let mut spectrograms = Vec::new();
        let mut counts = Vec::new();
        for &scenario in &subset {
            let clips: Vec<(Waveform<f32>, ClassLabel, ScenarioId)> = test_idx
                .iter()
                .filter_map(|&i| {
                    let row = &data.dataset.rows[i];
                    if row.scenario == scenario
                        && (row.label == ClassLabel::Tug || row.label == ClassLabel::Background)
                    {
                        Some((
                            Waveform {
                                samples: data.samples[i].clone(),
                                sample_rate: data.sample_rate,
                            },
                            row.label,
                            row.scenario,
                        ))
                    } else {
                        None
                    }
                })
                .collect();
            let tensors = activation_tensors(
                &model.frontend,
                model.config.sample_rate,
                &clips,
                ActivationStage::Normalized,
                &ffts,
            )?;
            let mean_tug = class_mean_activation(&tensors, ClassLabel::Tug)?;
            let mean_bg = class_mean_activation(&tensors, ClassLabel::Background)?;
            let freqs =
                analysis::sorted_center_freqs(&model.frontend, model.config.sample_rate);
            let curve = delta_curve(&mean_tug, &mean_bg, freqs, scenario)?;
            let count =
                active_filter_count(&curve.delta, analysis::ACTIVE_FILTER_THRESHOLD)?;
            counts.push((scenario, count));
            curves.push(curve);
            spectrograms.push(delta_spectrogram(
                &tensors,
                ClassLabel::Tug,
                ClassLabel::Background,
                scenario,
            )?);
        }

        let mut written = export_analysis(&curves, &spectrograms, &dir)?;
        let counts_path = dir.join("active_filter_counts.csv");
        let mut body = String::from("scenario,active_filters\n");
        for (scenario, count) in counts {
            body.push_str(&format!("{scenario},{count}\n"));
        }
        fs::write(&counts_path, body).map_err(|e| Error::io(&counts_path, e))?;
        written.push(counts_path);
        Ok(written)
    })
}
