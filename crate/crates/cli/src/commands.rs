//! The four commands: decompose, train (the experiment pipeline), analyze,
//! and merge.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use lrsl_core::adapters::{spectral_split, AdapterConfig, Scheme, SplitMode};
use lrsl_core::analysis::{
    forgetting_loss, layer_of, projection_analysis, similarity_sweep, write_forgetting_csv,
    write_projection_csv, write_similarity_csv, AnalysisError, BasisSource, ForgettingReport,
    ForgettingRow, ProjectionRow, SimilaritySweep,
};
use lrsl_core::linalg::Matrix;
use lrsl_core::nn::Model;
use lrsl_core::seeds::{derive_seed, fmt_g17};
use lrsl_core::trainer::{
    evaluate_exact_match, generate_task, load_adapter_into, load_checkpoint,
    save_adapter_checkpoint, save_checkpoint, train, write_metrics_csv, Dataset, TaskSpec,
    TrainMode, TrainOutcome,
};

use crate::config::{seed_override_from_env, ExperimentConfig};
use crate::manifest::{sha256_hex, RunManifest};
use crate::CliError;

/// Plain matrix payload for the JSON split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &Matrix) -> Self {
        MatrixData { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() }
    }

    pub fn to_matrix(&self) -> Result<Matrix, CliError> {
        Matrix::from_vec(self.rows, self.cols, self.data.clone())
            .map_err(|e| CliError::DataIntegrity(e.to_string()))
    }
}

/// One weight's split: frozen part plus adapter factors, with the kept
/// singular values for auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub weight: String,
    pub rank: usize,
    pub mode: SplitMode,
    pub selected: Vec<usize>,
    pub sigma: Vec<f64>,
    pub w_p: MatrixData,
    pub b: MatrixData,
    pub a: MatrixData,
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("creating {}: {e}", path.display())))
}

fn effective_seed(configured: u64) -> Result<u64, CliError> {
    Ok(seed_override_from_env()?.unwrap_or(configured))
}

/// Splits every non-norm weight of a checkpoint into a frozen part plus
/// rank-`rank` factors, writing one JSON file per weight and a summary CSV
/// of the kept singular-value ranges.
pub fn cmd_decompose(
    input: &Path,
    rank: usize,
    mode: SplitMode,
    seed: u64,
    output: &Path,
) -> Result<(), CliError> {
    let t0 = Instant::now();
    let seed = effective_seed(seed)?;
    let (model, _) = load_checkpoint(input)?;
    let weights = model.adaptable_weights();

    if rank == 0 {
        return Err(CliError::Usage("rank must be at least 1".to_string()));
    }
    // Validate the rank everywhere before writing anything.
    for (name, _) in &weights {
        let w = model.merged_weight(name)?;
        let k = w.rows().min(w.cols());
        if rank > k {
            return Err(CliError::Usage(format!(
                "rank-too-large: rank {rank} exceeds min dimension {k} of `{name}` ({}x{})",
                w.rows(),
                w.cols()
            )));
        }
    }

    create_dir(output)?;
    let mut summary = String::from("weight,mode,rank,first_index,last_index,sigma_first,sigma_last\n");
    for (name, _) in &weights {
        let w = model.merged_weight(name)?;
        let split = spectral_split(&w, rank, mode, derive_seed(seed, name))?;
        let sigma: Vec<f64> = {
            let f = lrsl_core::linalg::svd(&w)?;
            split.selected.iter().map(|&i| f.sigma[i]).collect()
        };
        let file = SplitFile {
            weight: name.clone(),
            rank,
            mode,
            selected: split.selected.clone(),
            sigma: sigma.clone(),
            w_p: MatrixData::from_matrix(&split.w_p),
            b: MatrixData::from_matrix(&split.b),
            a: MatrixData::from_matrix(&split.a),
        };
        let text = serde_json::to_string(&file)
            .map_err(|e| CliError::Runtime(format!("serializing split of `{name}`: {e}")))?;
        fs::write(output.join(format!("{name}.json")), text)
            .map_err(|e| CliError::Runtime(format!("writing split of `{name}`: {e}")))?;
        summary.push_str(&format!(
            "{name},{mode},{rank},{},{},{},{}\n",
            split.selected.first().expect("rank >= 1"),
            split.selected.last().expect("rank >= 1"),
            fmt_g17(sigma[0]),
            fmt_g17(sigma[rank - 1]),
        ));
    }
    fs::write(output.join("summary.csv"), summary)
        .map_err(|e| CliError::Runtime(format!("writing summary: {e}")))?;
    println!("decomposed {} weights at rank {rank} ({mode}) into {}", weights.len(), output.display());
    RunManifest::new(None, BTreeMap::from([("decompose".to_string(), seed)]), t0.elapsed())
        .write(output)?;
    Ok(())
}

/// Everything the pipeline produces for one scheme.
pub struct SchemeOutcome {
    pub scheme: Scheme,
    pub model: Model,
    pub final_loss: f64,
    pub exact_match: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub forgetting: Option<ForgettingReport>,
}

fn save_run(
    out: &TrainOutcome,
    adapter: Option<&AdapterConfig>,
    dir: &Path,
) -> Result<(), CliError> {
    let mut metrics = BTreeMap::new();
    if let Some(last) = out.metrics.last() {
        metrics.insert("final_loss".to_string(), last.loss);
    }
    let step = out.metrics.last().map(|m| m.step as u64).unwrap_or(0);
    save_checkpoint(&out.model, adapter, step, &metrics, &dir.join("final.ckpt"))?;
    if let Some(cfg) = adapter {
        save_adapter_checkpoint(&out.model, cfg, step, &metrics, &dir.join("adapters.ckpt"))?;
    }
    write_metrics_csv(&out.metrics, &dir.join("metrics.csv"))
        .map_err(|e| CliError::Runtime(format!("writing metrics: {e}")))?;
    Ok(())
}

fn finetune_scheme(
    pretrained: &Model,
    scheme_cfg: &AdapterConfig,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(Model, f64, f64, usize, usize), CliError> {
    let dir = cfg.output_dir.join(scheme_cfg.scheme.as_str());
    create_dir(&dir)?;
    let out = train(
        pretrained.clone(),
        &TrainMode::Adapter(scheme_cfg.clone()),
        &data.train,
        &cfg.finetune.train,
    )?;
    save_run(&out, Some(scheme_cfg), &dir)?;
    let em = if data.eval.is_empty() {
        f64::NAN
    } else {
        evaluate_exact_match(&out.model, &data.eval)?
    };
    let final_loss = out.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    Ok((out.model, final_loss, em, out.trainable_params, out.total_params))
}

fn projection_rows_for(
    pretrained: &Model,
    finetuned: &Model,
    scheme_cfg: &AdapterConfig,
) -> Result<Vec<ProjectionRow>, CliError> {
    let mut rows = Vec::new();
    for (name, _) in finetuned.attachments() {
        let w_base = pretrained.merged_weight(name)?;
        let w_ft = finetuned.merged_weight(name)?;
        let layer = layer_of(name);
        let module = finetuned
            .placement(name)
            .map(|p| p.as_str().to_string())
            .unwrap_or_else(|| "unknown".to_string());
        for basis in [
            BasisSource::Delta(Some(scheme_cfg.scheme)),
            BasisSource::W,
            BasisSource::Random { seed: derive_seed(scheme_cfg.seed, name) },
        ] {
            match projection_analysis(&w_base, &w_ft, scheme_cfg.rank, basis) {
                Ok(report) => rows.push(ProjectionRow { layer, module: module.clone(), report }),
                Err(AnalysisError::ZeroUpdate) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(rows)
}

fn print_sweep_summary(scheme: &str, sweep: &SimilaritySweep) {
    if sweep.zero_update {
        println!("{scheme}: zero update — the models are identical, no similarity records");
        return;
    }
    println!("{scheme}: subspace similarity of the update against the base weight");
    println!("  {:<10} {:>14} {:>14} {:>14}", "layer", "top_r_of_W", "bottom_r_of_W", "random_r_of_W");
    let layers: std::collections::BTreeSet<usize> =
        sweep.layer_means.iter().map(|m| m.layer).collect();
    for layer in layers {
        let get = |target: &str| {
            sweep
                .layer_means
                .iter()
                .find(|m| m.layer == layer && m.target.as_str() == target)
                .map(|m| format!("{:.4}", m.phi))
                .unwrap_or_default()
        };
        println!(
            "  {:<10} {:>14} {:>14} {:>14}",
            layer,
            get("top_r_of_W"),
            get("bottom_r_of_W"),
            get("random_r_of_W")
        );
    }
}

/// Runs the full experiment a config describes. Returns the per-scheme
/// outcomes so library callers (and tests) can inspect them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SchemeOutcome>, CliError> {
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;

    let pretrain_data = generate_task(&cfg.pretrain.task)?;
    let base = Model::new(cfg.model.clone())?;
    println!(
        "pretraining on {} ({} train / {} eval examples, {} steps)...",
        cfg.pretrain.task.kind,
        pretrain_data.train.len(),
        pretrain_data.eval.len(),
        cfg.pretrain.train.total_steps
    );
    let pre_out = train(base, &TrainMode::Full, &pretrain_data.train, &cfg.pretrain.train)?;
    let mut pre_metrics = BTreeMap::new();
    if let Some(last) = pre_out.metrics.last() {
        pre_metrics.insert("final_loss".to_string(), last.loss);
    }
    let pre_step = pre_out.metrics.last().map(|m| m.step as u64).unwrap_or(0);
    save_checkpoint(
        &pre_out.model,
        None,
        pre_step,
        &pre_metrics,
        &cfg.output_dir.join("pretrained.ckpt"),
    )?;
    write_metrics_csv(&pre_out.metrics, &cfg.output_dir.join("pretrain_metrics.csv"))
        .map_err(|e| CliError::Runtime(format!("writing pretrain metrics: {e}")))?;
    let pretrained = pre_out.model;
    if !pretrain_data.eval.is_empty() {
        let em = evaluate_exact_match(&pretrained, &pretrain_data.eval)?;
        println!("pretrain exact match on held-out {}: {:.3}", cfg.pretrain.task.kind, em);
    }

    let finetune_data = generate_task(&cfg.finetune.task)?;
    println!(
        "finetuning {} scheme(s) on {} ({} steps each)...",
        cfg.schemes.len(),
        cfg.finetune.task.kind,
        cfg.finetune.train.total_steps
    );
    let results: Vec<(Model, f64, f64, usize, usize)> = if cfg.parallel_schemes {
        let handles: Vec<_> = std::thread::scope(|scope| {
            let joins: Vec<_> = cfg
                .schemes
                .iter()
                .map(|scheme_cfg| {
                    let pretrained = &pretrained;
                    let finetune_data = &finetune_data;
                    scope.spawn(move || finetune_scheme(pretrained, scheme_cfg, finetune_data, cfg))
                })
                .collect();
            joins
                .into_iter()
                .map(|j| j.join().unwrap_or_else(|_| Err(CliError::Runtime("scheme thread panicked".to_string()))))
                .collect()
        });
        handles.into_iter().collect::<Result<_, _>>()?
    } else {
        cfg.schemes
            .iter()
            .map(|scheme_cfg| finetune_scheme(&pretrained, scheme_cfg, &finetune_data, cfg))
            .collect::<Result<_, _>>()?
    };

    let corpus: Vec<Vec<u32>> = pretrain_data.eval.iter().map(|e| e.tokens.clone()).collect();
    let mut outcomes = Vec::new();
    let mut forgetting_rows = Vec::new();
    for (scheme_cfg, (model, final_loss, em, trainable, total)) in cfg.schemes.iter().zip(results) {
        let dir = cfg.output_dir.join(scheme_cfg.scheme.as_str());
        if cfg.analyses.similarity {
            let sweep = similarity_sweep(&pretrained, &model, scheme_cfg.rank, scheme_cfg.seed)?;
            write_similarity_csv(&sweep.records, &dir.join("similarity.csv"))
                .map_err(|e| CliError::Runtime(format!("writing similarity.csv: {e}")))?;
            print_sweep_summary(scheme_cfg.scheme.as_str(), &sweep);
        }
        if cfg.analyses.projection {
            let rows = projection_rows_for(&pretrained, &model, scheme_cfg)?;
            write_projection_csv(&rows, &dir.join("projection.csv"))
                .map_err(|e| CliError::Runtime(format!("writing projection.csv: {e}")))?;
        }
        let forgetting = if cfg.analyses.forgetting && !corpus.is_empty() {
            let report = forgetting_loss(&pretrained, &model, &corpus)?;
            forgetting_rows.push(ForgettingRow {
                scheme: scheme_cfg.scheme.as_str().to_string(),
                corpus: cfg.pretrain.task.kind.as_str().to_string(),
                report: report.clone(),
            });
            Some(report)
        } else {
            None
        };
        outcomes.push(SchemeOutcome {
            scheme: scheme_cfg.scheme,
            model,
            final_loss,
            exact_match: em,
            trainable_params: trainable,
            total_params: total,
            forgetting,
        });
    }
    if cfg.analyses.forgetting {
        write_forgetting_csv(&forgetting_rows, &cfg.output_dir.join("forgetting.csv"))
            .map_err(|e| CliError::Runtime(format!("writing forgetting.csv: {e}")))?;
    }

    println!(
        "\n{:<20} {:>6} {:>16} {:>8} {:>12} {:>12} {:>12}",
        "scheme", "rank", "trainable", "EM", "final_loss", "forgetting", "base_entropy"
    );
    for (scheme_cfg, outcome) in cfg.schemes.iter().zip(&outcomes) {
        let (fl, be) = outcome
            .forgetting
            .as_ref()
            .map(|f| (format!("{:.4}", f.loss), format!("{:.4}", f.base_entropy)))
            .unwrap_or_default();
        println!(
            "{:<20} {:>6} {:>16} {:>8.3} {:>12.5} {:>12} {:>12}",
            outcome.scheme.as_str(),
            scheme_cfg.rank,
            format!("{}/{}", outcome.trainable_params, outcome.total_params),
            outcome.exact_match,
            outcome.final_loss,
            fl,
            be
        );
    }
    Ok(outcomes)
}

/// `train --config file.json`: parse, apply the seed override, validate,
/// run, write the manifest.
pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let t0 = Instant::now();
    let bytes = fs::read(config_path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", config_path.display())))?;
    let sha = sha256_hex(&bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Usage("config file is not valid UTF-8".to_string()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed_override_from_env()? {
        cfg.override_seeds(seed);
    }
    run_experiment(&cfg)?;
    RunManifest::new(Some(sha), cfg.effective_seeds(), t0.elapsed()).write(&cfg.output_dir)?;
    Ok(())
}

/// Which analysis `analyze` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Similarity,
    Projection,
    Forgetting,
}

impl std::str::FromStr for AnalyzeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "similarity" => Ok(AnalyzeKind::Similarity),
            "projection" => Ok(AnalyzeKind::Projection),
            "forgetting" => Ok(AnalyzeKind::Forgetting),
            other => Err(format!("unknown analysis kind `{other}`")),
        }
    }
}

/// Compares two checkpoints and writes the corresponding CSV.
pub fn cmd_analyze(
    base_path: &Path,
    finetuned_path: &Path,
    rank: usize,
    kind: AnalyzeKind,
    corpus_spec: Option<&Path>,
    output: &Path,
) -> Result<(), CliError> {
    let t0 = Instant::now();
    let seed = effective_seed(0)?;
    let (base, _) = load_checkpoint(base_path)?;
    let (finetuned, ft_meta) = load_checkpoint(finetuned_path)?;
    create_dir(output)?;

    match kind {
        AnalyzeKind::Similarity => {
            let sweep = similarity_sweep(&base, &finetuned, rank, seed)?;
            write_similarity_csv(&sweep.records, &output.join("similarity.csv"))
                .map_err(|e| CliError::Runtime(format!("writing similarity.csv: {e}")))?;
            print_sweep_summary("comparison", &sweep);
        }
        AnalyzeKind::Projection => {
            let scheme = ft_meta.adapter.as_ref().map(|a| a.scheme);
            let mut rows = Vec::new();
            for (name, _) in base.adaptable_weights() {
                let w_base = base.merged_weight(&name)?;
                let w_ft = match finetuned.merged_weight(&name) {
                    Ok(w) => w,
                    Err(_) => {
                        return Err(CliError::DataIntegrity(format!(
                            "weight `{name}` is missing from the finetuned checkpoint"
                        )))
                    }
                };
                if w_ft.sub(&w_base).map_err(AnalysisError::from)?.frobenius_norm() == 0.0 {
                    continue;
                }
                let layer = layer_of(&name);
                let module = base
                    .placement(&name)
                    .map(|p| p.as_str().to_string())
                    .unwrap_or_else(|| "unknown".to_string());
                for basis in [
                    BasisSource::Delta(scheme),
                    BasisSource::W,
                    BasisSource::Random { seed: derive_seed(seed, &name) },
                ] {
                    let report = projection_analysis(&w_base, &w_ft, rank, basis)?;
                    rows.push(ProjectionRow { layer, module: module.clone(), report });
                }
            }
            if rows.is_empty() {
                println!("zero update — the checkpoints carry identical weights");
            } else {
                let amps: Vec<f64> = rows
                    .iter()
                    .filter(|r| matches!(r.report.basis_source, BasisSource::Delta(_)))
                    .filter_map(|r| r.report.amplification)
                    .collect();
                let mean = amps.iter().sum::<f64>() / amps.len().max(1) as f64;
                println!(
                    "projection over {} weight(s): mean amplification in the update's own subspace = {mean:.3}",
                    amps.len()
                );
            }
            write_projection_csv(&rows, &output.join("projection.csv"))
                .map_err(|e| CliError::Runtime(format!("writing projection.csv: {e}")))?;
        }
        AnalyzeKind::Forgetting => {
            let spec_path = corpus_spec.ok_or_else(|| {
                CliError::Usage("--corpus <task-spec.json> is required for forgetting analysis".to_string())
            })?;
            let text = fs::read_to_string(spec_path)
                .map_err(|e| CliError::Usage(format!("cannot read corpus spec: {e}")))?;
            let spec: TaskSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("corpus spec: {e}")))?;
            let data = generate_task(&spec)?;
            let held_out = if data.eval.is_empty() { &data.train } else { &data.eval };
            let corpus: Vec<Vec<u32>> = held_out.iter().map(|e| e.tokens.clone()).collect();
            let report = forgetting_loss(&base, &finetuned, &corpus)?;
            let scheme = ft_meta
                .adapter
                .as_ref()
                .map(|a| a.scheme.as_str().to_string())
                .unwrap_or_else(|| "full".to_string());
            println!(
                "forgetting over {} positions: loss {} vs base entropy {} (gap {:.3e})",
                report.positions,
                fmt_g17(report.loss),
                fmt_g17(report.base_entropy),
                report.loss - report.base_entropy
            );
            write_forgetting_csv(
                &[ForgettingRow { scheme, corpus: spec.kind.as_str().to_string(), report }],
                &output.join("forgetting.csv"),
            )
            .map_err(|e| CliError::Runtime(format!("writing forgetting.csv: {e}")))?;
        }
    }
    RunManifest::new(None, BTreeMap::from([("analysis".to_string(), seed)]), t0.elapsed())
        .write(output)?;
    Ok(())
}

/// Folds an adapter file into a base checkpoint, verifying on probe inputs
/// that the dense model matches the adapted forward path.
pub fn cmd_merge(base_path: &Path, adapters_path: &Path, output: &Path) -> Result<(), CliError> {
    let t0 = Instant::now();
    let (base, _) = load_checkpoint(base_path)?;
    let (adapted, ameta) = load_adapter_into(base, adapters_path)?;
    let merged = adapted.merge_adapters()?;

    // Probe with deterministic pseudo-random sequences.
    let vocab = merged.config().vocab_size as u64;
    let max_len = merged.config().max_seq_len.min(8);
    let mut worst = 0.0f64;
    for probe in 0..10u64 {
        let len = 2 + (probe as usize % (max_len - 1).max(1));
        let tokens: Vec<u32> = (0..len)
            .map(|i| ((derive_seed(probe, "probe") >> (i * 5)) % vocab) as u32)
            .collect();
        let a = adapted.forward(&tokens)?;
        let m = merged.forward(&tokens)?;
        worst = worst.max(a.max_abs_diff(&m));
    }
    println!("max |adapted - merged| over 10 probe inputs: {worst:.3e}");

    let mut metrics = ameta.metrics.clone();
    metrics.insert("max_merge_residual".to_string(), worst);
    save_checkpoint(&merged, None, ameta.step, &metrics, output)?;
    println!("merged checkpoint written to {}", output.display());
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        RunManifest::new(None, BTreeMap::new(), t0.elapsed()).write(dir)?;
    }
    Ok(())
}

/// Output layout helpers shared by tests.
pub fn scheme_dir(cfg: &ExperimentConfig, scheme: Scheme) -> PathBuf {
    cfg.output_dir.join(scheme.as_str())
}
