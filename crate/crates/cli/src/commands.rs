use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mirror_core::data::{read_dataset, write_dataset, Dataset};
use mirror_core::encoders::{encode_slide, mean_over_heads, EncoderConfig};
use mirror_core::eval::{
    embed_dataset, few_shot_probe, linear_probe, make_folds, metric_rows, read_metrics_csv, survival_fit_eval,
    write_metrics_csv, write_metrics_json, MetricRow,
};
use mirror_core::model::ModelConfig;
use mirror_core::objectives::{LossWeights, ObjectiveConfig};
use mirror_core::rna_select::{
    merge_panel, read_expression_csv, read_gene_list, read_labels_csv, read_panel_json, restrict_to_panel, rfe_cv,
    write_expression_csv, write_labels_csv, write_panel_json, write_trace_csv, ExpressionTable, RfeCvConfig, RfeStep,
};
use mirror_core::synth::{generate_cohort, write_ground_truth, CohortConfig};
use mirror_core::trainer::{
    finite_diff_check, load_checkpoint, probe_batch, save_checkpoint, train, write_train_log, ModelState, Precision,
    TrainConfig,
};

use crate::args::*;
use crate::config::write_resolved;
use crate::error::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| mirror_core::Error::Io { path: dir.into(), source: e })?;
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    mirror_core::Error::Io { path: path.into(), source: e }.into()
}

pub fn cohort_config(a: &SynthArgs) -> CohortConfig {
    CohortConfig {
        n_samples: a.samples,
        n_classes: a.classes,
        d_p: a.d_p,
        k_genes: a.genes,
        d_rs: a.d_rs,
        d_ru: a.d_ru,
        d_is: a.d_is,
        d_iu: a.d_iu,
        n_informative_genes: a.informative,
        tumor_patch_fraction: a.tumor_fraction,
        patches_min: a.patches_min,
        patches_max: a.patches_max,
        censor_fraction: a.censor_fraction,
        slide_noise: a.slide_noise,
        rna_noise: a.rna_noise,
        survival_noise: a.survival_noise,
        seed: a.seed,
    }
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = cohort_config(a);
    let (ds, gt) = generate_cohort(&cfg)?;
    write_dataset(&ds, &a.out)?;
    write_ground_truth(&gt, &a.out.join("ground_truth.json"))?;
    let table = ExpressionTable {
        sample_ids: ds.samples.iter().map(|s| s.id().to_owned()).collect(),
        gene_ids: ds.gene_ids().to_vec(),
        values: ds.expression_matrix(),
    };
    write_expression_csv(&table, &a.out.join("expression.csv"))?;
    write_labels_csv(&table.sample_ids, &ds.labels(), &a.out.join("labels.csv"))?;
    write_resolved(&a.out, "synth", a)?;
    info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn parse_step(s: &str) -> Result<RfeStep, CliError> {
    if s == "auto" {
        return Ok(RfeStep::Auto);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(RfeStep::Fixed(n)),
        _ => Err(CliError::Usage(format!("--step must be `auto` or a positive integer, got `{s}`"))),
    }
}

pub fn select_genes(a: &SelectGenesArgs) -> Result<(), CliError> {
    let step = parse_step(&a.step)?;
    let table = read_expression_csv(&a.input)?;
    let labels = read_labels_csv(&a.labels, &table.sample_ids)?;
    let cfg = RfeCvConfig { k_target: a.k, folds: a.folds, step, reg: a.reg, seed: a.seed };
    let (panel, trace) = rfe_cv(&table.values, &labels, &table.gene_ids, &cfg)?;
    let panel = match &a.curated {
        Some(p) => merge_panel(&panel, &read_gene_list(p)?, &table.gene_ids)?,
        None => panel,
    };
    create_dir(&a.out)?;
    write_panel_json(&panel, &a.out.join("panel.json"))?;
    write_trace_csv(&trace, &table.gene_ids, &a.out.join("rfe_trace.csv"))?;
    let scores = a.out.join("cv_scores.csv");
    let mut text = String::from("fold,n_features,accuracy\n");
    for (fold, (n, acc)) in trace.cv_scores.iter().enumerate() {
        text.push_str(&format!("{fold},{n},{acc}\n"));
    }
    fs::write(&scores, text).map_err(|e| io_err(&scores, e))?;
    write_resolved(&a.out, "select-genes", a)?;
    info!("panel of {} genes written to {}", panel.len(), a.out.display());
    Ok(())
}

fn load_data(dir: &Path, panel: Option<&PathBuf>) -> Result<Dataset, CliError> {
    let ds = read_dataset(dir)?;
    Ok(match panel {
        Some(p) => restrict_to_panel(&ds, &read_panel_json(p)?)?,
        None => ds,
    })
}

pub fn model_config(m: &ModelArgs, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_p: ds.d_p,
            k_genes: ds.k_genes,
            d: m.d,
            d_t: m.d_t,
            heads: m.heads,
            depth: m.depth,
            gene_groups: m.gene_groups,
            n_fixed: m.n_fixed,
            use_ppeg: m.use_ppeg,
        },
        retention_depth: m.retention_depth,
        d_z: m.d_z,
        clusters: m.clusters,
    }
}

pub fn train_config(a: &PretrainArgs) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        objective: ObjectiveConfig {
            weights: LossWeights { alpha: a.alpha, beta: a.beta, gamma: a.gamma },
            tau: a.tau,
            kappa: a.kappa,
            mask_ratio_slide: a.mask_ratio_slide,
            mask_ratio_rna: a.mask_ratio_rna,
        },
        seed: a.seed,
        precision: match a.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
        train_only: a.train_only.iter().filter(|p| !p.is_empty()).cloned().collect(),
    }
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    let ds = load_data(&a.data, a.panel.as_ref())?;
    let model_cfg = model_config(&a.model, &ds);
    let cfg = train_config(a);
    create_dir(&a.out)?;
    write_resolved(&a.out, "pretrain", a)?;
    let (state, log) = train(&ds, &model_cfg, &cfg)?;
    save_checkpoint(&state, &a.out.join("checkpoint.mirc"))?;
    write_train_log(&log, &a.out.join("train_log.csv"))?;
    info!("trained {} steps; checkpoint in {}", state.step, a.out.display());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let ds = match &a.data {
        Some(dir) => read_dataset(dir)?,
        None => generate_cohort(&CohortConfig { seed: a.seed, ..CohortConfig::default() })?.0,
    };
    let state = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => ModelState::new(&ModelConfig::for_dataset(&ds), a.seed, Precision::F64)?,
    };
    if a.batch < 2 {
        return Err(CliError::Usage("--batch must be at least 2".into()));
    }
    let batch = probe_batch(&ds, &state, a.batch)?;
    let report = finite_diff_check(&state, &batch, &ObjectiveConfig::default(), a.tolerance, a.seed)?;
    for t in &report.tensors {
        println!("{:<48} {:>5} {:.3e}", t.name, t.checked, t.max_rel_err);
    }
    println!("max relative error {:.3e} (tolerance {:.1e})", report.max_rel_err(), a.tolerance);
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("gradcheck.json");
        let text = serde_json::to_string_pretty(&report).map_err(mirror_core::Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        write_resolved(out, "gradcheck", a)?;
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|t| t.name.as_str()).collect();
        Err(CliError::Failed(format!("gradient check failed for: {}", names.join(", "))))
    }
}

pub fn probe(a: &ProbeArgs) -> Result<(), CliError> {
    if a.task == Task::Survival && a.setting == Setting::TenShot {
        return Err(CliError::Usage("the few-shot setting applies to subtyping only".into()));
    }
    let ds = load_data(&a.data, a.panel.as_ref())?;
    let state = load_checkpoint(&a.checkpoint)?;
    let emb = embed_dataset(&state, &ds)?;
    let plan = make_folds(&ds, a.folds, a.seed)?;
    let setting = match a.setting {
        Setting::All => "all-data",
        Setting::TenShot => "10-shot",
    };
    let rows: Vec<MetricRow> = match a.task {
        Task::Subtype => {
            let labels = ds.labels();
            let res = match a.setting {
                Setting::All => linear_probe(&emb, &labels, &plan)?,
                Setting::TenShot => few_shot_probe(&emb, &labels, &plan, a.shots, a.seed)?,
            };
            let mut rows = metric_rows("subtype", setting, "accuracy", &res.accuracy);
            rows.extend(metric_rows("subtype", setting, "macro_f1", &res.macro_f1));
            rows
        }
        Task::Survival => {
            let res = survival_fit_eval(&emb, &ds.survival(), &plan)?;
            metric_rows("survival", setting, "c_index", &res.c_index)
        }
    };
    create_dir(&a.out)?;
    write_metrics_json(&rows, &a.out.join("metrics.json"))?;
    write_metrics_csv(&rows, &a.out.join("metrics.csv"))?;
    write_resolved(&a.out, "probe", a)?;
    for r in rows.iter().filter(|r| r.fold == "mean" || r.fold == "std") {
        println!("{} {} {} {}: {:.4}", r.task, r.setting, r.metric, r.fold, r.value);
    }
    Ok(())
}

pub fn attn(a: &AttnArgs) -> Result<(), CliError> {
    let ds = read_dataset(&a.data)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let sample = ds.find(&a.slide_id).ok_or_else(|| CliError::Usage(format!("no slide `{}` in dataset", a.slide_id)))?;
    let out = encode_slide(&state.model.encoders, &state.params, &sample.bag.to_tensor())?;
    let weights = mean_over_heads(&out.attention);
    create_dir(&a.out)?;
    let path = a.out.join("attention.csv");
    let mut text = String::from("patch_index,grid_row,grid_col,weight\n");
    for (i, (w, (r, c))) in weights.iter().zip(&sample.bag.coords).enumerate() {
        text.push_str(&format!("{i},{r},{c},{w:e}\n"));
    }
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    write_resolved(&a.out, "attn", a)?;
    info!("attention over {} patches written to {}", weights.len(), path.display());
    Ok(())
}

/// One line of the summary: a metric's mean and std in one metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub source: String,
    pub task: String,
    pub setting: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(sources: &[(String, Vec<MetricRow>)]) -> Result<Vec<SummaryRow>, CliError> {
    let mut out = Vec::new();
    for (source, rows) in sources {
        // (task, setting, metric) -> (mean, std)
        let mut stats: BTreeMap<_, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for r in rows {
            let e = stats.entry((&r.task, &r.setting, &r.metric)).or_default();
            match r.fold.as_str() {
                "mean" => e.0 = Some(r.value),
                "std" => e.1 = Some(r.value),
                _ => {}
            }
        }
        for ((task, setting, metric), (mean, std)) in stats {
            let (Some(mean), Some(std)) = (mean, std) else {
                return Err(CliError::Usage(format!("{source}: {task}/{setting}/{metric} lacks mean or std rows")));
            };
            out.push(SummaryRow {
                source: source.clone(),
                task: task.into(),
                setting: setting.into(),
                metric: metric.into(),
                mean,
                std,
            });
        }
    }
    Ok(out)
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut sources = Vec::new();
    for p in &a.metrics {
        let file = if p.is_dir() { p.join("metrics.csv") } else { p.clone() };
        sources.push((p.display().to_string(), read_metrics_csv(&file)?));
    }
    let summary = summarize(&sources)?;
    let width = summary.iter().map(|r| r.source.len()).max().unwrap_or(6).max(6);
    println!("{:<width$}  {:<9} {:<9} {:<9} {:>8} {:>8}", "source", "task", "setting", "metric", "mean", "std");
    for r in &summary {
        println!(
            "{:<width$}  {:<9} {:<9} {:<9} {:>8.4} {:>8.4}",
            r.source, r.task, r.setting, r.metric, r.mean, r.std
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("summary.csv");
        let mut text = String::from("source,task,setting,metric,mean,std\n");
        for r in &summary {
            text.push_str(&format!("{},{},{},{},{},{}\n", r.source, r.task, r.setting, r.metric, r.mean, r.std));
        }
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        write_resolved(out, "report", a)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn parse(argv: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("mirror").chain(argv.iter().copied())).unwrap().command
    }

    #[test]
    fn flag_defaults_match_library_defaults() {
        let Command::Synth(s) = parse(&["synth", "--out", "x"]) else { unreachable!() };
        assert_eq!(cohort_config(&s), CohortConfig::default());
        let Command::Pretrain(p) = parse(&["pretrain", "--data", "d", "--out", "o"]) else { unreachable!() };
        assert_eq!(train_config(&p), TrainConfig::default());
        let ds = Dataset { samples: vec![], n_classes: 2, d_p: 64, k_genes: 256, metadata: Default::default() };
        assert_eq!(model_config(&p.model, &ds), ModelConfig::for_dataset(&ds));
        let Command::SelectGenes(g) = parse(&["select-genes", "--input", "i", "--labels", "l", "--out", "o"]) else {
            unreachable!()
        };
        let d = RfeCvConfig::default();
        assert_eq!((g.k, g.folds, g.reg, parse_step(&g.step).unwrap()), (d.k_target, d.folds, d.reg, d.step));
    }

    #[test]
    fn summary_needs_mean_and_std() {
        let mut rows = metric_rows("subtype", "all-data", "accuracy", &[0.5, 0.7]);
        let s = summarize(&[("a".into(), rows.clone())]).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].mean - 0.6).abs() < 1e-12);
        rows.pop();
        assert!(summarize(&[("a".into(), rows)]).is_err());
    }
}
