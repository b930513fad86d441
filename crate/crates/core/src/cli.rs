//! Command implementations behind the `longtail` binary: generate, train,
//! eval, compare, detproxy and report, plus the experiment-config sweep
//! glue and the scheme-spec mini-language.
//!
//! Scheme specs: `none`, `mult:<variant>`, `add:<variant>`,
//! `addloss:<variant>`, `bsce`, `ldam:<c>`, `lws`, `disalign`,
//! `csl:<variant>`, and the detproxy shorthands `multiplicative` /
//! `additive` (raw weights with a background slot at index 0).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    count_frequencies_with_classes, generate_synthetic, load_csv_with_classes, save_csv,
    ClassFrequencyTable, CountMode, DatasetSpec, GroupSplit,
};
use crate::detproxy;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::margins::{compute_weights, MarginScheme, VariantKind};
use crate::model::LossKind;
use crate::presets;
use crate::stats::{mean, std_dev};
use crate::training::{run_plan, Checkpoint, Strategy, TrainPlan};

/// A whole experiment in one file: dataset recipe, training plan,
/// schemes to compare and the seeds to sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub plan: TrainPlan,
    pub schemes: Vec<String>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::io::BufReader::new(fs::File::open(path)?);
        let cfg: Self = serde_json::from_reader(file)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("experiment config needs at least one seed".into()));
        }
        self.dataset.validate()?;
        self.plan.validate()
    }
}

/// Parse a scheme spec against a frequency table. `Ok(None)` means raw
/// logits.
pub fn parse_scheme(
    spec: &str,
    table: &ClassFrequencyTable,
    source: CountMode,
) -> Result<Option<MarginScheme>> {
    let (head, arg) = match spec.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (spec, None),
    };
    let variant = |arg: Option<&str>| -> Result<VariantKind> {
        VariantKind::parse(arg.unwrap_or("raw"))
    };
    let scheme = match head {
        "none" => return Ok(None),
        "mult" => MarginScheme::multiplicative(compute_weights(table, variant(arg)?, source)?),
        "add" => MarginScheme::additive_posthoc(compute_weights(table, variant(arg)?, source)?),
        "addloss" => MarginScheme::additive_loss(compute_weights(table, variant(arg)?, source)?),
        "bsce" => MarginScheme::balanced_softmax(table, source),
        "ldam" => {
            let c: f64 = arg
                .unwrap_or("1.0")
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad ldam margin '{spec}'")))?;
            MarginScheme::ldam(c, table, source)?
        }
        "lws" => MarginScheme::learnable_scale(table.num_classes()),
        "disalign" => MarginScheme::learnable_affine(table.num_classes()),
        "csl" => {
            MarginScheme::csl(compute_weights(table, variant(arg)?, source)?.weights)
        }
        // detproxy shorthands: raw weights over C foreground classes
        // with the background slot prepended
        "multiplicative" => MarginScheme::multiplicative(
            compute_weights(table, variant(arg)?, source)?.with_background(0)?,
        ),
        "additive" => MarginScheme::additive_posthoc(
            compute_weights(table, variant(arg)?, source)?.with_background(0)?,
        ),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown scheme '{other}' (expected none|mult|add|addloss|bsce|ldam|lws|disalign|csl)"
            )))
        }
    };
    Ok(Some(scheme))
}

/// Loss spec for plan presets: `ce`, `iifce[:variant]`, `csl[:variant]`,
/// `ldam[:c]`.
pub fn parse_loss(
    spec: &str,
    table: &ClassFrequencyTable,
    source: CountMode,
) -> Result<LossKind> {
    let (head, arg) = match spec.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (spec, None),
    };
    Ok(match head {
        "ce" => LossKind::SoftmaxCe,
        "iifce" => LossKind::IifCe {
            weights: compute_weights(table, VariantKind::parse(arg.unwrap_or("smooth"))?, source)?,
        },
        "csl" => LossKind::Csl {
            alpha: compute_weights(table, VariantKind::parse(arg.unwrap_or("smooth"))?, source)?.weights,
        },
        "ldam" => {
            let c: f64 = arg
                .unwrap_or("0.5")
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad ldam margin '{spec}'")))?;
            LossKind::Ldam { c, counts: table.counts(source).to_vec() }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown loss '{other}' (expected ce|iifce|csl|ldam)"
            )))
        }
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// Write train.csv, test.csv and freq.json for one dataset spec.
pub fn cmd_generate(spec: &DatasetSpec, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let ds = generate_synthetic(spec)?;
    save_csv(&ds.train, spec.num_classes, out_dir.join("train.csv"))?;
    save_csv(&ds.test, spec.num_classes, out_dir.join("test.csv"))?;
    ds.table.save_json(out_dir.join("freq.json"))?;
    println!(
        "generated {} train / {} test samples over {} classes into {}",
        ds.train.len(),
        ds.test.len(),
        spec.num_classes,
        out_dir.display()
    );
    Ok(())
}

pub struct LoadedData {
    pub train: Vec<crate::dataset::LabeledSample>,
    pub test: Vec<crate::dataset::LabeledSample>,
    pub table: ClassFrequencyTable,
}

/// Read the artifacts written by `cmd_generate` back from a directory.
pub fn load_data_dir(dir: &Path) -> Result<LoadedData> {
    let (train, c_train) = load_csv_with_classes(dir.join("train.csv"))?;
    let (test, _) = load_csv_with_classes(dir.join("test.csv"))?;
    let freq_path = dir.join("freq.json");
    let table = if freq_path.exists() {
        ClassFrequencyTable::load_json(freq_path)?
    } else {
        count_frequencies_with_classes(&train, c_train)?
    };
    Ok(LoadedData { train, test, table })
}

/// Train one plan over one data directory; writes the checkpoint and a
/// `<stem>.log.json` training curve beside it.
pub fn cmd_train(plan: &TrainPlan, data_dir: &Path, ckpt_path: &Path) -> Result<()> {
    let data = load_data_dir(data_dir)?;
    let outcome = run_plan(plan, &data.train, &data.test, &data.table)?;
    if let Some(parent) = ckpt_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let loss = match &plan.strategy {
        Strategy::EndToEnd { loss } => loss.clone(),
        Strategy::PostHoc { train_loss, .. } => train_loss.clone(),
        Strategy::Decoupled { stage2_loss, stage2_epochs, stage1_loss, .. } => {
            if *stage2_epochs > 0 { stage2_loss.clone() } else { stage1_loss.clone() }
        }
    };
    let ckpt = Checkpoint {
        model: outcome.model,
        loss,
        inference_scheme: outcome.inference_scheme,
    };
    ckpt.save_json(ckpt_path)?;
    let log_path = ckpt_path.with_extension("log.json");
    let file = std::io::BufWriter::new(fs::File::create(&log_path)?);
    serde_json::to_writer_pretty(file, &outcome.log)?;
    let final_acc = outcome.log.epoch_balanced_accuracy.last().copied().unwrap_or(0.0);
    println!(
        "trained {} epochs, final balanced accuracy {:.4}; checkpoint -> {}",
        outcome.log.epoch_loss.len(),
        final_acc,
        ckpt_path.display()
    );
    Ok(())
}

/// Which adjustment `cmd_eval` / `cmd_compare` should apply.
pub enum SchemeChoice {
    /// The scheme recorded in the checkpoint (if any).
    FromCheckpoint,
    /// An explicit spec string, `"none"` for raw logits.
    Spec(String),
}

fn split_for(table: &ClassFrequencyTable, thresholds: Option<(u64, u64)>) -> Result<GroupSplit> {
    match thresholds {
        Some((few_max, many_min)) => GroupSplit::from_thresholds(table, few_max, many_min),
        None => Ok(GroupSplit::from_terciles(table)),
    }
}

pub fn cmd_eval(
    ckpt_path: &Path,
    data_dir: &Path,
    choice: &SchemeChoice,
    source: CountMode,
    thresholds: Option<(u64, u64)>,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load_json(ckpt_path)?;
    let data = load_data_dir(data_dir)?;
    let split = split_for(&data.table, thresholds)?;
    let scheme = match choice {
        SchemeChoice::FromCheckpoint => ckpt.inference_scheme.clone(),
        SchemeChoice::Spec(spec) => parse_scheme(spec, &data.table, source)?,
    };
    let report = eval::evaluate(&ckpt.model, &data.test, scheme.as_ref(), &split)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    report.save_json(out)?;
    println!(
        "scheme {}: overall {:.4}, few {}, medium {}, many {} -> {}",
        report.scheme,
        report.overall_top1,
        fmt_opt(report.group_top1.few),
        fmt_opt(report.group_top1.medium),
        fmt_opt(report.group_top1.many),
        out.display()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".to_string())
}

pub fn cmd_compare(
    ckpt_path: &Path,
    data_dir: &Path,
    scheme_specs: &[String],
    source: CountMode,
    thresholds: Option<(u64, u64)>,
    out_csv: &Path,
) -> Result<()> {
    if scheme_specs.is_empty() {
        return Err(Error::InvalidArgument("no schemes to compare".into()));
    }
    let ckpt = Checkpoint::load_json(ckpt_path)?;
    let data = load_data_dir(data_dir)?;
    let split = split_for(&data.table, thresholds)?;
    let schemes: Vec<Option<MarginScheme>> = scheme_specs
        .iter()
        .map(|s| parse_scheme(s, &data.table, source))
        .collect::<Result<_>>()?;
    let cmp = eval::compare_schemes(&ckpt.model, &data.test, &schemes, &split)?;
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    cmp.write_csv(std::io::BufWriter::new(fs::File::create(out_csv)?))?;
    let json_path = out_csv.with_extension("json");
    let file = std::io::BufWriter::new(fs::File::create(&json_path)?);
    serde_json::to_writer_pretty(file, &cmp)?;
    for row in &cmp.rows {
        println!(
            "{:<34} overall {:.4} (delta {:+.4}) few {}",
            row.scheme,
            row.overall_top1,
            row.delta_overall,
            fmt_opt(row.few)
        );
    }
    println!("comparison -> {} and {}", out_csv.display(), json_path.display());
    Ok(())
}

pub fn cmd_detproxy(scheme_specs: &[String], threshold: f64, out_dir: &Path) -> Result<()> {
    if scheme_specs.is_empty() {
        return Err(Error::InvalidArgument("no schemes requested".into()));
    }
    let (spec, table) = detproxy::shipped_scenario();
    let proposals = detproxy::simulate_proposals(&spec)?;
    ensure_dir(out_dir)?;
    detproxy::save_proposals_csv(&proposals, out_dir.join("proposals.csv"))?;
    let mut outcomes = Vec::new();
    for name in scheme_specs {
        let scheme = parse_scheme(name, &table, CountMode::Image)?.ok_or_else(|| {
            Error::InvalidArgument("detproxy needs a concrete scheme, not 'none'".into())
        })?;
        let outcome = detproxy::detect(&proposals, &scheme, threshold)?;
        outcomes.push((name.clone(), outcome));
    }
    let report = detproxy::fp_report(&outcomes)?;
    report.write_csv(std::io::BufWriter::new(fs::File::create(out_dir.join("fp_report.csv"))?))?;
    for row in &report.rows {
        println!(
            "{:<16} fp {:>4}  tp {:>4}  missed {:>3}  tail recall {}",
            row.scheme,
            row.false_positives,
            row.true_positives,
            row.missed_foreground,
            fmt_opt(row.tail_recall)
        );
    }
    println!("detproxy artifacts -> {}", out_dir.display());
    Ok(())
}

/// Mean +/- std aggregation of evaluation reports, grouped by scheme.
pub fn cmd_report(inputs: &[PathBuf], out_csv: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no reports to aggregate".into()));
    }
    let mut by_scheme: Vec<(String, Vec<EvalReport>)> = Vec::new();
    for path in inputs {
        let report = EvalReport::load_json(path)?;
        match by_scheme.iter_mut().find(|(s, _)| *s == report.scheme) {
            Some((_, v)) => v.push(report),
            None => by_scheme.push((report.scheme.clone(), vec![report])),
        }
    }
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(fs::File::create(out_csv)?));
    w.write_record([
        "scheme", "runs", "overall_mean", "overall_std", "few_mean", "few_std", "medium_mean",
        "medium_std", "many_mean", "many_std",
    ])?;
    for (scheme, reports) in &by_scheme {
        let collect = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> {
            reports.iter().filter_map(|r| f(r)).collect()
        };
        let overall: Vec<f64> = reports.iter().map(|r| r.overall_top1).collect();
        let few = collect(&|r| r.group_top1.few);
        let med = collect(&|r| r.group_top1.medium);
        let many = collect(&|r| r.group_top1.many);
        let pair = |v: &[f64]| -> (String, String) {
            if v.is_empty() {
                (String::new(), String::new())
            } else {
                (mean(v).to_string(), std_dev(v).to_string())
            }
        };
        let (om, os) = pair(&overall);
        let (fm, fs) = pair(&few);
        let (mm, ms) = pair(&med);
        let (am, as_) = pair(&many);
        w.write_record([
            scheme.clone(),
            reports.len().to_string(),
            om,
            os,
            fm,
            fs,
            mm,
            ms,
            am,
            as_,
        ])?;
        println!(
            "{:<34} runs {:>2}  overall {:.4} +/- {:.4}",
            scheme,
            reports.len(),
            mean(&overall),
            std_dev(&overall)
        );
    }
    w.flush()?;
    println!("summary -> {}", out_csv.display());
    Ok(())
}

/// Sweep helper: per-seed dataset directory name.
pub fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("s{seed}"))
}

/// Generate one dataset per configured seed (dataset reseeded each time).
pub fn sweep_generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    for &seed in &cfg.seeds {
        let mut spec = cfg.dataset.clone();
        spec.seed = seed;
        cmd_generate(&spec, &seed_dir(out_dir, seed))?;
    }
    Ok(())
}

/// Train the configured plan per seed against the matching dataset
/// directory; checkpoints land in `out_dir/s<seed>.ckpt.json`.
pub fn sweep_train(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    for &seed in &cfg.seeds {
        let mut plan = cfg.plan.clone();
        plan.seed = seed;
        cmd_train(&plan, &seed_dir(data_dir, seed), &out_dir.join(format!("s{seed}.ckpt.json")))?;
    }
    Ok(())
}

/// Evaluate every configured scheme per seed; reports land in
/// `out_dir/s<seed>.<k>.report.json`.
pub fn sweep_eval(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    ckpt_dir: &Path,
    source: CountMode,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        for (k, spec) in cfg.schemes.iter().enumerate() {
            let out = out_dir.join(format!("s{seed}.{k}.report.json"));
            cmd_eval(
                &ckpt_dir.join(format!("s{seed}.ckpt.json")),
                &seed_dir(data_dir, seed),
                &SchemeChoice::Spec(spec.clone()),
                source,
                None,
                &out,
            )?;
            written.push(out);
        }
    }
    Ok(written)
}

/// Training-plan presets resolvable from a data directory's frequency
/// table: `baseline`, `posthoc`, `iif-e2e`, `decoupled`.
pub fn preset_plan(name: &str, variant: VariantKind, table: &ClassFrequencyTable, seed: u64) -> Result<TrainPlan> {
    let weights = compute_weights(table, variant, CountMode::Image)?;
    Ok(match name {
        "baseline" => presets::baseline_plan(seed),
        "posthoc" => presets::posthoc_plan(seed, weights),
        "iif-e2e" => presets::weighted_end_to_end_plan(seed, weights),
        "decoupled" => presets::decoupled_plan(seed, weights),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown plan preset '{other}' (expected baseline|posthoc|iif-e2e|decoupled)"
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ClassFrequencyTable {
        ClassFrequencyTable::from_counts(vec![40, 10, 2], None).unwrap()
    }

    #[test]
    fn scheme_specs_parse() {
        let t = table();
        assert!(parse_scheme("none", &t, CountMode::Image).unwrap().is_none());
        for s in ["mult:smooth", "add:raw", "addloss:base2", "bsce", "ldam:0.5", "lws", "disalign", "csl:raw", "multiplicative", "additive"] {
            let parsed = parse_scheme(s, &t, CountMode::Image).unwrap();
            assert!(parsed.is_some(), "{s} should parse");
        }
        assert!(parse_scheme("nope", &t, CountMode::Image).is_err());
        assert!(parse_scheme("ldam:x", &t, CountMode::Image).is_err());
    }

    #[test]
    fn detproxy_shorthands_carry_background_slots() {
        let t = table();
        match parse_scheme("multiplicative", &t, CountMode::Image).unwrap().unwrap() {
            MarginScheme::MultiplicativeIif { weights } => {
                assert_eq!(weights.background_index, Some(0));
                assert_eq!(weights.weights[0], 1.0);
                assert_eq!(weights.num_classes(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_specs_parse() {
        let t = table();
        assert_eq!(parse_loss("ce", &t, CountMode::Image).unwrap(), LossKind::SoftmaxCe);
        assert!(matches!(
            parse_loss("iifce:smooth", &t, CountMode::Image).unwrap(),
            LossKind::IifCe { .. }
        ));
        assert!(matches!(parse_loss("csl", &t, CountMode::Image).unwrap(), LossKind::Csl { .. }));
        assert!(matches!(parse_loss("ldam:0.3", &t, CountMode::Image).unwrap(), LossKind::Ldam { .. }));
        assert!(parse_loss("huber", &t, CountMode::Image).is_err());
    }

    #[test]
    fn preset_plans_resolve() {
        let t = table();
        for name in ["baseline", "posthoc", "iif-e2e", "decoupled"] {
            let plan = preset_plan(name, VariantKind::Smooth, &t, 3).unwrap();
            assert_eq!(plan.seed, 3);
            plan.validate().unwrap();
        }
        assert!(preset_plan("x", VariantKind::Smooth, &t, 0).is_err());
    }
}
