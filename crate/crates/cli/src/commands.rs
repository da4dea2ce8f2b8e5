use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use softmark_core::attacks::{
    distill_attack, finetune_attack, prune_attack, prune_retrain_attack, AttackOutcome,
};
use softmark_core::checkpoint::{load_classifier, load_detector, save_classifier, save_detector};
use softmark_core::config::{AttackKind, AttackSection, ExperimentConfig, Scheme};
use softmark_core::datasets::{self, Dataset};
use softmark_core::detector::Detector;
use softmark_core::metrics::{
    compression_ratio, customization_matrix, main_accuracy, verify_ownership, wm_accuracy,
};
use softmark_core::modelzoo::{clone_network, ArchName, ClassifierSpec, Network};
use softmark_core::nn::Features;
use softmark_core::pipelines::{embed_csp, embed_usp, pretrain as pretrain_pipeline, EpochLog};
use softmark_core::signal::{generate_signal, WatermarkSignal};
use softmark_core::{Error, Result};

/// One run's final numbers; written as summary.json in the run directory
/// and consumed by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub command: String,
    pub scheme: String,
    pub dataset: String,
    pub arch: String,
    pub main_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_main_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wm_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owned: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub main_acc_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wm_acc_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compression_ratio: Option<f64>,
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    write_atomic(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(summary)?,
    )
}

/// Creates the run directory and drops the resolved config snapshot in it.
fn prepare_run_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join("config.toml.tmp");
    fs::write(&tmp, cfg.to_toml()?)?;
    fs::rename(&tmp, dir.join("config.toml"))?;
    Ok(())
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn log_epoch(out: &mut BufWriter<File>, entry: &EpochLog) {
    if let Ok(line) = serde_json::to_string(entry) {
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    datasets::load(
        cfg.experiment.dataset,
        &cfg.experiment.data_dir,
        cfg.experiment.seed,
    )
}

fn feature_dim(data: &Dataset) -> usize {
    match &data.train.inputs {
        Features::Flat(a) => a.ncols(),
        Features::Image(a) => a.shape()[1] * a.shape()[2] * a.shape()[3],
    }
}

fn classifier_spec(cfg: &ExperimentConfig, data: &Dataset) -> ClassifierSpec {
    ClassifierSpec::new(
        cfg.experiment.arch,
        data.num_classes,
        feature_dim(data),
        cfg.experiment.seed,
    )
}

fn check_model_matches(net: &dyn Network, cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let spec = net.spec();
    if spec.arch != cfg.experiment.arch {
        return Err(Error::invalid(format!(
            "checkpoint is a {} model but the config asks for {}",
            spec.arch, cfg.experiment.arch
        )));
    }
    if spec.num_classes != data.num_classes {
        return Err(Error::invalid(format!(
            "checkpoint has {} classes but the dataset has {}",
            spec.num_classes, data.num_classes
        )));
    }
    Ok(())
}

fn build_signal(cfg: &ExperimentConfig, num_classes: usize) -> Result<WatermarkSignal> {
    let length = if cfg.signal.use_label_filter {
        num_classes.min(10)
    } else {
        num_classes
    };
    let mut sig = generate_signal(length, cfg.signal.seed, cfg.signal.zero_fraction)?;
    sig.gamma = cfg.signal.gamma;
    if cfg.signal.use_label_filter {
        sig = sig.with_identity_filter();
    }
    Ok(sig)
}

/// Trains the clean adversary and writes adversary.ckpt plus its logs.
fn run_pretrain(
    cfg: &ExperimentConfig,
    out: &Path,
    data: &Dataset,
) -> Result<(Box<dyn Network>, f64)> {
    let spec = classifier_spec(cfg, data);
    let mut log = jsonl_writer(&out.join("pretrain_log.jsonl"))?;
    let (mut net, _) = pretrain_pipeline(&spec, &data.train, &data.test, &cfg.train, &mut |e| {
        log_epoch(&mut log, e)
    })?;
    save_classifier(&out.join("adversary.ckpt"), net.as_ref(), None)?;
    let acc = main_accuracy(net.as_mut(), &data.test)?;
    Ok((net, acc))
}

pub fn pretrain(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_data(&cfg)?;
    prepare_run_dir(out, &cfg)?;
    let (_, main_acc) = run_pretrain(&cfg, out, &data)?;
    let summary = RunSummary {
        name: cfg.experiment.name.clone(),
        command: "pretrain".to_string(),
        scheme: cfg.experiment.scheme.to_string(),
        dataset: cfg.experiment.dataset.to_string(),
        arch: cfg.experiment.arch.to_string(),
        main_acc,
        ref_main_acc: None,
        wm_acc: None,
        owned: None,
        attack: None,
        main_acc_before: None,
        wm_acc_before: None,
        sparsity: None,
        compression_ratio: None,
    };
    write_summary(out, &summary)?;
    println!("main_acc = {main_acc:.2}");
    Ok(())
}

/// The embedding body shared by `embed` and `sweep`: obtains an adversary,
/// runs the configured scheme, and writes model/detector checkpoints plus
/// the summary. Returns the summary for the caller.
fn run_embed(
    cfg: &ExperimentConfig,
    out: &Path,
    adversary_ckpt: Option<&Path>,
) -> Result<RunSummary> {
    let data = load_data(cfg)?;
    prepare_run_dir(out, cfg)?;
    let (mut adversary, ref_main_acc) = match adversary_ckpt {
        Some(path) => {
            let (mut net, _) = load_classifier(path)?;
            check_model_matches(net.as_ref(), cfg, &data)?;
            let acc = main_accuracy(net.as_mut(), &data.test)?;
            (net, acc)
        }
        None => run_pretrain(cfg, out, &data)?,
    };
    let wm_init = clone_network(adversary.as_ref())?;
    let mut log = jsonl_writer(&out.join("embed_log.jsonl"))?;
    let mut on_epoch = |e: &EpochLog| log_epoch(&mut log, e);
    let outcome = match cfg.experiment.scheme {
        Scheme::Usp => embed_usp(
            wm_init,
            adversary.as_mut(),
            &data.train,
            &data.test,
            &cfg.train,
            &mut on_epoch,
        )?,
        Scheme::Csp => {
            let sig = build_signal(cfg, data.num_classes)?;
            embed_csp(
                wm_init,
                adversary.as_mut(),
                &sig,
                &data.train,
                &data.test,
                &cfg.train,
                &mut on_epoch,
            )?
        }
    };
    drop(on_epoch);
    let mut model = outcome.model;
    save_classifier(&out.join("model.ckpt"), model.as_ref(), outcome.signal.as_ref())?;
    save_detector(&out.join("detector.ckpt"), &outcome.detector)?;
    let main_acc = main_accuracy(model.as_mut(), &data.test)?;
    let wm_acc = wm_accuracy(
        &outcome.detector,
        model.as_mut(),
        adversary.as_mut(),
        &data.test,
    )?;
    let summary = RunSummary {
        name: cfg.experiment.name.clone(),
        command: "embed".to_string(),
        scheme: cfg.experiment.scheme.to_string(),
        dataset: cfg.experiment.dataset.to_string(),
        arch: cfg.experiment.arch.to_string(),
        main_acc,
        ref_main_acc: Some(ref_main_acc),
        wm_acc: Some(wm_acc),
        owned: Some(verify_ownership(wm_acc, cfg.train.loss.tau as f64)),
        attack: None,
        main_acc_before: None,
        wm_acc_before: None,
        sparsity: None,
        compression_ratio: None,
    };
    write_summary(out, &summary)?;
    Ok(summary)
}

pub fn embed(config: &Path, out: &Path, adversary: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let summary = run_embed(&cfg, out, adversary)?;
    println!(
        "main_acc = {:.2} (clean {:.2})",
        summary.main_acc,
        summary.ref_main_acc.unwrap_or(f64::NAN)
    );
    println!("wm_acc = {:.2}", summary.wm_acc.unwrap_or(f64::NAN));
    println!("owned = {}", summary.owned.unwrap_or(false));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn attack(
    config: &Path,
    out: &Path,
    victim_path: &Path,
    detector_path: &Path,
    reference_path: &Path,
    kind_override: Option<&str>,
    student_override: Option<&str>,
    ratio_override: Option<f32>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut section = match (cfg.attack.clone(), kind_override) {
        (Some(mut s), kind) => {
            if let Some(k) = kind {
                s.kind = AttackKind::from_str(k).map_err(|e| Error::Config(e.to_string()))?;
            }
            s
        }
        (None, Some(k)) => AttackSection::with_kind(
            AttackKind::from_str(k).map_err(|e| Error::Config(e.to_string()))?,
        ),
        (None, None) => {
            return Err(Error::Config(
                "config has no [attack] section and no --kind was given".to_string(),
            ))
        }
    };
    if let Some(s) = student_override {
        section.student_arch = Some(ArchName::parse(s).map_err(|e| Error::Config(e.to_string()))?);
    }
    if let Some(r) = ratio_override {
        section.sparsity = r;
    }

    let data = load_data(&cfg)?;
    let (mut victim, _) = load_classifier(victim_path)?;
    check_model_matches(victim.as_ref(), &cfg, &data)?;
    let (mut reference, _) = load_classifier(reference_path)?;
    check_model_matches(reference.as_ref(), &cfg, &data)?;
    let det = load_detector(detector_path)?;
    if det.num_classes != data.num_classes {
        return Err(Error::invalid(format!(
            "detector expects {} classes but the dataset has {}",
            det.num_classes, data.num_classes
        )));
    }
    prepare_run_dir(out, &cfg)?;

    let attacker_train = data
        .train
        .stratified_subset(section.data_fraction, cfg.experiment.seed ^ 0xa77ac4)?;
    let main_acc_before = main_accuracy(victim.as_mut(), &data.test)?;
    let wm_acc_before = wm_accuracy(&det, victim.as_mut(), reference.as_mut(), &data.test)?;

    let mut ratio = None;
    let outcome: AttackOutcome = match section.kind {
        AttackKind::Finetune => {
            finetune_attack(victim.as_ref(), &attacker_train, &data.test, &section.train)?
        }
        AttackKind::Prune => prune_attack(victim.as_ref(), section.sparsity)?,
        AttackKind::PruneRetrain => prune_retrain_attack(
            victim.as_ref(),
            section.sparsity,
            &attacker_train,
            &data.test,
            &section.train,
        )?,
        AttackKind::Distill => {
            let arch = section.student_arch.unwrap_or(cfg.experiment.arch);
            let spec = ClassifierSpec::new(
                arch,
                data.num_classes,
                feature_dim(&data),
                section.train.seed ^ 0x57d,
            );
            let outcome = distill_attack(
                victim.as_mut(),
                &spec,
                &attacker_train,
                &data.test,
                &section.train,
                section.temperature,
                section.hard_weight,
            )?;
            ratio = Some(compression_ratio(victim.as_ref(), outcome.model.as_ref()));
            outcome
        }
    };
    let mut log = jsonl_writer(&out.join("attack_log.jsonl"))?;
    for entry in &outcome.logs {
        log_epoch(&mut log, entry);
    }
    let mut attacked = outcome.model;
    save_classifier(&out.join("attacked.ckpt"), attacked.as_ref(), None)?;

    let main_acc = main_accuracy(attacked.as_mut(), &data.test)?;
    let wm_acc = wm_accuracy(&det, attacked.as_mut(), reference.as_mut(), &data.test)?;
    let owned = verify_ownership(wm_acc, cfg.train.loss.tau as f64);
    let summary = RunSummary {
        name: cfg.experiment.name.clone(),
        command: "attack".to_string(),
        scheme: cfg.experiment.scheme.to_string(),
        dataset: cfg.experiment.dataset.to_string(),
        arch: cfg.experiment.arch.to_string(),
        main_acc,
        ref_main_acc: None,
        wm_acc: Some(wm_acc),
        owned: Some(owned),
        attack: Some(section.kind.to_string()),
        main_acc_before: Some(main_acc_before),
        wm_acc_before: Some(wm_acc_before),
        sparsity: outcome.sparsity,
        compression_ratio: ratio,
    };
    write_summary(out, &summary)?;
    println!(
        "{}: main_acc {:.2} -> {:.2}, wm_acc {:.2} -> {:.2}, owned = {}",
        section.kind, main_acc_before, main_acc, wm_acc_before, wm_acc, owned
    );
    if let Some(r) = ratio {
        println!("compression_ratio = {r:.2}");
    }
    Ok(())
}

pub fn verify(
    config: &Path,
    detector_path: &Path,
    suspect_path: &Path,
    reference_path: &Path,
    tau: f64,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_data(&cfg)?;
    let det = load_detector(detector_path)?;
    let (mut suspect, _) = load_classifier(suspect_path)?;
    let (mut reference, _) = load_classifier(reference_path)?;
    for (label, net) in [("suspect", suspect.as_ref()), ("reference", reference.as_ref())] {
        if net.spec().num_classes != det.num_classes {
            return Err(Error::invalid(format!(
                "{label} model has {} classes but the detector expects {}",
                net.spec().num_classes,
                det.num_classes
            )));
        }
    }
    if suspect.spec().num_classes != data.num_classes {
        return Err(Error::invalid(format!(
            "suspect model has {} classes but the dataset has {}",
            suspect.spec().num_classes,
            data.num_classes
        )));
    }
    let wm_acc = wm_accuracy(&det, suspect.as_mut(), reference.as_mut(), &data.test)?;
    let owned = verify_ownership(wm_acc, tau);
    println!("wm_acc = {wm_acc:.2}");
    println!("owned = {owned}");
    Ok(())
}

const REPORT_TAUS: [f64; 5] = [75.0, 80.0, 85.0, 90.0, 95.0];

pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Config("no run directories given".to_string()));
    }
    let mut summaries = Vec::with_capacity(runs.len());
    for dir in runs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let summary: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        summaries.push(summary);
    }

    println!(
        "{:<20} {:<8} {:<9} {:<14} {:>9} {:>8} {:>8} {:>6}",
        "name", "scheme", "command", "attack", "main_acc", "delta", "wm_acc", "owned"
    );
    for s in &summaries {
        let baseline = s.main_acc_before.or(s.ref_main_acc);
        let delta = baseline
            .map(|b| format!("{:+.2}", s.main_acc - b))
            .unwrap_or_else(|| "-".to_string());
        let wm = s
            .wm_acc
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".to_string());
        let owned = s
            .owned
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<20} {:<8} {:<9} {:<14} {:>9.2} {:>8} {:>8} {:>6}",
            s.name,
            s.scheme,
            s.command,
            s.attack.as_deref().unwrap_or("-"),
            s.main_acc,
            delta,
            wm,
            owned
        );
    }

    let with_wm: Vec<&RunSummary> = summaries.iter().filter(|s| s.wm_acc.is_some()).collect();
    if !with_wm.is_empty() {
        println!();
        print!("{:<20} {:>8}", "tau sweep", "wm_acc");
        for tau in REPORT_TAUS {
            print!(" {tau:>6.2}");
        }
        println!();
        for s in &with_wm {
            let wm = s.wm_acc.unwrap_or(f64::NAN);
            print!("{:<20} {:>8.2}", s.name, wm);
            for tau in REPORT_TAUS {
                print!(" {:>6}", if verify_ownership(wm, tau) { "yes" } else { "no" });
            }
            println!();
        }
    }

    render_customization(runs)?;

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_atomic(
            &dir.join("report.json"),
            &serde_json::to_string_pretty(&summaries)?,
        )?;
        let mut csv = String::from(
            "name,scheme,command,attack,main_acc,main_acc_before,wm_acc,wm_acc_before,owned,sparsity,compression_ratio\n",
        );
        for s in &summaries {
            fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
                v.as_ref().map(|x| x.to_string()).unwrap_or_default()
            }
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                s.name,
                s.scheme,
                s.command,
                s.attack.clone().unwrap_or_default(),
                s.main_acc,
                opt(&s.main_acc_before),
                opt(&s.wm_acc),
                opt(&s.wm_acc_before),
                opt(&s.owned),
                opt(&s.sparsity),
                opt(&s.compression_ratio),
            ));
        }
        let tmp = dir.join("report.csv.tmp");
        fs::write(&tmp, csv)?;
        fs::rename(&tmp, dir.join("report.csv"))?;
    }
    Ok(())
}

/// When every run directory holds a co-trained (model, detector) pair,
/// renders the cross-verification matrix: detector i's detection rate on
/// model j's outputs.
fn render_customization(runs: &[PathBuf]) -> Result<()> {
    if runs.len() < 2 {
        return Ok(());
    }
    if !runs
        .iter()
        .all(|d| d.join("model.ckpt").exists() && d.join("detector.ckpt").exists())
    {
        return Ok(());
    }
    let cfg = ExperimentConfig::load(&runs[0].join("config.toml"))?;
    let data = load_data(&cfg)?;
    let mut detectors: Vec<Detector> = Vec::with_capacity(runs.len());
    let mut models: Vec<Box<dyn Network>> = Vec::with_capacity(runs.len());
    for dir in runs {
        detectors.push(load_detector(&dir.join("detector.ckpt"))?);
        models.push(load_classifier(&dir.join("model.ckpt"))?.0);
    }
    let det_refs: Vec<&Detector> = detectors.iter().collect();
    let matrix = customization_matrix(&det_refs, &mut models, &data.test)?;
    println!();
    println!("customization matrix (detection rate %, detector row x model column)");
    print!("{:<12}", "");
    for (j, dir) in runs.iter().enumerate() {
        let _ = dir;
        print!(" {:>8}", format!("model{j}"));
    }
    println!();
    for (i, row) in matrix.rates.iter().enumerate() {
        print!("{:<12}", format!("detector{i}"));
        for v in row {
            print!(" {v:>8.2}");
        }
        println!();
    }
    println!(
        "identified = {:.2}  misidentified = {:.2}  f1@50 = {:.3}",
        matrix.identified(),
        matrix.misidentified(),
        matrix.f1(50.0)
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    tau: f32,
    main_acc: f64,
    wm_acc: f64,
    owned: bool,
}

pub fn sweep(config: &Path, out: &Path, adversary: Option<&Path>, taus: &[f32]) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    if taus.is_empty() {
        return Err(Error::Config("tau list is empty".to_string()));
    }
    for &tau in taus {
        if !(0.0..=100.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} out of [0, 100]")));
        }
    }
    prepare_run_dir(out, &cfg)?;
    // Pretrain the shared adversary once so every child run starts from the
    // same clean model.
    let adversary_path: PathBuf = match adversary {
        Some(p) => p.to_path_buf(),
        None => {
            let data = load_data(&cfg)?;
            run_pretrain(&cfg, out, &data)?;
            out.join("adversary.ckpt")
        }
    };
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut child = cfg.clone();
        child.train.loss.tau = tau;
        child.experiment.name = format!("{}-tau{}", cfg.experiment.name, tau);
        let child_dir = out.join(format!("tau{tau}"));
        let summary = run_embed(&child, &child_dir, Some(&adversary_path))?;
        rows.push(SweepRow {
            tau,
            main_acc: summary.main_acc,
            wm_acc: summary.wm_acc.unwrap_or(f64::NAN),
            owned: summary.owned.unwrap_or(false),
        });
    }
    write_atomic(&out.join("sweep.json"), &serde_json::to_string_pretty(&rows)?)?;
    println!("{:>7} {:>9} {:>8} {:>6}", "tau", "main_acc", "wm_acc", "owned");
    for r in &rows {
        println!(
            "{:>7.2} {:>9.2} {:>8.2} {:>6}",
            r.tau, r.main_acc, r.wm_acc, r.owned
        );
    }
    Ok(())
}
