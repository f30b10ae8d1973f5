//! The four subcommands. Each takes a resolved [`RunConfig`] and writes its
//! outputs plus the resolved config into `out_dir`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mc3::data::{generate_synthetic, Corpus, SampleRecord};
use mc3::encoders::{init_seeded, EncoderParams};
use mc3::eval::{
    self, agglomerative_cluster, build_pools, discovery_scores, fine_tune, linear_probe, pr_csv, pr_curve,
    retrieval_report, roc_csv, roc_curve, ClassificationReport, ClusterReport, DiscoveryReport, MetricsReport,
};
use mc3::gradsuite::{run_grad_checks, DEFAULT_TOLERANCE};
use mc3::math::Rng;
use mc3::trainer::{resume, Checkpoint, Trainer};
use mc3::{write_atomic, Mc3Error, Result};
use serde::Serialize;

use crate::config::{ProbeProtocol, RunConfig, RESOLVED_CONFIG};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.mc3c";
pub const ENCODERS_FILE: &str = "encoders.mc3w";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const VAL_METRICS_FILE: &str = "val_metrics.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Discovery,
    Retrieval,
    Cluster,
    Probe,
    All,
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Mc3Error::io(&cfg.out_dir, e))?;
    write_atomic(&cfg.out_dir.join(RESOLVED_CONFIG), cfg.render().as_bytes())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Mc3Error::config(key, "required by this command"))
}

/// Renames generator keys that differ from their config-file spelling.
fn synth_key(e: Mc3Error) -> Mc3Error {
    match e {
        Mc3Error::InvalidConfig { key, reason } => {
            let key = match key.as_str() {
                "latent_dim" => "synth_latent_dim".to_string(),
                "train" => "n_train".to_string(),
                _ => key,
            };
            Mc3Error::InvalidConfig { key, reason }
        }
        other => other,
    }
}

pub fn gen_synth(cfg: &RunConfig) -> Result<()> {
    let corpus = generate_synthetic(&cfg.synth).map_err(synth_key)?;
    prepare_out_dir(cfg)?;
    corpus.save(&cfg.out_dir)?;
    let r = corpus.region_counts();
    let sounding = corpus.records.iter().filter(|x| x.sounding == Some(true)).count();
    println!(
        "wrote {} records ({} train, {} val, {} test) to {}",
        corpus.records.len(),
        cfg.synth.train,
        cfg.synth.val,
        cfg.synth.test,
        cfg.out_dir.display()
    );
    println!(
        "regions I..V: {} {} {} {} {}; sounding {sounding}; concepts {}",
        r[0], r[1], r[2], r[3], r[4], cfg.synth.concepts
    );
    Ok(())
}

fn subset(corpus: &Corpus, idx: &[usize]) -> Vec<SampleRecord> {
    idx.iter().map(|&i| corpus.records[i].clone()).collect()
}

#[derive(Serialize)]
struct ValLine {
    stage: u8,
    epoch: usize,
    discovery: Vec<DiscoveryReport>,
}

fn discovery(
    cfg: &RunConfig,
    records: &[SampleRecord],
    emb: &mc3::PerModality<mc3::math::Matrix>,
) -> Result<Vec<(DiscoveryReport, Vec<eval::ScoredLabel>)>> {
    cfg.eval
        .discovery_pairs
        .iter()
        .map(|&p| {
            let scored = discovery_scores(records, emb, p)?;
            Ok((DiscoveryReport::new(p, &scored)?, scored))
        })
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let corpus = Corpus::load(required(&cfg.manifest, "manifest")?)?;
    let dims = cfg.encoder_dims(corpus.input_dims()?);
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut resolved = cfg.clone();
    let mut trainer = match &cfg.resume {
        Some(p) => {
            let mut ckpt = resume(p)?;
            ckpt.check_compatible(&mc3::encoders::EncoderDims {
                input: dims.input.clone(),
                ..ckpt.encoders.dims()
            })?;
            // The checkpoint's training settings win so the continuation is exact.
            ckpt.config.checkpoint = Some(ckpt_path.clone());
            resolved.train = ckpt.config.clone();
            resolved.seed = ckpt.config.seed;
            let dims = ckpt.encoders.dims();
            resolved.hidden = dims.hidden;
            resolved.latent = dims.latent;
            resolved.activation = ckpt.encoders.activation();
            println!(
                "resuming from {} at stage {} epoch {}",
                p.display(),
                ckpt.progress.stage.number(),
                ckpt.progress.epoch
            );
            Trainer::from_checkpoint(&corpus, ckpt)?
        }
        None => {
            let enc = init_seeded(&dims, cfg.activation, cfg.seed)?;
            let mut tc = cfg.train.clone();
            tc.checkpoint = Some(ckpt_path.clone());
            Trainer::new(&corpus, enc, tc)?
        }
    };
    prepare_out_dir(&resolved)?;

    let val_idx = corpus.split_indices(mc3::data::Split::Val);
    let val_records = subset(&corpus, &val_idx);
    let val_path = cfg.out_dir.join(VAL_METRICS_FILE);
    let mut val_lines = String::new();
    let mut count = 0usize;
    trainer.run_with(|e, params| {
        count += 1;
        let parts: Vec<String> = [("contrastive", e.contrastive), ("consensus", e.consensus)]
            .iter()
            .filter_map(|(n, v)| v.map(|v| format!("{n} {v:.5}")))
            .collect();
        println!(
            "stage {} epoch {} steps {} loss {:.5} ({})",
            e.stage,
            e.epoch,
            e.steps,
            e.total,
            parts.join(", ")
        );
        if cfg.eval_every > 0 && count % cfg.eval_every == 0 && !val_idx.is_empty() {
            let emb = eval::embed(&corpus, &val_idx, params)?;
            let reports: Vec<DiscoveryReport> = discovery(cfg, &val_records, &emb)?.into_iter().map(|r| r.0).collect();
            for r in &reports {
                println!("  val {} roc {:.4} pr {:.4}", r.pair, r.roc_auc, r.pr_auc);
            }
            let line = ValLine {
                stage: e.stage,
                epoch: e.epoch,
                discovery: reports,
            };
            val_lines.push_str(&serde_json::to_string(&line).expect("val line serializes"));
            val_lines.push('\n');
            write_atomic(&val_path, val_lines.as_bytes())?;
        }
        Ok(())
    })?;
    let (params, log) = trainer.into_parts();
    params.save(&cfg.out_dir.join(ENCODERS_FILE))?;
    log.save_csv(&cfg.out_dir.join(TRAIN_LOG_FILE))?;
    println!("wrote {} and {} to {}", CHECKPOINT_FILE, ENCODERS_FILE, cfg.out_dir.display());
    Ok(())
}

/// Maps each record's action group to a class index; classes are numbered in
/// sorted group order over both splits.
fn group_labels(train: &[SampleRecord], test: &[SampleRecord]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let group = |r: &SampleRecord| {
        r.action_group()
            .ok_or_else(|| Mc3Error::MissingLabel(format!("{} (verb/noun)", r.id)))
    };
    let mut classes = BTreeMap::new();
    for r in train.iter().chain(test) {
        classes.insert(group(r)?, 0usize);
    }
    for (i, v) in classes.values_mut().enumerate() {
        *v = i;
    }
    let map = |rs: &[SampleRecord]| rs.iter().map(|r| Ok(classes[&group(r)?])).collect::<Result<Vec<_>>>();
    Ok((map(train)?, map(test)?, classes.len()))
}

pub fn evaluate(cfg: &RunConfig, task: Task) -> Result<()> {
    let corpus = Corpus::load(required(&cfg.manifest, "manifest")?)?;
    let ckpt: Checkpoint = resume(required(&cfg.checkpoint, "checkpoint")?)?;
    ckpt.check_compatible(&mc3::encoders::EncoderDims {
        input: corpus.input_dims()?,
        ..ckpt.encoders.dims()
    })?;
    let encoders: &EncoderParams = &ckpt.encoders;
    let idx = corpus.split_indices(cfg.eval.split);
    if idx.is_empty() {
        return Err(Mc3Error::config("eval_split", format!("split {} is empty", cfg.eval.split.name())));
    }
    let records = subset(&corpus, &idx);
    let emb = eval::embed(&corpus, &idx, encoders)?;
    prepare_out_dir(cfg)?;
    let want = |t: Task| task == t || task == Task::All;
    let mut report = MetricsReport::default();

    if want(Task::Discovery) {
        for (r, scored) in discovery(cfg, &records, &emb)? {
            println!("discovery {} roc {:.4} pr {:.4} (prevalence {:.3})", r.pair, r.roc_auc, r.pr_auc, r.prevalence);
            write_atomic(
                &cfg.out_dir.join(format!("roc_{}.csv", r.pair)),
                roc_csv(&roc_curve(&scored)?).as_bytes(),
            )?;
            write_atomic(
                &cfg.out_dir.join(format!("pr_{}.csv", r.pair)),
                pr_csv(&pr_curve(&scored)?).as_bytes(),
            )?;
            report.discovery.push(r);
        }
    }
    if want(Task::Retrieval) {
        let pools = build_pools(&records, &emb, cfg.seed)?;
        report.retrieval = retrieval_report(&pools, &cfg.eval.retrieval_pairs, &cfg.eval.k_list)?;
        for r in &report.retrieval {
            println!(
                "retrieval {}->{} recall@{} {:.4} (chance {:.4})",
                r.query.letter(),
                r.target.letter(),
                r.k,
                r.recall,
                r.chance
            );
        }
    }
    if want(Task::Cluster) {
        let mut pick: Vec<usize> = (0..idx.len()).collect();
        if pick.len() > cfg.eval.cluster_points {
            Rng::derive(cfg.seed, &[0xC1]).shuffle(&mut pick);
            pick.truncate(cfg.eval.cluster_points);
            pick.sort_unstable();
        }
        let m = cfg.eval.cluster_modality;
        let points = emb[m].select_rows(&pick)?;
        let chosen: Vec<SampleRecord> = pick.iter().map(|&i| records[i].clone()).collect();
        let c = agglomerative_cluster(&points, cfg.eval.n_clusters, cfg.eval.exemplars)?;
        let r = ClusterReport::new(m, &chosen, &c);
        println!(
            "cluster {} points into {} clusters{}",
            r.n_points,
            r.n_clusters,
            r.purity.map_or(String::new(), |p| format!(", purity {p:.4}"))
        );
        report.clustering = Some(r);
    }
    if want(Task::Probe) {
        let train_idx = corpus.split_indices(mc3::data::Split::Train);
        let train_records = subset(&corpus, &train_idx);
        let (train_y, test_y, classes) = group_labels(&train_records, &records)?;
        let m = cfg.eval.probe_modality;
        let p = cfg.eval.probe_protocol;
        let mut push = |protocol: &str, metrics| {
            report.classification.push(ClassificationReport {
                protocol: protocol.into(),
                modality: m,
                classes,
                train: train_y.len(),
                test: test_y.len(),
                metrics,
            })
        };
        if matches!(p, ProbeProtocol::Linear | ProbeProtocol::Both) {
            let train_emb = encoders.forward(m, &corpus.features(m, &train_idx)?)?.output;
            let (metrics, _) = linear_probe(&train_emb, &train_y, &emb[m], &test_y, &cfg.eval.probe)?;
            push("linear_probe", metrics);
        }
        if matches!(p, ProbeProtocol::FineTune | ProbeProtocol::Both) {
            let (metrics, _) = fine_tune(
                encoders,
                m,
                &corpus.features(m, &train_idx)?,
                &train_y,
                &corpus.features(m, &idx)?,
                &test_y,
                &cfg.eval.probe,
            )?;
            push("fine_tune", metrics);
        }
        for c in &report.classification {
            let x = &c.metrics;
            println!(
                "probe {} {} classes {}: top1 {:.4} top5 {:.4} mca {:.4} map {:.4} mauc {:.4}",
                c.protocol, c.modality, c.classes, x.top1, x.top5, x.mca, x.map, x.mauc
            );
        }
    }
    report.save_json(&cfg.out_dir.join(METRICS_FILE))?;
    Ok(())
}

#[derive(Serialize)]
struct GradSummary<'a> {
    tolerance: f64,
    passed: bool,
    worst: Vec<(&'static str, f64)>,
    results: &'a [mc3::gradsuite::GradCheckResult],
}

pub fn grad_check(cfg: &RunConfig) -> std::result::Result<(), CliError> {
    let report = run_grad_checks(&cfg.grad)?;
    let passed = report.passed(DEFAULT_TOLERANCE);
    let worst = report.worst();
    for (name, w) in &worst {
        println!("{name:<20} max error {w:.3e}");
    }
    prepare_out_dir(cfg)?;
    let summary = GradSummary {
        tolerance: DEFAULT_TOLERANCE,
        passed,
        worst,
        results: &report.results,
    };
    let path = cfg.out_dir.join("grad_check.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    println!("{}", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed {
            max: report.max_error(),
            tol: DEFAULT_TOLERANCE,
        })
    }
}
