//! Acceptance suite. Every criterion runs in order and prints one
//! `PASS`/`FAIL` line; the process exits non-zero if any criterion fails.
//!
//! Runs with `cargo test -p mc3-core --test acceptance`.

use std::cmp::Ordering;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mc3::data::{generate_synthetic, load_bank, save_bank, Corpus, Split, SynthConfig, SyntheticCorpus};
use mc3::encoders::{init_seeded, Activation, EncoderDims, EncoderParams};
use mc3::eval::{
    agglomerative_cluster, build_pools, chance_recall_at_k, discovery_scores, embed, linear_probe, pr_auc,
    recall_at_k, roc_auc, PoolEntry, ProbeConfig, RetrievalPools, ScoredLabel,
};
use mc3::gradsuite::{run_grad_checks, GradCheckConfig};
use mc3::losses::{consensus_score, infonce_pair, LossConfig};
use mc3::math::{cosine, dot, Matrix, Rng};
use mc3::trainer::{Checkpoint, TrainConfig, TrainMode, Trainer};
use mc3::{ModalityId, PerModality};

use ModalityId::{Audio, Language, Video};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const METRIC_INSTANCES: usize = 50;
const METRIC_TOLERANCE: f64 = 1e-12;
const MIN_AV_ROC: f64 = 0.80;
const MIN_CONSENSUS_GAIN: f64 = 0.02;
const TRAIN_BUDGET: Duration = Duration::from_secs(600);
const RECALL_K: usize = 10;
const MIN_RECALL_OVER_CHANCE: f64 = 5.0;
const SHUFFLE_TOLERANCE: f64 = 0.02;
const SHUFFLE_N: usize = 10_000;
const PROBE_CLASSES: usize = 10;
const MIN_PROBE_TOP1: f64 = 0.30;
const MIN_PROBE_MAUC: f64 = 0.7;
const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn dims_for(corpus: &Corpus) -> EncoderDims {
    EncoderDims {
        input: corpus.input_dims().unwrap(),
        ..EncoderDims::default()
    }
}

fn train_mode(corpus: &Corpus, mode: TrainMode) -> (EncoderParams, Duration) {
    let enc = init_seeded(&dims_for(corpus), Activation::Tanh, SEED).unwrap();
    let cfg = TrainConfig {
        mode,
        seed: SEED,
        ..TrainConfig::desk_scale()
    };
    let t0 = Instant::now();
    let mut trainer = Trainer::new(corpus, enc, cfg).unwrap();
    trainer.run().unwrap();
    (trainer.into_parts().0, t0.elapsed())
}

struct Evaluated {
    mode: TrainMode,
    encoders: EncoderParams,
    seconds: f64,
    av_roc: f64,
    recall: f64,
    chance: f64,
}

/// The default synthetic corpus and one training run per mode, shared by
/// the separation, ablation, retrieval and shuffled-label criteria.
struct Shared {
    corpus: Corpus,
    runs: Vec<Evaluated>,
}

impl Shared {
    fn build() -> Shared {
        let corpus = Corpus::from_synthetic(&generate_synthetic(&SynthConfig::default()).unwrap()).unwrap();
        let test = corpus.split_indices(Split::Test);
        let records: Vec<_> = test.iter().map(|&i| corpus.records[i].clone()).collect();
        let modes = [TrainMode::Mc3, TrainMode::NoConsensus, TrainMode::NoContrastiveStage2, TrainMode::NoAlign];
        let runs = modes
            .into_iter()
            .map(|mode| {
                let (encoders, took) = train_mode(&corpus, mode);
                let emb = embed(&corpus, &test, &encoders).unwrap();
                let av_roc = roc_auc(&discovery_scores(&records, &emb, (Audio, Video)).unwrap()).unwrap();
                let pools = build_pools(&records, &emb, SEED).unwrap();
                let recall = recall_at_k(&pools, Video, Audio, &[RECALL_K]).unwrap()[0];
                let chance = chance_recall_at_k(&pools, &[RECALL_K]).unwrap()[0];
                println!(
                    "    trained {:<22} AV ROC {av_roc:.4}  V->A R@{RECALL_K} {recall:.4} (chance {chance:.4})  {:.1}s",
                    mode.name(),
                    took.as_secs_f64()
                );
                Evaluated {
                    mode,
                    encoders,
                    seconds: took.as_secs_f64(),
                    av_roc,
                    recall,
                    chance,
                }
            })
            .collect();
        Shared { corpus, runs }
    }

    fn run(&self, mode: TrainMode) -> &Evaluated {
        self.runs.iter().find(|r| r.mode == mode).unwrap()
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let cfg = GradCheckConfig {
        seed: SEED,
        instances: GRAD_INSTANCES,
        max_batch: 8,
        max_dim: 16,
        ..GradCheckConfig::default()
    };
    let report = run_grad_checks(&cfg).unwrap();
    let took = t0.elapsed();
    let worst: Vec<String> = report.worst().iter().map(|(c, e)| format!("{c} {e:.1e}")).collect();
    let sizes_ok = report.results.iter().all(|r| r.batch <= 8 && r.dim <= 16);
    outcome(
        report.passed(GRAD_TOLERANCE) && took < GRAD_BUDGET && sizes_ok && report.results.len() == 5 * GRAD_INSTANCES,
        format!("{}; {:.2}s", worst.join(", "), took.as_secs_f64()),
    )
}

fn unit_rows(rng: &mut Rng, b: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(b, d);
    for t in 0..b {
        m.row_mut(t).copy_from_slice(&rng.unit_vector(d));
    }
    m
}

fn loss_oracles() -> Outcome {
    let mut rng = Rng::new(SEED);
    let mut single = 0.0f64;
    for _ in 0..100 {
        let d = 1 + rng.below(16);
        let tau = rng.uniform(0.05, 2.0);
        let (loss, _, _) = infonce_pair(&unit_rows(&mut rng, 1, d), &unit_rows(&mut rng, 1, d), tau).unwrap();
        single = single.max(loss.abs());
    }
    let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (two, _, _) = infonce_pair(&eye, &eye, 1.0).unwrap();
    let closed = (1.0 + (-1.0f64).exp()).ln();
    let two_err = (two - closed).abs();

    let mut exact = true;
    for _ in 0..1000 {
        let alpha = rng.uniform(0.1, 3.0);
        let cfg = LossConfig {
            alpha: PerModality([1.0, alpha, alpha]),
            ..LossConfig::default()
        };
        let (sv, sl) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        let c = consensus_score(&[(Video, sv), (Language, sl)], &cfg).unwrap();
        exact &= c.score == sv.min(sl);
    }
    outcome(
        single <= 1e-12 && two_err <= 1e-9 && exact,
        format!("|B|=1 max |loss| {single:.1e}; |B|=2 error {two_err:.1e}; equal-alpha score is raw min: {exact}"),
    )
}

/// Quantized scores produce ties on purpose.
fn random_scored(rng: &mut Rng) -> Vec<ScoredLabel> {
    let n = 2 + rng.below(99);
    let levels = [0, 3, 10, 1000][rng.below(4)];
    let mut s: Vec<ScoredLabel> = (0..n)
        .map(|_| {
            let x = rng.uniform(-1.0, 1.0);
            let score = if levels == 0 { x } else { (x * levels as f64).round() / levels as f64 };
            ScoredLabel::new(score, rng.below(3) == 0)
        })
        .collect();
    s[0].label = true;
    s[1].label = false;
    s
}

fn roc_oracle(s: &[ScoredLabel]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in s.iter().filter(|x| x.label) {
        for q in s.iter().filter(|x| !x.label) {
            pairs += 1.0;
            wins += match p.score.partial_cmp(&q.score).unwrap() {
                Ordering::Greater => 1.0,
                Ordering::Equal => 0.5,
                Ordering::Less => 0.0,
            };
        }
    }
    wins / pairs
}

/// Average precision summed over distinct thresholds, counting from scratch
/// at each one.
fn ap_oracle(s: &[ScoredLabel]) -> f64 {
    let positives = s.iter().filter(|x| x.label).count() as f64;
    let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let admitted: Vec<&ScoredLabel> = s.iter().filter(|x| x.score >= t).collect();
        let tp = admitted.iter().filter(|x| x.label).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / admitted.len() as f64;
        prev_recall = recall;
    }
    ap
}

fn random_pools(rng: &mut Rng) -> RetrievalPools {
    let total = 4 + rng.below(97);
    let groups = 1 + rng.below(8);
    let mut entries: Vec<PoolEntry> = (0..total)
        .map(|i| {
            let g = if i < groups { i } else { rng.below(groups) };
            PoolEntry {
                id: format!("s{}", rng.below(1000)) + &format!("_{i}"),
                group: format!("g{g}"),
                embeddings: PerModality::from_fn(|_| (0..3).map(|_| rng.below(3) as f64 - 1.0).collect()),
            }
        })
        .collect();
    rng.shuffle(&mut entries);
    let mut query = Vec::new();
    let mut retrieval = Vec::new();
    for e in entries {
        let seen = retrieval.iter().any(|r: &PoolEntry| r.group == e.group);
        if seen && rng.below(2) == 0 {
            query.push(e);
        } else {
            retrieval.push(e);
        }
    }
    if query.is_empty() {
        query.push(retrieval[0].clone());
    }
    RetrievalPools { query, retrieval }
}

/// Sorts the whole retrieval pool for each query.
fn recall_oracle(p: &RetrievalPools, k_list: &[usize]) -> Vec<f64> {
    k_list
        .iter()
        .map(|&k| {
            let hits = p
                .query
                .iter()
                .filter(|q| {
                    let mut order: Vec<&PoolEntry> = p.retrieval.iter().collect();
                    order.sort_by(|a, b| {
                        let (sa, sb) = (dot(&q.embeddings[Video], &a.embeddings[Audio]), dot(&q.embeddings[Video], &b.embeddings[Audio]));
                        sb.total_cmp(&sa).then_with(|| a.id.cmp(&b.id))
                    });
                    order[..k].iter().any(|r| r.group == q.group)
                })
                .count();
            hits as f64 / p.query.len() as f64
        })
        .collect()
}

/// Average linkage recomputed from member lists at every merge.
fn cluster_oracle(points: &Matrix, k: usize) -> (Vec<Vec<usize>>, Vec<f64>) {
    let n = points.rows();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut heights = Vec::new();
    while clusters.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut sum = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += 1.0 - cosine(points.row(i), points.row(j));
                    }
                }
                let avg = sum / (clusters[a].len() * clusters[b].len()) as f64;
                if avg < best.0 {
                    best = (avg, a, b);
                }
            }
        }
        heights.push(best.0);
        let moved = clusters.remove(best.2);
        clusters[best.1].extend(moved);
        clusters[best.1].sort_unstable();
    }
    (clusters, heights)
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(SEED + 3);
    let (mut roc_err, mut ap_err, mut recall_err, mut cluster_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cluster_members_match = true;
    for _ in 0..METRIC_INSTANCES {
        let s = random_scored(&mut rng);
        roc_err = roc_err.max((roc_auc(&s).unwrap() - roc_oracle(&s)).abs());
        ap_err = ap_err.max((pr_auc(&s).unwrap() - ap_oracle(&s)).abs());

        let pools = random_pools(&mut rng);
        let n = pools.retrieval.len();
        let k_list: Vec<usize> = [1, 2, 5, 10, n].into_iter().filter(|&k| k <= n).collect();
        let got = recall_at_k(&pools, Video, Audio, &k_list).unwrap();
        for (g, w) in got.iter().zip(recall_oracle(&pools, &k_list)) {
            recall_err = recall_err.max((g - w).abs());
        }

        let n = 2 + rng.below(99);
        let k = 1 + rng.below(n.min(20));
        let dim = 2 + rng.below(6);
        let points = Matrix::from_fn(n, dim, |_, _| rng.normal());
        let c = agglomerative_cluster(&points, k, 1).unwrap();
        let (members, heights) = cluster_oracle(&points, k);
        cluster_members_match &= c.members == members;
        for (m, h) in c.merges.iter().zip(&heights) {
            cluster_err = cluster_err.max((m.distance - h).abs());
        }
    }
    let worst = roc_err.max(ap_err).max(recall_err).max(cluster_err);
    outcome(
        worst <= METRIC_TOLERANCE && cluster_members_match,
        format!(
            "{METRIC_INSTANCES} instances each; roc {roc_err:.1e}, ap {ap_err:.1e}, recall {recall_err:.1e}, \
             merge heights {cluster_err:.1e}, partitions equal: {cluster_members_match}"
        ),
    )
}

fn synthetic_separation(shared: &Shared) -> Outcome {
    let mc3 = shared.run(TrainMode::Mc3);
    let base = shared.run(TrainMode::NoConsensus);
    let gain = mc3.av_roc - base.av_roc;
    outcome(
        mc3.av_roc >= MIN_AV_ROC && gain >= MIN_CONSENSUS_GAIN && mc3.seconds < TRAIN_BUDGET.as_secs_f64(),
        format!(
            "mc3 AV ROC {:.4} (>= {MIN_AV_ROC}), gain over no_consensus {gain:+.4} (>= {MIN_CONSENSUS_GAIN}), {:.1}s",
            mc3.av_roc, mc3.seconds
        ),
    )
}

fn ablation_ordering(shared: &Shared) -> Outcome {
    let roc = |m| shared.run(m).av_roc;
    let (full, no_cons, no_align, no_con2) = (
        roc(TrainMode::Mc3),
        roc(TrainMode::NoConsensus),
        roc(TrainMode::NoAlign),
        roc(TrainMode::NoContrastiveStage2),
    );
    outcome(
        full > no_cons && no_cons > no_align && no_con2 < no_cons,
        format!(
            "mc3 {full:.4} > no_consensus {no_cons:.4} > no_align {no_align:.4}; \
             no_contrastive_stage2 {no_con2:.4} < no_consensus"
        ),
    )
}

fn retrieval_sanity(shared: &Shared) -> Outcome {
    let mc3 = shared.run(TrainMode::Mc3);
    let base = shared.run(TrainMode::NoConsensus);
    let ratio = mc3.recall / mc3.chance;
    outcome(
        ratio >= MIN_RECALL_OVER_CHANCE && mc3.recall > base.recall,
        format!(
            "V->A recall@{RECALL_K} mc3 {:.4} = {ratio:.2}x chance {:.4}; no_consensus {:.4}",
            mc3.recall, mc3.chance, base.recall
        ),
    )
}

fn random_baselines(shared: &Shared) -> Outcome {
    let train = shared.corpus.split_indices(Split::Train);
    let idx = &train[..SHUFFLE_N.min(train.len())];
    let records: Vec<_> = idx.iter().map(|&i| shared.corpus.records[i].clone()).collect();
    let emb = embed(&shared.corpus, idx, &shared.run(TrainMode::Mc3).encoders).unwrap();
    let mut scored = discovery_scores(&records, &emb, (Audio, Video)).unwrap();
    let mut labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    Rng::derive(SEED, &[0x5F]).shuffle(&mut labels);
    for (s, l) in scored.iter_mut().zip(labels) {
        s.label = l;
    }
    let prevalence = scored.iter().filter(|s| s.label).count() as f64 / scored.len() as f64;
    let roc = roc_auc(&scored).unwrap();
    let pr = pr_auc(&scored).unwrap();
    outcome(
        scored.len() == SHUFFLE_N && (roc - 0.5).abs() <= SHUFFLE_TOLERANCE && (pr - prevalence).abs() <= SHUFFLE_TOLERANCE,
        format!("n {}; ROC {roc:.4}; PR {pr:.4} vs prevalence {prevalence:.4}", scored.len()),
    )
}

fn small_corpus() -> (SyntheticCorpus, Corpus) {
    let s = generate_synthetic(&SynthConfig {
        train: 1500,
        val: 0,
        test: 100,
        ..SynthConfig::default()
    })
    .unwrap();
    let c = Corpus::from_synthetic(&s).unwrap();
    (s, c)
}

fn short_schedule() -> TrainConfig {
    TrainConfig {
        align_epochs: 2,
        refine_epochs: 2,
        seed: SEED,
        ..TrainConfig::desk_scale()
    }
}

fn determinism_and_formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (synth, corpus) = small_corpus();
    let init = init_seeded(&dims_for(&corpus), Activation::Tanh, SEED).unwrap();

    let mut files = Vec::new();
    for run in 0..2 {
        let path = dir.path().join(format!("run{run}.mc3c"));
        let mut t = Trainer::new(
            &corpus,
            init.clone(),
            TrainConfig {
                checkpoint: Some(path.clone()),
                ..short_schedule()
            },
        )
        .unwrap();
        t.run().unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    let repeat = files[0] == files[1];

    let mut banks = true;
    for (m, bank) in synth.banks.iter() {
        let path = dir.path().join(format!("{}.mc3f", m.name()));
        save_bank(bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        let bits = |b: &mc3::data::FeatureBank| b.features().as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        banks &= bits(&back) == bits(bank) && back.to_bytes() == std::fs::read(&path).unwrap();
    }

    let ckpt = Checkpoint::from_bytes(&files[0]).unwrap();
    let checkpoint_round_trip = ckpt.to_bytes() == files[0];

    let mut whole = Trainer::new(&corpus, init.clone(), short_schedule()).unwrap();
    whole.run().unwrap();
    let mut first = Trainer::new(&corpus, init, short_schedule()).unwrap();
    for _ in 0..3 {
        first.run_epoch().unwrap();
    }
    let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
    let mut resumed = Trainer::from_checkpoint(&corpus, saved).unwrap();
    resumed.run().unwrap();
    let resume_equal = resumed.checkpoint().to_bytes() == whole.checkpoint().to_bytes();

    outcome(
        repeat && banks && checkpoint_round_trip && resume_equal,
        format!(
            "repeat run identical: {repeat}; bank round trip: {banks}; checkpoint round trip: \
             {checkpoint_round_trip}; resume after epoch 3 identical: {resume_equal}"
        ),
    )
}

fn linear_probe_criterion() -> Outcome {
    let synth = generate_synthetic(&SynthConfig {
        concepts: PROBE_CLASSES,
        ..SynthConfig::default()
    })
    .unwrap();
    let corpus = Corpus::from_synthetic(&synth).unwrap();
    let (encoders, _) = train_mode(&corpus, TrainMode::Mc3);
    let train = corpus.split_indices(Split::Train);
    let test = corpus.split_indices(Split::Test);
    let x = |idx: &[usize]| encoders.forward(Audio, &corpus.features(Audio, idx).unwrap()).unwrap().output;
    let y = |idx: &[usize]| idx.iter().map(|&i| synth.concept_of[i]).collect::<Vec<_>>();
    let cfg = ProbeConfig {
        seed: SEED,
        ..ProbeConfig::default()
    };
    let (m, _) = linear_probe(&x(&train), &y(&train), &x(&test), &y(&test), &cfg).unwrap();
    let chance = 1.0 / PROBE_CLASSES as f64;
    outcome(
        m.top1 >= MIN_PROBE_TOP1 && m.top1 >= 3.0 * chance && m.mauc >= MIN_PROBE_MAUC,
        format!(
            "{PROBE_CLASSES} classes; top1 {:.4} ({:.2}x chance); mAUC {:.4}",
            m.top1,
            m.top1 / chance,
            m.mauc
        ),
    )
}

fn main() -> ExitCode {
    let mut shared: Option<Shared> = None;
    let mut failures = 0;
    type Check<'a> = (&'a str, &'a str, Box<dyn Fn(&mut Option<Shared>) -> Outcome>);
    fn with_shared(f: fn(&Shared) -> Outcome) -> Box<dyn Fn(&mut Option<Shared>) -> Outcome> {
        Box::new(move |s: &mut Option<Shared>| f(s.get_or_insert_with(Shared::build)))
    }
    let checks: Vec<Check> = vec![
        ("1", "gradient suite", Box::new(|_| gradient_suite())),
        ("2", "loss oracles", Box::new(|_| loss_oracles())),
        ("3", "metric oracles", Box::new(|_| metric_oracles())),
        ("4", "synthetic separation", with_shared(synthetic_separation)),
        ("5", "ablation ordering", with_shared(ablation_ordering)),
        ("6", "retrieval sanity", with_shared(retrieval_sanity)),
        ("7", "random baselines", with_shared(random_baselines)),
        ("8", "determinism and formats", Box::new(|_| determinism_and_formats())),
        ("9", "linear probe", Box::new(|_| linear_probe_criterion())),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    for (id, name, check) in &checks {
        if !filter.is_empty() && !filter.iter().any(|f| f == id || name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared)));
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {id} {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
