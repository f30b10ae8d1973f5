//! Flat `key = value` run configuration.
//!
//! One file covers data generation, encoders, training and evaluation.
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are rejected. `RunConfig::render` emits
//! every key in a fixed order, and that text parses back to the same config.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mc3::encoders::Activation;
use mc3::eval::ProbeConfig;
use mc3::gradsuite::GradCheckConfig;
use mc3::losses::ConsensusGradient;
use mc3::trainer::TrainConfig;
use mc3::data::{Split, SynthConfig};
use mc3::{Mc3Error, ModalityId, PerModality, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeProtocol {
    Linear,
    FineTune,
    Both,
}

impl ProbeProtocol {
    fn name(self) -> &'static str {
        match self {
            ProbeProtocol::Linear => "linear",
            ProbeProtocol::FineTune => "fine_tune",
            ProbeProtocol::Both => "both",
        }
    }
}

impl FromStr for ProbeProtocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(ProbeProtocol::Linear),
            "fine_tune" => Ok(ProbeProtocol::FineTune),
            "both" => Ok(ProbeProtocol::Both),
            o => Err(format!("expected linear, fine_tune or both, got {o:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub discovery_pairs: Vec<(ModalityId, ModalityId)>,
    pub retrieval_pairs: Vec<(ModalityId, ModalityId)>,
    pub k_list: Vec<usize>,
    pub n_clusters: usize,
    pub cluster_modality: ModalityId,
    /// Upper bound on the number of points clustered.
    pub cluster_points: usize,
    pub exemplars: usize,
    pub probe_modality: ModalityId,
    pub probe_protocol: ProbeProtocol,
    pub probe: ProbeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        use ModalityId::*;
        EvalOptions {
            split: Split::Test,
            discovery_pairs: vec![(Audio, Video), (Audio, Language)],
            retrieval_pairs: vec![(Video, Audio), (Audio, Video), (Language, Audio), (Audio, Language)],
            k_list: vec![1, 5, 10],
            n_clusters: 20,
            cluster_modality: Audio,
            cluster_points: 1000,
            exemplars: 5,
            probe_modality: Audio,
            probe_protocol: ProbeProtocol::Linear,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub synth: SynthConfig,
    pub hidden: usize,
    pub latent: usize,
    pub activation: Activation,
    pub train: TrainConfig,
    /// Evaluate discovery on the validation split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub eval: EvalOptions,
    pub grad: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            seed: synth.seed,
            out_dir: PathBuf::from("mc3_out"),
            manifest: None,
            checkpoint: None,
            resume: None,
            synth,
            hidden: 0,
            latent: 256,
            activation: Activation::Tanh,
            train: TrainConfig::desk_scale(),
            eval_every: 0,
            eval: EvalOptions::default(),
            grad: GradCheckConfig::default(),
        }
    }
}

fn bad(key: &str, reason: impl ToString) -> Mc3Error {
    Mc3Error::config(key, reason)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| bad(key, format!("{v:?}: {e}")))
}

fn modality(key: &str, v: &str) -> Result<ModalityId> {
    v.parse().map_err(|_| bad(key, format!("unknown modality {v:?}")))
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(bad(key, "list is empty"));
    }
    Ok(items)
}

fn pair(key: &str, v: &str) -> Result<(ModalityId, ModalityId)> {
    let chars: Vec<char> = v.chars().collect();
    if chars.len() != 2 {
        return Err(bad(key, format!("pair {v:?} must be two modality letters such as AV")));
    }
    let a = modality(key, &chars[0].to_string())?;
    let b = modality(key, &chars[1].to_string())?;
    if a == b {
        return Err(bad(key, format!("pair {v:?} repeats a modality")));
    }
    Ok((a, b))
}

fn path(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn show_pairs(p: &[(ModalityId, ModalityId)]) -> String {
    p.iter()
        .map(|(a, b)| format!("{}{}", a.letter(), b.letter()))
        .collect::<Vec<_>>()
        .join(",")
}

fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_activation(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
    }
}

fn show_gradient(g: ConsensusGradient) -> &'static str {
    match g {
        ConsensusGradient::Detached => "detached",
        ConsensusGradient::Full => "full",
    }
}

impl RunConfig {
    /// Sets one key. The key name appears in any error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let loss = &mut self.train.loss;
        match key {
            "seed" => self.seed = num(key, v)?,
            "out_dir" => {
                self.out_dir = path(v).ok_or_else(|| bad(key, "must not be empty"))?;
            }
            "manifest" => self.manifest = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "resume" => self.resume = path(v),

            "concepts" => self.synth.concepts = num(key, v)?,
            "synth_latent_dim" => self.synth.latent_dim = num(key, v)?,
            "dim_audio" => self.synth.dims[ModalityId::Audio] = num(key, v)?,
            "dim_video" => self.synth.dims[ModalityId::Video] = num(key, v)?,
            "dim_language" => self.synth.dims[ModalityId::Language] = num(key, v)?,
            "region_probs" => {
                let p = list(key, v, |s| num::<f64>(key, s))?;
                self.synth.region_probs = p
                    .try_into()
                    .map_err(|p: Vec<f64>| bad(key, format!("expected 5 values, got {}", p.len())))?;
            }
            "noise" => self.synth.noise = num(key, v)?,
            "n_train" => self.synth.train = num(key, v)?,
            "n_val" => self.synth.val = num(key, v)?,
            "n_test" => self.synth.test = num(key, v)?,
            "verbs" => self.synth.verbs = num(key, v)?,
            "nouns" => self.synth.nouns = num(key, v)?,

            "hidden" => self.hidden = num(key, v)?,
            "latent" => self.latent = num(key, v)?,
            "activation" => self.activation = v.parse().map_err(|_| bad(key, format!("unknown activation {v:?}")))?,

            "temperature" => loss.temperature = num(key, v)?,
            "anchor" => loss.anchor = modality(key, v)?,
            "alpha_audio" => loss.alpha[ModalityId::Audio] = num(key, v)?,
            "alpha_video" => loss.alpha[ModalityId::Video] = num(key, v)?,
            "alpha_language" => loss.alpha[ModalityId::Language] = num(key, v)?,
            "consensus_gradient" => {
                loss.consensus_gradient = v.parse().map_err(|_| bad(key, format!("expected detached or full, got {v:?}")))?
            }
            "consensus_weight" => loss.consensus_weight = num(key, v)?,
            "pairs" => loss.pairs = list(key, v, |s| pair(key, s))?,
            "align_epochs" => self.train.align_epochs = num(key, v)?,
            "refine_epochs" => self.train.refine_epochs = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "mode" => self.train.mode = v.parse().map_err(|_| bad(key, format!("unknown mode {v:?}")))?,
            "log_every" => self.train.log_every = num(key, v)?,
            "reset_optimizer" => self.train.reset_optimizer_between_stages = num(key, v)?,
            "grad_clip" => {
                self.train.grad_clip = if v == "none" { None } else { Some(num(key, v)?) };
            }
            "drop_last" => self.train.drop_last = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,

            "eval_split" => {
                self.eval.split = match v {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    o => return Err(bad(key, format!("expected train, val or test, got {o:?}"))),
                }
            }
            "discovery_pairs" => self.eval.discovery_pairs = list(key, v, |s| pair(key, s))?,
            "retrieval_pairs" => self.eval.retrieval_pairs = list(key, v, |s| pair(key, s))?,
            "k_list" => self.eval.k_list = list(key, v, |s| num(key, s))?,
            "n_clusters" => self.eval.n_clusters = num(key, v)?,
            "cluster_modality" => self.eval.cluster_modality = modality(key, v)?,
            "cluster_points" => self.eval.cluster_points = num(key, v)?,
            "exemplars" => self.eval.exemplars = num(key, v)?,
            "probe_modality" => self.eval.probe_modality = modality(key, v)?,
            "probe_protocol" => self.eval.probe_protocol = v.parse().map_err(|e: String| bad(key, e))?,
            "probe_epochs" => self.eval.probe.epochs = num(key, v)?,
            "probe_lr" => self.eval.probe.lr = num(key, v)?,
            "probe_batch_size" => self.eval.probe.batch_size = num(key, v)?,

            "grad_instances" => self.grad.instances = num(key, v)?,
            "grad_max_batch" => self.grad.max_batch = num(key, v)?,
            "grad_max_dim" => self.grad.max_dim = num(key, v)?,
            "grad_step" => self.grad.step = num(key, v)?,

            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let l = &t.loss;
        let s = &self.synth;
        let e = &self.eval;
        vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("manifest", show_path(&self.manifest)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("resume", show_path(&self.resume)),
            ("concepts", s.concepts.to_string()),
            ("synth_latent_dim", s.latent_dim.to_string()),
            ("dim_audio", s.dims[ModalityId::Audio].to_string()),
            ("dim_video", s.dims[ModalityId::Video].to_string()),
            ("dim_language", s.dims[ModalityId::Language].to_string()),
            ("region_probs", show_list(&s.region_probs)),
            ("noise", s.noise.to_string()),
            ("n_train", s.train.to_string()),
            ("n_val", s.val.to_string()),
            ("n_test", s.test.to_string()),
            ("verbs", s.verbs.to_string()),
            ("nouns", s.nouns.to_string()),
            ("hidden", self.hidden.to_string()),
            ("latent", self.latent.to_string()),
            ("activation", show_activation(self.activation).into()),
            ("temperature", l.temperature.to_string()),
            ("anchor", l.anchor.name().into()),
            ("alpha_audio", l.alpha[ModalityId::Audio].to_string()),
            ("alpha_video", l.alpha[ModalityId::Video].to_string()),
            ("alpha_language", l.alpha[ModalityId::Language].to_string()),
            ("consensus_gradient", show_gradient(l.consensus_gradient).into()),
            ("consensus_weight", l.consensus_weight.to_string()),
            ("pairs", show_pairs(&l.pairs)),
            ("align_epochs", t.align_epochs.to_string()),
            ("refine_epochs", t.refine_epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("mode", t.mode.name().into()),
            ("log_every", t.log_every.to_string()),
            ("reset_optimizer", t.reset_optimizer_between_stages.to_string()),
            ("grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string())),
            ("drop_last", t.drop_last.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_split", e.split.name().into()),
            ("discovery_pairs", show_pairs(&e.discovery_pairs)),
            ("retrieval_pairs", show_pairs(&e.retrieval_pairs)),
            ("k_list", show_list(&e.k_list)),
            ("n_clusters", e.n_clusters.to_string()),
            ("cluster_modality", e.cluster_modality.name().into()),
            ("cluster_points", e.cluster_points.to_string()),
            ("exemplars", e.exemplars.to_string()),
            ("probe_modality", e.probe_modality.name().into()),
            ("probe_protocol", e.probe_protocol.name().into()),
            ("probe_epochs", e.probe.epochs.to_string()),
            ("probe_lr", e.probe.lr.to_string()),
            ("probe_batch_size", e.probe.batch_size.to_string()),
            ("grad_instances", self.grad.instances.to_string()),
            ("grad_max_batch", self.grad.max_batch.to_string()),
            ("grad_max_dim", self.grad.max_dim.to_string()),
            ("grad_step", self.grad.step.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# resolved mc3 run configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Mc3Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(bad(k, format!("repeated at {}:{}", origin.display(), i + 1)));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(kv, "override must look like key=value"))?;
        self.set(k.trim(), v)
    }

    /// Copies the shared seed into the sections that consume it and checks
    /// every section.
    pub fn finish(&mut self) -> Result<()> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.probe.seed = self.seed;
        self.grad.seed = self.seed;
        if self.latent == 0 {
            return Err(bad("latent", "must be at least 1"));
        }
        for &k in &self.eval.k_list {
            if k == 0 {
                return Err(bad("k_list", "k must be at least 1"));
            }
        }
        if self.eval.n_clusters == 0 {
            return Err(bad("n_clusters", "must be at least 1"));
        }
        if self.grad.instances == 0 {
            return Err(bad("grad_instances", "must be at least 1"));
        }
        self.train.validate()?;
        self.eval.probe.validate()
    }

    pub fn encoder_dims(&self, input: PerModality<usize>) -> mc3::encoders::EncoderDims {
        mc3::encoders::EncoderDims {
            input,
            hidden: self.hidden,
            latent: self.latent,
        }
    }
}
