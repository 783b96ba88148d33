//! Command-line front end. Results go to files or stdout, diagnostics to
//! stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::causal::{build_counterfactual_vocab, CounterfactualVocab};
use crate::checkpoint::Checkpoint;
use crate::config::{load_config_file, ModelConfig};
use crate::data::{synth_dataset_with, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{parse_rates, read_csv, run_robustness_eval, summarize_auilc, write_csv, RobustnessSpec};
use crate::masking::{Modalities, Scenario};
use crate::model::{CiderModel, Dims, InferenceModel};
use crate::training::{TrainOptions, TrainState};

pub const SEED_ENV: &str = "CIDER_SEED";

#[derive(Parser, Debug)]
#[command(name = "cider", version, about = "Missing-modality-robust multimodal sentiment analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic feature file.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint across missing rates; writes CSV, prints AUILC.
    EvalRobustness(EvalArgs),
    /// Print per-metric AUILC of a robustness CSV.
    Auilc(AuilcArgs),
    /// Build the counterfactual vocabulary of a dataset's training split.
    BuildCfVocab(VocabArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 2, value_parser = parse_cls)]
    pub cls: usize,
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Give audio and vision the text length (required by tmfm/stmfm).
    #[arg(long)]
    pub aligned: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on generated data instead, e.g. `n=64,cls=2,bias=0.5`.
    #[arg(long, conflicts_with = "data", value_parser = parse_synth_spec)]
    pub synth: Option<SynthSpec>,
    #[arg(long, value_parser = parse_cls)]
    pub cls: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Extra `key=value` model settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub no_recon: bool,
    #[arg(long)]
    pub no_attn: bool,
    #[arg(long)]
    pub no_joint: bool,
    #[arg(long)]
    pub no_mcm: bool,
    #[arg(long)]
    pub no_cf: bool,
    #[arg(long)]
    pub no_wsam: bool,
    /// `off` disables both the causal head and counterfactual subtraction.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub maci: Switch,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// One scenario or a comma-separated list.
    #[arg(long, default_value = "rmfm")]
    pub scenario: String,
    /// `start:stop:step`, a comma list, or a single rate.
    #[arg(long, alias = "rate", default_value = "0:1:0.1")]
    pub rates: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub smm_keep: Option<Modalities>,
    #[arg(long)]
    pub mask_seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub mask_repeats: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub maci: Switch,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AuilcArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_cls)]
    pub cls: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub cls: Option<usize>,
    pub bias: f64,
    pub aligned: bool,
}

/// Parses `n=64,cls=2,bias=0.5,aligned=true`; a bare number means `n`.
pub fn parse_synth_spec(s: &str) -> std::result::Result<SynthSpec, String> {
    let mut spec = SynthSpec {
        n: 0,
        cls: None,
        bias: 0.0,
        aligned: false,
    };
    let mut have_n = false;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').unwrap_or(("n", part));
        let v = v.trim();
        match k.trim() {
            "n" => {
                spec.n = v.parse().map_err(|e| format!("n: {e}"))?;
                have_n = true;
            }
            "cls" => spec.cls = Some(parse_cls(v)?),
            "bias" => spec.bias = v.parse().map_err(|e| format!("bias: {e}"))?,
            "aligned" => spec.aligned = v.parse().map_err(|e| format!("aligned: {e}"))?,
            other => return Err(format!("unknown synth key `{other}`")),
        }
    }
    if !have_n {
        return Err("synth spec needs n".into());
    }
    Ok(spec)
}

fn parse_cls(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(c @ (2 | 7)) => Ok(c),
        Ok(c) => Err(format!("class count must be 2 or 7, got {c}")),
        Err(e) => Err(e.to_string()),
    }
}

/// Explicit value, else `CIDER_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} is not an integer: `{v}`"))),
        Err(_) => Ok(0),
    }
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::EvalRobustness(a) => cmd_eval(&a),
        Command::Auilc(a) => cmd_auilc(&a),
        Command::BuildCfVocab(a) => cmd_build_vocab(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        aligned: a.aligned,
        ..SynthConfig::default()
    };
    let ds = synth_dataset_with(a.n, a.cls, a.bias, resolve_seed(a.seed)?, &cfg)?;
    ds.save(&a.out)?;
    eprintln!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn model_config(a: &TrainArgs) -> Result<(ModelConfig, Option<PathBuf>, Option<usize>)> {
    let (mut cfg, rest, file_seed) = match &a.config {
        Some(p) => {
            let (cfg, rest) = load_config_file(p)?;
            let text = std::fs::read_to_string(p)?;
            let has_seed = crate::config::parse_kv(&text)?.contains_key("seed");
            (cfg, rest, has_seed)
        }
        None => (ModelConfig::default(), Default::default(), false),
    };
    let mut data = None;
    let mut cls = None;
    for (k, v) in rest {
        match k.as_str() {
            "data" => data = Some(PathBuf::from(v)),
            "cls" => cls = Some(parse_cls(&v).map_err(Error::Config)?),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }
    cfg.seed = match a.seed {
        Some(s) => s,
        None if file_seed => cfg.seed,
        None => resolve_seed(None)?,
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = a.d {
        cfg.d = d;
        cfg.d_l = d;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if a.no_recon {
        cfg.alpha = 0.0;
    }
    if a.no_attn {
        cfg.beta = 0.0;
    }
    if a.no_joint {
        cfg.gamma = 0.0;
    }
    if a.no_mcm || a.maci == Switch::Off {
        cfg.use_mcm = false;
    }
    if a.no_cf || a.maci == Switch::Off {
        cfg.use_cf = false;
    }
    if a.no_wsam {
        cfg.use_wsam = false;
    }
    cfg.validate()?;
    Ok((cfg, data, cls))
}

fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (cfg, file_data, file_cls) = model_config(a)?;
    let cls = a.cls.or(file_cls);
    let ds = match (a.synth.as_ref(), a.data.as_ref().or(file_data.as_ref())) {
        (Some(spec), _) => {
            let sc = SynthConfig {
                aligned: spec.aligned,
                ..SynthConfig::default()
            };
            let c = cls.or(spec.cls).unwrap_or(2);
            synth_dataset_with(spec.n, c, spec.bias, cfg.seed, &sc)?
        }
        (None, Some(p)) => {
            let ds = Dataset::load(p)?;
            match cls {
                Some(c) => ds.with_classes(c)?,
                None => ds,
            }
        }
        (None, None) => return Err(Error::InvalidArgument("one of --data or --synth is required".into())),
    };

    let (mut state, vocab, append) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.dims != Dims::of(&ds) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint dims {:?} do not match the data {:?}",
                    ck.dims,
                    Dims::of(&ds)
                )));
            }
            let (mut st, vocab) = ck.into_state()?;
            // Only the schedule may change on resume.
            st.model.cfg.epochs = cfg.epochs;
            st.model.cfg.early_stop_patience = cfg.early_stop_patience;
            (st, vocab, true)
        }
        None => (TrainState::new(CiderModel::new(cfg.clone(), Dims::of(&ds))?), None, false),
    };
    let vocab = match vocab {
        Some(v) => Some(v),
        None if state.model.cfg.use_cf => Some(build_counterfactual_vocab(&ds, ds.cls)?),
        None => None,
    };

    let log = log_path(a);
    let mut log_file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&log)?,
    );
    let mut io_err = None;
    let logs = state.fit(&ds, &TrainOptions::default(), |entry| {
        eprintln!(
            "epoch {:>3}  ce {:.4}  ce~ {:.4}  total {:.4}  valid {}",
            entry.epoch,
            entry.train.ce_complete,
            entry.train.ce_incomplete,
            entry.train.total,
            entry.valid_ce.map_or("-".into(), |v| format!("{v:.4}"))
        );
        let line = serde_json::to_string(entry).expect("log entries serialize");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log_file.flush()?;
    Checkpoint::from_state(&state, vocab).save(&a.out)?;
    eprintln!(
        "trained {} epoch(s), now at epoch {}; checkpoint {}",
        logs.len(),
        state.epoch,
        a.out.display()
    );
    Ok(())
}

fn parse_scenarios(s: &str) -> Result<Vec<Scenario>> {
    s.split(',').map(|x| x.trim().parse()).collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?.with_classes(ck.dims.cls)?;
    if ds.d_a != ck.dims.d_a || ds.d_v != ck.dims.d_v || ds.vocab_size > ck.dims.vocab {
        return Err(Error::Checkpoint(format!(
            "data (vocab {}, d_a {}, d_v {}) does not fit the checkpoint {:?}",
            ds.vocab_size, ds.d_a, ds.d_v, ck.dims
        )));
    }
    let model = ck.model()?;
    let maci = a.maci == Switch::On;
    let table = ck.class_table.as_ref().map(|t| if maci { t.uniform() } else { t.clone() });
    if model.uses_class_table() && table.is_none() {
        return Err(Error::Checkpoint("checkpoint lacks its class table".into()));
    }
    let vocab = if maci && model.cfg.use_cf { ck.cf_vocab.as_ref() } else { None };
    let inference = InferenceModel {
        model: &model,
        table,
        vocab,
        tau: a.tau.unwrap_or(model.cfg.tau),
    };
    let samples = ds.split_vec(a.split);
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("the {} split is empty", a.split)));
    }
    let rates = parse_rates(&a.rates)?;
    let seed = resolve_seed(a.mask_seed)?;
    let mut rows = Vec::new();
    for scenario in parse_scenarios(&a.scenario)? {
        let spec = RobustnessSpec {
            scenario,
            rates: rates.clone(),
            smm_keep: a.smm_keep,
            seed,
            repeats: a.mask_repeats,
        };
        eprintln!("evaluating {scenario} at {} rate(s)", rates.len());
        rows.extend(run_robustness_eval(&inference, &samples, &spec)?);
    }
    write_csv(&rows, &a.out)?;
    if rates.len() >= 2 {
        match summarize_auilc(&rows) {
            Ok(summary) => println!("{}", serde_json::to_string_pretty(&summary)?),
            Err(e) => eprintln!("AUILC skipped: {e}"),
        }
    }
    Ok(())
}

pub fn cmd_auilc(a: &AuilcArgs) -> Result<()> {
    let rows = read_csv(&a.input)?;
    println!("{}", serde_json::to_string_pretty(&summarize_auilc(&rows)?)?);
    Ok(())
}

pub fn cmd_build_vocab(a: &VocabArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?.with_classes(a.cls)?;
    let vocab = build_counterfactual_vocab(&ds, a.cls)?;
    vocab.save(&a.out)?;
    eprintln!(
        "{} tokens counted, {} retained; wrote {}",
        vocab.ranked.len(),
        vocab.retained.len(),
        a.out.display()
    );
    Ok(())
}

/// Loads a vocabulary file written by `build-cf-vocab`.
pub fn load_vocab(path: &Path) -> Result<CounterfactualVocab> {
    CounterfactualVocab::load(path)
}
