//! The `ctcc` command line: synth, train, decode, eval, compress-dump and
//! ctc-decode.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::compress::{CompressionPlan, CompressionPolicy, PolicyKind};
use crate::ctc::{greedy_decode, FramePosteriors, Vocabulary};
use crate::error::{Error, Result};
use crate::features::{
    load_manifest, normalize_datasets, read_task, write_manifest, write_task, Example, SpeakerNormalizer, SynthConfig,
    SyntheticTask,
};
use crate::io::{read_jsonl, read_matrix, write_jsonl, POSTERIORS_MAGIC};
use crate::metrics::{evaluate, tokenize_13a, TokenLine};
use crate::model::{read_checkpoint, write_checkpoint, ModelConfig, Seq2Seq, TargetVocabulary};
use crate::parallel::{self, Execution};
use crate::train::{encode_examples, train_loop, Event, MetricRecord, TrainConfig, TrainState};

/// Environment variable naming the default `train` config file.
pub const CONFIG_ENV: &str = "CTCC_CONFIG";
const DEFAULT_CONFIG: &str = "ctcc.toml";

#[derive(Parser, Debug)]
#[command(name = "ctcc", version, about = "CTC-compressed sequence-to-sequence toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (task.json, manifests and FEAT files).
    Synth(SynthArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Translate a manifest; writes translation and CTC output per utterance.
    Decode(DecodeArgs),
    /// Score hypotheses against references (WER and BLEU).
    Eval(EvalArgs),
    /// Write the compression spans and weights of every utterance.
    CompressDump(DumpArgs),
    /// Greedy CTC decoding of a posteriors file.
    CtcDecode(CtcDecodeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML file with generator settings; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    /// Overrides the task seed (prototypes and mapping).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file; falls back to $CTCC_CONFIG, then ./ctcc.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Single-threaded, fixed-order execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the manifest translations as references.
    #[arg(long)]
    refs_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    /// Speaker statistics; defaults to normalizer.json beside the checkpoint.
    #[arg(long)]
    normalizer: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-tokenise both sides with the 13a rules.
    #[arg(long)]
    tokenize_13a: bool,
    /// Training metrics log to turn into CSV curves.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for steps.csv and epochs.csv.
    #[arg(long)]
    plots_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    /// Model whose CTC tap defines the spans.
    #[arg(long, conflicts_with = "posteriors", required_unless_present = "posteriors")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    manifest: Option<PathBuf>,
    /// A CTCP posteriors file instead of a model.
    #[arg(long)]
    posteriors: Option<PathBuf>,
    /// Policy for `--posteriors` mode: average, weighted or softmax.
    #[arg(long, default_value = "average")]
    policy: String,
    #[arg(long, default_value_t = 0)]
    blank: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CtcDecodeArgs {
    #[arg(long)]
    posteriors: PathBuf,
    /// Vocabulary file, one label per line, `<blank>` first.
    #[arg(long)]
    vocab: PathBuf,
}

/// Runs the command line and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::CompressDump(a) => compress_dump(a),
        Command::CtcDecode(a) => ctc_decode(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let task = SyntheticTask::new(cfg)?;
    create_dir(&a.out)?;
    write_task(&a.out, &task)?;
    let seed = task.config.seed;
    for (i, (name, n)) in [("train", a.train), ("dev", a.dev), ("test", a.test)].into_iter().enumerate() {
        if n == 0 {
            continue;
        }
        let data = task.generate(name, n, crate::parallel::derive_seed(seed, 1 + i as u64), Execution::Parallel)?;
        let path = write_manifest(&a.out, name, &data)?;
        println!("{}: {} utterances", path.display(), data.len());
    }
    Ok(())
}

/// Layout of the `train` config file. Paths are relative to the file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    /// Overrides on top of the chosen profile; any `ModelConfig` field
    /// except the vocabularies.
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub dev: PathBuf,
    /// Take vocabularies from this `task.json`; otherwise from the data.
    #[serde(default)]
    pub task: Option<PathBuf>,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSection {
    /// `desk` or `full`; fields below override it.
    #[serde(default = "desk")]
    pub profile: String,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            profile: desk(),
            overrides: toml::Table::new(),
        }
    }
}

fn desk() -> String {
    "desk".into()
}

/// Deserialises `base` with the keys of `overrides` replaced.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, overrides: &toml::Table) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("struct serialises to an object");
    for (k, v) in overrides {
        if !obj.contains_key(k) && k != "compression" && k != "max_updates" && k != "spec_augment" {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        obj.insert(k.clone(), serde_json::to_value(v)?);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

fn vocabularies(data: &DataSection, train: &[Example]) -> Result<(Vocabulary, TargetVocabulary)> {
    if let Some(task) = &data.task {
        let t = read_task(task)?;
        return Ok((t.ctc_vocab(), t.target_vocab()));
    }
    let phones: BTreeSet<&str> = train.iter().flat_map(|e| e.phones.iter().map(String::as_str)).collect();
    let tokens: BTreeSet<&str> = train.iter().flat_map(|e| e.translation.iter().map(String::as_str)).collect();
    Ok((Vocabulary::with_blank(phones)?, TargetVocabulary::new(tokens)?))
}

fn model_config(section: &toml::Table, ctc: Vocabulary, target: TargetVocabulary) -> Result<ModelConfig> {
    let mut overrides = section.clone();
    let profile = match overrides.remove("profile") {
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(Error::Config("model.profile must be a string".into())),
        None => "desk".into(),
    };
    let base = match profile.as_str() {
        "desk" => ModelConfig::desk(ctc, target),
        "full_st" => ModelConfig::full_st(ctc, target),
        "full_asr" => ModelConfig::full_asr(ctc, target),
        other => return Err(Error::Config(format!("unknown model profile {other:?}"))),
    };
    for k in ["ctc_vocab", "target_vocab"] {
        if overrides.contains_key(k) {
            return Err(Error::Config(format!("{k} is derived from the data")));
        }
    }
    let cfg: ModelConfig = overlay(&base, &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(section: &TrainSection) -> Result<TrainConfig> {
    let base = match section.profile.as_str() {
        "desk" => TrainConfig::desk(),
        "full" => TrainConfig::full(),
        other => return Err(Error::Config(format!("unknown train profile {other:?}"))),
    };
    let cfg: TrainConfig = overlay(&base, &section.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_path(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG))
}

fn train(a: TrainArgs) -> Result<()> {
    let path = config_path(a.config);
    let mut run: RunConfig = read_toml(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run.data.train = base.join(&run.data.train);
    run.data.dev = base.join(&run.data.dev);
    run.data.task = run.data.task.map(|t| base.join(t));

    let mut train_set = load_manifest(&run.data.train)?;
    let mut dev_set = load_manifest(&run.data.dev)?;
    let (ctc, target) = vocabularies(&run.data, &train_set)?;
    let model_cfg = model_config(&run.model, ctc, target)?;
    let mut train_cfg = train_config(&run.train)?;
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    if a.deterministic {
        train_cfg.execution = Execution::Sequential;
    }
    create_dir(&a.out)?;
    if run.data.normalize {
        let norm = normalize_datasets(&mut [&mut train_set, &mut dev_set])?;
        let p = a.out.join("normalizer.json");
        fs::write(&p, serde_json::to_vec_pretty(&norm)?).map_err(|e| Error::file(&p, e))?;
    }
    let tr = encode_examples(&train_set, &model_cfg)?;
    let dv = encode_examples(&dev_set, &model_cfg)?;
    fs::write(a.out.join("config.json"), serde_json::to_vec_pretty(&(&model_cfg, &train_cfg))?)
        .map_err(|e| Error::file(a.out.join("config.json"), e))?;

    let resume = a.resume.as_deref().map(TrainState::<f32>::load).transpose()?;
    let metrics_path = a.out.join("metrics.jsonl");
    let file = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    };
    let mut metrics = BufWriter::new(file.map_err(|e| Error::file(&metrics_path, e))?);
    let out_dir = a.out.clone();
    let outcome = train_loop::<f32>(&model_cfg, &train_cfg, &tr, &dv, resume, &mut |event| {
        match event {
            Event::Record(r) => {
                serde_json::to_writer(&mut metrics, r)?;
                metrics.write_all(b"\n")?;
                if let MetricRecord::Epoch { epoch, dev, .. } = r {
                    log::info!(
                        "epoch {epoch}: dev ce/token {:.4}, accuracy {:.4}",
                        dev.ce_per_token,
                        dev.token_accuracy
                    );
                }
            }
            Event::EpochEnd(state) => {
                metrics.flush()?;
                state.save(&out_dir.join("state.bin"))?;
                let last = Seq2Seq::from_params(model_cfg.clone(), state.params.clone())?;
                write_checkpoint(&out_dir.join("checkpoint_last.ckpt"), &last)?;
            }
        }
        Ok(())
    })?;
    metrics.flush()?;
    write_checkpoint(&a.out.join("checkpoint_avg.ckpt"), &outcome.model)?;
    println!(
        "trained {} epochs ({} updates){}; averaged model in {}",
        outcome.state.epoch,
        outcome.state.update_count,
        if outcome.stopped_early { ", stopped early" } else { "" },
        a.out.join("checkpoint_avg.ckpt").display()
    );
    if let Some(kb) = peak_rss_kb() {
        println!("peak resident memory: {kb} kB");
    }
    Ok(())
}

/// Peak resident set size from /proc, where available.
fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn load_normalizer(explicit: Option<&Path>, checkpoint: &Path) -> Result<Option<SpeakerNormalizer>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = checkpoint.with_file_name("normalizer.json");
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    let bytes = fs::read(&path).map_err(|e| Error::file(&path, e))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

#[derive(Serialize, Deserialize)]
struct Hypothesis {
    id: String,
    tokens: Vec<String>,
    ctc_tokens: Vec<String>,
    truncated: bool,
    score: f64,
}

fn decode(a: DecodeArgs) -> Result<()> {
    let model: Seq2Seq<f32> = read_checkpoint(&a.checkpoint)?;
    let norm = load_normalizer(a.normalizer.as_deref(), &a.checkpoint)?;
    let mut data = load_manifest(&a.manifest)?;
    if let Some(n) = &norm {
        for ex in &mut data {
            ex.features = n.apply(&ex.features)?;
        }
    }
    let cfg = model.config();
    let results = parallel::map(Execution::Parallel, &data, |_, ex| {
        model.decode_translation(ex.features.frames.view(), a.max_len, a.beam)
    });
    let mut hyps = Vec::with_capacity(data.len());
    for (ex, r) in data.iter().zip(results) {
        let t = r?;
        let ctc_seq = crate::ctc::LabelSequence::new(t.ctc_labels.clone(), cfg.ctc_vocab.blank())?;
        hyps.push(Hypothesis {
            id: ex.id.clone(),
            tokens: cfg.target_vocab.decode(&t.tokens),
            ctc_tokens: cfg.ctc_vocab.decode(&ctc_seq),
            truncated: t.truncated,
            score: t.score,
        });
    }
    write_jsonl(&a.out, &hyps)?;
    if let Some(p) = &a.refs_out {
        let refs: Vec<TokenLine> = data
            .iter()
            .map(|e| TokenLine {
                id: e.id.clone(),
                tokens: e.translation.clone(),
            })
            .collect();
        write_jsonl(p, &refs)?;
    }
    let truncated = hyps.iter().filter(|h| h.truncated).count();
    println!("decoded {} utterances ({truncated} truncated)", hyps.len());
    Ok(())
}

fn retokenize(lines: &mut [TokenLine]) {
    for l in lines {
        l.tokens = tokenize_13a(&l.tokens.join(" "));
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut hyps: Vec<TokenLine> = read_jsonl(&a.hyps)?;
    let mut refs: Vec<TokenLine> = read_jsonl(&a.refs)?;
    if a.tokenize_13a {
        retokenize(&mut hyps);
        retokenize(&mut refs);
    }
    let report = evaluate(&hyps, &refs)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, &json).map_err(|e| Error::file(p, e))?,
        None => println!("{json}"),
    }
    if let Some(metrics) = &a.metrics {
        let dir = a.plots_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        create_dir(&dir)?;
        write_curves(metrics, &dir)?;
    }
    Ok(())
}

/// Loss and length curves of a metrics log as CSV.
fn write_curves(metrics: &Path, dir: &Path) -> Result<()> {
    let records: Vec<MetricRecord> = read_jsonl(metrics)?;
    let mut steps = String::from("update,epoch,lr,lambda,ctc,ce\n");
    let mut epochs = String::from(
        "epoch,train_lambda,train_ctc,train_ce,dev_ce_per_token,dev_token_accuracy,mean_subsampled_len,mean_compressed_len,peak_activation_elements\n",
    );
    for r in &records {
        match r {
            MetricRecord::Step {
                update,
                epoch,
                lr,
                lambda,
                ctc,
                ce,
                ..
            } => steps.push_str(&format!("{update},{epoch},{lr},{lambda},{ctc},{ce}\n")),
            MetricRecord::Epoch {
                epoch,
                train_lambda,
                train_ctc,
                train_ce,
                train_mean_subsampled_len,
                train_mean_compressed_len,
                peak_activation_elements,
                dev,
                ..
            } => epochs.push_str(&format!(
                "{epoch},{train_lambda},{train_ctc},{train_ce},{},{},{train_mean_subsampled_len},{train_mean_compressed_len},{peak_activation_elements}\n",
                dev.ce_per_token, dev.token_accuracy
            )),
        }
    }
    for (name, body) in [("steps.csv", steps), ("epochs.csv", epochs)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::file(&p, e))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SpanRecord {
    id: String,
    start: usize,
    end: usize,
    label: String,
    weights: Vec<f64>,
}

fn span_records(id: &str, plan: &CompressionPlan, weights: &[f64], vocab: Option<&Vocabulary>) -> Vec<SpanRecord> {
    plan.spans
        .iter()
        .map(|s| SpanRecord {
            id: id.to_string(),
            start: s.start,
            end: s.end,
            label: vocab
                .and_then(|v| v.label(s.label))
                .map(str::to_string)
                .unwrap_or_else(|| s.label.to_string()),
            weights: weights[s.start..s.end].to_vec(),
        })
        .collect()
}

fn compress_dump(a: DumpArgs) -> Result<()> {
    let mut records = Vec::new();
    if let Some(p) = &a.posteriors {
        let kind: PolicyKind = a.policy.parse()?;
        let lp = read_matrix(p, POSTERIORS_MAGIC)?.mapv(f64::from);
        let post = FramePosteriors::new(lp, 1e-4)?;
        if a.blank >= post.n_labels() {
            return Err(Error::invalid(format!("blank {} outside {} labels", a.blank, post.n_labels())));
        }
        let plan = CompressionPlan::from_posteriors(&post, &CompressionPolicy::new(kind), a.blank);
        let weights = plan.weights(post.log_probs());
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        records.extend(span_records(&id, &plan, &weights, None));
    } else {
        let ckpt = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        let manifest = a
            .manifest
            .as_ref()
            .ok_or_else(|| Error::invalid("--manifest is required with --checkpoint"))?;
        let model: Seq2Seq<f32> = read_checkpoint(ckpt)?;
        let norm = load_normalizer(None, ckpt)?;
        let policy = model
            .config()
            .compression
            .unwrap_or_else(|| CompressionPolicy::new(PolicyKind::Average));
        let vocab = &model.config().ctc_vocab;
        for mut ex in load_manifest(manifest)? {
            if let Some(n) = &norm {
                ex.features = n.apply(&ex.features)?;
            }
            let enc = model.encoder_forward(ex.features.frames.view())?;
            let lp = enc.ctc_posteriors.log_probs().mapv(f64::from);
            let plan = CompressionPlan::from_posteriors(
                &FramePosteriors::from_log_probs_unchecked(lp.clone()),
                &policy,
                vocab.blank(),
            );
            let weights = plan.weights(lp.view());
            records.extend(span_records(&ex.id, &plan, &weights, Some(vocab)));
        }
    }
    write_jsonl(&a.out, &records)?;
    Ok(())
}

fn ctc_decode(a: CtcDecodeArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let lp = read_matrix(&a.posteriors, POSTERIORS_MAGIC)?.mapv(f64::from);
    if lp.ncols() != vocab.len() {
        return Err(Error::invalid(format!(
            "posteriors have {} labels, vocabulary {}",
            lp.ncols(),
            vocab.len()
        )));
    }
    let post = FramePosteriors::new(lp, 1e-4)?;
    let (_, collapsed) = greedy_decode(&post, vocab.blank())?;
    println!("{}", vocab.decode(&collapsed).join(" "));
    Ok(())
}
