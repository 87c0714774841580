//! The `surge` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{corpus_to_text, read_text, Dataset, Split, CORPUS_FILE, KG_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::kqa::{augment, items_to_text, synthesize_kqa, MetricReport};
use crate::model::{prepare, Example, Surge};
use crate::retriever::retrieval_metrics;
use crate::synth::{generate as synthesize, SynthConfig};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};
use crate::trainer::{train, TrainConfig, TrainData};

pub const CHECKPOINT_STEM: &str = "model";
pub const CONFIG_FILE: &str = "config.txt";
pub const EPOCH_LOG: &str = "epochs.log";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "surge", about = "Knowledge-graph grounded dialogue generation", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write a synthetic graph, vocabulary and dialogue corpus.
    Synth(SynthArgs),
    /// Train a model and keep the best checkpoint.
    Train(TrainArgs),
    /// Rank candidate triplets for every dialogue of a split.
    Retrieve(RunArgs),
    /// Greedy responses conditioned on the top retrieved triplets.
    Generate(RunArgs),
    /// Score responses against a corpus split.
    Eval(EvalArgs),
    /// Build KQA items for a split.
    Kqa(KqaArgs),
    /// Re-run the command recorded in a manifest after checking its inputs.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 160)]
    pub n_entities: usize,
    #[arg(long, default_value_t = 12)]
    pub n_relations: usize,
    #[arg(long, default_value_t = 800)]
    pub n_triplets: usize,
    #[arg(long, default_value_t = 500)]
    pub n_dialogues: usize,
    #[arg(long, default_value_t = 7)]
    pub distractor_degree: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One response per line, aligned with the split's dialogues.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Ranked candidates from `retrieve`, for MRR and Hits@k.
    #[arg(long)]
    pub retrieved: Option<PathBuf>,
    /// Output directory; defaults to the responses' directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KqaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write answer-swapped copies.
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// What a command ran with and what it read and wrote.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub git_describe: String,
    /// Path to lowercase hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest.json"))
}

impl RunManifest {
    fn new(command: &str, args: &[String], inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<Self> {
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.display().to_string(), sha256_file(p)?);
        }
        Ok(Self {
            command: command.to_string(),
            args: args.to_vec(),
            config: BTreeMap::new(),
            seed: None,
            git_describe: git_describe(),
            inputs: digests,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }

    fn with_config(mut self, text: &str, seed: u64) -> Self {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        self.seed = Some(seed);
        self
    }

    /// Written as `<command>.manifest.json` in `dir`.
    fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write(&manifest_path(dir, &self.command), text + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }

    /// Inputs whose digest no longer matches.
    pub fn changed_inputs(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for (p, want) in &self.inputs {
            if sha256_file(Path::new(p))? != *want {
                out.push(p.clone());
            }
        }
        Ok(out)
    }
}

/// A trained model loaded from a run directory.
pub struct TrainedRun {
    pub config: TrainConfig,
    pub model: Surge,
    pub params: ParamStore<f32>,
    pub files: Vec<PathBuf>,
}

pub fn load_run(run: &Path, data: &Dataset) -> Result<TrainedRun> {
    let config_path = run.join(CONFIG_FILE);
    let config = TrainConfig::parse(&read_text(&config_path)?)?;
    let mut params = ParamStore::<f32>::new();
    let model = Surge::new(
        &mut params,
        config.model,
        data.vocab.len(),
        data.kg.relations().len(),
        &mut ChaCha8Rng::seed_from_u64(config.seed),
    )?;
    let stem = run.join(CHECKPOINT_STEM);
    params.load_values(&load_checkpoint(&stem)?)?;
    let files = vec![
        config_path,
        stem.with_extension("manifest"),
        stem.with_extension("bin"),
    ];
    Ok(TrainedRun {
        config,
        model,
        params,
        files,
    })
}

pub fn examples(data: &Dataset, split: Split, config: &TrainConfig) -> Result<(Vec<crate::corpus::Dialogue>, Vec<Example>)> {
    let dialogues = data.split(split);
    let ex = dialogues
        .iter()
        .map(|d| prepare(&data.kg, &data.vocab, d, &config.model))
        .collect::<Result<Vec<_>>>()?;
    Ok((dialogues, ex))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn cmd_synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let config = SynthConfig {
        n_entities: a.n_entities,
        n_relations: a.n_relations,
        n_triplets: a.n_triplets,
        n_dialogues: a.n_dialogues,
        distractor_degree: a.distractor_degree,
        seed: a.seed,
        ..SynthConfig::default()
    };
    config.validate()?;
    create_dir(&a.out)?;
    let outputs = [KG_FILE, CORPUS_FILE, VOCAB_FILE].map(|f| a.out.join(f));
    let mut manifest = RunManifest::new("synth", argv, &[], &outputs)?;
    for (k, v) in serde_json::to_value(&config)?.as_object().into_iter().flatten() {
        if k != "templates" {
            manifest.config.insert(k.clone(), v.to_string());
        }
    }
    manifest.seed = Some(a.seed);
    manifest.save(&a.out)?;
    let data = synthesize(&config)?;
    write(&outputs[0], &data.kg_text)?;
    write(&outputs[1], corpus_to_text(&data.dialogues)?)?;
    write(&outputs[2], data.vocab.to_text())?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let config_text = read_text(&a.config)?;
    let config = TrainConfig::parse(&config_text)?;
    let data = Dataset::load(&a.data, a.kg.as_deref())?;
    create_dir(&a.out)?;
    let stem = a.out.join(CHECKPOINT_STEM);
    let outputs = vec![
        a.out.join(CONFIG_FILE),
        stem.with_extension("manifest"),
        stem.with_extension("bin"),
        a.out.join(EPOCH_LOG),
    ];
    let mut inputs = vec![a.config.clone()];
    inputs.extend(data.inputs.iter().cloned());
    let snapshot = config.to_text();
    RunManifest::new("train", argv, &inputs, &outputs)?
        .with_config(&snapshot, config.seed)
        .save(&a.out)?;
    write(&outputs[0], &snapshot)?;

    let (_, train_ex) = examples(&data, Split::Train, &config)?;
    let (valid_dialogues, valid) = examples(&data, Split::Valid, &config)?;
    let valid_kqa = synthesize_kqa(&valid_dialogues, &data.kg, &data.vocab);
    let td = TrainData {
        kg: &data.kg,
        vocab: &data.vocab,
        train: train_ex,
        valid,
        valid_dialogues,
        valid_kqa,
    };
    let mut log = String::new();
    let log_path = outputs[3].clone();
    let outcome = train(&config, &td, |rec, _| {
        log.push_str(&rec.to_text());
        log.push('\n');
        write(&log_path, &log)
    })?;
    save_checkpoint(&outcome.best, &stem)?;
    if outcome.aborted {
        return Err(Error::NonFinite(format!(
            "training diverged; kept the checkpoint from epoch {}",
            outcome.best_epoch
        )));
    }
    Ok(())
}

fn out_dir(run: &RunArgs) -> PathBuf {
    run.out.clone().unwrap_or_else(|| run.run.clone())
}

fn cmd_retrieve(a: &RunArgs, argv: &[String]) -> Result<()> {
    let data = Dataset::load(&a.data, a.kg.as_deref())?;
    let run = load_run(&a.run, &data)?;
    let dir = out_dir(a);
    create_dir(&dir)?;
    let path = dir.join(format!("{}.retrieved.tsv", split_name(a.split)));
    let mut inputs = data.inputs.clone();
    inputs.extend(run.files.iter().cloned());
    RunManifest::new("retrieve", argv, &inputs, &[path.clone()])?
        .with_config(&run.config.to_text(), run.config.seed)
        .save(&dir)?;
    let (_, ex) = examples(&data, a.split, &run.config)?;
    let mut out = String::new();
    for e in &ex {
        let set = run.model.retrieve(&run.params, e)?;
        out.push_str(&format!("# {}\n", e.id));
        for (rank, i) in set.ranking().into_iter().enumerate() {
            let (h, r, t) = data.kg.surfaces(&set.triplets[i]);
            out.push_str(&format!("{}\t{:.6}\t{h}\t{r}\t{t}\n", rank + 1, set.probs[i]));
        }
    }
    write(&path, out)
}

fn cmd_generate(a: &RunArgs, argv: &[String]) -> Result<()> {
    let data = Dataset::load(&a.data, a.kg.as_deref())?;
    let run = load_run(&a.run, &data)?;
    let dir = out_dir(a);
    create_dir(&dir)?;
    let path = dir.join(format!("{}.out", split_name(a.split)));
    let mut inputs = data.inputs.clone();
    inputs.extend(run.files.iter().cloned());
    RunManifest::new("generate", argv, &inputs, &[path.clone()])?
        .with_config(&run.config.to_text(), run.config.seed)
        .save(&dir)?;
    let (_, ex) = examples(&data, a.split, &run.config)?;
    let mut out = String::new();
    for e in &ex {
        let (_, tokens) = run.model.respond(&run.params, &data.kg, e, run.config.n_triplets)?;
        out.push_str(&data.vocab.decode(&tokens));
        out.push('\n');
    }
    write(&path, out)
}

/// Gold ranks read back from a `retrieve` file.
fn retrieved_sets(
    path: &Path,
    data: &Dataset,
    dialogues: &[crate::corpus::Dialogue],
) -> Result<Vec<crate::retriever::CandidateSet>> {
    let text = read_text(path)?;
    let mut by_id: BTreeMap<String, Vec<(f64, crate::kg::Triplet)>> = BTreeMap::new();
    let mut current = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(id) = line.strip_prefix("# ") {
            current = Some(id.to_string());
            by_id.entry(id.to_string()).or_default();
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = match (&current, f.as_slice()) {
            (Some(id), [_, p, h, r, t]) => p
                .parse::<f64>()
                .ok()
                .zip(data.kg.lookup(h, r, t))
                .map(|x| (id.clone(), x)),
            _ => None,
        };
        let (id, row) = parsed.ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `rank<TAB>prob<TAB>head<TAB>relation<TAB>tail`".into(),
        })?;
        by_id.get_mut(&id).expect("header seen").push(row);
    }
    dialogues
        .iter()
        .map(|d| {
            let rows = by_id.get(&d.id).cloned().unwrap_or_default();
            let triplets: Vec<_> = rows.iter().map(|r| r.1).collect();
            let gold = crate::retriever::gold_flags(&triplets, &d.gold(&data.kg));
            let scores = rows.iter().map(|r| r.0.max(f64::MIN_POSITIVE).ln()).collect();
            crate::retriever::CandidateSet::new(triplets, scores, gold)
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let data = Dataset::load(&a.data, a.kg.as_deref())?;
    let dir = a.out.clone().unwrap_or_else(|| {
        a.responses
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    create_dir(&dir)?;
    let path = dir.join(REPORT_FILE);
    let mut inputs = data.inputs.clone();
    inputs.push(a.responses.clone());
    inputs.extend(a.retrieved.iter().cloned());
    RunManifest::new("eval", argv, &inputs, &[path.clone()])?.save(&dir)?;

    let dialogues = data.split(a.split);
    let responses: Vec<String> = read_text(&a.responses)?.lines().map(str::to_string).collect();
    if responses.len() != dialogues.len() {
        return Err(Error::Invalid(format!(
            "{} responses for {} dialogues in the split",
            responses.len(),
            dialogues.len()
        )));
    }
    let items = synthesize_kqa(&dialogues, &data.kg, &data.vocab);
    let retrieval = match &a.retrieved {
        Some(p) => Some(retrieval_metrics(&retrieved_sets(p, &data, &dialogues)?)),
        None => None,
    };
    let report = MetricReport::compute(&dialogues, &responses, &items, retrieval.as_ref())?;
    let text = report.to_text();
    print!("{text}");
    write(&path, text)
}

fn cmd_kqa(a: &KqaArgs, argv: &[String]) -> Result<()> {
    let data = Dataset::load(&a.data, a.kg.as_deref())?;
    create_dir(&a.out)?;
    let path = a.out.join(format!("{}.kqa.jsonl", split_name(a.split)));
    RunManifest::new("kqa", argv, &data.inputs, &[path.clone()])?.save(&a.out)?;
    let mut items = synthesize_kqa(&data.split(a.split), &data.kg, &data.vocab);
    if a.augment {
        let extra = augment(&items);
        items.extend(extra);
    }
    write(&path, items_to_text(&items)?)
}

fn cmd_rerun(a: &RerunArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    let changed = m.changed_inputs()?;
    if !changed.is_empty() {
        return Err(Error::Invalid(format!("inputs changed: {}", changed.join(", "))));
    }
    let mut argv = vec!["surge".to_string()];
    argv.extend(m.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Invalid(e.to_string()))?;
    if matches!(cli.command, Cmd::Rerun(_)) {
        return Err(Error::Invalid("a manifest cannot record a rerun".into()));
    }
    execute(&cli, &m.args)
}

fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Cmd::Synth(a) => cmd_synth(a, argv),
        Cmd::Train(a) => cmd_train(a, argv),
        Cmd::Retrieve(a) => cmd_retrieve(a, argv),
        Cmd::Generate(a) => cmd_generate(a, argv),
        Cmd::Eval(a) => cmd_eval(a, argv),
        Cmd::Kqa(a) => cmd_kqa(a, argv),
        Cmd::Rerun(a) => cmd_rerun(a),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on a failed command, 2 on bad usage.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
