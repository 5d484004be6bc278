//! Subcommand implementations. Each returns the process exit code on
//! success; errors are mapped to exit codes by the caller.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tempnorm_core::backends::{write_dump, FileProvider, LogprobProvider, ToyProvider, TruncatingProvider};
use tempnorm_core::dataset::{read_jsonl, write_jsonl};
use tempnorm_core::decode::sample_sequence;
use tempnorm_core::eval::{Orientation, Statistic};
use tempnorm_core::experiment::{run_experiment, score_records, write_scores_csv, ExperimentConfig, ProviderSpec};
use tempnorm_core::oracle::{run_oracle_suite, OracleConfig};
use tempnorm_core::scan::{scan_document, scan_document_nucleus, DEFAULT_K, DEFAULT_MIN_RUN};
use tempnorm_core::{DecodingStrategy, Error, Label, Result, ScoreParams64, SequenceRecord, ToyLm64};
use tempnorm_http::{HttpConfig, HttpProvider};

use crate::manifest::Run;
use crate::EXIT_ORACLE;

/// Overlays the keys of the JSON object in `config` onto `flags`.
fn resolve<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else { return Ok(flags) };
    let mut merged = serde_json::to_value(&flags)?;
    let overrides: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let Value::Object(overrides) = overrides else {
        return Err(Error::Format(format!("{}: config must be a JSON object", path.display())));
    };
    let fields = merged.as_object_mut().expect("argument structs serialize to objects");
    fields.extend(overrides);
    Ok(serde_json::from_value(merged)?)
}

fn need<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidParameter(format!("missing --{flag}")))
}

fn read_datasets(paths: &[PathBuf]) -> Result<Vec<SequenceRecord>> {
    if paths.is_empty() {
        return Err(Error::InvalidParameter("missing --dataset".into()));
    }
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_jsonl(p)?);
    }
    Ok(records)
}

pub fn open_provider(spec: &ProviderSpec) -> Result<Box<dyn LogprobProvider<f64>>> {
    Ok(match spec {
        ProviderSpec::Toy(p) => Box::new(ToyProvider::new(ToyLm64::load(p)?)),
        ProviderSpec::File(p) => Box::new(FileProvider::open(p)?),
        ProviderSpec::Http(p) => Box::new(HttpProvider::new(HttpConfig::load(p)?)?),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_jsonl_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

// ---------------------------------------------------------------- models

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// JSONL file(s) whose `tokens` form the training corpus.
    #[arg(long = "corpus")]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Additive smoothing constant.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<u8> {
    let config = args.config.clone();
    let a = resolve(args, config.as_deref())?;
    let corpus: Vec<Vec<u32>> = read_datasets(&a.corpus)?.into_iter().map(|r| r.tokens).collect();
    let model = ToyLm64::train(&corpus, need(a.vocab_size, "vocab-size")?, a.order, a.alpha)?;
    let mut run = Run::start("train", &need(a.out.clone(), "out")?)?;
    model.save(run.output("model.json"))?;
    run.finish(&a, Vec::new())?;
    Ok(0)
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomModelArgs {
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub order: usize,
    /// Scale of the random logits; larger is peakier.
    #[arg(long, default_value_t = 1.5)]
    pub sharpness: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn random_model(args: RandomModelArgs) -> Result<u8> {
    let config = args.config.clone();
    let a = resolve(args, config.as_deref())?;
    let model = ToyLm64::random(need(a.vocab_size, "vocab-size")?, a.order, a.sharpness, a.seed)?;
    let mut run = Run::start("random-model", &need(a.out.clone(), "out")?)?;
    model.save(run.output("model.json"))?;
    run.finish(&a, vec![a.seed])?;
    Ok(0)
}

// ------------------------------------------------------------------ gen

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Pure,
    Temperature,
    #[value(name = "top_k")]
    TopK,
    #[value(name = "top_p")]
    TopP,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StrategyKind::Pure)]
    pub strategy: StrategyKind,
    #[arg(long, default_value_t = 0.8)]
    pub tau: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    /// Number of sequences; defaults to one per prompt record.
    #[arg(long)]
    pub n: Option<usize>,
    /// Continuation length in tokens.
    #[arg(long, default_value_t = 50)]
    pub length: usize,
    /// JSONL whose records supply shared prompts, one per output record.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub prompt_len: usize,
    /// Record `i` is sampled with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = Label::Machine)]
    pub label: Label,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl GenArgs {
    fn decoding(&self) -> DecodingStrategy {
        match self.strategy {
            StrategyKind::Pure => DecodingStrategy::Pure,
            StrategyKind::Temperature => DecodingStrategy::Temperature { tau: self.tau },
            StrategyKind::TopK => DecodingStrategy::TopK { k: self.k },
            StrategyKind::TopP => DecodingStrategy::TopP { p: self.p },
        }
    }
}

#[derive(Serialize)]
struct GenSnapshot<'a> {
    #[serde(flatten)]
    args: &'a GenArgs,
    /// Parameters that actually shaped sampling; `top_k: null` means
    /// top-k truncation was off.
    decoding: Value,
}

pub fn gen(args: GenArgs) -> Result<u8> {
    let config = args.config.clone();
    let mut a = resolve(args, config.as_deref())?;
    let model = ToyLm64::load(need(a.model.as_ref(), "model")?)?;
    let strategy = a.decoding();
    strategy.validate(model.vocab_size())?;
    let out_dir = need(a.out.clone(), "out")?;

    let prompts = match &a.prompt_file {
        Some(p) => {
            let prompts = read_jsonl(p)?;
            if let Some(short) = prompts.iter().find(|r| r.tokens.len() < a.prompt_len) {
                return Err(Error::InvalidParameter(format!(
                    "prompt record `{}` has {} tokens, fewer than --prompt-len {}",
                    short.id,
                    short.tokens.len(),
                    a.prompt_len
                )));
            }
            Some(prompts)
        }
        None => None,
    };
    let n = match (&prompts, a.n) {
        (Some(p), Some(n)) if n > p.len() => {
            return Err(Error::InvalidParameter(format!("--n {n} exceeds the {} prompt records", p.len())))
        }
        (_, Some(n)) => n,
        (Some(p), None) => p.len(),
        (None, None) => return Err(Error::InvalidParameter("missing --n".into())),
    };
    a.n = Some(n);

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let prompt = prompts.as_ref().map(|p| &p[i]);
        let prefix = prompt.map_or(&[][..], |r| &r.tokens[..a.prompt_len]);
        let mut rec = sample_sequence(&model, &strategy, a.length, prefix, a.seed + i as u64)?;
        rec.label = a.label;
        if let Some(r) = prompt {
            rec.meta.insert("prompt_id".into(), r.id.clone().into());
        }
        records.push(rec);
    }

    let mut run = Run::start("gen", &out_dir)?;
    write_jsonl(run.output("dataset.jsonl"), &records)?;
    let snapshot = GenSnapshot { args: &a, decoding: serde_json::to_value(strategy.meta())? };
    run.finish(&snapshot, vec![a.seed])?;
    Ok(0)
}

// ---------------------------------------------------------------- score

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreArgs {
    #[arg(long = "dataset")]
    pub dataset: Vec<PathBuf>,
    /// `toy:<model.json>`, `file:<dump.jsonl>` or `http:<config.json>`.
    #[arg(long)]
    pub provider: Option<ProviderSpec>,
    #[arg(long, default_value_t = 0.8)]
    pub tau: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    /// Accept lower bounds from top-n providers.
    #[arg(long)]
    pub allow_truncated: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn score(args: ScoreArgs) -> Result<u8> {
    let config = args.config.clone();
    let a = resolve(args, config.as_deref())?;
    let records = read_datasets(&a.dataset)?;
    let provider = open_provider(need(a.provider.as_ref(), "provider")?)?;
    let params = ScoreParams64::new(a.tau, a.k, a.p)?;
    // Fast-detect has no bound under truncation; it is left blank rather
    // than refused so the other columns can still be produced.
    let full = provider.capability().is_full();
    let stats: Vec<Statistic> = Statistic::ALL.into_iter().filter(|&s| full || s != Statistic::Fastdetect).collect();
    let batch = score_records(&records, provider.as_ref(), &stats, &params, a.allow_truncated)?;
    let mut run = Run::start("score", &need(a.out.clone(), "out")?)?;
    write_scores_csv(File::create(run.output("scores.csv"))?, &batch.scores)?;
    run.finish(&a, Vec::new())?;
    Ok(0)
}

// ----------------------------------------------------------------- dump

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpArgs {
    #[arg(long = "dataset")]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub provider: Option<ProviderSpec>,
    /// Keep only the `n` most likely tokens (plus the observed one) per row.
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn dump(args: DumpArgs) -> Result<u8> {
    let config = args.config.clone();
    let a = resolve(args, config.as_deref())?;
    let records = read_datasets(&a.dataset)?;
    let provider = open_provider(need(a.provider.as_ref(), "provider")?)?;
    let mut run = Run::start("dump", &need(a.out.clone(), "out")?)?;
    let path = run.output("dump.jsonl");
    match a.top_n {
        Some(n) => write_dump(&path, &TruncatingProvider::new(provider, n)?, &records)?,
        None => write_dump(&path, provider.as_ref(), &records)?,
    }
    run.finish(&a, Vec::new())?;
    Ok(0)
}

// --------------------------------------------------------------- detect

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectArgs {
    /// Score CSV from `score` or `eval`.
    #[arg(long, conflicts_with = "dataset")]
    pub scores: Option<PathBuf>,
    /// Dataset to score first (needs --provider).
    #[arg(long = "dataset")]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub provider: Option<ProviderSpec>,
    #[arg(long, default_value_t = Statistic::Temptest)]
    pub statistic: Statistic,
    /// Decision threshold; TempTest defaults to 0.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `higher` or `lower` (is machine); defaults per statistic.
    #[arg(long)]
    pub orientation: Option<Orientation>,
    #[arg(long, default_value_t = 0.8)]
    pub tau: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long)]
    pub allow_truncated: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Verdict {
    id: String,
    label: Label,
    statistic: Statistic,
    score: Option<f64>,
    threshold: f64,
    orientation: Orientation,
    /// `None` when the statistic is unavailable for this sequence.
    machine: Option<bool>,
}

/// `(id, label, value)` for one statistic column of a score CSV.
fn read_score_column(path: &Path, stat: Statistic) -> Result<Vec<(String, Label, Option<f64>)>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: no `{name}` column", path.display())))
    };
    let (id, label, value) = (col("id")?, col("label")?, col(stat.name())?);
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let v = match &row[value] {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Format(format!("bad {stat} value `{s}`")))?),
        };
        out.push((row[id].to_string(), row[label].parse()?, v));
    }
    Ok(out)
}

pub fn detect(args: DetectArgs) -> Result<u8> {
    let config = args.config.clone();
    let a = resolve(args, config.as_deref())?;
    let stat = a.statistic;
    let threshold = a.threshold.or(stat.default_threshold()).ok_or_else(|| {
        Error::InvalidParameter(format!("`{stat}` has no default threshold; pass --threshold"))
    })?;
    let orientation = a.orientation.unwrap_or(stat.default_orientation());
    let values = match &a.scores {
        Some(path) => read_score_column(path, stat)?,
        None => {
            let records = read_datasets(&a.dataset)?;
            let provider = open_provider(need(a.provider.as_ref(), "provider")?)?;
            let params = ScoreParams64::new(a.tau, a.k, a.p)?;
            let batch = score_records(&records, provider.as_ref(), &[stat], &params, a.allow_truncated)?;
            batch.scores.into_iter().map(|s| (s.score.id.clone(), s.label, stat.value(&s.score))).collect()
        }
    };
    let verdicts: Vec<Verdict> = values
        .into_iter()
        .map(|(id, label, score)| Verdict {
            id,
            label,
            statistic: stat,
            score,
            threshold,
            orientation,
            machine: score.map(|s| orientation.is_machine(s, threshold)),
        })
        .collect();
    let mut run = Run::start("detect", &need(a.out.clone(), "out")?)?;
    write_jsonl_lines(&run.output("verdicts.jsonl"), &verdicts)?;
    let flagged = verdicts.iter().filter(|v| v.machine == Some(true)).count();
    println!("{flagged} of {} sequences flagged as machine by {stat}", verdicts.len());
    run.finish(&a, Vec::new())?;
    Ok(0)
}

// ----------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, unless the config names one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    units: &'static str,
    reports: &'a [tempnorm_core::EvalReport64],
    sweep: &'a [tempnorm_core::experiment::SweepRow],
    buckets: &'a [tempnorm_core::experiment::BucketReports<f64>],
    length_audit: tempnorm_core::eval::LengthAudit,
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Paths inside an experiment config are relative to the config file.
fn rebase(mut cfg: ExperimentConfig, base: &Path) -> ExperimentConfig {
    cfg.datasets = cfg.datasets.iter().map(|p| relative_to(base, p)).collect();
    cfg.output_dir = cfg.output_dir.map(|p| relative_to(base, &p));
    cfg.provider = cfg.provider.map(|spec| match spec {
        ProviderSpec::Toy(p) => ProviderSpec::Toy(relative_to(base, &p)),
        ProviderSpec::File(p) => ProviderSpec::File(relative_to(base, &p)),
        ProviderSpec::Http(p) => ProviderSpec::Http(relative_to(base, &p)),
    });
    cfg
}

pub fn eval(args: EvalArgs) -> Result<u8> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    let cfg = rebase(cfg, args.config.parent().unwrap_or(Path::new(".")));
    let out_dir = cfg
        .output_dir
        .clone()
        .or(args.out)
        .ok_or_else(|| Error::InvalidParameter("no output_dir in config and no --out".into()))?;
    let records = read_datasets(&cfg.datasets)?;
    let provider = open_provider(need(cfg.provider.as_ref(), "provider")?)?;
    let output = run_experiment::<f64>(&cfg, &records, provider.as_ref())?;

    let mut run = Run::start("eval", &out_dir)?;
    let report = ReportFile {
        units: "nats",
        reports: &output.reports,
        sweep: &output.sweep,
        buckets: &output.buckets,
        length_audit: output.length_audit,
    };
    write_json(&run.output("reports.json"), &report)?;
    write_scores_csv(File::create(run.output("scores.csv"))?, &output.scores)?;
    if !output.sweep.is_empty() {
        let mut w = csv::Writer::from_path(run.output("sweep.csv")).map_err(csv_err)?;
        w.write_record(["tau", "auroc"]).map_err(csv_err)?;
        for row in &output.sweep {
            w.write_record([row.tau.to_string(), row.auroc.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
    }

    if output.length_audit.warn {
        eprintln!(
            "warning: class lengths differ (human {:.1}, machine {:.1} tokens); see per-length buckets",
            output.length_audit.mean_len_human, output.length_audit.mean_len_machine
        );
    }
    for r in &output.reports {
        println!("{:<14} AUROC {:.4} ± {:.4}  EER {:.4}", r.statistic, r.auroc, r.auroc_se, r.eer);
    }
    for row in &output.sweep {
        println!("tau {:<5} AUROC {:.4}", row.tau, row.auroc);
    }
    run.finish(&cfg, vec![cfg.seed])?;
    Ok(0)
}

// --------------------------------------------------------------- oracle

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Oracle config JSON; built-in grid when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn oracle(args: OracleArgs) -> Result<u8> {
    let cfg: OracleConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => OracleConfig::default(),
    };
    let report = run_oracle_suite(&cfg)?;
    let mut run = Run::start("oracle", &args.out)?;
    write_json(&run.output("oracle.json"), &report)?;
    run.finish(&cfg, vec![cfg.seed])?;
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.pass).collect();
    for c in &failed {
        eprintln!("FAIL {}: {} vs {} (|err| {:e})", c.name, c.lhs, c.rhs, c.abs_err);
    }
    println!("oracle: {} of {} checks pass", report.checks.len() - failed.len(), report.checks.len());
    Ok(if failed.is_empty() { 0 } else { EXIT_ORACLE })
}

// ----------------------------------------------------------------- scan

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanArgs {
    #[arg(long = "dataset")]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub provider: Option<ProviderSpec>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_RUN)]
    pub min_run: usize,
    /// Geometric-mean set-mass threshold in (0, 1); runs below it are suspicious.
    #[arg(long)]
    pub c: Option<f64>,
    /// Scan for nucleus runs at --p instead of top-k runs.
    #[arg(long)]
    pub nucleus: bool,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn scan(args: ScanArgs) -> Result<u8> {
    let config = args.config.clone();
    let a = resolve(args, config.as_deref())?;
    let c = need(a.c, "c")?;
    let records = read_datasets(&a.dataset)?;
    let provider = open_provider(need(a.provider.as_ref(), "provider")?)?;
    // The scoring temperature does not enter set masses.
    let params = ScoreParams64::new(1.0, a.k, a.p)?;
    let stat = if a.nucleus { Statistic::GeoTopp } else { Statistic::GeoTopk };
    let batch = score_records(&records, provider.as_ref(), &[stat], &params, false)?;
    let mut scans = Vec::with_capacity(records.len());
    for (r, m) in records.iter().zip(&batch.matrices) {
        let tokens = m.score(&params)?;
        scans.push(if a.nucleus {
            scan_document_nucleus(r.id.clone(), &tokens, a.min_run, c)?
        } else {
            scan_document(r.id.clone(), &tokens, a.k, a.min_run, c)?
        });
    }
    let mut run = Run::start("scan", &need(a.out.clone(), "out")?)?;
    write_jsonl_lines(&run.output("scan.jsonl"), &scans)?;
    let flagged = scans.iter().filter(|s| s.flagged).count();
    println!("{flagged} of {} documents contain a suspicious span", scans.len());
    run.finish(&a, Vec::new())?;
    Ok(0)
}
