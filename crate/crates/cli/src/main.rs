use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_hmm::data::{self, DatasetSplit, Preset, SampleSequence, SplitFile, Subset, SynthSpec};
use cascade_hmm::encoder::{EncoderConfig, EncoderParams, HeadKind};
use cascade_hmm::eval::{f1_report, score, score_per_year, F1Report};
use cascade_hmm::hmm::JointTransitionTable;
use cascade_hmm::training::{self, TrainConfig};
use cascade_hmm::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const PRETRAINED: &str = "pretrained";
const INITIALIZED: &str = "initialized";
const FINETUNED: &str = "finetuned";

/// Multiyear crop-type classification with a transformer emission model
/// and a cascade HMM layer over the years.
#[derive(Parser)]
#[command(name = "cascade-hmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded benchmark generator spec as JSON.
    SynthSpec(SynthSpecArgs),
    /// Generate a synthetic JSONL dataset from a spec.
    GenSynth(GenSynthArgs),
    /// Cluster label sequences and split samples into train/val/test.
    Split(SplitArgs),
    /// Train the emission model on individual years.
    TrainEmission(TrainEmissionArgs),
    /// Build the HMM tables from training-set label co-occurrences.
    InitHmm(InitHmmArgs),
    /// Fine-tune encoder and HMM tables end to end.
    Finetune(FinetuneArgs),
    /// Write per-sample, per-year labels and posteriors as JSONL.
    Infer(InferArgs),
    /// Score predictions against dataset labels.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    EmissionOnly,
    Hmm1,
    Hmm2,
}

impl Mode {
    fn order(self) -> Option<usize> {
        match self {
            Mode::EmissionOnly => None,
            Mode::Hmm1 => Some(1),
            Mode::Hmm2 => Some(2),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(clap::Args)]
struct SynthSpecArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    years: usize,
    /// Acquisitions per year.
    #[arg(long, default_value_t = 30)]
    timesteps: usize,
    #[arg(long, default_value_t = 4)]
    bands: usize,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.45)]
    sigma: f64,
    /// Probability of each class's preferred successor.
    #[arg(long, default_value_t = 0.85)]
    rotation_strength: f64,
    /// Geometric decay of class popularity (1 = balanced).
    #[arg(long, default_value_t = 0.7)]
    popularity_decay: f64,
    /// Fraction of acquisitions dropped at random.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GenSynthArgs {
    /// SynthSpec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Average-linkage cut on the rotation Hamming distance.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    /// Train, validation and test probabilities.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    probabilities: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainingInputs {
    #[arg(long)]
    data: PathBuf,
    /// Split file written by `split`.
    #[arg(long)]
    split: PathBuf,
    /// TrainConfig JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainingInputs {
    fn load(&self) -> Result<(Vec<SampleSequence>, DatasetSplit, TrainConfig)> {
        let samples = data::read_dataset(&self.data)?;
        let split = SplitFile::read(&self.split)?.to_split(&samples)?;
        let mut config = match &self.config {
            Some(p) => TrainConfig::read(p)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok((samples, split, config))
    }
}

#[derive(clap::Args)]
struct TrainEmissionArgs {
    #[command(flatten)]
    inputs: TrainingInputs,
    /// EncoderConfig JSON; `classes` and `bands` are taken from the data.
    #[arg(long)]
    encoder_config: Option<PathBuf>,
    /// Overrides the config head kind.
    #[arg(long)]
    head: Option<HeadKind>,
    /// Overrides the number of pretraining epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// TrainReport JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct InitHmmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Pretrained encoder checkpoint; fixes the number of classes.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    order: u8,
    /// Laplace pseudo-count added to every co-occurrence cell.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Write uniform tables instead of co-occurrence estimates.
    #[arg(long)]
    uniform: bool,
    /// Fail instead of falling back to order 1 when there are fewer than three years.
    #[arg(long)]
    no_fallback: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct FinetuneArgs {
    #[command(flatten)]
    inputs: TrainingInputs,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    hmm: PathBuf,
    /// Overrides the number of fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train only the table logits.
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    out_encoder: PathBuf,
    #[arg(long)]
    out_hmm: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    /// HMM checkpoint; required unless the mode is emission-only.
    #[arg(long)]
    hmm: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Restrict to one subset of this split file.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    subset: SubsetArg,
    /// Feed raw discriminative posteriors to the HMM instead of dividing by the class prior.
    #[arg(long)]
    no_prior_correction: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Predictions JSONL written by `infer`.
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset holding the reference labels.
    #[arg(long)]
    data: PathBuf,
    /// Require the predictions to come from this mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Also report one matrix per year position.
    #[arg(long)]
    per_year: bool,
    /// F1Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Aligned text table.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Pooled confusion matrix as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn expect_stage(what: &str, dir: &Path, stage: &str, allowed: &[&str]) -> Result<()> {
    if allowed.contains(&stage) {
        Ok(())
    } else {
        Err(Error::Stage(format!(
            "{what} at {} has stage {stage:?}, expected one of {allowed:?}",
            dir.display()
        )))
    }
}

fn synth_spec(a: SynthSpecArgs) -> Result<()> {
    let preset = Preset {
        classes: a.classes,
        years: a.years,
        timesteps: a.timesteps,
        bands: a.bands,
        noise_sigma: a.sigma,
        rotation_strength: a.rotation_strength,
        popularity_decay: a.popularity_decay,
    };
    let mut spec = SynthSpec::preset(&preset, a.seed)?;
    spec.dropout = a.dropout;
    spec.validate()?;
    write_json(&a.out, &spec)?;
    println!("wrote spec with {} classes over {} years to {}", spec.classes, spec.years, a.out.display());
    Ok(())
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = SynthSpec::read(&a.spec)?;
    let samples = data::generate(&spec, a.n, a.seed)?;
    data::write_dataset(&a.out, &samples)?;
    let mut class_counts = vec![0usize; spec.classes];
    let mut transitions: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut distinct = std::collections::BTreeSet::new();
    for s in &samples {
        let labels = s.labels();
        labels.iter().for_each(|&l| class_counts[l] += 1);
        for w in labels.windows(2) {
            *transitions.entry((w[0], w[1])).or_default() += 1;
        }
        distinct.insert(labels);
    }
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    println!("class counts: {class_counts:?}");
    println!("distinct label sequences: {}", distinct.len());
    let mut top: Vec<_> = transitions.into_iter().collect();
    top.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let shown: Vec<String> = top.iter().take(5).map(|((f, t), n)| format!("{f}->{t}: {n}")).collect();
    println!("most frequent rotations: {}", shown.join(", "));
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let samples = data::read_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!("{} contains no samples", a.data.display())));
    }
    let seqs: Vec<Vec<usize>> = samples.iter().map(SampleSequence::labels).collect();
    let clusters = data::cluster(&seqs, a.threshold)?;
    let probs: [f64; 3] = a.probabilities.as_slice().try_into().map_err(|_| Error::InvalidInput("need three probabilities".into()))?;
    let split = data::stratified_split(&clusters, probs, a.seed)?;
    let file = SplitFile::from_split(&samples, &split, a.threshold, a.seed);
    write_json(&a.out, &file)?;
    let n = samples.len() as f64;
    println!("clusters: {}", file.clusters);
    println!(
        "train {:.3}, val {:.3}, test {:.3} of {} samples",
        split.train.len() as f64 / n,
        split.validation.len() as f64 / n,
        split.test.len() as f64 / n,
        samples.len()
    );
    Ok(())
}

fn bands_of(samples: &[SampleSequence]) -> Result<usize> {
    samples
        .first()
        .and_then(|s| s.years.first())
        .map(|r| r.series.bands())
        .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))
}

fn train_emission(a: TrainEmissionArgs) -> Result<()> {
    let (samples, split, mut config) = a.inputs.load()?;
    if let Some(h) = a.head {
        config.head_kind = h;
    }
    if let Some(e) = a.epochs {
        config.pretrain_epochs = e;
    }
    let mut enc_config = match &a.encoder_config {
        Some(p) => read_json::<EncoderConfig>(p)?,
        None => EncoderConfig::default(),
    };
    enc_config.classes = data::infer_classes(&samples);
    enc_config.bands = bands_of(&samples)?;
    let (encoder, report) = training::train_emission(&samples, &split, enc_config, &config)?;
    encoder.save(&a.out, PRETRAINED)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "best epoch {} of {}, validation mF1 {:.4}",
        report.best_epoch,
        report.train_loss.len(),
        report.validation_mf1[report.best_epoch]
    );
    if let Some(t) = &report.test {
        println!("test mF1 {:.4}, accuracy {:.4}", t.mean_f1, t.accuracy);
    }
    Ok(())
}

fn init_hmm(a: InitHmmArgs) -> Result<()> {
    let (encoder, stage) = EncoderParams::load(&a.encoder)?;
    expect_stage("encoder", &a.encoder, &stage, &[PRETRAINED])?;
    let samples = data::read_dataset(&a.data)?;
    let split = SplitFile::read(&a.split)?.to_split(&samples)?;
    let years = split.train.first().map(|&i| samples[i].years.len()).ok_or_else(|| Error::InvalidInput("training split is empty".into()))?;
    let mut order = usize::from(a.order);
    if order == 2 && years < 3 {
        if a.no_fallback {
            return Err(Error::InvalidInput(format!("order 2 needs at least 3 years, data has {years}")));
        }
        eprintln!("warning: {years} years is too few for order 2, using order 1");
        order = 1;
    }
    let table = if a.uniform {
        JointTransitionTable::uniform(order, encoder.classes(), years)?
    } else {
        training::init_table(&samples, &split, encoder.classes(), order, a.alpha)?
    };
    table.save(&a.out, INITIALIZED)?;
    println!("order-{order} tables over {years} years, {} classes", encoder.classes());
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let (encoder, enc_stage) = EncoderParams::load(&a.encoder)?;
    expect_stage("encoder", &a.encoder, &enc_stage, &[PRETRAINED])?;
    let (table, hmm_stage) = JointTransitionTable::load(&a.hmm)?;
    expect_stage("hmm", &a.hmm, &hmm_stage, &[INITIALIZED])?;
    let (samples, split, mut config) = a.inputs.load()?;
    config.hmm_order = table.order();
    config.head_kind = encoder.head_kind();
    config.freeze_encoder |= a.freeze_encoder;
    if let Some(e) = a.epochs {
        config.finetune_epochs = e;
    }
    let (encoder, table, report) = training::finetune_cascade(encoder, table, &samples, &split, &config)?;
    encoder.save(&a.out_encoder, FINETUNED)?;
    table.save(&a.out_hmm, FINETUNED)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "validation mF1 {:.4} -> {:.4} (best epoch {})",
        report.validation_mf1[0],
        report.validation_mf1[report.best_epoch],
        report.best_epoch
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    mode: Mode,
    years: Vec<i32>,
    labels: Vec<usize>,
    posteriors: Vec<Vec<f64>>,
}

fn infer(a: InferArgs) -> Result<()> {
    let (encoder, _) = EncoderParams::load(&a.encoder)?;
    let table = match (a.mode.order(), &a.hmm) {
        (None, _) => None,
        (Some(_), None) => return Err(Error::InvalidInput("--hmm is required for HMM modes".into())),
        (Some(order), Some(dir)) => {
            let (t, stage) = JointTransitionTable::load(dir)?;
            expect_stage("hmm", dir, &stage, &[INITIALIZED, FINETUNED])?;
            if t.order() != order {
                return Err(Error::InvalidInput(format!("mode needs an order-{order} table, {} has order {}", dir.display(), t.order())));
            }
            Some(t)
        }
    };
    let samples = data::read_dataset(&a.data)?;
    let indices: Vec<usize> = match (a.subset, &a.split) {
        (SubsetArg::All, _) => (0..samples.len()).collect(),
        (_, None) => return Err(Error::InvalidInput("--subset needs --split".into())),
        (s, Some(path)) => {
            let split = SplitFile::read(path)?.to_split(&samples)?;
            let which = match s {
                SubsetArg::Train => Subset::Train,
                SubsetArg::Val => Subset::Val,
                _ => Subset::Test,
            };
            split.subset(which).to_vec()
        }
    };
    let file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    for &i in &indices {
        let s = &samples[i];
        let p = training::predict(&encoder, table.as_ref(), s, !a.no_prior_correction)?;
        let line = PredictionLine {
            id: s.id.clone(),
            mode: a.mode,
            years: s.years.iter().map(|r| r.year).collect(),
            labels: p.labels,
            posteriors: p.posteriors,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!("wrote predictions for {} samples to {}", indices.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    schema_version: u32,
    mode: Option<Mode>,
    pooled: F1Report,
    confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_year: Option<Vec<F1Report>>,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        out.push(p);
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let samples = data::read_dataset(&a.data)?;
    let by_id: BTreeMap<&str, &SampleSequence> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    if let Some(m) = a.mode {
        if let Some(p) = preds.iter().find(|p| p.mode != m) {
            return Err(Error::InvalidInput(format!("prediction for {} was produced by another mode", p.id)));
        }
    }
    let classes = preds
        .first()
        .and_then(|p| p.posteriors.first())
        .map_or_else(|| data::infer_classes(&samples), Vec::len);
    let mut predicted = Vec::with_capacity(preds.len());
    let mut references = Vec::with_capacity(preds.len());
    for p in &preds {
        let s = by_id.get(p.id.as_str()).ok_or_else(|| Error::InvalidInput(format!("sample {} not in dataset", p.id)))?;
        if p.labels.len() != s.years.len() {
            return Err(Error::InvalidInput(format!("sample {}: {} predicted years, {} in data", p.id, p.labels.len(), s.years.len())));
        }
        predicted.push(p.labels.clone());
        references.push(s.labels());
    }
    let cm = score(&predicted.concat(), &references.concat(), classes)?;
    let pooled = f1_report(&cm);
    let per_year = if a.per_year {
        Some(score_per_year(&predicted, &references, classes)?.iter().map(f1_report).collect())
    } else {
        None
    };
    if let Some(p) = &a.text {
        write_text(p, &pooled.to_text())?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &cm.to_csv())?;
    }
    let out = EvalOutput { schema_version: 1, mode: a.mode.or(preds.first().map(|p| p.mode)), confusion: cm.rows(), pooled, per_year };
    write_json(&a.out, &out)?;
    print!("{}", out.pooled.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthSpec(a) => synth_spec(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Split(a) => split(a),
        Command::TrainEmission(a) => train_emission(a),
        Command::InitHmm(a) => init_hmm(a),
        Command::Finetune(a) => finetune(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
