//! Emission pretraining, HMM fine-tuning and inference.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{DatasetSplit, SampleSequence};
use crate::encoder::{
    head_posteriors_to_emission, max_row_norm_error, EmissionScores, EncoderConfig, EncoderParams, HeadKind,
};
use crate::error::{Error, Result};
use crate::eval::{f1_report, ConfusionMatrix, F1Report};
use crate::hmm::{self, graph, JointTransitionTable};
use crate::math::{argmax, logsumexp, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub learning_rate: f64,
    pub finetune_learning_rate: f64,
    /// Yearly series per pretraining step.
    pub batch_size: usize,
    /// Whole sequences per fine-tuning step.
    pub finetune_batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Laplace pseudo-count for the co-occurrence initialization.
    pub smoothing_alpha: f64,
    pub seed: u64,
    pub head_kind: HeadKind,
    pub hmm_order: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fine-tune only the table logits.
    pub freeze_encoder: bool,
    /// Divide discriminative posteriors by the training prior before the HMM.
    pub prior_correction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: 1,
            learning_rate: 1e-3,
            finetune_learning_rate: 1e-4,
            batch_size: 32,
            finetune_batch_size: 8,
            pretrain_epochs: 50,
            finetune_epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            smoothing_alpha: 1.0,
            seed: 0,
            head_kind: HeadKind::Generative,
            hmm_order: 1,
            patience: 10,
            freeze_encoder: false,
            prior_correction: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        for (name, lr) in [("learning_rate", self.learning_rate), ("finetune_learning_rate", self.finetune_learning_rate)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be finite and non-negative")));
            }
        }
        if self.batch_size == 0 || self.finetune_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if !(self.smoothing_alpha >= 0.0 && self.smoothing_alpha.is_finite()) {
            return bad("smoothing_alpha must be non-negative");
        }
        if !(self.hmm_order == 1 || self.hmm_order == 2) {
            return bad("hmm_order must be 1 or 2");
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub stage: String,
    /// Mean training loss per completed epoch.
    pub train_loss: Vec<f64>,
    /// Validation mF1, index 0 being the starting point. Without a
    /// validation split the last epoch is kept.
    pub validation_mf1: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
    /// Worst unit-norm violation of generative head rows seen after any step.
    pub head_norm_error: Option<f64>,
    /// Worst `|logsumexp(table)|` seen after any fine-tuning step.
    pub table_norm_error: Option<f64>,
    pub test: Option<F1Report>,
}

impl TrainReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Adam over a fixed list of tensors; the slot order must not change
/// between steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from each tensor's accumulated gradient and
    /// clears it. Tensors without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        debug_assert_eq!(self.m.len(), params.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            p.zero_grad();
            if self.lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-year output of [`predict`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub posteriors: Vec<Vec<f64>>,
}

fn emission_for_hmm(encoder: &EncoderParams, scores: EmissionScores, prior_correction: bool) -> Result<EmissionScores> {
    if prior_correction {
        head_posteriors_to_emission(&scores, encoder.head_kind(), &encoder.class_prior)
    } else {
        Ok(scores)
    }
}

/// Emission-only classification when `table` is `None`, otherwise fused
/// cascade posteriors. Ties go to the lowest class index.
pub fn predict(
    encoder: &EncoderParams,
    table: Option<&JointTransitionTable>,
    sample: &SampleSequence,
    prior_correction: bool,
) -> Result<Prediction> {
    let scores: Vec<EmissionScores> =
        sample.years.iter().map(|r| encoder.encode(&r.series)).collect::<Result<_>>()?;
    let posteriors: Vec<Vec<f64>> = match table {
        None => scores.iter().map(|s| softmax(&s.log_scores)).collect(),
        Some(table) => {
            check_table(table, encoder.classes(), sample)?;
            let ems = scores
                .into_iter()
                .map(|s| emission_for_hmm(encoder, s, prior_correction))
                .collect::<Result<Vec<_>>>()?;
            hmm::cascade(table, &ems)?.posteriors
        }
    };
    Ok(Prediction { labels: posteriors.iter().map(|p| argmax(p)).collect(), posteriors })
}

fn check_table(table: &JointTransitionTable, classes: usize, sample: &SampleSequence) -> Result<()> {
    if table.classes() != classes {
        return Err(Error::InvalidInput(format!("table has {} classes, encoder {}", table.classes(), classes)));
    }
    if table.years() != sample.years.len() {
        return Err(Error::InvalidInput(format!(
            "table covers {} years, sample {} has {}",
            table.years(),
            sample.id,
            sample.years.len()
        )));
    }
    Ok(())
}

/// Pooled confusion matrix of [`predict`] over `indices`.
pub fn confusion(
    encoder: &EncoderParams,
    table: Option<&JointTransitionTable>,
    samples: &[SampleSequence],
    indices: &[usize],
    prior_correction: bool,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(encoder.classes());
    for &i in indices {
        let p = predict(encoder, table, &samples[i], prior_correction)?;
        for (r, &label) in samples[i].years.iter().zip(&p.labels) {
            cm.add(r.label, label)?;
        }
    }
    Ok(cm)
}

pub fn evaluate(
    encoder: &EncoderParams,
    table: Option<&JointTransitionTable>,
    samples: &[SampleSequence],
    indices: &[usize],
    prior_correction: bool,
) -> Result<F1Report> {
    Ok(f1_report(&confusion(encoder, table, samples, indices, prior_correction)?))
}

fn mean_f1_or_zero(report: Result<F1Report>, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    Ok(report?.mean_f1)
}

fn class_prior(samples: &[SampleSequence], indices: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![1.0; classes];
    for &i in indices {
        for r in &samples[i].years {
            counts[r.label] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

fn check_labels(samples: &[SampleSequence], indices: &[usize], classes: usize) -> Result<()> {
    for &i in indices {
        let s = samples.get(i).ok_or(Error::IndexOutOfRange { index: i, len: samples.len() })?;
        if let Some(r) = s.years.iter().find(|r| r.label >= classes) {
            return Err(Error::InvalidInput(format!("sample {} has label {} >= {classes}", s.id, r.label)));
        }
    }
    Ok(())
}

fn track_head(report: &mut TrainReport, encoder: &EncoderParams) {
    if encoder.head_kind() == HeadKind::Generative {
        let err = max_row_norm_error(encoder.head_weights(), encoder.config().d_model);
        report.head_norm_error = Some(report.head_norm_error.map_or(err, |e| e.max(err)));
    }
}

fn finite_loss(loss: f64, epoch: usize, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("loss became {loss} at epoch {epoch}, step {step}")))
    }
}

/// Trains a freshly initialized encoder on every `(series, label)` of the
/// training split's years, selecting the epoch with the best validation mF1.
pub fn train_emission(
    samples: &[SampleSequence],
    split: &DatasetSplit,
    encoder_config: EncoderConfig,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    config.validate()?;
    let encoder_config = EncoderConfig { head_kind: config.head_kind, ..encoder_config };
    let mut encoder = EncoderParams::init(encoder_config, config.seed)?;
    if split.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    check_labels(samples, &split.train, encoder.classes())?;
    check_labels(samples, &split.validation, encoder.classes())?;
    encoder.class_prior = class_prior(samples, &split.train, encoder.classes());
    pretrain(encoder, samples, split, config)
}

/// Continues emission training from `encoder` (the class prior is kept).
pub fn pretrain(
    mut encoder: EncoderParams,
    samples: &[SampleSequence],
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    config.validate()?;
    let mut items: Vec<(usize, usize)> =
        split.train.iter().flat_map(|&i| (0..samples[i].years.len()).map(move |y| (i, y))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
    let val_f1 = |e: &EncoderParams| mean_f1_or_zero(evaluate(e, None, samples, &split.validation, false), &split.validation);

    let mut best = (val_f1(&encoder)?, 0, encoder.clone());
    let mut report = TrainReport {
        schema_version: 1,
        stage: "pretrain".into(),
        train_loss: Vec::new(),
        validation_mf1: vec![best.0],
        best_epoch: 0,
        steps: 0,
        head_norm_error: None,
        table_norm_error: None,
        test: None,
    };
    let mut stale = 0;
    for epoch in 1..=config.pretrain_epochs {
        items.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in items.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = encoder.store().bind(&mut tape);
            let mut sum: Option<Var> = None;
            for &(i, y) in batch {
                let rec = &samples[i].years[y];
                let lp = encoder.forward(&mut tape, &vars, &rec.series)?;
                let picked = tape.gather(lp, &[rec.label], vec![])?;
                sum = Some(match sum {
                    None => picked,
                    Some(s) => tape.add(s, picked)?,
                });
            }
            let loss = tape.scale(sum.expect("non-empty batch"), -1.0 / batch.len() as f64)?;
            total += finite_loss(tape.item(loss), epoch, report.steps)? * batch.len() as f64;
            tape.backward(loss)?;
            encoder.store_mut().pull_grads(&tape, &vars);
            let mut params: Vec<&mut Tensor> = encoder.store_mut().tensors_mut().iter_mut().collect();
            adam.step(&mut params);
            if adam.lr != 0.0 {
                encoder.renormalize_head();
            }
            track_head(&mut report, &encoder);
            report.steps += 1;
        }
        report.train_loss.push(total / items.len() as f64);
        let f1 = val_f1(&encoder)?;
        report.validation_mf1.push(f1);
        if f1 > best.0 || split.validation.is_empty() {
            best = (f1, epoch, encoder.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    report.best_epoch = best.1;
    let encoder = best.2;
    if !split.test.is_empty() {
        report.test = Some(evaluate(&encoder, None, samples, &split.test, false)?);
    }
    Ok((encoder, report))
}

/// Initial HMM table from the training split's label sequences.
pub fn init_table(samples: &[SampleSequence], split: &DatasetSplit, classes: usize, order: usize, alpha: f64) -> Result<JointTransitionTable> {
    let seqs: Vec<Vec<usize>> = split.train.iter().map(|&i| samples[i].labels()).collect();
    let years = seqs.first().map_or(0, Vec::len);
    hmm::init_from_cooccurrence(&seqs, classes, years, order, alpha)
}

/// Records `Σ_y −log posterior_y[label_y]` for one sequence. `encoder_vars`
/// come from `encoder.store().bind`, `table_vars` from [`graph::bind_table`].
pub fn sequence_loss(
    tape: &mut Tape,
    encoder: &EncoderParams,
    encoder_vars: &[Var],
    table: &JointTransitionTable,
    table_vars: &[Var],
    sample: &SampleSequence,
    prior_correction: bool,
) -> Result<Var> {
    check_table(table, encoder.classes(), sample)?;
    let correction = if prior_correction && encoder.head_kind() == HeadKind::Discriminative {
        let log_prior = encoder.class_prior.iter().map(|p| p.ln()).collect();
        Some(tape.constant(vec![encoder.classes()], log_prior)?)
    } else {
        None
    };
    let mut emissions = Vec::with_capacity(sample.years.len());
    for r in &sample.years {
        let lp = encoder.forward(tape, encoder_vars, &r.series)?;
        emissions.push(match correction {
            Some(c) => tape.sub(lp, c)?,
            None => lp,
        });
    }
    let lp = graph::log_posteriors(tape, table.order(), table.classes(), table_vars, &emissions)?;
    graph::cross_entropy(tape, &lp, &sample.labels())
}

/// Mean sequence loss over `indices` computed without a tape.
pub fn evaluation_loss(
    encoder: &EncoderParams,
    table: &JointTransitionTable,
    samples: &[SampleSequence],
    indices: &[usize],
    prior_correction: bool,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for &i in indices {
        let p = predict(encoder, Some(table), &samples[i], prior_correction)?;
        for (r, post) in samples[i].years.iter().zip(&p.posteriors) {
            total -= post[r.label].ln();
        }
    }
    Ok(total / indices.len() as f64)
}

/// Joint fine-tuning of encoder and table through the fused posteriors.
pub fn finetune_cascade(
    encoder: EncoderParams,
    table: JointTransitionTable,
    samples: &[SampleSequence],
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(EncoderParams, JointTransitionTable, TrainReport)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    if table.order() != config.hmm_order {
        return Err(Error::InvalidInput(format!(
            "table has order {}, config asks for {}",
            table.order(),
            config.hmm_order
        )));
    }
    for &i in split.train.iter().chain(&split.validation).chain(&split.test) {
        check_table(&table, encoder.classes(), &samples[i])?;
    }
    check_labels(samples, &split.train, encoder.classes())?;
    let (mut encoder, mut table) = (encoder, table);
    let pc = config.prior_correction;
    let val_f1 = |e: &EncoderParams, t: &JointTransitionTable| {
        mean_f1_or_zero(evaluate(e, Some(t), samples, &split.validation, pc), &split.validation)
    };

    let mut order = split.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut adam = Adam::new(config.finetune_learning_rate, config.beta1, config.beta2, config.adam_epsilon);
    let mut best = (val_f1(&encoder, &table)?, 0, encoder.clone(), table.clone());
    let mut report = TrainReport {
        schema_version: 1,
        stage: "finetune".into(),
        train_loss: Vec::new(),
        validation_mf1: vec![best.0],
        best_epoch: 0,
        steps: 0,
        head_norm_error: None,
        table_norm_error: None,
        test: None,
    };
    let mut stale = 0;
    for epoch in 1..=config.finetune_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.finetune_batch_size) {
            let mut tape = Tape::new();
            let enc_vars = encoder.store().bind(&mut tape);
            let table_vars = graph::bind_table(&table, &mut tape);
            let mut sum: Option<Var> = None;
            for &i in batch {
                let l = sequence_loss(&mut tape, &encoder, &enc_vars, &table, &table_vars, &samples[i], pc)?;
                sum = Some(match sum {
                    None => l,
                    Some(s) => tape.add(s, l)?,
                });
            }
            let loss = tape.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            total += finite_loss(tape.item(loss), epoch, report.steps)? * batch.len() as f64;
            tape.backward(loss)?;
            for (t, &v) in table.tensors_mut().iter_mut().zip(&table_vars) {
                if let Some(g) = tape.grad(v) {
                    t.accumulate_grad(g);
                }
            }
            if !config.freeze_encoder {
                encoder.store_mut().pull_grads(&tape, &enc_vars);
            }
            let mut params: Vec<&mut Tensor> = encoder.store_mut().tensors_mut().iter_mut().collect();
            params.extend(table.tensors_mut().iter_mut());
            adam.step(&mut params);
            if adam.lr != 0.0 {
                table.normalize()?;
                encoder.renormalize_head();
            }
            track_head(&mut report, &encoder);
            let err = table.tensors().iter().map(|t| logsumexp(t.data()).abs()).fold(0.0, f64::max);
            report.table_norm_error = Some(report.table_norm_error.map_or(err, |e| e.max(err)));
            report.steps += 1;
        }
        report.train_loss.push(total / order.len() as f64);
        let f1 = val_f1(&encoder, &table)?;
        report.validation_mf1.push(f1);
        if f1 > best.0 || split.validation.is_empty() {
            best = (f1, epoch, encoder.clone(), table.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    report.best_epoch = best.1;
    let (encoder, table) = (best.2, best.3);
    if !split.test.is_empty() {
        report.test = Some(evaluate(&encoder, Some(&table), samples, &split.test, pc)?);
    }
    Ok((encoder, table, report))
}
