//! Transformer encoder emission model.
//!
//! A yearly series `(T × B)` is projected to `d_model`, offset by a
//! day-of-year sinusoidal encoding, passed through post-norm encoder blocks,
//! max-pooled over time and scored by one of two heads:
//!
//! * discriminative: `W z + b` followed by softmax;
//! * generative: `s · cos(W_c, z)` with unit-norm rows, no bias and a
//!   learnable scale `s`. Its softmax carries a uniform class prior, so its
//!   log-scores stand in for `log p(x | class)` up to a constant.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: u32 = 366;
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Discriminative,
    Generative,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminative" => Ok(HeadKind::Discriminative),
            "generative" => Ok(HeadKind::Generative),
            other => Err(Error::InvalidInput(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub schema_version: u32,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub head_kind: HeadKind,
    pub classes: usize,
    pub bands: usize,
    /// Raw values are divided by this before projection.
    pub input_scale: f64,
    pub max_len: usize,
    /// Initial value of the generative head's logit scale.
    pub logit_scale_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            schema_version: 1,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            head_kind: HeadKind::Generative,
            classes: 2,
            bands: 1,
            input_scale: 1.0,
            max_len: 366,
            logit_scale_init: 10.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("classes", self.classes),
            ("bands", self.bands),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("encoder {name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::InvalidInput("input_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One year of observations: `T` acquisitions of `B` bands.
#[derive(Debug, Clone, PartialEq)]
pub struct YearlySeries {
    values: Vec<f64>,
    bands: usize,
    days: Vec<u32>,
}

impl YearlySeries {
    /// `values` is row-major `T × B`; `days` are strictly increasing in `[0, 366)`.
    pub fn new(values: Vec<f64>, bands: usize, days: Vec<u32>) -> Result<Self> {
        if bands == 0 || days.is_empty() {
            return Err(Error::InvalidInput("series needs at least one timestep and one band".into()));
        }
        if values.len() != bands * days.len() {
            return Err(Error::InvalidInput(format!(
                "series has {} values for {} timesteps × {bands} bands",
                values.len(),
                days.len()
            )));
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("timestamps must be strictly increasing".into()));
        }
        if let Some(d) = days.iter().find(|&&d| d >= DAYS_PER_YEAR) {
            return Err(Error::InvalidInput(format!("day {d} outside [0, {DAYS_PER_YEAR})")));
        }
        Ok(YearlySeries { values, bands, days })
    }

    pub fn from_rows(rows: &[Vec<f64>], days: Vec<u32>) -> Result<Self> {
        let bands = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != bands) {
            return Err(Error::InvalidInput("ragged series rows".into()));
        }
        YearlySeries::new(rows.concat(), bands, days)
    }

    pub fn timesteps(&self) -> usize {
        self.days.len()
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn days(&self) -> &[u32] {
        &self.days
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }
}

/// Per-class natural-log scores for one year.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionScores {
    pub log_scores: Vec<f64>,
}

impl EmissionScores {
    pub fn new(log_scores: Vec<f64>) -> Self {
        EmissionScores { log_scores }
    }

    pub fn classes(&self) -> usize {
        self.log_scores.len()
    }
}

/// Sinusoidal encoding of a day of the agronomic year, periodic in 366 days.
pub fn day_encoding(day: u32, d_model: usize) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI * f64::from(day) / f64::from(DAYS_PER_YEAR);
    (0..d_model)
        .map(|i| {
            let harmonic = (i / 2 + 1) as f64;
            if i % 2 == 0 {
                (harmonic * base).sin()
            } else {
                (harmonic * base).cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct BlockSlots {
    wq: Vec<usize>,
    wk: Vec<usize>,
    wv: Vec<usize>,
    wo: Vec<usize>,
    bo: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    in_w: usize,
    in_b: usize,
    blocks: Vec<BlockSlots>,
    head_w: usize,
    head_b: Option<usize>,
    head_scale: Option<usize>,
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Const(f64),
}

/// Encoder weights plus the empirical training class prior.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    store: ParamStore,
    layout: Layout,
    /// Class frequencies of the training labels; used to turn
    /// discriminative posteriors into scaled likelihoods.
    pub class_prior: Vec<f64>,
}

impl EncoderParams {
    /// Seeded random initialization.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = EncoderParams::build(config, &mut |shape, init| {
            let n = shape.iter().product();
            match init {
                Init::Const(c) => vec![c; n],
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            }
        })?;
        params.renormalize_head();
        Ok(params)
    }

    fn build(config: EncoderConfig, fill: &mut dyn FnMut(&[usize], Init) -> Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (d, dk, ff, c) = (config.d_model, config.d_model / config.heads, config.d_ff, config.classes);
        let mut store = ParamStore::new();
        let mut add = |store: &mut ParamStore, name: String, shape: Vec<usize>, init: Init| {
            let data = fill(&shape, init);
            store.insert(name, Tensor::param(shape, data).expect("shape matches fill"))
        };
        let xavier = |fan_in, fan_out| Init::Xavier { fan_in, fan_out };
        let in_w = add(&mut store, "input.w".into(), vec![config.bands, d], xavier(config.bands, d));
        let in_b = add(&mut store, "input.b".into(), vec![d], Init::Const(0.0));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut per_head = |store: &mut ParamStore, tag: &str, shape: [usize; 2]| {
                (0..config.heads)
                    .map(|h| add(store, format!("block{l}.head{h}.{tag}"), shape.to_vec(), xavier(shape[0], shape[1])))
                    .collect::<Vec<_>>()
            };
            let wq = per_head(&mut store, "wq", [d, dk]);
            let wk = per_head(&mut store, "wk", [d, dk]);
            let wv = per_head(&mut store, "wv", [d, dk]);
            let wo = per_head(&mut store, "wo", [dk, d]);
            let p = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockSlots {
                wq,
                wk,
                wv,
                wo,
                bo: add(&mut store, p("attn.bo"), vec![d], Init::Const(0.0)),
                ln1_gain: add(&mut store, p("ln1.gain"), vec![d], Init::Const(1.0)),
                ln1_bias: add(&mut store, p("ln1.bias"), vec![d], Init::Const(0.0)),
                ff1_w: add(&mut store, p("ff1.w"), vec![d, ff], xavier(d, ff)),
                ff1_b: add(&mut store, p("ff1.b"), vec![ff], Init::Const(0.0)),
                ff2_w: add(&mut store, p("ff2.w"), vec![ff, d], xavier(ff, d)),
                ff2_b: add(&mut store, p("ff2.b"), vec![d], Init::Const(0.0)),
                ln2_gain: add(&mut store, p("ln2.gain"), vec![d], Init::Const(1.0)),
                ln2_bias: add(&mut store, p("ln2.bias"), vec![d], Init::Const(0.0)),
            });
        }
        let head_w = add(&mut store, "head.w".into(), vec![c, d], xavier(d, c));
        let (head_b, head_scale) = match config.head_kind {
            HeadKind::Discriminative => (Some(add(&mut store, "head.b".into(), vec![c], Init::Const(0.0))), None),
            HeadKind::Generative => {
                (None, Some(add(&mut store, "head.scale".into(), vec![], Init::Const(config.logit_scale_init))))
            }
        };
        let layout = Layout { in_w, in_b, blocks, head_w, head_b, head_scale };
        Ok(EncoderParams { class_prior: vec![1.0 / c as f64; c], config, store, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head_kind
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Head weight matrix, `classes × d_model` row-major.
    pub fn head_weights(&self) -> &[f64] {
        self.store.get(self.layout.head_w).data()
    }

    pub fn head_weights_mut(&mut self) -> &mut [f64] {
        self.store.get_mut(self.layout.head_w).data_mut()
    }

    /// Rescales generative head rows to unit L2 norm; no-op for the
    /// discriminative head. All-zero rows stay zero.
    pub fn renormalize_head(&mut self) {
        if self.config.head_kind != HeadKind::Generative {
            return;
        }
        let d = self.config.d_model;
        for row in self.head_weights_mut().chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    fn check_series(&self, series: &YearlySeries) -> Result<()> {
        if series.bands() != self.config.bands {
            return Err(Error::InvalidInput(format!(
                "series has {} bands, encoder expects {}",
                series.bands(),
                self.config.bands
            )));
        }
        if series.timesteps() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "series has {} timesteps, max is {}",
                series.timesteps(),
                self.config.max_len
            )));
        }
        if series.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("series contains non-finite values".into()));
        }
        Ok(())
    }

    /// Records the forward pass of `series` on `tape` using parameter
    /// handles from `self.store().bind(tape)`; returns the `(classes,)`
    /// log-softmax scores.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], series: &YearlySeries) -> Result<Var> {
        self.check_series(series)?;
        let cfg = &self.config;
        let (t, d) = (series.timesteps(), cfg.d_model);
        let lay = &self.layout;

        let scaled: Vec<f64> = series.values().iter().map(|v| v / cfg.input_scale).collect();
        let x = tape.constant(vec![t, cfg.bands], scaled)?;
        let pe: Vec<f64> = series.days().iter().flat_map(|&day| day_encoding(day, d)).collect();
        let pe = tape.constant(vec![t, d], pe)?;

        let mut h = tape.matmul(x, vars[lay.in_w])?;
        h = tape.add(h, vars[lay.in_b])?;
        h = tape.add(h, pe)?;

        let inv_sqrt_dk = 1.0 / ((d / cfg.heads) as f64).sqrt();
        for block in &lay.blocks {
            let mut attn = None;
            for head in 0..cfg.heads {
                let q = tape.matmul(h, vars[block.wq[head]])?;
                let k = tape.matmul(h, vars[block.wk[head]])?;
                let v = tape.matmul(h, vars[block.wv[head]])?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, inv_sqrt_dk)?;
                let weights = tape.softmax(scores)?;
                let ctx = tape.matmul(weights, v)?;
                let out = tape.matmul(ctx, vars[block.wo[head]])?;
                attn = Some(match attn {
                    None => out,
                    Some(acc) => tape.add(acc, out)?,
                });
            }
            let attn = tape.add(attn.expect("heads > 0"), vars[block.bo])?;
            let r = tape.add(h, attn)?;
            h = affine_norm(tape, r, vars[block.ln1_gain], vars[block.ln1_bias])?;

            let f = tape.matmul(h, vars[block.ff1_w])?;
            let f = tape.add(f, vars[block.ff1_b])?;
            let f = tape.relu(f)?;
            let f = tape.matmul(f, vars[block.ff2_w])?;
            let f = tape.add(f, vars[block.ff2_b])?;
            let r = tape.add(h, f)?;
            h = affine_norm(tape, r, vars[block.ln2_gain], vars[block.ln2_bias])?;
        }

        let pooled = tape.max_axis(h, 0)?;
        let z = tape.reshape(pooled, vec![1, d])?;
        let logits = match cfg.head_kind {
            HeadKind::Discriminative => {
                let wt = tape.transpose(vars[lay.head_w])?;
                let l = tape.matmul(z, wt)?;
                let l = tape.reshape(l, vec![cfg.classes])?;
                tape.add(l, vars[lay.head_b.expect("discriminative bias")])?
            }
            HeadKind::Generative => {
                let zn = tape.row_l2_normalize(z)?;
                let wn = tape.row_l2_normalize(vars[lay.head_w])?;
                let wt = tape.transpose(wn)?;
                let cos = tape.matmul(zn, wt)?;
                let cos = tape.reshape(cos, vec![cfg.classes])?;
                tape.mul(cos, vars[lay.head_scale.expect("generative scale")])?
            }
        };
        tape.log_softmax(logits)
    }

    /// Normalized per-class log-scores for one series.
    pub fn encode(&self, series: &YearlySeries) -> Result<EmissionScores> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, series)?;
        Ok(EmissionScores::new(tape.value(out).to_vec()))
    }

    /// Writes `config.json` and a checkpoint tagged with `stage`.
    pub fn save(&self, dir: &Path, stage: &str) -> Result<()> {
        let prior = Tensor::new(vec![self.class_prior.len()], self.class_prior.clone())?;
        let mut arrays: Vec<(&str, &Tensor)> =
            self.store.names().iter().map(String::as_str).zip(self.store.tensors()).collect();
        arrays.push(("class_prior", &prior));
        let metadata = serde_json::json!({ "kind": "encoder", "stage": stage, "config": self.config });
        checkpoint::write(dir, &arrays, metadata)?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.config)? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint written by [`EncoderParams::save`]; returns the stage tag too.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: EncoderConfig = serde_json::from_str(&text)?;
        let (manifest, arrays) = checkpoint::read(dir)?;
        if manifest.metadata["kind"] != "encoder" {
            return Err(Error::Stage(format!("{} is not an encoder checkpoint", dir.display())));
        }
        let stage = manifest.metadata["stage"].as_str().unwrap_or_default().to_string();
        let mut params = EncoderParams::build(config, &mut |shape, _| vec![0.0; shape.iter().product()])?;
        for (name, tensor) in arrays {
            if name == "class_prior" {
                params.class_prior = tensor.data().to_vec();
                continue;
            }
            let slot = params
                .store
                .find(&name)
                .ok_or_else(|| Error::InvalidInput(format!("unexpected array {name} in checkpoint")))?;
            let dst = params.store.get_mut(slot);
            if dst.shape() != tensor.shape() {
                return Err(Error::InvalidInput(format!("array {name}: shape {:?} expected {:?}", tensor.shape(), dst.shape())));
            }
            dst.data_mut().copy_from_slice(tensor.data());
        }
        if params.class_prior.len() != params.config.classes {
            return Err(Error::InvalidInput("class_prior length does not match classes".into()));
        }
        Ok((params, stage))
    }
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let n = tape.mul(n, gain)?;
    tape.add(n, bias)
}

/// Converts head output into an emission term for the HMM.
///
/// Generative scores already carry a uniform prior and pass through.
/// Discriminative posteriors are divided by the training class prior,
/// giving un-normalized scaled likelihoods.
pub fn head_posteriors_to_emission(scores: &EmissionScores, head_kind: HeadKind, class_prior: &[f64]) -> Result<EmissionScores> {
    if class_prior.len() != scores.classes() {
        return Err(Error::InvalidInput(format!(
            "{} priors for {} classes",
            class_prior.len(),
            scores.classes()
        )));
    }
    if let Some(p) = class_prior.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::InvalidInput(format!("class prior entries must be positive, got {p}")));
    }
    let total: f64 = class_prior.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("class priors sum to {total}, expected 1")));
    }
    Ok(match head_kind {
        HeadKind::Generative => scores.clone(),
        HeadKind::Discriminative => {
            EmissionScores::new(scores.log_scores.iter().zip(class_prior).map(|(s, p)| s - p.ln()).collect())
        }
    })
}

/// Unit norm check used by tests and training diagnostics.
pub fn max_row_norm_error(weights: &[f64], d_model: usize) -> f64 {
    weights
        .chunks(d_model)
        .map(|row| (row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logsumexp;

    fn small_config(head_kind: HeadKind) -> EncoderConfig {
        EncoderConfig { d_model: 8, heads: 2, layers: 1, d_ff: 16, classes: 3, bands: 2, head_kind, ..Default::default() }
    }

    fn series(seed: u64, t: usize, bands: usize) -> YearlySeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..t * bands).map(|_| rng.random::<f64>()).collect();
        let days = (0..t as u32).map(|i| 10 + 30 * i).collect();
        YearlySeries::new(values, bands, days).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_scores() {
        for kind in [HeadKind::Discriminative, HeadKind::Generative] {
            let mut p = EncoderParams::init(small_config(kind), 1).unwrap();
            p.head_weights_mut().iter_mut().for_each(|w| *w = 0.0);
            let s = p.encode(&series(2, 5, 2)).unwrap();
            for v in s.log_scores {
                assert!((v + 3f64.ln()).abs() < 1e-12, "{kind:?}: {v}");
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_normalized() {
        let p = EncoderParams::init(small_config(HeadKind::Generative), 7).unwrap();
        let s = series(3, 6, 2);
        let a = p.encode(&s).unwrap();
        let b = p.encode(&s).unwrap();
        assert_eq!(a, b);
        let total: f64 = a.log_scores.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(logsumexp(&a.log_scores).abs() < 1e-9);
    }

    #[test]
    fn timestamps_change_output() {
        let p = EncoderParams::init(small_config(HeadKind::Discriminative), 9).unwrap();
        let s = series(4, 4, 2);
        let shifted = YearlySeries::new(s.values().to_vec(), 2, vec![100, 150, 200, 250]).unwrap();
        assert_ne!(p.encode(&s).unwrap(), p.encode(&shifted).unwrap());
    }

    #[test]
    fn band_mismatch_and_non_finite_rejected() {
        let p = EncoderParams::init(small_config(HeadKind::Generative), 1).unwrap();
        assert!(p.encode(&series(1, 3, 3)).is_err());
        let bad = YearlySeries::new(vec![0.0, f64::NAN], 2, vec![5]).unwrap();
        assert!(matches!(p.encode(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn series_validation() {
        assert!(YearlySeries::new(vec![0.0; 4], 2, vec![5, 5]).is_err());
        assert!(YearlySeries::new(vec![0.0; 2], 2, vec![366]).is_err());
        assert!(YearlySeries::new(vec![0.0; 3], 2, vec![1]).is_err());
    }

    #[test]
    fn generative_init_has_unit_rows_and_no_bias() {
        let p = EncoderParams::init(small_config(HeadKind::Generative), 5).unwrap();
        assert!(max_row_norm_error(p.head_weights(), 8) < 1e-12);
        assert!(p.store().find("head.b").is_none());
        assert!(p.store().find("head.scale").is_some());
    }

    #[test]
    fn prior_conversion() {
        let s = EmissionScores::new(vec![0.5f64.ln(), 0.5f64.ln()]);
        let out = head_posteriors_to_emission(&s, HeadKind::Discriminative, &[0.8, 0.2]).unwrap();
        assert!((out.log_scores[0] - 0.625f64.ln()).abs() < 1e-12);
        assert!((out.log_scores[1] - 2.5f64.ln()).abs() < 1e-12);
        let same = head_posteriors_to_emission(&s, HeadKind::Generative, &[0.8, 0.2]).unwrap();
        assert_eq!(same, s);
        let uniform = head_posteriors_to_emission(&s, HeadKind::Discriminative, &[0.5, 0.5]).unwrap();
        for (a, b) in uniform.log_scores.iter().zip(&s.log_scores) {
            assert!((a - b - 2f64.ln()).abs() < 1e-12);
        }
        assert!(head_posteriors_to_emission(&s, HeadKind::Discriminative, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = EncoderParams::init(small_config(HeadKind::Discriminative), 11).unwrap();
        p.class_prior = vec![0.5, 0.3, 0.2];
        p.save(dir.path(), "pretrained").unwrap();
        let (q, stage) = EncoderParams::load(dir.path()).unwrap();
        assert_eq!(stage, "pretrained");
        assert_eq!(p, q);
    }
}
