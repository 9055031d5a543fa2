//! Synthetic multiyear datasets, rotation-aware clustering, stratified
//! splitting and JSON-lines dataset files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{YearlySeries, DAYS_PER_YEAR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct YearRecord {
    pub year: i32,
    pub series: YearlySeries,
    pub label: usize,
}

/// One field's multiyear record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    pub id: String,
    pub years: Vec<YearRecord>,
}

impl SampleSequence {
    pub fn labels(&self) -> Vec<usize> {
        self.years.iter().map(|r| r.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.years.is_empty() {
            return Err(Error::InvalidInput(format!("sample {} has no years", self.id)));
        }
        if self.years.windows(2).any(|w| w[0].year >= w[1].year) {
            return Err(Error::InvalidInput(format!("sample {}: year tags must be strictly increasing", self.id)));
        }
        Ok(())
    }
}

/// Seasonal bump of one class in one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandProfile {
    pub baseline: f64,
    pub amplitude: f64,
    pub peak_day: f64,
    pub width: f64,
}

impl BandProfile {
    pub fn eval(&self, day: f64) -> f64 {
        let z = (day - self.peak_day) / self.width;
        self.baseline + self.amplitude * (-0.5 * z * z).exp()
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    pub classes: usize,
    pub years: usize,
    pub timesteps: usize,
    pub bands: usize,
    /// `profiles[class][band]`
    pub profiles: Vec<Vec<BandProfile>>,
    pub noise_sigma: f64,
    /// One row-stochastic `C × C` matrix per adjacent year pair.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Class distribution of the first year.
    pub initial: Vec<f64>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub first_year: i32,
}

/// Knobs of [`SynthSpec::preset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preset {
    pub classes: usize,
    pub years: usize,
    pub timesteps: usize,
    pub bands: usize,
    pub noise_sigma: f64,
    pub rotation_strength: f64,
    pub popularity_decay: f64,
}

impl Default for Preset {
    fn default() -> Self {
        Preset {
            classes: 6,
            years: 6,
            timesteps: 30,
            bands: 4,
            noise_sigma: 0.5,
            rotation_strength: 0.85,
            popularity_decay: 0.7,
        }
    }
}

fn schema_v1() -> u32 {
    1
}

fn check_distribution(what: &str, p: &[f64], tol: f64) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidInput(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::InvalidInput(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, b) = (self.classes, self.bands);
        if c == 0 || self.years == 0 || self.timesteps == 0 || b == 0 {
            return Err(Error::InvalidInput("classes, years, timesteps and bands must be positive".into()));
        }
        if self.timesteps > DAYS_PER_YEAR as usize {
            return Err(Error::InvalidInput(format!("at most {DAYS_PER_YEAR} timesteps per year")));
        }
        if self.profiles.len() != c || self.profiles.iter().any(|p| p.len() != b) {
            return Err(Error::InvalidInput(format!("profiles must be {c} classes × {b} bands")));
        }
        if self.profiles.iter().flatten().any(|p| !(p.width > 0.0)) {
            return Err(Error::InvalidInput("profile widths must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidInput("noise_sigma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput("dropout must be in [0, 1)".into()));
        }
        check_distribution("initial", &self.initial, 1e-12)?;
        if self.initial.len() != c {
            return Err(Error::InvalidInput(format!("initial must have {c} entries")));
        }
        if self.transitions.len() != self.years - 1 {
            return Err(Error::InvalidInput(format!("need {} transition matrices", self.years - 1)));
        }
        for (y, m) in self.transitions.iter().enumerate() {
            if m.len() != c || m.iter().any(|r| r.len() != c) {
                return Err(Error::InvalidInput(format!("transition {y} must be {c} × {c}")));
            }
            for row in m {
                check_distribution(&format!("transition {y} row"), row, 1e-12)?;
            }
        }
        Ok(())
    }

    /// A seeded benchmark generator with one seasonal bump per class and
    /// band. Classes get popularity weights decaying geometrically by
    /// `popularity_decay`; each
    /// class has one preferred successor (drawn by popularity, never itself)
    /// taken with probability `rotation_strength`, the remainder spread over
    /// the other classes by popularity. The resulting label distribution is
    /// imbalanced, with a few rare classes.
    pub fn preset(opts: &Preset, seed: u64) -> Result<Self> {
        let Preset { classes, years, timesteps, bands, noise_sigma, rotation_strength, popularity_decay } = *opts;
        if classes == 0 || years == 0 {
            return Err(Error::InvalidInput("classes and years must be positive".into()));
        }
        if !(0.0..=1.0).contains(&rotation_strength) {
            return Err(Error::InvalidInput("rotation_strength must be in [0, 1]".into()));
        }
        if !(popularity_decay > 0.0 && popularity_decay <= 1.0) {
            return Err(Error::InvalidInput("popularity_decay must be in (0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let profiles = (0..classes)
            .map(|_| {
                (0..bands)
                    .map(|_| BandProfile {
                        baseline: rng.random_range(0.05..0.25),
                        amplitude: rng.random_range(0.1..0.6),
                        peak_day: rng.random_range(60.0..300.0),
                        width: rng.random_range(20.0..60.0),
                    })
                    .collect()
            })
            .collect();
        let mut popularity: Vec<f64> = (0..classes).map(|i| popularity_decay.powi(i as i32)).collect();
        popularity.shuffle(&mut rng);
        let normalized = |w: Vec<f64>| {
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect::<Vec<f64>>()
        };
        let successor: Vec<usize> = (0..classes)
            .map(|from| {
                let w: Vec<f64> = (0..classes).map(|to| if to == from { 0.0 } else { popularity[to] }).collect();
                if classes == 1 {
                    0
                } else {
                    draw_categorical(&mut rng, &normalized(w))
                }
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..classes)
            .map(|from| {
                if classes == 1 {
                    return vec![1.0];
                }
                let others: Vec<f64> =
                    (0..classes).map(|to| if to == successor[from] { 0.0 } else { popularity[to] }).collect();
                normalized(others)
                    .into_iter()
                    .enumerate()
                    .map(|(to, p)| {
                        if to == successor[from] {
                            rotation_strength
                        } else {
                            (1.0 - rotation_strength) * p
                        }
                    })
                    .collect()
            })
            .collect();
        // exact row sums so validation at 1e-12 holds
        let rows: Vec<Vec<f64>> = rows.into_iter().map(normalized).collect();
        let transitions = vec![rows; years - 1];
        let initial = normalized(popularity.clone());
        let spec = SynthSpec {
            schema_version: 1,
            classes,
            years,
            timesteps,
            bands,
            profiles,
            noise_sigma,
            transitions,
            initial,
            dropout: 0.0,
            first_year: 2017,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn draw_categorical(rng: &mut impl Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Draws `n` samples: labels from the first-year distribution and the
/// rotation chain, series from the class profiles at sorted random days
/// plus Gaussian noise.
pub fn generate(spec: &SynthSpec, n: usize, seed: u64) -> Result<Vec<SampleSequence>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let width = n.to_string().len().max(6);
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut labels = Vec::with_capacity(spec.years);
        labels.push(draw_categorical(&mut rng, &spec.initial));
        for y in 1..spec.years {
            let prev = labels[y - 1];
            labels.push(draw_categorical(&mut rng, &spec.transitions[y - 1][prev]));
        }
        let mut years = Vec::with_capacity(spec.years);
        for (y, &label) in labels.iter().enumerate() {
            let mut days: Vec<u32> = index::sample(&mut rng, DAYS_PER_YEAR as usize, spec.timesteps)
                .into_iter()
                .map(|d| d as u32)
                .collect();
            days.sort_unstable();
            if spec.dropout > 0.0 {
                let keep: Vec<u32> = days.iter().copied().filter(|_| rng.random::<f64>() >= spec.dropout).collect();
                if !keep.is_empty() {
                    days = keep;
                } else {
                    days.truncate(1);
                }
            }
            let profile = &spec.profiles[label];
            let mut values = Vec::with_capacity(days.len() * spec.bands);
            for &d in &days {
                for band in profile {
                    let clean = band.eval(f64::from(d));
                    let v = if spec.noise_sigma > 0.0 { clean + noise.sample(&mut rng) } else { clean };
                    values.push(v);
                }
            }
            years.push(YearRecord {
                year: spec.first_year + y as i32,
                series: YearlySeries::new(values, spec.bands, days)?,
                label,
            });
        }
        out.push(SampleSequence { id: format!("{s:0width$}"), years });
    }
    Ok(out)
}

/// Minimum Hamming distance between `a` and every circular shift of `b`.
pub fn rotation_hamming<T: PartialEq>(a: &[T], b: &[T]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("sequence lengths differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n == 0 {
        return Ok(0);
    }
    Ok((0..n)
        .map(|shift| (0..n).filter(|&i| a[i] != b[(i + shift) % n]).count())
        .min()
        .expect("n > 0"))
}

/// Average-linkage agglomerative clustering under [`rotation_hamming`].
///
/// Merging stops once the smallest inter-cluster linkage exceeds
/// `threshold`. Identical sequences are pooled first (they are always at
/// distance 0), and the pooled sequences are processed in lexicographic
/// order with ties broken by the smallest member, so the partition does not
/// depend on input order. Cluster ids are numbered by their
/// lexicographically smallest member sequence.
pub fn cluster(sequences: &[Vec<usize>], threshold: f64) -> Result<Vec<usize>> {
    if sequences.is_empty() {
        return Err(Error::InvalidInput("clustering needs at least one sequence".into()));
    }
    let len = sequences[0].len();
    if sequences.iter().any(|s| s.len() != len) {
        return Err(Error::InvalidInput("all sequences must have the same length".into()));
    }
    let mut unique: BTreeMap<&[usize], usize> = BTreeMap::new();
    for s in sequences {
        *unique.entry(s.as_slice()).or_default() += 1;
    }
    let keys: Vec<&[usize]> = unique.keys().copied().collect();
    let weights: Vec<f64> = unique.values().map(|&w| w as f64).collect();
    let m = keys.len();

    let mut dist = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let d = rotation_hamming(keys[i], keys[j])? as f64;
            dist[i * m + j] = d;
            dist[j * m + i] = d;
        }
    }

    let mut active = vec![true; m];
    let mut size = weights;
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    // nearest active neighbour per slot, ties to the smaller slot
    let nearest = |dist: &[f64], active: &[bool], i: usize| -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..m {
            if j != i && active[j] && best.is_none_or(|(d, _)| dist[i * m + j] < d) {
                best = Some((dist[i * m + j], j));
            }
        }
        best
    };
    let mut nn: Vec<Option<(f64, usize)>> = (0..m).map(|i| nearest(&dist, &active, i)).collect();

    loop {
        // slot index equals the cluster's smallest member, so (d, lo, hi) is canonical
        let mut pick: Option<(f64, usize, usize)> = None;
        for i in 0..m {
            if !active[i] {
                continue;
            }
            if let Some((d, j)) = nn[i] {
                let cand = (d, i.min(j), i.max(j));
                if pick.is_none_or(|p| cand < p) {
                    pick = Some(cand);
                }
            }
        }
        let Some((d, keep, gone)) = pick else { break };
        if d > threshold {
            break;
        }
        let (wk, wg) = (size[keep], size[gone]);
        for k in 0..m {
            if active[k] && k != keep && k != gone {
                let merged = (wk * dist[keep * m + k] + wg * dist[gone * m + k]) / (wk + wg);
                dist[keep * m + k] = merged;
                dist[k * m + keep] = merged;
            }
        }
        active[gone] = false;
        size[keep] += wg;
        let moved = std::mem::take(&mut members[gone]);
        members[keep].extend(moved);
        for k in 0..m {
            if !active[k] {
                continue;
            }
            let stale = match nn[k] {
                Some((_, j)) => j == keep || j == gone || k == keep,
                None => true,
            };
            if stale {
                nn[k] = nearest(&dist, &active, k);
            } else if let Some((dk, jk)) = nn[k] {
                let dn = dist[k * m + keep];
                if dn < dk || (dn == dk && keep < jk) {
                    nn[k] = Some((dn, keep));
                }
            }
        }
    }

    let mut cluster_of_unique = vec![0; m];
    let mut next_id = 0;
    for slot in 0..m {
        if active[slot] {
            for &u in &members[slot] {
                cluster_of_unique[u] = next_id;
            }
            next_id += 1;
        }
    }
    Ok(sequences
        .iter()
        .map(|s| cluster_of_unique[keys.binary_search(&s.as_slice()).expect("key present")])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" | "validation" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(Error::InvalidInput(format!("unknown subset {other:?}"))),
        }
    }
}

/// Sample-index partition into train/validation/test with per-sample strata.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub cluster_of: Vec<usize>,
}

impl DatasetSplit {
    pub fn subset(&self, which: Subset) -> &[usize] {
        match which {
            Subset::Train => &self.train,
            Subset::Val => &self.validation,
            Subset::Test => &self.test,
        }
    }

    pub fn assignment(&self) -> Vec<Subset> {
        let mut out = vec![Subset::Train; self.cluster_of.len()];
        for &i in &self.validation {
            out[i] = Subset::Val;
        }
        for &i in &self.test {
            out[i] = Subset::Test;
        }
        out
    }
}

/// Independent categorical draw per sample within each stratum, strata in
/// id order and samples in index order.
pub fn stratified_split(clusters: &[usize], probabilities: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if clusters.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    check_distribution("split probabilities", &probabilities, 1e-9)?;
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in clusters.iter().enumerate() {
        strata.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for members in strata.values() {
        for &i in members {
            match draw_categorical(&mut rng, &probabilities) {
                0 => train.push(i),
                1 => validation.push(i),
                _ => test.push(i),
            }
        }
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit { train, validation, test, cluster_of: clusters.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: Subset,
    pub cluster: usize,
}

/// On-disk split: sample id → subset and cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub schema_version: u32,
    pub threshold: f64,
    pub seed: u64,
    pub clusters: usize,
    pub assignments: BTreeMap<String, SplitEntry>,
}

impl SplitFile {
    pub fn from_split(samples: &[SampleSequence], split: &DatasetSplit, threshold: f64, seed: u64) -> Self {
        let subsets = split.assignment();
        let assignments = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), SplitEntry { split: subsets[i], cluster: split.cluster_of[i] }))
            .collect();
        let clusters = split.cluster_of.iter().copied().max().map_or(0, |m| m + 1);
        SplitFile { schema_version: 1, threshold, seed, clusters, assignments }
    }

    /// Resolves the file against `samples`; every sample must be assigned.
    pub fn to_split(&self, samples: &[SampleSequence]) -> Result<DatasetSplit> {
        let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        let mut cluster_of = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let entry = self
                .assignments
                .get(&s.id)
                .ok_or_else(|| Error::InvalidInput(format!("sample {} missing from split file", s.id)))?;
            cluster_of.push(entry.cluster);
            match entry.split {
                Subset::Train => train.push(i),
                Subset::Val => validation.push(i),
                Subset::Test => test.push(i),
            }
        }
        Ok(DatasetSplit { train, validation, test, cluster_of })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct YearLine {
    year: i32,
    days: Vec<u32>,
    values: Vec<Vec<f64>>,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    id: String,
    years: Vec<YearLine>,
}

/// Writes one JSON object per line.
pub fn write_dataset(path: &Path, samples: &[SampleSequence]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = SampleLine {
            id: s.id.clone(),
            years: s
                .years
                .iter()
                .map(|r| YearLine {
                    year: r.year,
                    days: r.series.days().to_vec(),
                    values: (0..r.series.timesteps()).map(|t| r.series.row(t).to_vec()).collect(),
                    label: r.label,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines dataset. Blank lines are skipped; every series must
/// have the band count of the first one.
pub fn read_dataset(path: &Path) -> Result<Vec<SampleSequence>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut bands: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: lineno, msg };
        let raw: SampleLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut years = Vec::with_capacity(raw.years.len());
        for y in raw.years {
            let b = y.values.first().map_or(0, Vec::len);
            let expected = *bands.get_or_insert(b);
            if y.values.iter().any(|row| row.len() != expected) {
                return Err(parse_err(format!("year {}: expected {expected} bands per row", y.year)));
            }
            if y.values.len() != y.days.len() {
                return Err(parse_err(format!("year {}: {} days but {} rows", y.year, y.days.len(), y.values.len())));
            }
            let series = YearlySeries::from_rows(&y.values, y.days).map_err(|e| parse_err(e.to_string()))?;
            years.push(YearRecord { year: y.year, series, label: y.label });
        }
        let sample = SampleSequence { id: raw.id, years };
        sample.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

/// Number of classes implied by the labels (`max + 1`).
pub fn infer_classes(samples: &[SampleSequence]) -> usize {
    samples.iter().flat_map(|s| s.years.iter().map(|r| r.label)).max().map_or(0, |m| m + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(sigma: f64) -> SynthSpec {
        SynthSpec::preset(&Preset { classes: 3, years: 4, timesteps: 8, bands: 2, noise_sigma: sigma, ..Default::default() }, 5).unwrap()
    }

    #[test]
    fn generate_is_deterministic_and_rejects_zero() {
        let spec = small_spec(0.05);
        assert_eq!(generate(&spec, 20, 3).unwrap(), generate(&spec, 20, 3).unwrap());
        assert!(generate(&spec, 0, 3).unwrap_err().to_string().contains("n must be positive"));
    }

    #[test]
    fn noiseless_series_depend_only_on_label_and_days() {
        let spec = small_spec(0.0);
        let samples = generate(&spec, 50, 1).unwrap();
        for s in &samples {
            for r in &s.years {
                for (t, &d) in r.series.days().iter().enumerate() {
                    for (b, p) in spec.profiles[r.label].iter().enumerate() {
                        assert_eq!(r.series.row(t)[b], p.eval(f64::from(d)));
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_chain_is_followed() {
        let mut spec = small_spec(0.1);
        let perm = [2, 0, 1];
        spec.transitions = vec![(0..3).map(|i| (0..3).map(|j| f64::from(u8::from(perm[i] == j))).collect()).collect(); 3];
        for s in generate(&spec, 100, 9).unwrap() {
            let l = s.labels();
            for w in l.windows(2) {
                assert_eq!(w[1], perm[w[0]]);
            }
        }
    }

    #[test]
    fn dropout_keeps_at_least_one_acquisition() {
        let mut spec = small_spec(0.1);
        spec.dropout = 0.9;
        for s in generate(&spec, 30, 2).unwrap() {
            assert!(s.years.iter().all(|r| r.series.timesteps() >= 1 && r.series.timesteps() <= 8));
        }
    }

    #[test]
    fn rotation_hamming_examples() {
        assert_eq!(rotation_hamming(&['A', 'B', 'A', 'B'], &['B', 'A', 'B', 'A']).unwrap(), 0);
        assert_eq!(rotation_hamming(&['A', 'A', 'A', 'A'], &['A', 'A', 'A', 'B']).unwrap(), 1);
        assert_eq!(rotation_hamming(&[1, 2, 3], &[3, 1, 2]).unwrap(), 0);
        assert!(rotation_hamming(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn cluster_examples() {
        let seqs = vec![vec![0, 1, 0, 1], vec![1, 0, 1, 0], vec![0, 0, 0, 0], vec![1, 1, 1, 1]];
        let c0 = cluster(&seqs, 0.0).unwrap();
        assert_eq!(c0[0], c0[1]);
        assert_ne!(c0[2], c0[3]);
        assert_ne!(c0[0], c0[2]);
        let all = cluster(&seqs, 4.0).unwrap();
        assert!(all.iter().all(|&c| c == 0));

        // pairwise distances {0, 2, 2}: a~b at 0, c at 2 from both
        let seqs = vec![vec![0, 0, 1, 1], vec![0, 1, 1, 0], vec![0, 0, 0, 0]];
        assert_eq!(rotation_hamming(&seqs[0], &seqs[2]).unwrap(), 2);
        let c = cluster(&seqs, 1.0).unwrap();
        assert_eq!(c[0], c[1]);
        assert_ne!(c[0], c[2]);
        assert!(cluster(&[], 1.0).is_err());
    }

    #[test]
    fn split_edge_cases() {
        let clusters = vec![0, 0, 1, 1, 2];
        let all_train = stratified_split(&clusters, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(all_train.train.len(), 5);
        assert_eq!(stratified_split(&clusters, [0.6, 0.2, 0.2], 4).unwrap(), stratified_split(&clusters, [0.6, 0.2, 0.2], 4).unwrap());
        assert!(stratified_split(&[], [0.6, 0.2, 0.2], 1).is_err());
        assert!(stratified_split(&clusters, [0.6, 0.2, 0.3], 1).is_err());
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = generate(&small_spec(0.07), 5, 4).unwrap();
        write_dataset(&path, &samples).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), samples);

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(read_dataset(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        let good = fs::read_to_string(&path).unwrap();
        let first = good.lines().next().unwrap();
        let broken = r#"{"id":"x","years":[{"year":1,"days":[1],"values":[[0.1,0.2,0.3]],"label":0}]}"#;
        fs::write(&bad, format!("{first}\n{broken}\n")).unwrap();
        match read_dataset(&bad).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bands"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn split_file_round_trip() {
        let samples = generate(&small_spec(0.1), 12, 8).unwrap();
        let seqs: Vec<Vec<usize>> = samples.iter().map(SampleSequence::labels).collect();
        let clusters = cluster(&seqs, 1.0).unwrap();
        let split = stratified_split(&clusters, [0.6, 0.2, 0.2], 3).unwrap();
        let file = SplitFile::from_split(&samples, &split, 1.0, 3);
        assert_eq!(file.to_split(&samples).unwrap(), split);
    }
}
