//! Synthetic Bradley-Terry preference data.
//!
//! Items and contexts live in small latent spaces drawn from Gaussian
//! mixtures. The last latent coordinate is a held-out axis: in-distribution
//! draws barely move along it, out-of-distribution draws are shifted along it
//! by `ood_shift` on average, each prompt by its own amount. A fixed random two-layer network `r*(context, item)` plays
//! the unknown ground-truth reward, and labels are Bernoulli with success
//! probability `sigmoid(r*(c, a) - r*(c, b))`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigmoid;

pub const DATA_FORMAT_VERSION: u32 = 1;

const TRUTH_STREAM: u64 = 0x7275_7468; // "ruth"
const MIXTURE_STREAM: u64 = 0x6d69_7874; // "mixt"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    IdTrain,
    IdVal,
    Ood,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::IdTrain => "id_train",
            Split::IdVal => "id_val",
            Split::Ood => "ood",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Block layout of a pair encoding: `[context | item A | item B]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLayout {
    pub context_dim: usize,
    pub item_dim: usize,
}

impl PairLayout {
    pub fn pair_dim(&self) -> usize {
        self.context_dim + 2 * self.item_dim
    }

    pub fn encode(&self, context: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(context.len(), self.context_dim);
        debug_assert_eq!(a.len(), self.item_dim);
        debug_assert_eq!(b.len(), self.item_dim);
        let mut out = Vec::with_capacity(self.pair_dim());
        out.extend_from_slice(context);
        out.extend_from_slice(a);
        out.extend_from_slice(b);
        out
    }

    /// Splits a pair encoding into `(context, a, b)`.
    pub fn split<'a>(&self, x_pair: &'a [f64]) -> Result<(&'a [f64], &'a [f64], &'a [f64])> {
        if x_pair.len() != self.pair_dim() {
            return Err(Error::invalid(format!(
                "pair encoding has length {}, layout expects {}",
                x_pair.len(),
                self.pair_dim()
            )));
        }
        let (c, rest) = x_pair.split_at(self.context_dim);
        let (a, b) = rest.split_at(self.item_dim);
        Ok((c, a, b))
    }

    /// Same pair with the A/B roles exchanged.
    pub fn swap(&self, x_pair: &[f64]) -> Result<Vec<f64>> {
        let (c, a, b) = self.split(x_pair)?;
        Ok(self.encode(c, b, a))
    }
}

/// Fixed random two-layer reward network `r*(c, y) = v^T tanh(A [c; y] + a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    context_dim: usize,
    item_dim: usize,
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    readout: DVector<f64>,
    seed: u64,
}

impl GroundTruth {
    pub const HIDDEN: usize = 16;

    pub fn new(context_dim: usize, item_dim: usize, seed: u64) -> Result<Self> {
        Self::with_gain(context_dim, item_dim, 1.0, seed)
    }

    /// `held_out_gain` scales the input weights of the held-out coordinates of
    /// context and item, controlling how much the reward changes off-support.
    pub fn with_gain(context_dim: usize, item_dim: usize, held_out_gain: f64, seed: u64) -> Result<Self> {
        if context_dim == 0 || item_dim < 2 {
            return Err(Error::invalid("context_dim must be >= 1 and item_dim >= 2"));
        }
        if !held_out_gain.is_finite() {
            return Err(Error::invalid("held_out_gain must be finite"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ TRUTH_STREAM);
        let fan_in = (context_dim + item_dim) as f64;
        let w_scale = 1.5 / fan_in.sqrt();
        let weights = DMatrix::from_fn(Self::HIDDEN, context_dim + item_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * w_scale
        });
        let bias = DVector::from_fn(Self::HIDDEN, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
        let mut weights = weights;
        weights.column_mut(context_dim - 1).scale_mut(held_out_gain);
        weights.column_mut(context_dim + item_dim - 1).scale_mut(held_out_gain);
        let r_scale = 3.0 / (Self::HIDDEN as f64).sqrt();
        let readout = DVector::from_fn(Self::HIDDEN, |_, _| rng.sample::<f64, _>(StandardNormal) * r_scale);
        Ok(Self {
            context_dim,
            item_dim,
            weights,
            bias,
            readout,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> PairLayout {
        PairLayout {
            context_dim: self.context_dim,
            item_dim: self.item_dim,
        }
    }

    pub fn reward(&self, context: &[f64], item: &[f64]) -> Result<f64> {
        if context.len() != self.context_dim || item.len() != self.item_dim {
            return Err(Error::invalid(format!(
                "reward expects context/item of length {}/{}, got {}/{}",
                self.context_dim,
                self.item_dim,
                context.len(),
                item.len()
            )));
        }
        let input = DVector::from_iterator(
            self.context_dim + self.item_dim,
            context.iter().chain(item.iter()).copied(),
        );
        let hidden = (&self.weights * input + &self.bias).map(f64::tanh);
        Ok(self.readout.dot(&hidden))
    }

    /// `r*(c, a) - r*(c, b)` for a pair encoding.
    pub fn delta(&self, x_pair: &[f64]) -> Result<f64> {
        let (c, a, b) = self.layout().split(x_pair)?;
        Ok(self.reward(c, a)? - self.reward(c, b)?)
    }
}

/// Isotropic Gaussian mixture whose last coordinate is the held-out axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMixture {
    means: Vec<DVector<f64>>,
    noise_std: f64,
    held_out_std: f64,
}

impl LatentMixture {
    fn new(dim: usize, components: usize, rng: &mut ChaCha20Rng) -> Self {
        let means = (0..components)
            .map(|_| {
                DVector::from_fn(dim, |i, _| {
                    if i + 1 == dim {
                        0.0
                    } else {
                        rng.sample::<f64, _>(StandardNormal) * 1.5
                    }
                })
            })
            .collect();
        Self {
            means,
            noise_std: 0.7,
            held_out_std: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    /// One draw, shifted by `shift` along the held-out axis.
    pub fn sample(&self, shift: f64, rng: &mut impl Rng) -> Vec<f64> {
        let dim = self.dim();
        let mean = &self.means[rng.random_range(0..self.means.len())];
        (0..dim)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                if i + 1 == dim {
                    shift + z * self.held_out_std
                } else {
                    mean[i] + z * self.noise_std
                }
            })
            .collect()
    }

    /// Distance from a latent to the nearest component mean.
    pub fn distance_to_support(&self, latent: &[f64]) -> f64 {
        self.means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(latent)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub context_dim: usize,
    pub item_dim: usize,
    pub mixture_components: usize,
    pub held_out_gain: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            context_dim: 8,
            item_dim: 8,
            mixture_components: 3,
            held_out_gain: 3.0,
        }
    }
}

/// Ground truth plus the latent distributions, all derived from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub truth: GroundTruth,
    pub contexts: LatentMixture,
    pub items: LatentMixture,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        if config.mixture_components == 0 {
            return Err(Error::invalid("mixture_components must be >= 1"));
        }
        let truth = GroundTruth::with_gain(config.context_dim, config.item_dim, config.held_out_gain, seed)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ MIXTURE_STREAM);
        let contexts = LatentMixture::new(config.context_dim, config.mixture_components, &mut rng);
        let items = LatentMixture::new(config.item_dim, config.mixture_components, &mut rng);
        Ok(Self { truth, contexts, items })
    }

    pub fn layout(&self) -> PairLayout {
        self.truth.layout()
    }

    /// Fixed candidate pools for the toy alignment loop.
    pub fn prompt_pool(
        &self,
        n_prompts: usize,
        candidates: usize,
        ood_fraction: f64,
        ood_shift: f64,
        ood_spread: f64,
        seed: u64,
    ) -> Result<Vec<AlignPrompt>> {
        if n_prompts == 0 || candidates < 2 {
            return Err(Error::invalid("prompt pool needs >= 1 prompt and >= 2 candidates"));
        }
        check_fraction("ood_fraction", ood_fraction)?;
        check_fraction("ood_spread", ood_spread)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n_ood = (ood_fraction * n_prompts as f64).round() as usize;
        let mut is_ood = vec![false; n_prompts];
        is_ood.iter_mut().take(n_ood).for_each(|v| *v = true);
        is_ood.shuffle(&mut rng);
        Ok(is_ood
            .into_iter()
            .enumerate()
            .map(|(idx, ood)| {
                let shift = if ood { draw_shift(ood_shift, ood_spread, &mut rng) } else { 0.0 };
                let context = self.contexts.sample(shift, &mut rng);
                let candidates = (0..candidates).map(|_| self.items.sample(shift, &mut rng)).collect();
                AlignPrompt {
                    id: format!("q{idx:06}"),
                    context,
                    candidates,
                    ood,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignPrompt {
    pub id: String,
    pub context: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub ood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub group_id: String,
    pub x_pair: Vec<f64>,
    /// 1 if the first response is preferred.
    pub label: u8,
    pub strength: u8,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_delta: Option<f64>,
}

/// Draws a Bradley-Terry label for a reward difference.
pub fn sample_label(delta: f64, rng: &mut impl Rng) -> u8 {
    u8::from(rng.random::<f64>() < sigmoid(delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_prompts: usize,
    pub responses_per_prompt: usize,
    pub ood_fraction: f64,
    pub ood_shift: f64,
    /// Each OOD prompt is shifted by `ood_shift * (1 + ood_spread * U(-1, 1))`.
    pub ood_spread: f64,
    pub val_fraction: f64,
    pub world: WorldConfig,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_prompts: 1000,
            responses_per_prompt: 4,
            ood_fraction: 0.2,
            ood_shift: 4.0,
            ood_spread: 0.75,
            val_fraction: 0.2,
            world: WorldConfig::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Two responses per prompt sized to 6,766 train / 352 validation pairs.
    pub fn helpsteer2_scale(seed: u64) -> Self {
        Self {
            n_prompts: 6766 + 352,
            responses_per_prompt: 2,
            ood_fraction: 0.0,
            ood_shift: 0.0,
            ood_spread: 0.0,
            val_fraction: 352.0 / 7118.0,
            world: WorldConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 {
            return Err(Error::invalid("n_prompts must be >= 1"));
        }
        if self.responses_per_prompt < 2 {
            return Err(Error::invalid("responses_per_prompt must be >= 2"));
        }
        check_fraction("ood_fraction", self.ood_fraction)?;
        check_fraction("val_fraction", self.val_fraction)?;
        check_fraction("ood_spread", self.ood_spread)?;
        if !(self.ood_shift >= 0.0 && self.ood_shift.is_finite()) {
            return Err(Error::invalid("ood_shift must be finite and >= 0"));
        }
        Ok(())
    }
}

fn draw_shift(shift: f64, spread: f64, rng: &mut impl Rng) -> f64 {
    if spread == 0.0 {
        shift
    } else {
        shift * (1.0 + spread * rng.random_range(-1.0..1.0))
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub layout: PairLayout,
    pub world: WorldConfig,
    pub world_seed: u64,
    pub generator: Option<GenConfig>,
    pub count: usize,
    pub split_sizes: BTreeMap<Split, usize>,
    pub augmented: bool,
    pub redacted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<PreferenceRecord>,
}

impl Dataset {
    pub fn new(manifest: Manifest, records: Vec<PreferenceRecord>) -> Self {
        let mut ds = Self { manifest, records };
        ds.refresh_manifest();
        ds
    }

    pub fn layout(&self) -> PairLayout {
        self.manifest.layout
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn refresh_manifest(&mut self) {
        self.manifest.count = self.records.len();
        self.manifest.split_sizes = split_sizes(&self.records);
    }

    pub fn world(&self) -> Result<SyntheticWorld> {
        SyntheticWorld::new(self.manifest.world, self.manifest.world_seed)
    }

    /// Records of one split, manifest updated accordingly.
    pub fn filter_split(&self, split: Split) -> Dataset {
        self.filter(|r| r.split == split)
    }

    pub fn filter(&self, mut keep: impl FnMut(&PreferenceRecord) -> bool) -> Dataset {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(self.manifest.clone(), records)
    }

    /// Appends the swapped twin of every record.
    pub fn augment_swap(&self) -> Result<Dataset> {
        let layout = self.layout();
        let mut records = Vec::with_capacity(self.records.len() * 2);
        for rec in &self.records {
            records.push(rec.clone());
            records.push(PreferenceRecord {
                id: format!("{}~swap", rec.id),
                group_id: rec.group_id.clone(),
                x_pair: layout.swap(&rec.x_pair)?,
                label: 1 - rec.label,
                strength: rec.strength,
                split: rec.split,
                true_delta: rec.true_delta.map(|d| -d),
            });
        }
        let mut manifest = self.manifest.clone();
        manifest.augmented = true;
        Ok(Dataset::new(manifest, records))
    }

    /// Drops generator-only fields before model training.
    pub fn redact(&self) -> Dataset {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.true_delta = None);
        out.manifest.redacted = true;
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec).map_err(|e| Error::Schema(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(manifest_path(path), manifest + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mpath = manifest_path(path);
        let mtext = fs::read_to_string(&mpath)?;
        let manifest: Manifest = serde_json::from_str(&mtext)
            .map_err(|e| Error::Schema(format!("manifest {}: {e}", mpath.display())))?;
        if manifest.format_version != DATA_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported data format version {}",
                manifest.format_version
            )));
        }
        let reader = BufReader::new(fs::File::open(path)?);
        let pair_dim = manifest.layout.pair_dim();
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PreferenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            if rec.x_pair.len() != pair_dim {
                return Err(Error::Schema(format!(
                    "line {}: x_pair has length {}, manifest says {pair_dim}",
                    idx + 1,
                    rec.x_pair.len()
                )));
            }
            if rec.label > 1 || !(1..=3).contains(&rec.strength) {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("label {} / strength {} out of range", rec.label, rec.strength),
                });
            }
            records.push(rec);
        }
        if records.len() != manifest.count {
            return Err(Error::Schema(format!(
                "manifest lists {} records, file has {}",
                manifest.count,
                records.len()
            )));
        }
        let sizes = split_sizes(&records);
        if sizes != manifest.split_sizes {
            return Err(Error::Schema(format!(
                "split sizes {:?} disagree with manifest {:?}",
                sizes, manifest.split_sizes
            )));
        }
        Ok(Dataset { manifest, records })
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn split_sizes(records: &[PreferenceRecord]) -> BTreeMap<Split, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.split).or_insert(0) += 1;
    }
    m
}

/// Generates the dataset and returns it with the ground truth that produced it.
pub fn generate(config: &GenConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let world = SyntheticWorld::new(config.world, config.seed)?;
    let layout = world.layout();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let n = config.n_prompts;
    let n_ood = (config.ood_fraction * n as f64).round() as usize;
    let n_val = (config.val_fraction * (n - n_ood) as f64).round() as usize;
    let mut splits: Vec<Split> = std::iter::repeat_n(Split::Ood, n_ood)
        .chain(std::iter::repeat_n(Split::IdVal, n_val))
        .chain(std::iter::repeat_n(Split::IdTrain, n - n_ood - n_val))
        .collect();
    splits.shuffle(&mut rng);

    let k = config.responses_per_prompt;
    let mut records = Vec::with_capacity(n * k * (k - 1) / 2);
    for (prompt, split) in splits.into_iter().enumerate() {
        let shift = if split == Split::Ood {
            draw_shift(config.ood_shift, config.ood_spread, &mut rng)
        } else {
            0.0
        };
        let context = world.contexts.sample(shift, &mut rng);
        let items: Vec<Vec<f64>> = (0..k).map(|_| world.items.sample(shift, &mut rng)).collect();
        let rewards = items
            .iter()
            .map(|y| world.truth.reward(&context, y))
            .collect::<Result<Vec<_>>>()?;
        let group_id = format!("p{prompt:06}");
        for i in 0..k {
            for j in (i + 1)..k {
                let delta = rewards[i] - rewards[j];
                records.push(PreferenceRecord {
                    id: format!("{group_id}-{i}-{j}"),
                    group_id: group_id.clone(),
                    x_pair: layout.encode(&context, &items[i], &items[j]),
                    label: sample_label(delta, &mut rng),
                    strength: 0,
                    split,
                    true_delta: Some(delta),
                });
            }
        }
    }
    assign_strengths(&mut records);

    let manifest = Manifest {
        format_version: DATA_FORMAT_VERSION,
        layout,
        world: config.world,
        world_seed: config.seed,
        generator: Some(*config),
        count: 0,
        split_sizes: BTreeMap::new(),
        augmented: false,
        redacted: false,
    };
    Ok((Dataset::new(manifest, records), world.truth))
}

/// Strength 1/2/3 by terciles of `|true_delta|` over the pool.
fn assign_strengths(records: &mut [PreferenceRecord]) {
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let da = records[a].true_delta.unwrap_or(0.0).abs();
        let db = records[b].true_delta.unwrap_or(0.0).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    for (rank, idx) in order.into_iter().enumerate() {
        records[idx].strength = 1 + (3 * rank / n.max(1)) as u8;
    }
}

pub fn save_prompts(path: &Path, prompts: &[AlignPrompt]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in prompts {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::Schema(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_prompts(path: &Path) -> Result<Vec<AlignPrompt>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            n_prompts: 60,
            responses_per_prompt: 3,
            ood_fraction: 0.25,
            ood_shift: 3.0,
            val_fraction: 0.2,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn zero_delta_labels_are_fair_coins() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ones: u32 = (0..10_000).map(|_| u32::from(sample_label(0.0, &mut rng))).sum();
        let rate = ones as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.015, "rate {rate}");
    }

    #[test]
    fn large_delta_labels_are_nearly_certain() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ones: u32 = (0..10_000).map(|_| u32::from(sample_label(6.0, &mut rng))).sum();
        assert!(ones as f64 / 10_000.0 >= 0.99);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let (a, ta) = generate(&small(4)).unwrap();
        let (b, tb) = generate(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(5)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn split_counts_follow_fractions() {
        let (ds, _) = generate(&small(0)).unwrap();
        // 60 prompts, 15 ood, 9 val, 36 train; 3 pairs each
        assert_eq!(ds.manifest.split_sizes[&Split::Ood], 45);
        assert_eq!(ds.manifest.split_sizes[&Split::IdVal], 27);
        assert_eq!(ds.manifest.split_sizes[&Split::IdTrain], 108);
        assert_eq!(ds.len(), 180);
    }

    #[test]
    fn helpsteer2_preset_sizes() {
        let cfg = GenConfig::helpsteer2_scale(0);
        let (ds, _) = generate(&GenConfig { n_prompts: cfg.n_prompts, ..cfg }).unwrap();
        assert_eq!(ds.manifest.split_sizes[&Split::IdTrain], 6766);
        assert_eq!(ds.manifest.split_sizes[&Split::IdVal], 352);
    }

    #[test]
    fn strengths_are_terciles() {
        let (ds, _) = generate(&small(9)).unwrap();
        let mut counts = [0usize; 3];
        for r in &ds.records {
            counts[(r.strength - 1) as usize] += 1;
        }
        let third = ds.len() as f64 / 3.0;
        for c in counts {
            assert!((c as f64 - third).abs() <= 1.0, "{counts:?}");
        }
        let max_s1 = ds
            .records
            .iter()
            .filter(|r| r.strength == 1)
            .map(|r| r.true_delta.unwrap().abs())
            .fold(0.0, f64::max);
        let min_s3 = ds
            .records
            .iter()
            .filter(|r| r.strength == 3)
            .map(|r| r.true_delta.unwrap().abs())
            .fold(f64::INFINITY, f64::min);
        assert!(max_s1 <= min_s3);
    }

    #[test]
    fn true_delta_matches_ground_truth() {
        let (ds, truth) = generate(&small(3)).unwrap();
        for r in ds.records.iter().take(20) {
            assert_eq!(truth.delta(&r.x_pair).unwrap(), r.true_delta.unwrap());
        }
    }

    #[test]
    fn augment_empty_is_empty() {
        let (ds, _) = generate(&small(0)).unwrap();
        let empty = ds.filter(|_| false);
        assert!(empty.augment_swap().unwrap().is_empty());
    }

    #[test]
    fn augment_single_record() {
        let (ds, _) = generate(&small(0)).unwrap();
        let mut one = ds.filter(|_| false);
        let mut rec = ds.records[0].clone();
        rec.label = 1;
        one.records.push(rec.clone());
        let aug = one.augment_swap().unwrap();
        assert_eq!(aug.len(), 2);
        assert_eq!(aug.records[0].label, 1);
        assert_eq!(aug.records[1].label, 0);
        assert_eq!(aug.records[1].strength, rec.strength);
        let layout = ds.layout();
        assert_eq!(aug.records[1].x_pair, layout.swap(&rec.x_pair).unwrap());
    }

    #[test]
    fn augmented_classes_are_balanced() {
        let (ds, _) = generate(&small(7)).unwrap();
        let aug = ds.augment_swap().unwrap();
        assert_eq!(aug.len(), 2 * ds.len());
        let ones = aug.records.iter().filter(|r| r.label == 1).count();
        assert_eq!(2 * ones, aug.len());
    }

    #[test]
    fn redact_strips_true_delta() {
        let (ds, _) = generate(&small(1)).unwrap();
        let red = ds.redact();
        assert!(red.records.iter().all(|r| r.true_delta.is_none()));
        assert!(red.manifest.redacted);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let (ds, _) = generate(&small(2)).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn manifest_count_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let (mut ds, _) = generate(&small(2)).unwrap();
        ds.save(&path).unwrap();
        ds.manifest.count += 1;
        fs::write(manifest_path(&path), serde_json::to_string(&ds.manifest).unwrap()).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let (ds, _) = generate(&small(2)).unwrap();
        ds.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[4] = "{not json";
        fs::write(&path, lines.join("\n")).unwrap();
        match Dataset::load(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let (mut ds, _) = generate(&small(2)).unwrap();
        ds.records[0].x_pair.pop();
        ds.save(&path).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn ood_shift_moves_latents_away_from_support() {
        let world = SyntheticWorld::new(WorldConfig::default(), 3).unwrap();
        let mut prev = -1.0;
        for shift in [0.0, 1.0, 2.0, 4.0, 8.0] {
            let mut rng = ChaCha20Rng::seed_from_u64(17);
            let mean: f64 = (0..2000)
                .map(|_| world.items.distance_to_support(&world.items.sample(shift, &mut rng)))
                .sum::<f64>()
                / 2000.0;
            assert!(mean > prev, "shift {shift}: {mean} <= {prev}");
            prev = mean;
        }
    }

    #[test]
    fn prompt_pool_shape_and_ood_count() {
        let world = SyntheticWorld::new(WorldConfig::default(), 5).unwrap();
        let pool = world.prompt_pool(40, 6, 0.25, 4.0, 0.5, 9).unwrap();
        assert_eq!(pool.len(), 40);
        assert_eq!(pool.iter().filter(|p| p.ood).count(), 10);
        assert!(pool.iter().all(|p| p.context.len() == 8 && p.candidates.len() == 6));
        assert!(pool.iter().flat_map(|p| &p.candidates).all(|c| c.len() == 8));
        assert_eq!(world.prompt_pool(40, 6, 0.25, 4.0, 0.5, 9).unwrap(), pool);

        let dist = |ood: bool| {
            let d: Vec<f64> = pool
                .iter()
                .filter(|p| p.ood == ood)
                .map(|p| world.contexts.distance_to_support(&p.context))
                .collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        assert!(dist(true) > dist(false));
        assert!(world.prompt_pool(3, 1, 0.0, 0.0, 0.0, 0).is_err());
        assert!(world.prompt_pool(3, 2, 0.0, 0.0, 1.5, 0).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            GenConfig { n_prompts: 0, ..small(0) },
            GenConfig { responses_per_prompt: 1, ..small(0) },
            GenConfig { ood_fraction: 1.5, ..small(0) },
            GenConfig { ood_shift: -1.0, ..small(0) },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::InvalidInput(_))));
        }
    }
}
