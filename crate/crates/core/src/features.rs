//! Log-Mel filterbanks, speaker normalisation, SpecAugment, and the
//! synthetic utterance renderer used for desk-scale experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::ctc::Vocabulary;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, read_matrix, write_jsonl, write_matrix, FEATURES_MAGIC};
use crate::model::TargetVocabulary;
use crate::parallel::{self, derive_seed, Execution};

pub const FRAME_PERIOD_MS: f64 = 10.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const N_MELS: usize = 40;

/// `T x F` frame features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f32>,
    pub frame_period_ms: f64,
    pub speaker: Option<String>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f32>, speaker: Option<String>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::invalid("feature sequence has no frames"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(FeatureSequence {
            frames,
            frame_period_ms: FRAME_PERIOD_MS,
            speaker,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

/// 40 log-Mel energies every 10 ms from a 25 ms Hamming window.
///
/// A waveform shorter than one window yields a single zero-padded frame.
pub fn logmel(samples: &[f32], sample_rate: u32) -> Result<FeatureSequence> {
    if samples.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    if sample_rate < 8000 {
        return Err(Error::invalid(format!("sample rate {sample_rate} below 8 kHz")));
    }
    let win = (sample_rate as usize * 25) / 1000;
    let hop = (sample_rate as usize * 10) / 1000;
    let n_fft = win.next_power_of_two();
    let n_frames = if samples.len() < win {
        1
    } else {
        (samples.len() - win) / hop + 1
    };
    let window: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(N_MELS, n_fft, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut frames = Array2::zeros((n_frames, N_MELS));
    for t in 0..n_frames {
        buf.fill(Complex::new(0.0, 0.0));
        for (n, w) in window.iter().enumerate() {
            if let Some(&s) = samples.get(t * hop + n) {
                buf[n].re = s as f64 * w;
            }
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, filt) in bank.outer_iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            frames[[t, m]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    FeatureSequence::new(frames, None)
}

/// Per-coefficient mean and standard deviation of a speaker's frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frames: usize,
}

pub const STD_FLOOR: f64 = 1e-8;

impl SpeakerStats {
    pub fn from_frames<'a, I>(utterances: I) -> Result<Self>
    where
        I: IntoIterator<Item = ArrayView2<'a, f32>>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for u in utterances {
            if sum.is_empty() {
                sum = vec![0.0; u.ncols()];
                sq = vec![0.0; u.ncols()];
            } else if u.ncols() != sum.len() {
                return Err(Error::invalid("utterances differ in feature dimension"));
            }
            for row in u.outer_iter() {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += v as f64 * v as f64;
                }
            }
            n += u.nrows();
        }
        if n == 0 {
            return Err(Error::invalid("no frames for speaker statistics"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt())
            .collect();
        Ok(SpeakerStats { mean, std, frames: n })
    }
}

/// `(x - mean) / max(std, 1e-8)` per coefficient.
pub fn speaker_normalize(features: &FeatureSequence, stats: &SpeakerStats) -> Result<FeatureSequence> {
    if stats.mean.len() != features.dim() {
        return Err(Error::invalid(format!(
            "stats for {} coefficients, features have {}",
            stats.mean.len(),
            features.dim()
        )));
    }
    let mut frames = features.frames.clone();
    for mut row in frames.outer_iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[k]) / stats.std[k].max(STD_FLOOR)) as f32;
        }
    }
    Ok(FeatureSequence {
        frames,
        ..features.clone()
    })
}

/// Per-speaker statistics fitted on a training set. Utterances whose
/// speaker is unknown or absent are normalised with their own statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerNormalizer {
    pub speakers: BTreeMap<String, SpeakerStats>,
}

impl SpeakerNormalizer {
    pub fn fit(train: &[FeatureSequence]) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<ArrayView2<f32>>> = BTreeMap::new();
        for u in train {
            if let Some(s) = &u.speaker {
                groups.entry(s).or_default().push(u.frames.view());
            }
        }
        let speakers = groups
            .into_iter()
            .map(|(s, us)| Ok((s.to_string(), SpeakerStats::from_frames(us)?)))
            .collect::<Result<_>>()?;
        Ok(SpeakerNormalizer { speakers })
    }

    pub fn apply(&self, features: &FeatureSequence) -> Result<FeatureSequence> {
        match features.speaker.as_ref().and_then(|s| self.speakers.get(s)) {
            Some(stats) => speaker_normalize(features, stats),
            None => {
                let own = SpeakerStats::from_frames([features.frames.view()])?;
                speaker_normalize(features, &own)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    /// Largest time mask as a fraction of the utterance length.
    pub max_time_width_fraction: f64,
    pub mask_value: f32,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            n_freq_masks: 2,
            max_freq_width: 13,
            n_time_masks: 2,
            max_time_width_fraction: 0.05,
            mask_value: 0.0,
        }
    }
}

impl SpecAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_time_width_fraction) {
            return Err(Error::Config(format!(
                "time mask fraction {} outside [0, 1]",
                self.max_time_width_fraction
            )));
        }
        Ok(())
    }
}

/// Frequency and time band masking. Mask placement depends only on `rng`.
pub fn spec_augment<R: Rng + ?Sized>(frames: &Array2<f32>, cfg: &SpecAugmentConfig, rng: &mut R) -> Array2<f32> {
    let mut out = frames.clone();
    let (t, f) = frames.dim();
    for _ in 0..cfg.n_freq_masks {
        let w = rng.random_range(0..=cfg.max_freq_width.min(f));
        let start = rng.random_range(0..=f - w);
        out.slice_mut(ndarray::s![.., start..start + w]).fill(cfg.mask_value);
    }
    let max_t = (cfg.max_time_width_fraction * t as f64).floor() as usize;
    for _ in 0..cfg.n_time_masks {
        let w = rng.random_range(0..=max_t.min(t));
        let start = rng.random_range(0..=t - w);
        out.slice_mut(ndarray::s![start..start + w, ..]).fill(cfg.mask_value);
    }
    out
}

/// Generator of the synthetic speech-translation-like task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Source alphabet size (at most 26).
    pub n_symbols: usize,
    pub feature_dim: usize,
    /// Symbol duration range in encoder steps.
    pub dur_min: usize,
    pub dur_max: usize,
    /// Raw frames per encoder step (the frontend subsampling factor).
    pub frames_per_step: usize,
    pub noise: f64,
    /// Utterance length range in symbols.
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub max_word_len: usize,
    /// Mark phones with their position in the word (_B, _I, _E, _S).
    pub positional_suffixes: bool,
    pub reordering: Reordering,
    pub n_speakers: usize,
    /// Seeds the prototypes and the translation mapping.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_symbols: 12,
            feature_dim: 40,
            dur_min: 2,
            dur_max: 4,
            frames_per_step: 4,
            noise: 0.1,
            min_symbols: 3,
            max_symbols: 6,
            max_word_len: 3,
            positional_suffixes: false,
            reordering: Reordering::default(),
            n_speakers: 4,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_symbols < 2 || self.n_symbols > 26 {
            return fail("n_symbols must be in 2..=26");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return fail("need 1 <= dur_min <= dur_max");
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return fail("need 1 <= min_symbols <= max_symbols");
        }
        if self.feature_dim == 0 || self.frames_per_step == 0 || self.max_word_len == 0 {
            return fail("feature_dim, frames_per_step and max_word_len must be positive");
        }
        if !(self.noise >= 0.0) {
            return fail("noise must be non-negative");
        }
        Ok(())
    }
}

/// Local reordering applied by the synthetic translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reordering {
    /// Monotonic mapping.
    None,
    /// Swap positions 0-1, 2-3, and so on.
    PairSwap,
    /// A modifier symbol (the first third of the alphabet) trades places
    /// with the non-modifier that follows it, like adjective and noun.
    #[default]
    ModifierSwap,
}

/// Frozen prototypes and translation mapping of one synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: SynthConfig,
    /// `n_symbols x feature_dim` unit-Gaussian prototypes.
    pub prototypes: Array2<f64>,
    /// Target token index of each source symbol.
    pub mapping: Vec<usize>,
}

/// One rendered utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub features: Array2<f32>,
    pub symbols: Vec<usize>,
    pub phones: Vec<String>,
    pub translation: Vec<String>,
    /// Duration of every symbol in encoder steps.
    pub durations: Vec<usize>,
}

const SUFFIXES: [&str; 4] = ["B", "I", "E", "S"];

impl SyntheticTask {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prototypes =
            Array2::from_shape_simple_fn((config.n_symbols, config.feature_dim), || StandardNormal.sample(&mut rng));
        let mut mapping: Vec<usize> = (0..config.n_symbols).collect();
        rand::seq::SliceRandom::shuffle(mapping.as_mut_slice(), &mut rng);
        Ok(SyntheticTask {
            config,
            prototypes,
            mapping,
        })
    }

    pub fn symbol(&self, i: usize) -> String {
        ((b'a' + i as u8) as char).to_string()
    }

    fn target_token(&self, i: usize) -> String {
        ((b'A' + self.mapping[i] as u8) as char).to_string()
    }

    /// Phone labels with the suffix scheme of `config`.
    pub fn phone_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.config.n_symbols {
            if self.config.positional_suffixes {
                out.extend(SUFFIXES.iter().map(|s| format!("{}_{s}", self.symbol(i))));
            } else {
                out.push(self.symbol(i));
            }
        }
        out
    }

    pub fn ctc_vocab(&self) -> Vocabulary {
        Vocabulary::with_blank(self.phone_labels()).expect("distinct phone labels")
    }

    pub fn target_vocab(&self) -> TargetVocabulary {
        TargetVocabulary::new((0..self.config.n_symbols).map(|i| ((b'A' + i as u8) as char).to_string()))
            .expect("distinct target tokens")
    }

    /// Phones of a word sequence, e.g. word `pq` gives `[p_B, q_E]`.
    pub fn phones(&self, words: &[Vec<usize>]) -> Vec<String> {
        let mut out = Vec::new();
        for w in words {
            for (k, &s) in w.iter().enumerate() {
                let name = self.symbol(s);
                if !self.config.positional_suffixes {
                    out.push(name);
                    continue;
                }
                let suffix = match (k == 0, k + 1 == w.len()) {
                    (true, true) => "S",
                    (true, false) => "B",
                    (false, true) => "E",
                    (false, false) => "I",
                };
                out.push(format!("{name}_{suffix}"));
            }
        }
        out
    }

    pub fn is_modifier(&self, symbol: usize) -> bool {
        symbol < self.config.n_symbols / 3
    }

    /// Maps every symbol to its target token, then reorders locally.
    pub fn translate(&self, symbols: &[usize]) -> Vec<String> {
        let mut out: Vec<String> = symbols.iter().map(|&s| self.target_token(s)).collect();
        match self.config.reordering {
            Reordering::None => {}
            Reordering::PairSwap => {
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
            }
            Reordering::ModifierSwap => {
                let mut i = 0;
                while i + 1 < symbols.len() {
                    if self.is_modifier(symbols[i]) && !self.is_modifier(symbols[i + 1]) {
                        out.swap(i, i + 1);
                        i += 2;
                    } else {
                        i += 1;
                    }
                }
            }
        }
        out
    }

    pub fn sample_words<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let c = &self.config;
        let n = rng.random_range(c.min_symbols..=c.max_symbols);
        let mut words = Vec::new();
        let mut left = n;
        // no symbol follows itself: equal neighbours would render as one
        // unbroken run and could not be told apart from a single long symbol
        let mut prev = None;
        while left > 0 {
            let len = rng.random_range(1..=c.max_word_len.min(left));
            let mut word = Vec::with_capacity(len);
            for _ in 0..len {
                let mut s = rng.random_range(0..c.n_symbols - 1);
                if prev.is_some_and(|p| s >= p) {
                    s += 1;
                }
                word.push(s);
                prev = Some(s);
            }
            words.push(word);
            left -= len;
        }
        words
    }

    /// Renders each symbol as `d * frames_per_step` noisy prototype copies,
    /// `d` uniform in the duration range.
    pub fn render<R: Rng + ?Sized>(&self, words: &[Vec<usize>], rng: &mut R) -> Result<SyntheticUtterance> {
        let symbols: Vec<usize> = words.iter().flatten().copied().collect();
        if symbols.is_empty() {
            return Err(Error::invalid("empty utterance"));
        }
        if let Some(&s) = symbols.iter().find(|&&s| s >= self.config.n_symbols) {
            return Err(Error::invalid(format!("symbol {s} outside the alphabet")));
        }
        let c = &self.config;
        let durations: Vec<usize> = symbols.iter().map(|_| rng.random_range(c.dur_min..=c.dur_max)).collect();
        let total: usize = durations.iter().sum::<usize>() * c.frames_per_step;
        let noise = Normal::new(0.0, c.noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut features = Array2::zeros((total, c.feature_dim));
        let mut t = 0;
        for (&s, &d) in symbols.iter().zip(&durations) {
            for _ in 0..d * c.frames_per_step {
                for k in 0..c.feature_dim {
                    features[[t, k]] = (self.prototypes[[s, k]] + noise.sample(rng)) as f32;
                }
                t += 1;
            }
        }
        Ok(SyntheticUtterance {
            features,
            phones: self.phones(words),
            translation: self.translate(&symbols),
            symbols,
            durations,
        })
    }

    /// Index of the closest prototype for every frame.
    pub fn nearest_prototypes(&self, features: ArrayView2<f32>) -> Vec<usize> {
        features
            .outer_iter()
            .map(|row| {
                let dist = |s: usize| -> f64 {
                    row.iter()
                        .zip(self.prototypes.row(s))
                        .map(|(&a, &b)| (a as f64 - b).powi(2))
                        .sum()
                };
                (0..self.config.n_symbols)
                    .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                    .expect("non-empty alphabet")
            })
            .collect()
    }

    /// `n` utterances, utterance `i` rendered from `derive_seed(seed, i)`.
    pub fn generate(&self, prefix: &str, n: usize, seed: u64, exec: Execution) -> Result<Vec<Example>> {
        let items = parallel::map_range(exec, n, |i| -> Result<Example> {
            let utt_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
            let words = self.sample_words(&mut rng);
            let u = self.render(&words, &mut rng)?;
            let speaker = format!("spk{}", i % self.config.n_speakers.max(1));
            Ok(Example {
                id: format!("{prefix}-{i:05}"),
                features: FeatureSequence::new(u.features, Some(speaker))?,
                phones: u.phones,
                translation: u.translation,
                synthetic: Some(SyntheticSpec { words, seed: utt_seed }),
            })
        });
        items.into_iter().collect()
    }
}

/// Recipe that regenerates a synthetic utterance from its task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub words: Vec<Vec<usize>>,
    pub seed: u64,
}

/// A loaded utterance with its phone and translation targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureSequence,
    pub phones: Vec<String>,
    pub translation: Vec<String>,
    pub synthetic: Option<SyntheticSpec>,
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    /// FEAT file, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<String>,
    /// Inline recipe rendered with the directory's `task.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    pub phones: Vec<String>,
    pub translation: Vec<String>,
}

pub const TASK_FILE: &str = "task.json";

/// Writes `<dir>/<name>.jsonl` and one FEAT file per utterance under
/// `<dir>/<name>/`.
pub fn write_manifest(dir: &Path, name: &str, examples: &[Example]) -> Result<PathBuf> {
    let feat_dir = dir.join(name);
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::file(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(examples.len());
    for ex in examples {
        let rel = format!("{name}/{}.feat", ex.id);
        write_matrix(&dir.join(&rel), FEATURES_MAGIC, &ex.features.frames)?;
        entries.push(ManifestEntry {
            id: ex.id.clone(),
            speaker: ex.features.speaker.clone(),
            features_path: Some(rel),
            synthetic: ex.synthetic.clone(),
            phones: ex.phones.clone(),
            translation: ex.translation.clone(),
        });
    }
    let path = dir.join(format!("{name}.jsonl"));
    write_jsonl(&path, &entries)?;
    Ok(path)
}

pub fn write_task(dir: &Path, task: &SyntheticTask) -> Result<()> {
    let path = dir.join(TASK_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(task)?).map_err(|e| Error::file(&path, e))
}

pub fn read_task(path: &Path) -> Result<SyntheticTask> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads every manifest entry, reading FEAT files or rendering inline
/// recipes with the sibling `task.json`.
pub fn load_manifest(path: &Path) -> Result<Vec<Example>> {
    let entries: Vec<ManifestEntry> = read_jsonl(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut task: Option<Arc<SyntheticTask>> = None;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let frames = match (&e.features_path, &e.synthetic) {
            (Some(p), _) => read_matrix(&dir.join(p), FEATURES_MAGIC)?,
            (None, Some(spec)) => {
                if task.is_none() {
                    task = Some(Arc::new(read_task(&dir.join(TASK_FILE))?));
                }
                let t = task.as_ref().expect("task loaded");
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                // consume the word draw so durations and noise match generation
                t.sample_words(&mut rng);
                t.render(&spec.words, &mut rng)?.features
            }
            (None, None) => {
                return Err(Error::Format(format!("{}: no features_path or synthetic recipe", e.id)));
            }
        };
        out.push(Example {
            id: e.id,
            features: FeatureSequence::new(frames, e.speaker)?,
            phones: e.phones,
            translation: e.translation,
            synthetic: e.synthetic,
        });
    }
    Ok(out)
}

/// Speaker-normalises `sets` with statistics fitted on the first one.
pub fn normalize_datasets(sets: &mut [&mut Vec<Example>]) -> Result<SpeakerNormalizer> {
    let norm = {
        let train: Vec<FeatureSequence> = sets
            .first()
            .map(|s| s.iter().map(|e| e.features.clone()).collect())
            .unwrap_or_default();
        SpeakerNormalizer::fit(&train)?
    };
    for set in sets.iter_mut() {
        for ex in set.iter_mut() {
            ex.features = norm.apply(&ex.features)?;
        }
    }
    Ok(norm)
}
