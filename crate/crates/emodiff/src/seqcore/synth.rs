//! Deterministic synthetic dataset generator.
//!
//! Each sequence pairs an audio-feature track with blendshape frames built
//! from it: the 8 articulation channels are fixed-frequency sinusoids with
//! per-sequence random amplitudes, the mouth-region coefficients are a frozen
//! smooth nonlinear function of those channels, and the upper-face
//! coefficients follow per-emotion envelope templates with random phase and
//! amplitude jitter. The 8 emotion channels of the audio track carry a
//! per-category signature plus Gaussian noise. Every random draw derives from
//! `(seed, sequence index)`, so generation is reproducible and parallelizable
//! per sequence.

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::normal_sample;
use crate::seqcore::io::{
    save_audio, save_manifest, save_sequence, DatasetManifest, ManifestEntry, Split,
    MANIFEST_VERSION,
};
use crate::seqcore::names::{coeff_index, EmotionLabel, FacePartition, NUM_EMOTIONS};
use crate::seqcore::{
    merge_regions, AudioFeatureTrack, BlendshapeSequence, ARTICULATION_CHANNELS, DEFAULT_FPS,
};

pub const MOUTH_MAP_VERSION: u32 = 1;
pub const DEFAULT_LENGTH: usize = 100;

/// Fixed oscillation frequency (Hz) for each articulation channel.
const ARTICULATION_FREQS: [f64; ARTICULATION_CHANNELS] =
    [0.7, 1.1, 1.6, 2.3, 2.9, 3.7, 4.3, 5.3];

const ARTICULATION_AMP_RANGE: (f64, f64) = (0.2, 0.45);
const TEMPLATE_JITTER: f64 = 0.1;
const UPPER_NOISE_STD: f64 = 0.01;
const EMOTION_NOISE_STD: f64 = 0.1;

const MOUTH_MAP_SEED: u64 = 0x6d6f_7574_685f_7631; // "mouth_v1"

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n: usize,
    pub seed: u64,
    pub length: usize,
    pub fps: u16,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 90,
            seed: 0,
            length: DEFAULT_LENGTH,
            fps: DEFAULT_FPS,
        }
    }
}

/// Seed for one sequence's private random stream.
pub fn sequence_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct MouthMap {
    weights: Vec<[f64; ARTICULATION_CHANNELS]>,
    biases: Vec<f64>,
}

fn mouth_map_table() -> &'static MouthMap {
    static TABLE: OnceLock<MouthMap> = OnceLock::new();
    TABLE.get_or_init(|| {
        let part = FacePartition::standard();
        let mut rng = ChaCha12Rng::seed_from_u64(MOUTH_MAP_SEED);
        let mut weights = Vec::with_capacity(part.mouth_idx.len());
        let mut biases = Vec::with_capacity(part.mouth_idx.len());
        for _ in 0..part.mouth_idx.len() {
            let mut w = [0.0; ARTICULATION_CHANNELS];
            for wi in &mut w {
                *wi = rng.random_range(-1.5..1.5);
            }
            weights.push(w);
            biases.push(rng.random_range(-0.5..0.5));
        }
        MouthMap { weights, biases }
    })
}

/// Version-1 articulation→mouth map: a frozen random linear mix squashed
/// through a logistic, one output per mouth-region coefficient in partition
/// order. Pure in its inputs, so regenerating from stored audio reproduces
/// the stored mouth columns exactly.
pub fn mouth_map(articulation: &[f64; ARTICULATION_CHANNELS]) -> Vec<f64> {
    let table = mouth_map_table();
    table
        .weights
        .iter()
        .zip(&table.biases)
        .map(|(w, b)| {
            let z: f64 = w
                .iter()
                .zip(articulation)
                .map(|(wi, a)| wi * (a - 0.5) * 2.0)
                .sum::<f64>()
                + b;
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Per-emotion target pattern over the 8 emotion channels, values in
/// {0.25, 0.75}. Rows of an 8×8 Hadamard matrix cover the first eight
/// categories; the ninth uses the all-low pattern.
pub fn emotion_signature(e: EmotionLabel) -> [f64; 8] {
    let mut sig = [0.0; 8];
    let r = e.index();
    for (c, s) in sig.iter_mut().enumerate() {
        let h = if r == 8 {
            -1.0
        } else if (r & c).count_ones().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
        *s = 0.5 + 0.25 * h;
    }
    sig
}

/// Upper-face activation template for one emotion: coefficient names with
/// base envelope amplitudes.
pub fn upper_template(e: EmotionLabel) -> &'static [(&'static str, f64)] {
    match e {
        EmotionLabel::Neutral => &[("eyeBlinkLeft", 0.15), ("eyeBlinkRight", 0.15)],
        EmotionLabel::Angry => &[
            ("browDownLeft", 0.7),
            ("browDownRight", 0.7),
            ("eyeSquintLeft", 0.4),
            ("eyeSquintRight", 0.4),
        ],
        EmotionLabel::Doubtful => &[
            ("browOuterUpLeft", 0.55),
            ("browDownRight", 0.35),
            ("eyeSquintRight", 0.25),
        ],
        EmotionLabel::Surprised => &[
            ("browInnerUp", 0.7),
            ("browOuterUpLeft", 0.65),
            ("browOuterUpRight", 0.65),
            ("eyeWideLeft", 0.6),
            ("eyeWideRight", 0.6),
        ],
        EmotionLabel::Happy => &[
            ("browOuterUpLeft", 0.6),
            ("browOuterUpRight", 0.6),
            ("eyeSquintLeft", 0.35),
            ("eyeSquintRight", 0.35),
        ],
        EmotionLabel::Sad => &[
            ("browInnerUp", 0.65),
            ("browDownLeft", 0.2),
            ("browDownRight", 0.2),
            ("eyeLookDownLeft", 0.4),
            ("eyeLookDownRight", 0.4),
        ],
        EmotionLabel::Scared => &[
            ("browInnerUp", 0.8),
            ("eyeWideLeft", 0.7),
            ("eyeWideRight", 0.7),
            ("eyeLookUpLeft", 0.3),
            ("eyeLookUpRight", 0.3),
        ],
        EmotionLabel::Serious => &[
            ("browDownLeft", 0.45),
            ("browDownRight", 0.45),
            ("eyeSquintLeft", 0.2),
            ("eyeSquintRight", 0.2),
            ("eyeLookInLeft", 0.25),
            ("eyeLookInRight", 0.25),
        ],
        EmotionLabel::Proud => &[
            ("eyeLookUpLeft", 0.5),
            ("eyeLookUpRight", 0.5),
            ("browOuterUpLeft", 0.35),
            ("browOuterUpRight", 0.35),
            ("eyeBlinkLeft", 0.25),
            ("eyeBlinkRight", 0.25),
        ],
    }
}

/// Envelope frequency (Hz) for one emotion's upper-face motion.
fn envelope_freq(e: EmotionLabel) -> f64 {
    0.5 + 0.15 * e.index() as f64
}

/// Build one sequence/audio pair. Pure in `(seed, index, length, fps)`.
pub fn generate_pair(
    seed: u64,
    index: u64,
    length: usize,
    fps: u16,
) -> (BlendshapeSequence, AudioFeatureTrack) {
    let part = FacePartition::standard();
    let emotion = EmotionLabel::from_index((index as usize) % NUM_EMOTIONS).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(sequence_seed(seed, index));

    // Draw order is fixed: articulation amplitudes, envelope phase, template
    // jitter, upper noise, emotion-channel noise.
    let mut amps = [0.0; ARTICULATION_CHANNELS];
    for a in &mut amps {
        *a = rng.random_range(ARTICULATION_AMP_RANGE.0..ARTICULATION_AMP_RANGE.1);
    }
    let phase = rng.random_range(0.0..TAU);
    let template = upper_template(emotion);
    let jitter: Vec<f64> = template
        .iter()
        .map(|_| rng.random_range(-TEMPLATE_JITTER..TEMPLATE_JITTER))
        .collect();
    let upper_noise = Array2::from_shape_fn((length, part.upper_idx.len()), |_| {
        normal_sample(&mut rng) * UPPER_NOISE_STD
    });
    let emo_noise = Array2::from_shape_fn((length, 8), |_| {
        normal_sample(&mut rng) * EMOTION_NOISE_STD
    });

    let fps_f = fps as f64;
    let articulation = Array2::from_shape_fn((length, ARTICULATION_CHANNELS), |(t, k)| {
        (0.5 + amps[k] * (TAU * ARTICULATION_FREQS[k] * t as f64 / fps_f).sin()) as f32
    });

    let signature = emotion_signature(emotion);
    let mut features = Array2::zeros((length, 16));
    for t in 0..length {
        for k in 0..ARTICULATION_CHANNELS {
            features[(t, k)] = articulation[(t, k)];
        }
        for j in 0..8 {
            features[(t, 8 + j)] = (signature[j] + emo_noise[(t, j)]) as f32;
        }
    }

    let mut mouth = Array2::zeros((length, part.mouth_idx.len()));
    for t in 0..length {
        let mut row = [0.0f64; ARTICULATION_CHANNELS];
        for (k, r) in row.iter_mut().enumerate() {
            *r = articulation[(t, k)] as f64;
        }
        for (c, v) in mouth_map(&row).into_iter().enumerate() {
            mouth[(t, c)] = v.clamp(0.0, 1.0) as f32;
        }
    }

    let freq = envelope_freq(emotion);
    let mut base = vec![0.0f64; part.upper_idx.len()];
    let mut upper = Array2::zeros((length, part.upper_idx.len()));
    for t in 0..length {
        base.iter_mut().for_each(|b| *b = 0.0);
        let env = 0.5 + 0.5 * (TAU * freq * t as f64 / fps_f + phase).sin();
        for ((name, amp), j) in template.iter().zip(&jitter) {
            let global = coeff_index(name).expect("template names are in the table");
            let local = part
                .upper_idx
                .iter()
                .position(|&g| g == global)
                .expect("template names are upper-face coefficients");
            base[local] = (amp + j) * env;
        }
        for (c, b) in base.iter().enumerate() {
            upper[(t, c)] = (b + upper_noise[(t, c)]).clamp(0.0, 1.0) as f32;
        }
    }

    let frames = merge_regions(&upper, &mouth, &part).expect("generated regions are consistent");
    let seq = BlendshapeSequence {
        frames,
        fps,
        emotion,
        id: format!("seq{index:05}"),
    };
    let audio = AudioFeatureTrack {
        features,
        fps,
        emotion,
    };
    (seq, audio)
}

/// Assign splits roughly 80/10/10 by index pattern, then guarantee every
/// split is populated.
fn assign_splits(n: usize) -> Vec<Split> {
    let mut splits: Vec<Split> = (0..n)
        .map(|i| match i % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        })
        .collect();
    for needed in [Split::Test, Split::Val] {
        if !splits.contains(&needed) {
            if let Some(i) = splits.iter().rposition(|&s| s == Split::Train) {
                splits[i] = needed;
            }
        }
    }
    splits
}

/// Generate `n` sequence/audio pairs into `dir` and write `manifest.tsv`.
/// Returns the manifest. Bit-identical output for identical configs.
pub fn generate_synthetic_dataset(dir: &Path, cfg: &GenConfig) -> Result<DatasetManifest> {
    if cfg.n < NUM_EMOTIONS {
        return Err(Error::Config(format!(
            "need at least {NUM_EMOTIONS} sequences (one per emotion), got {}",
            cfg.n
        )));
    }
    if cfg.length < 2 {
        return Err(Error::Config(format!(
            "sequence length must be at least 2, got {}",
            cfg.length
        )));
    }
    if cfg.fps == 0 {
        return Err(Error::Config("fps must be positive".into()));
    }
    std::fs::create_dir_all(dir)?;

    let pairs: Vec<(BlendshapeSequence, AudioFeatureTrack)> = (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| generate_pair(cfg.seed, i, cfg.length, cfg.fps))
        .collect();

    let splits = assign_splits(cfg.n);
    let mut entries = Vec::with_capacity(cfg.n);
    for (i, (seq, audio)) in pairs.iter().enumerate() {
        let seq_name = format!("seq{i:05}.edbs");
        let audio_name = format!("seq{i:05}.edaf");
        save_sequence(seq, &dir.join(&seq_name))?;
        save_audio(audio, &dir.join(&audio_name))?;
        entries.push(ManifestEntry {
            seq_path: seq_name.into(),
            audio_path: audio_name.into(),
            emotion: seq.emotion,
            split: splits[i],
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        mouth_map_version: MOUTH_MAP_VERSION,
        entries,
    };
    save_manifest(&manifest, &dir.join("manifest.tsv"))?;
    Ok(manifest)
}
