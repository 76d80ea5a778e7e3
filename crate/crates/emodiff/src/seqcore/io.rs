//! Binary sequence and audio-feature files plus the line-oriented dataset
//! manifest.
//!
//! Sequence file layout (little-endian throughout): magic `EDBS`, u16
//! version, u16 column count, u32 frame count, u16 fps, u8 emotion index,
//! then the frame payload as row-major f32. Audio-feature files use magic
//! `EDAF` with the channel count in place of the column count. The manifest
//! is UTF-8 text: `#`-prefixed header lines followed by one tab-separated
//! entry per sequence.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::seqcore::names::{EmotionLabel, NUM_COEFFS};
use crate::seqcore::{AudioFeatureTrack, BlendshapeSequence, AUDIO_CHANNELS};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"EDBS";
pub const AUDIO_MAGIC: &[u8; 4] = b"EDAF";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

fn write_header(
    out: &mut impl Write,
    magic: &[u8; 4],
    cols: u16,
    rows: u32,
    fps: u16,
    emotion: u8,
) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&fps.to_le_bytes())?;
    out.write_all(&[emotion])?;
    Ok(())
}

struct Header {
    cols: usize,
    rows: usize,
    fps: u16,
    emotion: EmotionLabel,
}

fn read_header(data: &[u8], magic: &[u8; 4], what: &str) -> Result<(Header, usize)> {
    const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 2 + 1;
    if data.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{what} file truncated: {} bytes is shorter than the header",
            data.len()
        )));
    }
    if &data[0..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?} for {what} file, expected {:?}",
            &data[0..4],
            magic
        )));
    }
    let version = u16::from_le_bytes([data[4], data[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {what} format version {version}"
        )));
    }
    let cols = u16::from_le_bytes([data[6], data[7]]) as usize;
    let rows = u32::from_le_bytes([data[8], data[9], data[10], data[11]]) as usize;
    let fps = u16::from_le_bytes([data[12], data[13]]);
    let emotion = EmotionLabel::from_index(data[14] as usize)?;
    Ok((
        Header {
            cols,
            rows,
            fps,
            emotion,
        },
        HEADER_LEN,
    ))
}

fn read_payload(data: &[u8], offset: usize, rows: usize, cols: usize, what: &str) -> Result<Array2<f32>> {
    let expected = rows * cols * 4;
    let body = &data[offset..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "{what} payload is {} bytes, expected {expected} for {rows}x{cols}",
            body.len()
        )));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite value in {what} payload at element {}",
                values.len()
            )));
        }
        values.push(v);
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Shape(format!("{what} payload reshape: {e}")))
}

pub fn save_sequence(seq: &BlendshapeSequence, path: &Path) -> Result<()> {
    if seq.frames.ncols() != NUM_COEFFS {
        return Err(Error::Shape(format!(
            "sequence has {} columns, expected {NUM_COEFFS}",
            seq.frames.ncols()
        )));
    }
    if seq.frames.nrows() < 2 {
        return Err(Error::Validation(format!(
            "sequence must have at least 2 frames, got {}",
            seq.frames.nrows()
        )));
    }
    if seq.fps == 0 {
        return Err(Error::Validation("fps must be positive".into()));
    }
    if let Some(((r, c), _)) = seq.frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to save non-finite value at frame {r}, coefficient {c}"
        )));
    }
    let mut buf = Vec::with_capacity(15 + seq.frames.len() * 4);
    write_header(
        &mut buf,
        SEQUENCE_MAGIC,
        seq.frames.ncols() as u16,
        seq.frames.nrows() as u32,
        seq.fps,
        seq.emotion.index() as u8,
    )?;
    for &v in seq.frames.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<BlendshapeSequence> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (h, offset) = read_header(&data, SEQUENCE_MAGIC, "sequence")?;
    if h.cols != NUM_COEFFS {
        return Err(Error::Validation(format!(
            "sequence file has {} columns, expected {NUM_COEFFS}",
            h.cols
        )));
    }
    if h.rows < 2 {
        return Err(Error::Validation(format!(
            "sequence file has {} frames, minimum is 2",
            h.rows
        )));
    }
    if h.fps == 0 {
        return Err(Error::Validation("sequence file has fps 0".into()));
    }
    let frames = read_payload(&data, offset, h.rows, h.cols, "sequence")?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(BlendshapeSequence {
        frames,
        fps: h.fps,
        emotion: h.emotion,
        id,
    })
}

pub fn save_audio(track: &AudioFeatureTrack, path: &Path) -> Result<()> {
    if track.features.ncols() != AUDIO_CHANNELS {
        return Err(Error::Shape(format!(
            "audio track has {} channels, expected {AUDIO_CHANNELS}",
            track.features.ncols()
        )));
    }
    if let Some(((r, c), _)) = track.features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to save non-finite value at frame {r}, channel {c}"
        )));
    }
    let mut buf = Vec::with_capacity(15 + track.features.len() * 4);
    write_header(
        &mut buf,
        AUDIO_MAGIC,
        track.features.ncols() as u16,
        track.features.nrows() as u32,
        track.fps,
        track.emotion.index() as u8,
    )?;
    for &v in track.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_audio(path: &Path) -> Result<AudioFeatureTrack> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (h, offset) = read_header(&data, AUDIO_MAGIC, "audio")?;
    if h.cols != AUDIO_CHANNELS {
        return Err(Error::Validation(format!(
            "audio file has {} channels, expected {AUDIO_CHANNELS}",
            h.cols
        )));
    }
    let features = read_payload(&data, offset, h.rows, h.cols, "audio")?;
    Ok(AudioFeatureTrack {
        features,
        fps: h.fps,
        emotion: h.emotion,
    })
}

/// Which portion of the dataset an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seq_path: PathBuf,
    pub audio_path: PathBuf,
    pub emotion: EmotionLabel,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub mouth_map_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    fn validate(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = self
            .entries
            .iter()
            .flat_map(|e| [&e.seq_path, &e.audio_path])
            .collect();
        let n = paths.len();
        paths.sort_unstable();
        paths.dedup();
        if paths.len() != n {
            return Err(Error::Validation("manifest contains duplicate paths".into()));
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            if self.split_entries(split).next().is_none() {
                return Err(Error::Validation(format!("split {split} is empty")));
            }
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut text = String::new();
    text.push_str(&format!("#version {}\n", manifest.version));
    text.push_str(&format!("#seed {}\n", manifest.seed));
    text.push_str(&format!("#mouthmap {}\n", manifest.mouth_map_version));
    for e in &manifest.entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.seq_path.display(),
            e.audio_path.display(),
            e.emotion.index(),
            e.split
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let mut version = None;
    let mut seed = None;
    let mut mouth_map_version = 1;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("version"), Some(v)) => {
                    version = Some(v.parse::<u32>().map_err(|_| {
                        Error::Format(format!("bad manifest version on line {}", ln + 1))
                    })?)
                }
                (Some("seed"), Some(v)) => {
                    seed = Some(v.parse::<u64>().map_err(|_| {
                        Error::Format(format!("bad manifest seed on line {}", ln + 1))
                    })?)
                }
                (Some("mouthmap"), Some(v)) => {
                    mouth_map_version = v.parse::<u32>().map_err(|_| {
                        Error::Format(format!("bad mouth-map version on line {}", ln + 1))
                    })?
                }
                _ => {}
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {} has {} columns, expected 4",
                ln + 1,
                cols.len()
            )));
        }
        let emotion = cols[2]
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("bad emotion index on line {}", ln + 1)))
            .and_then(EmotionLabel::from_index)?;
        entries.push(ManifestEntry {
            seq_path: PathBuf::from(cols[0]),
            audio_path: PathBuf::from(cols[1]),
            emotion,
            split: Split::from_name(cols[3])?,
        });
    }
    let version = version.ok_or_else(|| Error::Format("manifest missing #version".into()))?;
    if version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {version}"
        )));
    }
    let seed = seed.ok_or_else(|| Error::Format("manifest missing #seed".into()))?;
    let manifest = DatasetManifest {
        version,
        seed,
        mouth_map_version,
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// One fully loaded manifest entry.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub seq: BlendshapeSequence,
    pub audio: AudioFeatureTrack,
    pub emotion: EmotionLabel,
    pub split: Split,
}

/// Load every entry of a manifest, resolving relative paths against the
/// manifest's directory and checking sequence/audio agreement.
pub fn load_pairs(manifest_path: &Path) -> Result<(DatasetManifest, Vec<DatasetPair>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let seq = load_sequence(&base.join(&e.seq_path))?;
        let audio = load_audio(&base.join(&e.audio_path))?;
        if seq.len() != audio.len() {
            return Err(Error::Validation(format!(
                "{}: sequence has {} frames but audio has {}",
                e.seq_path.display(),
                seq.len(),
                audio.len()
            )));
        }
        if seq.emotion != e.emotion {
            return Err(Error::Validation(format!(
                "{}: file emotion {} disagrees with manifest {}",
                e.seq_path.display(),
                seq.emotion,
                e.emotion
            )));
        }
        pairs.push(DatasetPair {
            seq,
            audio,
            emotion: e.emotion,
            split: e.split,
        });
    }
    Ok((manifest, pairs))
}
