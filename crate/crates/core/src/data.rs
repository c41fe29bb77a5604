//! Dataset plumbing: DCASE-style metadata, PCM WAV decoding, feature
//! caching, and a deterministic synthetic corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::dsp::{self, AudioClip, FeatureMatrix, Frontend, FrontendConfig, PIPELINE_SAMPLE_RATE};
use crate::exec::Exec;
use crate::{Error, Result};

/// The ten scene classes, in class-index order.
pub const SCENE_CLASSES: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

/// Three real and six simulated recording devices.
pub const TAU_DEVICES: [&str; 9] = ["a", "b", "c", "s1", "s2", "s3", "s4", "s5", "s6"];
/// Devices of the synthetic corpus.
pub const SYNTH_DEVICES: [&str; 3] = ["d0", "d1", "d2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" | "evaluate" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    /// Path as written in the metadata, relative to the audio root.
    pub path: String,
    pub scene_label: String,
    pub city: String,
    pub device_id: String,
    pub split: Split,
}

impl DatasetEntry {
    pub fn label_index(&self) -> Option<usize> {
        SCENE_CLASSES.iter().position(|c| *c == self.scene_label)
    }

    /// File name without directories or extension.
    pub fn stem(&self) -> &str {
        let name = self.path.rsplit('/').next().unwrap_or(&self.path);
        name.strip_suffix(".wav").unwrap_or(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

fn known_device(d: &str) -> bool {
    TAU_DEVICES.contains(&d) || SYNTH_DEVICES.contains(&d)
}

/// Splits `scene-city-location-segment-device.wav` into (city, device).
fn parse_filename(path: &str) -> std::result::Result<(String, String), String> {
    let name = path.rsplit('/').next().unwrap_or(path);
    let stem = name
        .strip_suffix(".wav")
        .ok_or_else(|| format!("{name:?} is not a .wav file name"))?;
    let parts: Vec<&str> = stem.split('-').collect();
    if parts.len() < 5 {
        return Err(format!(
            "{name:?} does not follow scene-city-location-segment-device"
        ));
    }
    let device = parts[parts.len() - 1];
    if !known_device(device) {
        return Err(format!("unknown device {device:?} in {name:?}"));
    }
    Ok((parts[1].to_string(), device.to_string()))
}

/// Line-based files are written with a newline after every row; a last row
/// without one is taken as a sign of truncation.
fn check_terminated(text: &str) -> Result<()> {
    if text.is_empty() || text.ends_with('\n') {
        return Ok(());
    }
    Err(Error::Parse {
        line: text.lines().count(),
        msg: "row is not newline-terminated (truncated file?)".into(),
    })
}

/// Parses tab-separated `filename<TAB>scene_label[<TAB>split]` rows. A
/// leading `filename` header is skipped; rows without a split column get
/// `default_split`.
pub fn parse_metadata(text: &str, default_split: Split) -> Result<DatasetIndex> {
    check_terminated(text)?;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() || (entries.is_empty() && line.starts_with("filename")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if !(2..=3).contains(&fields.len()) {
            return Err(err(format!(
                "expected 2 or 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let (path, label) = (fields[0].trim(), fields[1].trim());
        if !SCENE_CLASSES.contains(&label) {
            return Err(err(format!("unknown scene label {label:?}")));
        }
        let (city, device_id) = parse_filename(path).map_err(err)?;
        let split = match fields.get(2) {
            Some(s) => s.trim().parse().map_err(|e: Error| err(e.to_string()))?,
            None => default_split,
        };
        entries.push(DatasetEntry {
            path: path.to_string(),
            scene_label: label.to_string(),
            city,
            device_id,
            split,
        });
    }
    DatasetIndex::new(entries)
}

impl DatasetIndex {
    pub fn new(entries: Vec<DatasetEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Input(format!("duplicate path {}", e.path)));
            }
            if e.label_index().is_none() {
                return Err(Error::Input(format!(
                    "unknown scene label {}",
                    e.scene_label
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<String> {
        SCENE_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    /// Distinct device ids in order of first appearance.
    pub fn devices(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.device_id) {
                out.push(e.device_id.clone());
            }
        }
        out
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("filename\tscene_label\tsplit\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.path, e.scene_label, e.split));
        }
        out
    }

    pub fn load(path: &Path, default_split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_metadata(&text, default_split).map_err(|e| e.in_file(path))
    }

    /// Reassigns splits: within every (class, device) group, a seeded
    /// shuffle puts `round(val_fraction * n)` entries in validation and the
    /// rest in training.
    pub fn stratified_split(&mut self, val_fraction: f64, seed: u64) {
        let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            groups
                .entry((e.scene_label.clone(), e.device_id.clone()))
                .or_default()
                .push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for idx in groups.values_mut() {
            idx.shuffle(&mut rng);
            let n_val = (val_fraction * idx.len() as f64).round() as usize;
            for (j, &i) in idx.iter().enumerate() {
                self.entries[i].split = if j < n_val { Split::Val } else { Split::Train };
            }
        }
    }
}

fn wav_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::format(offset, msg)
}

/// Decodes mono 16- or 24-bit integer PCM, scaling by `2^(bits-1)`.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err(0, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                wav_err(
                    pos,
                    format!(
                        "chunk {:?} runs past end of file",
                        String::from_utf8_lossy(id)
                    ),
                )
            })?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err(pos, "fmt chunk too short"));
                }
                let b = &bytes[body..end];
                let mut format = u16::from_le_bytes([b[0], b[1]]);
                let channels = u16::from_le_bytes([b[2], b[3]]);
                let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                let bits = u16::from_le_bytes([b[14], b[15]]);
                if format == 0xFFFE && size >= 26 {
                    // WAVE_FORMAT_EXTENSIBLE: first two bytes of the subformat GUID
                    format = u16::from_le_bytes([b[24], b[25]]);
                }
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body..end]),
            _ => {}
        }
        pos = end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| wav_err(12, "missing fmt chunk"))?;
    if format != 1 {
        return Err(wav_err(
            20,
            format!("unsupported format code {format}, need integer PCM"),
        ));
    }
    if channels != 1 {
        return Err(wav_err(22, format!("{channels} channels, need mono")));
    }
    if bits != 16 && bits != 24 {
        return Err(wav_err(34, format!("{bits}-bit samples, need 16 or 24")));
    }
    if rate != PIPELINE_SAMPLE_RATE {
        return Err(Error::SampleRate {
            found: rate,
            expected: PIPELINE_SAMPLE_RATE,
        });
    }
    let data = data.ok_or_else(|| wav_err(12, "missing data chunk"))?;
    let width = bits as usize / 8;
    let scale = (1u32 << (bits - 1)) as f64;
    let samples = data
        .chunks_exact(width)
        .map(|c| {
            let v = if width == 2 {
                i16::from_le_bytes([c[0], c[1]]) as i32
            } else {
                // sign-extend 3-byte little-endian
                i32::from_le_bytes([0, c[0], c[1], c[2]]) >> 8
            };
            v as f64 / scale
        })
        .collect();
    Ok(AudioClip::new(samples, rate))
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| e.in_file(path))
}

/// Encodes mono integer PCM, clamping to the representable range.
pub fn encode_wav(samples: &[f64], sample_rate: u32, bits: u16) -> Result<Vec<u8>> {
    if bits != 16 && bits != 24 {
        return Err(Error::Config(format!("cannot write {bits}-bit PCM")));
    }
    let width = bits as usize / 8;
    let data_len = samples.len() * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * width as u32).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    let scale = (1i64 << (bits - 1)) as f64;
    let (lo, hi) = (-(scale as i64), scale as i64 - 1);
    for &s in samples {
        let v = ((s * scale).round() as i64).clamp(lo, hi) as i32;
        out.extend_from_slice(&v.to_le_bytes()[..width]);
    }
    Ok(out)
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32, bits: u16) -> Result<()> {
    dsp::write_atomic(path, &encode_wav(samples, sample_rate, bits)?)
}

/// One-pole low-pass coefficient per synthetic device.
const DEVICE_TILT: [f64; 3] = [0.0, 0.5, 0.8];

/// Tone frequencies of synthetic class `k`.
pub fn synth_class_tones(k: usize) -> (f64, f64) {
    let f = 200.0 * (k + 1) as f64;
    (f, 1.5 * f)
}

/// Generates one synthetic clip: two class tones with random phases and a
/// per-clip amplitude, Gaussian noise 20 dB below the tone power, then the
/// device's low-pass tilt.
pub fn synth_clip(class: usize, device: usize, n_samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f1, f2) = synth_class_tones(class);
    let amp = rng.random_range(0.2..0.4);
    let (p1, p2) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    // each tone has power amp^2 / 2
    let noise = Normal::new(0.0, 0.1 * amp).expect("positive std");
    let sr = PIPELINE_SAMPLE_RATE as f64;
    let c = DEVICE_TILT[device % DEVICE_TILT.len()];
    let mut prev = 0.0;
    (0..n_samples)
        .map(|n| {
            let t = n as f64 / sr;
            let x = amp * ((2.0 * PI * f1 * t + p1).sin() + (2.0 * PI * f2 * t + p2).sin())
                + noise.sample(&mut rng);
            prev = (1.0 - c) * x + c * prev;
            prev
        })
        .collect()
}

/// Writes a synthetic 10-class corpus into `out_dir/audio` and its
/// metadata to `out_dir/meta.tsv`. Clip `i` of each class is recorded on
/// device `d(i mod 3)`; splits are stratified 80/20 by (class, device).
pub fn synth_dataset(
    out_dir: &Path,
    seed: u64,
    clips_per_class: usize,
    duration_s: f64,
    exec: Exec,
) -> Result<DatasetIndex> {
    if !(duration_s > 0.0) || clips_per_class == 0 {
        return Err(Error::Config(
            "clips per class and duration must be positive".into(),
        ));
    }
    let audio = out_dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let n_samples = (duration_s * PIPELINE_SAMPLE_RATE as f64).round() as usize;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<(usize, usize, u64)> = (0..SCENE_CLASSES.len())
        .flat_map(|k| (0..clips_per_class).map(move |i| (k, i)))
        .map(|(k, i)| (k, i, master.random::<u64>()))
        .collect();
    let entries: Vec<DatasetEntry> = jobs
        .iter()
        .map(|&(k, i, _)| {
            let device = SYNTH_DEVICES[i % SYNTH_DEVICES.len()];
            DatasetEntry {
                path: format!("audio/{}-synth-{i}-0-{device}.wav", SCENE_CLASSES[k]),
                scene_label: SCENE_CLASSES[k].to_string(),
                city: "synth".into(),
                device_id: device.into(),
                split: Split::Train,
            }
        })
        .collect();
    let results = exec.map(jobs.len(), |j| {
        let (k, i, clip_seed) = jobs[j];
        let samples = synth_clip(k, i % SYNTH_DEVICES.len(), n_samples, clip_seed);
        write_wav(
            &out_dir.join(&entries[j].path),
            &samples,
            PIPELINE_SAMPLE_RATE,
            24,
        )
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let mut index = DatasetIndex::new(entries)?;
    index.stratified_split(0.2, seed);
    let meta = out_dir.join("meta.tsv");
    dsp::write_atomic(&meta, index.to_tsv().as_bytes())?;
    Ok(index)
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const INDEX_FILE: &str = "index.tsv";
pub const FRONTEND_FILE: &str = "frontend.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub cache_file: String,
    pub hash: String,
}

/// Feature cache directory: one `.gtf` file per clip plus a manifest of
/// `path<TAB>cache_file<TAB>hash` lines.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    pub dir: PathBuf,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub total: usize,
    pub hits: usize,
    pub recomputed: usize,
    /// (clip path, error message)
    pub failures: Vec<(String, String)>,
}

/// Hash of the front-end configuration and the raw audio bytes.
pub fn content_hash(cfg: &FrontendConfig, audio: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(cfg.fingerprint().as_bytes());
    h.update([0u8]);
    h.update(audio);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    check_terminated(text)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim_end().split('\t').collect();
            match f[..] {
                [path, cache_file, hash] => Ok(ManifestEntry {
                    path: path.into(),
                    cache_file: cache_file.into(),
                    hash: hash.into(),
                }),
                _ => Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 3 tab-separated fields, found {}", f.len()),
                }),
            }
        })
        .collect()
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest = match fs::read_to_string(&path) {
            Ok(text) => parse_manifest(&text).map_err(|e| e.in_file(&path))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn lookup(&self, path: &str) -> Option<&ManifestEntry> {
        self.manifest.iter().find(|m| m.path == path)
    }

    pub fn load(&self, path: &str) -> Result<FeatureMatrix> {
        let m = self
            .lookup(path)
            .ok_or_else(|| Error::Input(format!("{path} is not in the feature cache")))?;
        dsp::read_feature_file(&self.dir.join(&m.cache_file))
    }

    /// Front-end configuration the cached features were computed with.
    pub fn frontend(&self) -> Result<FrontendConfig> {
        let path = self.dir.join(FRONTEND_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        FrontendConfig::from_fingerprint(&text).map_err(|e| e.in_file(path))
    }

    /// Index stored alongside the cache by [`cache_features`].
    pub fn index(&self) -> Result<DatasetIndex> {
        DatasetIndex::load(&self.dir.join(INDEX_FILE), Split::Train)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = String::new();
        for m in &self.manifest {
            text.push_str(&format!("{}\t{}\t{}\n", m.path, m.cache_file, m.hash));
        }
        dsp::write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

enum Outcome {
    Hit(ManifestEntry),
    Computed(ManifestEntry),
    Failed(String),
}

/// Extracts and caches features for every entry, skipping clips whose
/// (config, audio) hash already matches the manifest. Per-clip failures are
/// collected in the report rather than aborting the run.
pub fn cache_features(
    index: &DatasetIndex,
    audio_root: &Path,
    cache_dir: &Path,
    cfg: &FrontendConfig,
    exec: Exec,
) -> Result<CacheReport> {
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut cache = FeatureCache::open(cache_dir)?;
    let frontend = Frontend::new(cfg.clone())?;
    let previous: HashMap<&str, &ManifestEntry> = cache
        .manifest
        .iter()
        .map(|m| (m.path.as_str(), m))
        .collect();

    let outcomes = exec.map(index.len(), |i| {
        let entry = &index.entries[i];
        let wav_path = audio_root.join(&entry.path);
        let bytes = match fs::read(&wav_path) {
            Ok(b) => b,
            Err(e) => return Outcome::Failed(Error::io(&wav_path, e).to_string()),
        };
        let hash = content_hash(cfg, &bytes);
        let cache_file = format!("{}.gtf", entry.stem());
        if let Some(prev) = previous.get(entry.path.as_str()) {
            if prev.hash == hash && cache_dir.join(&prev.cache_file).is_file() {
                return Outcome::Hit((*prev).clone());
            }
        }
        let result = decode_wav(&bytes)
            .and_then(|clip| frontend.gammatonegram(&clip))
            .and_then(|m| dsp::write_feature_file(&cache_dir.join(&cache_file), &m));
        match result {
            Ok(()) => Outcome::Computed(ManifestEntry {
                path: entry.path.clone(),
                cache_file,
                hash,
            }),
            Err(e) => Outcome::Failed(e.in_file(&wav_path).to_string()),
        }
    });

    let mut report = CacheReport {
        total: index.len(),
        ..CacheReport::default()
    };
    let mut manifest = Vec::with_capacity(index.len());
    for (entry, outcome) in index.entries.iter().zip(outcomes) {
        match outcome {
            Outcome::Hit(m) => {
                report.hits += 1;
                manifest.push(m);
            }
            Outcome::Computed(m) => {
                report.recomputed += 1;
                manifest.push(m);
            }
            Outcome::Failed(msg) => report.failures.push((entry.path.clone(), msg)),
        }
    }
    cache.manifest = manifest;
    cache.write_manifest()?;
    dsp::write_atomic(&cache_dir.join(INDEX_FILE), index.to_tsv().as_bytes())?;
    dsp::write_atomic(&cache_dir.join(FRONTEND_FILE), cfg.fingerprint().as_bytes())?;
    Ok(report)
}

/// DCASE submission-style `filename,scene_label` CSV.
pub fn predictions_csv(rows: &[(String, String)]) -> String {
    let mut out = String::from("filename,scene_label\n");
    for (f, l) in rows {
        out.push_str(&format!("{f},{l}\n"));
    }
    out
}
