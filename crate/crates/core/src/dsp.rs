//! Gammatone time-frequency front-end.
//!
//! Audio is cut into 40 ms Hann-windowed frames with 50 % overlap, turned
//! into a one-sided power spectrum, and projected onto a bank of
//! ERB-spaced Gammatone magnitude responses. Band energies are log
//! compressed and later z-normalized per band with corpus statistics.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

/// The only sample rate the pipeline accepts.
pub const PIPELINE_SAMPLE_RATE: u32 = 44100;

const EAR_Q: f64 = 9.26449;
const MIN_BW: f64 = 24.7;
const STD_FLOOR: f64 = 1e-8;

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub n_bands: usize,
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub log_compress: bool,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_bands: 64,
            sample_rate: PIPELINE_SAMPLE_RATE,
            win_len: 1764,
            hop_len: 882,
            fft_size: 2048,
            f_low: 20.0,
            f_high: 22050.0,
            log_compress: true,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_bands == 0 {
            return bad("n_bands must be at least 1".into());
        }
        if self.hop_len == 0 || self.hop_len > self.win_len || self.win_len > self.fft_size {
            return bad(format!(
                "need 0 < hop_len ({}) <= win_len ({}) <= fft_size ({})",
                self.hop_len, self.win_len, self.fft_size
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_low > 0.0 && self.f_low < self.f_high && self.f_high <= nyquist) {
            return bad(format!(
                "need 0 < f_low ({}) < f_high ({}) <= {nyquist}",
                self.f_low, self.f_high
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad(format!(
                "log_floor must be positive, got {}",
                self.log_floor
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a clip of `n` samples.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        (n >= self.win_len).then(|| (n - self.win_len) / self.hop_len + 1)
    }

    /// Stable textual form used for cache invalidation and artifact metadata.
    pub fn fingerprint(&self) -> String {
        format!(
            "bands={};sr={};win={};hop={};fft={};flo={:e};fhi={:e};log={};floor={:e}",
            self.n_bands,
            self.sample_rate,
            self.win_len,
            self.hop_len,
            self.fft_size,
            self.f_low,
            self.f_high,
            self.log_compress,
            self.log_floor
        )
    }

    /// Inverse of [`FrontendConfig::fingerprint`].
    pub fn from_fingerprint(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = 0;
        for field in text.trim().split(';') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed front-end field {field:?}")))?;
            match key {
                "bands" => cfg.n_bands = parse_field(key, value)?,
                "sr" => cfg.sample_rate = parse_field(key, value)?,
                "win" => cfg.win_len = parse_field(key, value)?,
                "hop" => cfg.hop_len = parse_field(key, value)?,
                "fft" => cfg.fft_size = parse_field(key, value)?,
                "flo" => cfg.f_low = parse_field(key, value)?,
                "fhi" => cfg.f_high = parse_field(key, value)?,
                "log" => cfg.log_compress = parse_field(key, value)?,
                "floor" => cfg.log_floor = parse_field(key, value)?,
                _ => return Err(Error::Config(format!("unknown front-end field {key:?}"))),
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(Error::Config(format!(
                "expected 9 front-end fields, found {seen}"
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// A bands x frames matrix, row-major (one row per band).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub bands: usize,
    pub frames: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(bands: usize, frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != bands * frames {
            return Err(Error::Shape(format!(
                "{} values for a {bands}x{frames} feature matrix",
                values.len()
            )));
        }
        Ok(Self {
            bands,
            frames,
            values,
        })
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.frames + frame]
    }

    pub fn row(&self, band: usize) -> &[f32] {
        &self.values[band * self.frames..(band + 1) * self.frames]
    }
}

/// ERB-spaced center frequencies, highest first; the last one equals `f_low`.
pub fn erb_space(n_bands: usize, f_low: f64, f_high: f64) -> Result<Vec<f64>> {
    if n_bands == 0 || !(f_low > 0.0 && f_low < f_high) {
        return Err(Error::Config(format!(
            "erb_space({n_bands}, {f_low}, {f_high}): need n >= 1 and 0 < f_low < f_high"
        )));
    }
    let c = EAR_Q * MIN_BW;
    let step = ((f_low + c).ln() - (f_high + c).ln()) / n_bands as f64;
    let cf: Vec<f64> = (1..=n_bands)
        .map(|i| -c + (i as f64 * step).exp() * (f_high + c))
        .collect();
    let ordered = cf.windows(2).all(|w| w[0] > w[1]);
    if !ordered || cf.iter().any(|f| !f.is_finite()) {
        return Err(Error::Config(format!(
            "erb_space({n_bands}, {f_low}, {f_high}) is not strictly decreasing"
        )));
    }
    Ok(cf)
}

/// Equivalent rectangular bandwidth in Hz.
pub fn erb(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// Gammatone magnitude weights, `n_bands` rows of `fft_size/2 + 1` bins,
/// each row peak-normalized to 1.
pub fn gammatone_weights(cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let cf = erb_space(cfg.n_bands, cfg.f_low, cfg.f_high)?;
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let rows = cf
        .iter()
        .map(|&c| {
            let b = 1.019 * erb(c);
            let mut row: Vec<f64> = (0..cfg.n_bins())
                .map(|k| {
                    let d = (k as f64 * bin_hz - c) / b;
                    (1.0 + d * d).powi(-4)
                })
                .collect();
            let peak = row.iter().cloned().fold(0.0, f64::max);
            row.iter_mut().for_each(|w| *w /= peak);
            row
        })
        .collect();
    Ok(rows)
}

/// Splits a clip into overlapping frames without padding.
pub fn frame_signal<'a>(clip: &'a AudioClip, cfg: &FrontendConfig) -> Result<Vec<&'a [f64]>> {
    let n = clip.samples.len();
    let frames = cfg.frame_count(n).ok_or_else(|| {
        Error::Input(format!(
            "clip has {n} samples, shorter than one {}-sample window",
            cfg.win_len
        ))
    })?;
    Ok((0..frames)
        .map(|j| &clip.samples[j * cfg.hop_len..j * cfg.hop_len + cfg.win_len])
        .collect())
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable STFT power-spectrum and Gammatone projection state.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    weights: Vec<Vec<f64>>,
    // first and one-past-last bin with non-negligible weight, per band
    support: Vec<(usize, usize)>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish()
    }
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        let weights = gammatone_weights(&cfg)?;
        let support = weights
            .iter()
            .map(|row| {
                let lo = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let hi = row.iter().rposition(|&w| w > 0.0).map_or(0, |i| i + 1);
                (lo, hi)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            window: hann(cfg.win_len),
            weights,
            support,
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// One-sided power spectrum `|X_k|^2`, k = 0..=fft_size/2, of the
    /// Hann-windowed, zero-padded frame. No scaling or doubling is applied,
    /// so `P[0] + 2*sum(P[1..n/2]) + P[n/2] == fft_size * sum((w*x)^2)`.
    pub fn power_spectrum(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.cfg.win_len {
            return Err(Error::Shape(format!(
                "frame of {} samples, expected {}",
                frame.len(),
                self.cfg.win_len
            )));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        Ok(buf[..self.cfg.n_bins()]
            .iter()
            .map(|c| c.norm_sqr())
            .collect())
    }

    /// Band energies `W * P` for one power spectrum.
    pub fn band_energies(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.support)
            .map(|(row, &(lo, hi))| {
                row[lo..hi]
                    .iter()
                    .zip(&power[lo..hi])
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }

    pub fn gammatonegram(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::SampleRate {
                found: clip.sample_rate,
                expected: self.cfg.sample_rate,
            });
        }
        let frames = frame_signal(clip, &self.cfg)?;
        let t = frames.len();
        let mut values = vec![0f32; self.cfg.n_bands * t];
        for (j, frame) in frames.iter().enumerate() {
            let energies = self.band_energies(&self.power_spectrum(frame)?);
            for (r, e) in energies.into_iter().enumerate() {
                let v = if self.cfg.log_compress {
                    10.0 * (e + self.cfg.log_floor).log10()
                } else {
                    e
                };
                values[r * t + j] = v as f32;
            }
        }
        FeatureMatrix::new(self.cfg.n_bands, t, values)
    }
}

pub fn power_spectrum(frame: &[f64], cfg: &FrontendConfig) -> Result<Vec<f64>> {
    Frontend::new(cfg.clone())?.power_spectrum(frame)
}

pub fn gammatonegram(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    Frontend::new(cfg.clone())?.gammatonegram(clip)
}

/// Per-band normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

/// Streaming per-band mean/variance (Chan et al. pairwise merge), so partial
/// accumulators from independent workers can be combined.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(bands: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; bands],
            m2: vec![0.0; bands],
        }
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn add(&mut self, m: &FeatureMatrix) -> Result<()> {
        if m.bands != self.bands() {
            return Err(Error::Shape(format!(
                "matrix has {} bands, accumulator {}",
                m.bands,
                self.bands()
            )));
        }
        if m.frames == 0 {
            return Ok(());
        }
        // two-pass within the matrix, then merge
        let n = m.frames as f64;
        let mut part = StatsAccumulator::new(m.bands);
        part.count = m.frames as u64;
        for r in 0..m.bands {
            let row = m.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            part.mean[r] = mean;
            part.m2[r] = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        }
        self.merge(&part)
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.bands() != self.bands() {
            return Err(Error::Shape("accumulators differ in band count".into()));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for r in 0..self.bands() {
            let delta = other.mean[r] - self.mean[r];
            self.mean[r] += delta * nb / n;
            self.m2[r] += other.m2[r] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<NormStats> {
        if self.count < 2 {
            return Err(Error::Input(format!(
                "normalization needs at least 2 frames, got {}",
                self.count
            )));
        }
        let n = self.count as f64;
        Ok(NormStats {
            mean: self.mean.clone(),
            std: self
                .m2
                .iter()
                .map(|m2| (m2 / n).sqrt().max(STD_FLOOR))
                .collect(),
            count: self.count,
        })
    }
}

/// Population mean and standard deviation per band over every frame of
/// every matrix.
pub fn accumulate_stats<'a, I>(features: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a FeatureMatrix>,
{
    let mut acc: Option<StatsAccumulator> = None;
    for m in features {
        acc.get_or_insert_with(|| StatsAccumulator::new(m.bands))
            .add(m)?;
    }
    acc.ok_or_else(|| Error::Input("no feature matrices to accumulate".into()))?
        .finish()
}

pub fn apply_normalization(m: &FeatureMatrix, stats: &NormStats) -> Result<FeatureMatrix> {
    if stats.mean.len() != m.bands || stats.std.len() != m.bands {
        return Err(Error::Shape(format!(
            "stats for {} bands applied to {} bands",
            stats.mean.len(),
            m.bands
        )));
    }
    let mut values = Vec::with_capacity(m.values.len());
    for r in 0..m.bands {
        let (mu, sd) = (stats.mean[r], stats.std[r]);
        values.extend(m.row(r).iter().map(|&v| ((v as f64 - mu) / sd) as f32));
    }
    FeatureMatrix::new(m.bands, m.frames, values)
}

const STATS_MAGIC: &[u8; 4] = b"GTNS";
const STATS_VERSION: u16 = 1;

impl NormStats {
    /// Little-endian: magic "GTNS", u16 version, u32 bands, u64 count,
    /// then `bands` f64 means and `bands` f64 standard deviations.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + 16 * self.mean.len());
        out.extend_from_slice(STATS_MAGIC);
        out.extend_from_slice(&STATS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.mean.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        for v in self.mean.iter().chain(&self.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::modelio::ByteReader::new(bytes);
        if r.take(4)? != STATS_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"GTNS\""));
        }
        let version = r.u16()?;
        if version != STATS_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let bands = r.u32()? as usize;
        let count = r.u64()?;
        let mean = r.f64_vec(bands)?;
        let std = r.f64_vec(bands)?;
        r.expect_end()?;
        if let Some(i) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::format(
                18 + 8 * (bands + i),
                "non-positive standard deviation",
            ));
        }
        Ok(Self { mean, std, count })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

const GTF_MAGIC: &[u8; 4] = b"GTFC";
const GTF_VERSION: u16 = 1;

/// Feature cache encoding: magic "GTFC", u16 version, u16 bands,
/// u32 frames, then bands*frames little-endian f32, row-major.
pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let bands = u16::try_from(m.bands)
        .map_err(|_| Error::Input(format!("{} bands do not fit the cache header", m.bands)))?;
    let frames = u32::try_from(m.frames)
        .map_err(|_| Error::Input(format!("{} frames do not fit the cache header", m.frames)))?;
    let mut out = Vec::with_capacity(12 + 4 * m.values.len());
    out.extend_from_slice(GTF_MAGIC);
    out.extend_from_slice(&GTF_VERSION.to_le_bytes());
    out.extend_from_slice(&bands.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = crate::modelio::ByteReader::new(bytes);
    if r.take(4)? != GTF_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"GTFC\""));
    }
    let version = r.u16()?;
    if version != GTF_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let bands = r.u16()? as usize;
    let frames = r.u32()? as usize;
    let raw = r.take(4 * bands * frames)?;
    r.expect_end()?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(bands, frames, values)
}

pub fn write_feature_file(path: &Path, m: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &encode_features(m)?)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| e.in_file(path))
}

/// Writes to a sibling temp file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
