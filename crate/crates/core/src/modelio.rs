//! Model artifacts: batch-norm folding, binary16 quantization, size
//! accounting against the 128 KB budget, and the "ASCM" container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "ASCM" | u16 version | u8 precision (0 = binary32, 1 = binary16)
//! u32 metadata length | metadata block
//! u32 record count | records...
//! record: u16 name length | name (utf-8) | u8 rank | rank x u32 dims | values
//! ```
//!
//! Sizes are counted in the challenge convention, 1 KB = 1024 bytes.

use std::fmt;
use std::fs;
use std::path::Path;

use half::f16;

use crate::dsp::{FrontendConfig, NormStats};
use crate::nn::{Conv2d, Model, ModelSpec, RunningStats, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ASCM";
pub const FORMAT_VERSION: u16 = 1;
/// Challenge ceiling on parameter bytes.
pub const BUDGET_KB: f64 = 128.0;
/// Model size reported for the reference system.
pub const REFERENCE_KB: f64 = 95.96;
pub const KB: f64 = 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Binary32,
    Binary16,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Binary32 => 4,
            Precision::Binary16 => 2,
        }
    }

    fn code(self) -> u8 {
        match self {
            Precision::Binary32 => 0,
            Precision::Binary16 => 1,
        }
    }

    fn from_code(code: u8, offset: usize) -> Result<Self> {
        match code {
            0 => Ok(Precision::Binary32),
            1 => Ok(Precision::Binary16),
            c => Err(Error::format(offset, format!("unknown precision code {c}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Binary32 => "binary32",
            Precision::Binary16 => "binary16",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "f32" | "binary32" => Ok(Precision::Binary32),
            "fp16" | "f16" | "binary16" => Ok(Precision::Binary16),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    /// Raw IEEE 754 binary16 bit patterns.
    F16(Vec<u16>),
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Values::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Values::F16(v) => v.iter().map(|&b| f16::from_bits(b).to_f64()).collect(),
        }
    }

    fn precision(&self) -> Precision {
        match self {
            Values::F32(_) => Precision::Binary32,
            Values::F16(_) => Precision::Binary16,
        }
    }
}

/// Round-to-nearest-even binary16, saturating at the largest finite value.
pub fn to_binary16(x: f32) -> u16 {
    let max = f16::MAX.to_f32();
    f16::from_f32(x.clamp(-max, max)).to_bits()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactMeta {
    pub spec: ModelSpec,
    pub frontend: FrontendConfig,
    pub classes: Vec<String>,
    pub norm: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub version: u16,
    pub precision: Precision,
    pub meta: ArtifactMeta,
    pub params: Vec<ParamRecord>,
}

fn model_records(model: &Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<_> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (name, bn) in model.batch_norms() {
        if let Some(r) = &bn.running {
            let c = r.mean.len();
            out.push((format!("{name}.running_mean"), vec![c], r.mean.clone()));
            out.push((format!("{name}.running_var"), vec![c], r.var.clone()));
        }
    }
    out
}

impl ModelArtifact {
    /// Captures every trainable tensor plus batch-norm running statistics.
    pub fn from_model(model: &Model, meta: ArtifactMeta, precision: Precision) -> Self {
        let params = model_records(model)
            .into_iter()
            .map(|(name, shape, data)| ParamRecord {
                name,
                shape,
                values: match precision {
                    Precision::Binary32 => Values::F32(data.iter().map(|&v| v as f32).collect()),
                    Precision::Binary16 => {
                        Values::F16(data.iter().map(|&v| to_binary16(v as f32)).collect())
                    }
                },
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            precision,
            meta: ArtifactMeta {
                spec: model.spec.clone(),
                ..meta
            },
            params,
        }
    }

    /// Rebuilds the model in double precision.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.spec.clone(), 0)?;
        let mut used = vec![false; self.params.len()];
        let mut find = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let i = self
                .params
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| Error::Input(format!("artifact has no parameter {name:?}")))?;
            let r = &self.params[i];
            if r.shape != shape {
                return Err(Error::Shape(format!(
                    "{name}: artifact shape {:?}, model expects {shape:?}",
                    r.shape
                )));
            }
            used[i] = true;
            Ok(r.values.to_f64())
        };
        for (name, t) in model.params_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::new(shape.clone(), find(&name, &shape)?)?;
        }
        for (name, bn) in model.batch_norms_mut() {
            let c = bn.channels();
            let mean_name = format!("{name}.running_mean");
            if self.params.iter().any(|r| r.name == mean_name) {
                bn.running = Some(RunningStats {
                    mean: find(&mean_name, &[c])?,
                    var: find(&format!("{name}.running_var"), &[c])?,
                });
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Input(format!(
                "artifact parameter {:?} has no place in the model",
                self.params[i].name
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.precision.code());
        let meta = encode_meta(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for r in &self.params {
            if r.values.precision() != self.precision {
                return Err(Error::Input(format!(
                    "{} is stored as {} in a {} artifact",
                    r.name,
                    r.values.precision(),
                    self.precision
                )));
            }
            if r.shape.iter().product::<usize>() != r.values.len() {
                return Err(Error::Shape(format!(
                    "{}: shape does not match values",
                    r.name
                )));
            }
            let name = r.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Input(format!("parameter name too long: {}", r.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.values {
                Values::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F16(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"ASCM\""));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let precision = Precision::from_code(r.u8()?, 6)?;
        let meta_len = r.u32()? as usize;
        let meta_start = r.pos;
        let meta_bytes = r.take(meta_len)?;
        let meta = decode_meta(meta_bytes, meta_start)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(name_at, "parameter name is not utf-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * precision.bytes())?;
            let values = match precision {
                Precision::Binary32 => Values::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                Precision::Binary16 => Values::F16(
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes([c[0], c[1]]))
                        .collect(),
                ),
            };
            params.push(ParamRecord {
                name,
                shape,
                values,
            });
        }
        r.expect_end()?;
        Ok(Self {
            version,
            precision,
            meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dsp::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

/// Converts every record to binary16.
pub fn quantize_binary16(artifact: &ModelArtifact) -> ModelArtifact {
    let params = artifact
        .params
        .iter()
        .map(|r| ParamRecord {
            name: r.name.clone(),
            shape: r.shape.clone(),
            values: match &r.values {
                Values::F32(v) => Values::F16(v.iter().map(|&x| to_binary16(x)).collect()),
                Values::F16(v) => Values::F16(v.clone()),
            },
        })
        .collect();
    ModelArtifact {
        precision: Precision::Binary16,
        params,
        ..artifact.clone()
    }
}

fn fold_conv(conv: &Conv2d, bn: &crate::nn::BatchNorm) -> Result<Conv2d> {
    let r = bn
        .running
        .as_ref()
        .ok_or_else(|| Error::State("cannot fold batch norm without running statistics".into()))?;
    let cout = conv.out_channels;
    let scale: Vec<f64> = (0..cout)
        .map(|c| bn.gamma.data()[c] / (r.var[c] + bn.eps).sqrt())
        .collect();
    let mut out = conv.clone();
    out.weight
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, w)| *w *= scale[i % cout]);
    for (c, b) in out.bias.data_mut().iter_mut().enumerate() {
        *b = (*b - r.mean[c]) * scale[c] + bn.beta.data()[c];
    }
    Ok(out)
}

/// Merges every conv + batch-norm pair into a single conv with adjusted
/// weights and bias. A model without batch norm is returned unchanged.
pub fn fold_batchnorm(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    out.spec.batch_norm = false;
    for block in [&mut out.block1, &mut out.block2] {
        if let Some(bn) = block.bn1.take() {
            block.conv1 = fold_conv(&block.conv1, &bn)?;
        }
        if let Some(bn) = block.bn2.take() {
            block.conv2 = fold_conv(&block.conv2, &bn)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub precision: Precision,
    pub param_count: usize,
    pub nonzero_param_count: usize,
    pub payload_bytes: usize,
    pub total_bytes: usize,
}

impl SizeReport {
    pub fn header_bytes(&self) -> usize {
        self.total_bytes - self.payload_bytes
    }

    pub fn payload_kb(&self) -> f64 {
        self.payload_bytes as f64 / KB
    }

    pub fn total_kb(&self) -> f64 {
        self.total_bytes as f64 / KB
    }

    pub fn within_budget(&self) -> bool {
        self.payload_kb() < BUDGET_KB
    }

    /// Payload relative to the reference system size, in percent.
    pub fn reference_delta_pct(&self) -> f64 {
        100.0 * (self.payload_kb() - REFERENCE_KB) / REFERENCE_KB
    }
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "precision           {}", self.precision)?;
        writeln!(f, "params              {}", self.param_count)?;
        writeln!(f, "nonzero_params      {}", self.nonzero_param_count)?;
        writeln!(f, "payload_bytes       {}", self.payload_bytes)?;
        writeln!(f, "header_bytes        {}", self.header_bytes())?;
        writeln!(f, "total_bytes         {}", self.total_bytes)?;
        writeln!(f, "payload_kb          {:.2}", self.payload_kb())?;
        writeln!(
            f,
            "payload_kb_1000     {:.2}",
            self.payload_bytes as f64 / 1000.0
        )?;
        writeln!(f, "total_kb            {:.2}", self.total_kb())?;
        writeln!(f, "budget_kb           {BUDGET_KB:.2}")?;
        writeln!(
            f,
            "within_budget       {}",
            if self.within_budget() { "yes" } else { "no" }
        )?;
        writeln!(f, "reference_kb        {REFERENCE_KB:.2}")?;
        write!(f, "reference_delta_pct {:+.2}", self.reference_delta_pct())
    }
}

pub fn size_report(artifact: &ModelArtifact) -> Result<SizeReport> {
    let param_count = artifact.params.iter().map(|r| r.values.len()).sum();
    let nonzero_param_count = artifact
        .params
        .iter()
        .map(|r| match &r.values {
            Values::F32(v) => v.iter().filter(|&&x| x != 0.0).count(),
            Values::F16(v) => v.iter().filter(|&&b| b & 0x7fff != 0).count(),
        })
        .sum();
    Ok(SizeReport {
        precision: artifact.precision,
        param_count,
        nonzero_param_count,
        payload_bytes: param_count * artifact.precision.bytes(),
        total_bytes: artifact.to_bytes()?.len(),
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Input(format!("string too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_meta(m: &ArtifactMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let s = &m.spec;
    out.extend_from_slice(&s.version.to_le_bytes());
    for v in [
        s.in_channels,
        s.filters,
        s.kernel,
        s.se_ratio,
        s.pool.0,
        s.pool.1,
    ] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&s.dropout.to_le_bytes());
    put_u32(&mut out, s.n_classes)?;
    out.push(s.batch_norm as u8);

    let fe = &m.frontend;
    for v in [
        fe.n_bands,
        fe.sample_rate as usize,
        fe.win_len,
        fe.hop_len,
        fe.fft_size,
    ] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&fe.f_low.to_le_bytes());
    out.extend_from_slice(&fe.f_high.to_le_bytes());
    out.push(fe.log_compress as u8);
    out.extend_from_slice(&fe.log_floor.to_le_bytes());

    let n = u16::try_from(m.classes.len()).map_err(|_| Error::Input("too many classes".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for c in &m.classes {
        put_str(&mut out, c)?;
    }
    match &m.norm {
        None => out.push(0),
        Some(ns) => {
            out.push(1);
            put_u32(&mut out, ns.mean.len())?;
            out.extend_from_slice(&ns.count.to_le_bytes());
            for v in ns.mean.iter().chain(&ns.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn decode_meta(bytes: &[u8], base: usize) -> Result<ArtifactMeta> {
    let mut r = ByteReader::with_base(bytes, base);
    let version = r.u16()?;
    let mut u = || r.u32().map(|v| v as usize);
    let (in_channels, filters, kernel, se_ratio, ph, pw) = (u()?, u()?, u()?, u()?, u()?, u()?);
    let dropout = r.f64()?;
    let n_classes = r.u32()? as usize;
    let batch_norm = r.bool()?;
    let spec = ModelSpec {
        version,
        in_channels,
        filters,
        kernel,
        se_ratio,
        pool: (ph, pw),
        dropout,
        n_classes,
        batch_norm,
    };
    let spec_end = r.pos;
    spec.validate()
        .map_err(|e| Error::format(spec_end, e.to_string()))?;

    let mut u = || r.u32().map(|v| v as usize);
    let (n_bands, sample_rate, win_len, hop_len, fft_size) = (u()?, u()?, u()?, u()?, u()?);
    let frontend = FrontendConfig {
        n_bands,
        sample_rate: sample_rate as u32,
        win_len,
        hop_len,
        fft_size,
        f_low: r.f64()?,
        f_high: r.f64()?,
        log_compress: r.bool()?,
        log_floor: r.f64()?,
    };
    let fe_end = r.pos;
    frontend
        .validate()
        .map_err(|e| Error::format(fe_end, e.to_string()))?;

    let n = r.u16()? as usize;
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        classes.push(r.string()?);
    }
    let norm = if r.bool()? {
        let bands = r.u32()? as usize;
        let count = r.u64()?;
        Some(NormStats {
            mean: r.f64_vec(bands)?,
            std: r.f64_vec(bands)?,
            count,
        })
    } else {
        None
    };
    r.expect_end()?;
    Ok(ArtifactMeta {
        spec,
        frontend,
        classes,
        norm,
    })
}

/// Little-endian cursor whose errors carry the absolute byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self::with_base(bytes, 0)
    }

    fn with_base(bytes: &'a [u8], base: usize) -> Self {
        Self {
            bytes,
            pos: 0,
            base,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.base + self.pos,
                format!(
                    "truncated: needed {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn bool(&mut self) -> Result<bool> {
        let at = self.base + self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(at, format!("invalid flag byte {b}"))),
        }
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    pub(crate) fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let at = self.base + self.pos;
        std::str::from_utf8(self.take(n)?)
            .map(str::to_string)
            .map_err(|_| Error::format(at, "string is not utf-8"))
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.base + self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn meta() -> ArtifactMeta {
        ArtifactMeta {
            spec: ModelSpec::default(),
            frontend: FrontendConfig::default(),
            classes: (0..10).map(|i| format!("class{i}")).collect(),
            norm: Some(NormStats {
                mean: vec![-50.0; 64],
                std: vec![12.0; 64],
                count: 1000,
            }),
        }
    }

    fn with_random_bn(spec: ModelSpec, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::new(spec, seed).unwrap();
        for (_, bn) in m.batch_norms_mut() {
            let c = bn.channels();
            bn.gamma = Tensor::new(
                vec![c],
                (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
            )
            .unwrap();
            bn.beta = Tensor::new(
                vec![c],
                (0..c).map(|_| rng.random_range(-0.2..0.2)).collect(),
            )
            .unwrap();
            bn.running = Some(RunningStats {
                mean: (0..c).map(|_| rng.random_range(-0.3..0.3)).collect(),
                var: (0..c).map(|_| rng.random_range(0.2..2.0)).collect(),
            });
        }
        m
    }

    #[test]
    fn binary16_bit_patterns() {
        assert_eq!(to_binary16(1.0), 0x3C00);
        assert_eq!(to_binary16(-2.0), 0xC000);
        assert_eq!(to_binary16(1e9), 0x7BFF);
        assert_eq!(to_binary16(-1e9), 0xFBFF);
        let back = f16::from_bits(to_binary16(0.1)).to_f64();
        assert!(((back - 0.1) / 0.1).abs() < 2f64.powi(-11));
        // ties go to even: 1 + 2^-11 sits halfway between 1 and 1 + 2^-10
        assert_eq!(to_binary16(1.0 + 2f32.powi(-11)), 0x3C00);
    }

    #[test]
    fn identity_fold_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::glorot(3, 2, 3, &mut rng);
        let mut bn = BatchNorm::new(3);
        bn.running = Some(RunningStats {
            mean: vec![0.0; 3],
            var: vec![1.0 - bn.eps; 3],
        });
        let folded = fold_conv(&conv, &bn).unwrap();
        for (a, b) in folded.weight.data().iter().zip(conv.weight.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(folded.bias.data(), conv.bias.data());
    }

    #[test]
    fn fold_needs_running_stats() {
        let m = Model::new(ModelSpec::default(), 0).unwrap();
        assert!(matches!(fold_batchnorm(&m), Err(Error::State(_))));
    }

    #[test]
    fn folded_model_matches_unfolded() {
        let m = with_random_bn(ModelSpec::default(), 2);
        let folded = fold_batchnorm(&m).unwrap();
        assert!(folded.batch_norms().is_empty());
        assert_eq!(folded.param_count(), 47_530);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(
            vec![2, 8, 100, 1],
            (0..1600).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let a = m.predict(&x).unwrap();
        let b = folded.predict(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-5 * p.abs().max(1e-12), "{p} vs {q}");
        }
    }

    #[test]
    fn artifact_roundtrip_is_bit_exact() {
        let m = with_random_bn(ModelSpec::default(), 4);
        for precision in [Precision::Binary32, Precision::Binary16] {
            let a = ModelArtifact::from_model(&m, meta(), precision);
            let bytes = a.to_bytes().unwrap();
            assert_eq!(&bytes[..4], b"ASCM");
            let b = ModelArtifact::from_bytes(&bytes).unwrap();
            assert_eq!(a, b);
            assert_eq!(b.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn artifact_restores_model() {
        let m = with_random_bn(ModelSpec::default(), 5);
        let a = ModelArtifact::from_model(&m, meta(), Precision::Binary32);
        let restored = a.to_model().unwrap();
        let x = Tensor::filled(vec![1, 4, 100, 1], 0.5);
        let p = m.predict(&x).unwrap();
        let q = restored.predict(&x).unwrap();
        for (u, v) in p.data().iter().zip(q.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn truncation_and_corruption_are_named() {
        let m = with_random_bn(ModelSpec::default(), 6);
        let bytes = ModelArtifact::from_model(&m, meta(), Precision::Binary16)
            .to_bytes()
            .unwrap();
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = ModelArtifact::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            ModelArtifact::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            ModelArtifact::from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(ModelArtifact::from_bytes(&long).is_err());
    }

    #[test]
    fn size_accounting() {
        let empty = ModelArtifact {
            version: FORMAT_VERSION,
            precision: Precision::Binary16,
            meta: meta(),
            params: vec![],
        };
        let r = size_report(&empty).unwrap();
        assert_eq!((r.param_count, r.payload_bytes), (0, 0));
        assert_eq!(r.total_bytes, empty.to_bytes().unwrap().len());

        let thousand = ModelArtifact {
            params: vec![ParamRecord {
                name: "w".into(),
                shape: vec![10, 100],
                values: Values::F16(vec![0x3C00; 1000]),
            }],
            ..empty
        };
        let r = size_report(&thousand).unwrap();
        assert_eq!(
            (r.param_count, r.payload_bytes, r.nonzero_param_count),
            (1000, 2000, 1000)
        );
    }

    #[test]
    fn trained_stats_survive_export() {
        let mut m = Model::new(ModelSpec::default(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::new(
            vec![2, 4, 100, 1],
            (0..800).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        m.forward(&x, Mode::Train, &mut rng).unwrap();
        let a = ModelArtifact::from_model(&m, meta(), Precision::Binary32);
        assert_eq!(size_report(&a).unwrap().param_count, 47_530 + 320 + 320);
        let restored = a.to_model().unwrap();
        assert!(restored
            .batch_norms()
            .iter()
            .all(|(_, bn)| bn.running.is_some()));
    }
}
