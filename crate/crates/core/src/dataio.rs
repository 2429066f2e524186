//! Experiment configuration, dataset synthesis and the on-disk formats.
//!
//! A run is described by one TOML file ([`ExperimentConfig`]). Generation
//! draws clean samples, measures each once and writes two files: the
//! training dataset (measurements and operators only) and a separate
//! evaluation reference holding the clean samples. The dataset reader
//! refuses the reference file, so training code cannot see clean data.
//!
//! Dataset file (`AMBD`), all integers little-endian:
//!
//! ```text
//! magic     4 bytes "AMBD"
//! version   u16
//! kind      u8      0 = mask, 1 = gaussian
//! n, m      u64 each
//! count     u64
//! digest    32 bytes (config digest)
//! seed      u64
//! shape     u8 flag, then height, width, channels as u64 (zero when absent)
//! records   count × (operator, values)
//! checksum  32 bytes, SHA-256 of everything above
//! ```
//!
//! A mask operator is `n` bytes of 0/1; a gaussian operator is `m·n` row-major
//! `f32`. Values are `m` `f32` (`m = n` for masks). Every record has the
//! same length, so record `i` sits at a fixed offset.
//!
//! The reference file (`AMBR`) has the same layout up to the seed, without
//! kind, `m` or shape, followed by `count × n` `f32` clean samples and the
//! checksum.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::corruption::{CorruptionProcess, GaussianMeasurement, ImageShape, Mask, Measurement, Operator};
use crate::denoiser::{ModelArch, OperatorEncoding};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::oracle::{DataDistribution, DataSpec};
use crate::rng::stream;
use crate::sampler::SamplerSpec;
use crate::schedule::NoiseSchedule;
use crate::training::OptimizerSpec;

pub const DATASET_MAGIC: &[u8; 4] = b"AMBD";
pub const REFERENCE_MAGIC: &[u8; 4] = b"AMBR";
pub const FORMAT_VERSION: u16 = 1;

/// The only environment override: where artifacts are written.
pub const OUT_DIR_ENV: &str = "AMBIENT_OUT_DIR";

/// How measurements are taken; the ambient dimension comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionSpec {
    RandomInpainting {
        p: f64,
        delta: f64,
    },
    BlockInpainting {
        height: usize,
        width: usize,
        channels: usize,
        block_size: usize,
    },
    Gaussian {
        m: usize,
        #[serde(default = "one")]
        drop_rows: usize,
    },
}

fn one() -> usize {
    1
}

impl CorruptionSpec {
    pub fn process(&self, n: usize) -> Result<CorruptionProcess> {
        let process = match *self {
            CorruptionSpec::RandomInpainting { p, delta } => CorruptionProcess::RandomInpainting { n, p, delta },
            CorruptionSpec::BlockInpainting { height, width, channels, block_size } => {
                let shape = ImageShape { height, width, channels };
                if shape.len() != n {
                    return Err(Error::Config(format!(
                        "image {height}x{width}x{channels} has {} pixels but the data has dimension {n}",
                        shape.len()
                    )));
                }
                CorruptionProcess::BlockInpainting { shape, block_size }
            }
            CorruptionSpec::Gaussian { m, drop_rows } => CorruptionProcess::Gaussian { m, n, drop_rows },
        };
        process.validate()?;
        Ok(process)
    }

    pub fn shape(&self) -> Option<ImageShape> {
        match *self {
            CorruptionSpec::BlockInpainting { height, width, channels, .. } => {
                Some(ImageShape { height, width, channels })
            }
            _ => None,
        }
    }

    pub fn encoding(&self) -> OperatorEncoding {
        match self {
            CorruptionSpec::Gaussian { .. } => OperatorEncoding::Gaussian,
            _ => OperatorEncoding::Mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub sigma_data: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![256, 256, 256], sigma_data: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub records: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { records: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSpec {
    pub data: u64,
    pub train: u64,
    pub sample: u64,
}

impl SeedSpec {
    /// Three unrelated seeds below 2⁶³ from one master seed.
    pub fn derive(master: u64) -> Self {
        use rand::RngCore as _;
        let mut rng = stream(master, u64::MAX);
        // TOML integers are i64
        let mut next = || rng.next_u64() >> 1;
        Self { data: next(), train: next(), sample: next() }
    }
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self { data: 0, train: 1, sample: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub num_projections: usize,
    pub psnr_peak: f64,
    /// Measurement noise of the `restore` command.
    pub restore_sigma: f64,
    pub restore_cases: usize,
    pub reference_samples: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { num_projections: 128, psnr_peak: 2.0, restore_sigma: 0.05, restore_cases: 1000, reference_samples: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub corruption: CorruptionSpec,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Serialize)]
struct DigestScope<'a> {
    data: &'a DataSpec,
    corruption: &'a CorruptionSpec,
    schedule: &'a NoiseSchedule,
    model: &'a ModelSpec,
}

impl ExperimentConfig {
    /// Canonical 2-D mixture, `p = 0.5`, `δ = 0.1`.
    pub fn canonical() -> Self {
        Self {
            data: DataSpec::canonical(),
            corruption: CorruptionSpec::RandomInpainting { p: 0.5, delta: 0.1 },
            schedule: NoiseSchedule::default(),
            model: ModelSpec::default(),
            optimizer: OptimizerSpec::default(),
            sampler: SamplerSpec::default(),
            dataset: DatasetSpec::default(),
            seeds: SeedSpec::default(),
            eval: EvalSpec::default(),
            output: OutputSpec::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dist = self.distribution()?;
        self.corruption.process(dist.dim())?;
        self.schedule.validate()?;
        self.arch()?.validate()?;
        self.optimizer.validate()?;
        self.sampler.validate()?;
        if self.dataset.records == 0 {
            return Err(Error::Config("dataset.records must be positive".into()));
        }
        if !(self.eval.psnr_peak > 0.0) || self.eval.num_projections == 0 {
            return Err(Error::Config("eval needs a positive PSNR peak and at least one projection".into()));
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<DataDistribution> {
        self.data.build()
    }

    pub fn process(&self) -> Result<CorruptionProcess> {
        self.corruption.process(self.distribution()?.dim())
    }

    pub fn arch(&self) -> Result<ModelArch> {
        let n = self.distribution()?.dim();
        let mut arch = match self.corruption {
            CorruptionSpec::Gaussian { m, .. } => ModelArch::for_gaussian(m, n, self.model.hidden.clone()),
            _ => ModelArch::for_masks(n, self.model.hidden.clone()),
        };
        arch.sigma_data = self.model.sigma_data;
        Ok(arch)
    }

    /// SHA-256 of the sorted-key JSON of the data, corruption, schedule and
    /// model sections.
    pub fn digest(&self) -> Digest {
        let scope = DigestScope {
            data: &self.data,
            corruption: &self.corruption,
            schedule: &self.schedule,
            model: &self.model,
        };
        // serde_json::Value keeps object keys in a BTreeMap
        let value = serde_json::to_value(scope).expect("config sections serialise");
        Digest::of_bytes(value.to_string().as_bytes())
    }

    /// `flag`, else `$AMBIENT_OUT_DIR`, else `output.dir`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(dir) = flag {
            return dir.to_path_buf();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.dir.clone(),
        }
    }
}

/// Refuses artifacts produced under a different configuration.
pub fn ensure_same_digest(what: &str, found: &Digest, expected: &Digest) -> Result<()> {
    if found != expected {
        return Err(Error::Refused(format!(
            "{what} was produced under config {} but the current config is {}",
            found.short(),
            expected.short()
        )));
    }
    Ok(())
}

/// Measurements and operators; no clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedDataset {
    pub kind: OperatorEncoding,
    pub n: usize,
    pub m: usize,
    pub shape: Option<ImageShape>,
    pub digest: Digest,
    pub seed: u64,
    pub records: Vec<Measurement>,
}

/// Clean samples kept apart from training.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub n: usize,
    pub digest: Digest,
    pub seed: u64,
    pub samples: Vec<Vec<f64>>,
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Draws `config.dataset.records` clean samples, measures each once, and
/// returns the training dataset with the matching reference set.
///
/// Record `i` uses its own stream derived from `(seed, i)`. Values, clean
/// samples and gaussian rows are rounded to `f32` before measuring, so the
/// returned sets equal what the files hold.
pub fn generate_dataset(config: &ExperimentConfig, seed: u64) -> Result<(CorruptedDataset, ReferenceSet)> {
    config.validate()?;
    let dist = config.distribution()?;
    let process = config.process()?;
    let digest = config.digest();
    let count = config.dataset.records;
    let mut records = Vec::with_capacity(count);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream(seed, i as u64);
        let x0 = round_f32(&dist.sample(&mut rng));
        let op = match process.sample(&mut rng)? {
            Operator::Gaussian(g) => Operator::Gaussian(GaussianMeasurement::from_bytes(&g.to_bytes())?),
            mask => mask,
        };
        let values = round_f32(&op.apply(&x0)?);
        records.push(Measurement { op, values });
        samples.push(x0);
    }
    let dataset = CorruptedDataset {
        kind: config.corruption.encoding(),
        n: process.dim(),
        m: process.out_dim(),
        shape: config.corruption.shape(),
        digest,
        seed,
        records,
    };
    let reference = ReferenceSet { n: process.dim(), digest, seed, samples };
    Ok((dataset, reference))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size does not fit in memory".into()))
    }

    fn f32s(&mut self, k: usize) -> Result<Vec<f64>> {
        let raw = self.take(k.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn digest(&mut self) -> Result<Digest> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }
}

/// Splits off and verifies the checksum, and checks magic and version.
fn open_payload<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 4 + 2 + 32 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let head = &bytes[..4];
    if head != magic {
        if head == REFERENCE_MAGIC {
            return Err(Error::Refused("this is an evaluation-reference file; it holds clean data and cannot be read as a dataset".into()));
        }
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(head))));
    }
    let (payload, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != sum {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { expected: FORMAT_VERSION, found: version });
    }
    Ok(r)
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

fn push_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Writes `bytes` to a path that must not exist yet.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Error::Refused(format!("{} already exists", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    f.write_all(bytes)?;
    Ok(())
}

impl CorruptedDataset {
    /// Clean vectors wrapped as identity-mask records; used for sample
    /// batches.
    pub fn from_clean(samples: &[Vec<f64>], digest: Digest, seed: u64) -> Result<Self> {
        let n = samples.first().map_or(0, Vec::len);
        let mut records = Vec::with_capacity(samples.len());
        for s in samples {
            if s.len() != n {
                return Err(Error::Dimension { expected: n, got: s.len() });
            }
            records.push(Measurement { op: Operator::Mask(Mask::ones(n)), values: round_f32(s) });
        }
        Ok(Self { kind: OperatorEncoding::Mask, n, m: n, shape: None, digest, seed, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Measurement values of every record.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.values.clone()).collect()
    }

    /// Bytes per record.
    pub fn record_len(&self) -> usize {
        match self.kind {
            OperatorEncoding::Mask => self.n + 4 * self.n,
            OperatorEncoding::Gaussian => 4 * self.m * self.n + 4 * self.m,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(96 + self.len() * self.record_len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.kind {
            OperatorEncoding::Mask => 0,
            OperatorEncoding::Gaussian => 1,
        });
        for v in [self.n, self.m, self.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.digest.0);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(self.shape.is_some() as u8);
        let s = self.shape.unwrap_or(ImageShape { height: 0, width: 0, channels: 0 });
        for v in [s.height, s.width, s.channels] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for rec in &self.records {
            match (&rec.op, self.kind) {
                (Operator::Mask(mask), OperatorEncoding::Mask) if mask.len() == self.n => {
                    out.extend_from_slice(mask.as_slice());
                }
                (Operator::Gaussian(g), OperatorEncoding::Gaussian) if g.m() == self.m && g.n() == self.n => {
                    push_f32s(&mut out, g.rows().transpose().as_slice());
                }
                _ => return Err(Error::Contract("record operator does not match the dataset kind".into())),
            }
            if rec.values.len() != self.m {
                return Err(Error::Dimension { expected: self.m, got: rec.values.len() });
            }
            push_f32s(&mut out, &rec.values);
        }
        Ok(seal(out))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = open_payload(bytes, DATASET_MAGIC)?;
        let kind = match r.u8()? {
            0 => OperatorEncoding::Mask,
            1 => OperatorEncoding::Gaussian,
            k => return Err(Error::Format(format!("unknown operator kind {k}"))),
        };
        let n = r.usize()?;
        let m = r.usize()?;
        let count = r.usize()?;
        if kind == OperatorEncoding::Mask && m != n {
            return Err(Error::Format(format!("mask dataset with n={n} but m={m}")));
        }
        let digest = r.digest()?;
        let seed = r.u64()?;
        let has_shape = r.u8()? != 0;
        let (h, w, c) = (r.usize()?, r.usize()?, r.usize()?);
        let shape = has_shape.then_some(ImageShape { height: h, width: w, channels: c });
        if shape.is_some_and(|s| s.len() != n) {
            return Err(Error::Format(format!("image shape {h}x{w}x{c} does not match n={n}")));
        }
        let mut records = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let op = match kind {
                OperatorEncoding::Mask => Operator::Mask(Mask::new(r.take(n)?.to_vec())?),
                OperatorEncoding::Gaussian => {
                    let data = r.f32s(m * n)?;
                    Operator::Gaussian(GaussianMeasurement::new(DMatrix::from_row_slice(m, n, &data)))
                }
            };
            let values = r.f32s(m)?;
            records.push(Measurement { op, values });
        }
        if r.pos != r.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last record", r.bytes.len() - r.pos)));
        }
        Ok(Self { kind, n, m, shape, digest, seed, records })
    }

    /// Writes a new file; an existing path is refused.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_new(path.as_ref(), &self.to_bytes()?)
    }

    /// Reads a dataset file. Evaluation-reference files are refused.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 4 * self.n * self.len());
        out.extend_from_slice(REFERENCE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.digest.0);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for s in &self.samples {
            if s.len() != self.n {
                return Err(Error::Dimension { expected: self.n, got: s.len() });
            }
            push_f32s(&mut out, s);
        }
        Ok(seal(out))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = open_payload(bytes, REFERENCE_MAGIC)?;
        let n = r.usize()?;
        let count = r.usize()?;
        let digest = r.digest()?;
        let seed = r.u64()?;
        let mut samples = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            samples.push(r.f32s(n)?);
        }
        if r.pos != r.bytes.len() {
            return Err(Error::Format("trailing bytes after the last sample".into()));
        }
        Ok(Self { n, digest, seed, samples })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_new(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
