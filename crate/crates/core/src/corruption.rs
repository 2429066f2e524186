//! Linear corruption operators and the processes that draw them.
//!
//! A measurement operator `A` is either a diagonal 0/1 [`Mask`] (pixel
//! inpainting, random or block) or a dense [`GaussianMeasurement`]. A
//! [`CorruptionProcess`] samples `A`, and then builds the further-corrupted
//! operator `Ã` from it by erasing a little more information. The learner only
//! ever sees `Ã` as input while being scored through `A`.
//!
//! The second moment `E[AᵀA | Ã]` decides whether the ambient objective has
//! a unique minimiser; [`CorruptionProcess::conditional_second_moment`] gives
//! the closed form where one exists and
//! [`CorruptionProcess::estimate_second_moment`] a Monte Carlo estimate.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{bernoulli, standard_normal};

/// Lowest acceptance rate tolerated by rejection sampling of `A | Ã`.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-4;

/// Diagonal 0/1 measurement operator. `1` keeps a pixel, `0` erases it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    diag: Vec<u8>,
}

impl Mask {
    pub fn new(diag: Vec<u8>) -> Result<Self> {
        if let Some(v) = diag.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!("mask entries must be 0 or 1, found {v}")));
        }
        Ok(Self { diag })
    }

    /// The identity operator: every pixel observed.
    pub fn ones(n: usize) -> Self {
        Self { diag: vec![1; n] }
    }

    /// Nothing observed.
    pub fn zeros(n: usize) -> Self {
        Self { diag: vec![0; n] }
    }

    /// All ones except at `erased`.
    pub fn with_erased(n: usize, erased: &[usize]) -> Result<Self> {
        let mut diag = vec![1; n];
        for &i in erased {
            *diag
                .get_mut(i)
                .ok_or(Error::Dimension { expected: n, got: i + 1 })? = 0;
        }
        Ok(Self { diag })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.diag[i] == 1
    }

    pub fn observed_count(&self) -> usize {
        self.diag.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.diag
    }

    /// Indices of observed pixels, ascending.
    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.diag.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.len(), x.len())?;
        Ok(x.iter()
            .zip(&self.diag)
            .map(|(&v, &m)| if m == 1 { v } else { 0.0 })
            .collect())
    }

    /// Entrywise `self ≤ other`: nothing observed here is missing there.
    pub fn is_dominated_by(&self, other: &Mask) -> bool {
        self.len() == other.len() && self.diag.iter().zip(&other.diag).all(|(&a, &b)| a <= b)
    }

    /// `u32` little-endian length followed by one byte per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.len());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.diag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head: [u8; 4] = bytes
            .get(..4)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("mask: missing length prefix".into()))?;
        let n = u32::from_le_bytes(head) as usize;
        let body = &bytes[4..];
        if body.len() != n {
            return Err(Error::Format(format!(
                "mask: length prefix says {n} bytes, found {}",
                body.len()
            )));
        }
        Mask::new(body.to_vec())
    }
}

/// `m × n` operator whose rows are standard normal draws. A row zeroed by
/// further corruption is flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasurement {
    rows: DMatrix<f64>,
    valid: Vec<bool>,
}

impl GaussianMeasurement {
    /// Wraps `rows`; all-zero rows are flagged invalid.
    pub fn new(rows: DMatrix<f64>) -> Self {
        let valid = rows.row_iter().map(|r| r.iter().any(|&v| v != 0.0)).collect();
        Self { rows, valid }
    }

    pub fn from_row_slice(m: usize, n: usize, data: &[f64]) -> Result<Self> {
        check_dim(m * n, data.len())?;
        Ok(Self::new(DMatrix::from_row_slice(m, n, data)))
    }

    pub fn m(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn is_valid_row(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_rows(&self) -> &[bool] {
        &self.valid
    }

    pub fn zero_row(&mut self, i: usize) {
        self.rows.row_mut(i).fill(0.0);
        self.valid[i] = false;
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n(), x.len())?;
        let y = &self.rows * DVector::from_column_slice(x);
        Ok(y.as_slice().to_vec())
    }

    /// `u32` LE `m`, `u32` LE `n`, then the rows as row-major `f32` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.m() * self.n());
        out.extend_from_slice(&(self.m() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n() as u32).to_le_bytes());
        for r in 0..self.m() {
            for c in 0..self.n() {
                out.extend_from_slice(&(self.rows[(r, c)] as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("gaussian measurement: truncated header".into()));
        }
        let m = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * m * n {
            return Err(Error::Format(format!(
                "gaussian measurement: expected {} payload bytes for {m}x{n}, found {}",
                4 * m * n,
                body.len()
            )));
        }
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_row_slice(m, n, &data)
    }
}

/// A realised measurement operator.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Mask(Mask),
    Gaussian(GaussianMeasurement),
}

impl Operator {
    /// Ambient dimension `n`.
    pub fn dim(&self) -> usize {
        match self {
            Operator::Mask(m) => m.len(),
            Operator::Gaussian(g) => g.n(),
        }
    }

    /// Length of a measurement vector.
    pub fn out_dim(&self) -> usize {
        match self {
            Operator::Mask(m) => m.len(),
            Operator::Gaussian(g) => g.m(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Operator::Mask(m) => m.apply(x),
            Operator::Gaussian(g) => g.apply(x),
        }
    }

    /// `Aᵀ v` for a measurement-space vector `v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Operator::Mask(m) => m.apply(v),
            Operator::Gaussian(g) => {
                check_dim(g.m(), v.len())?;
                let out = g.rows.transpose() * DVector::from_column_slice(v);
                Ok(out.as_slice().to_vec())
            }
        }
    }

    /// `AᵀA` as a dense `n × n` matrix.
    pub fn gram(&self) -> DMatrix<f64> {
        match self {
            Operator::Mask(m) => {
                DMatrix::from_diagonal(&DVector::from_iterator(m.len(), m.diag.iter().map(|&v| v as f64)))
            }
            Operator::Gaussian(g) => g.rows.transpose() * &g.rows,
        }
    }

    /// Whether `self` could be a further corruption of `a`: masks must be
    /// entrywise smaller, Gaussian operators must keep a subset of `a`'s rows
    /// unchanged.
    pub fn is_dominated_by(&self, a: &Operator) -> bool {
        match (self, a) {
            (Operator::Mask(t), Operator::Mask(a)) => t.is_dominated_by(a),
            (Operator::Gaussian(t), Operator::Gaussian(a)) => {
                t.m() == a.m()
                    && t.n() == a.n()
                    && (0..t.m()).all(|i| !t.valid[i] || (a.valid[i] && t.rows.row(i) == a.rows.row(i)))
            }
            _ => false,
        }
    }

    pub fn as_mask(&self) -> Option<&Mask> {
        match self {
            Operator::Mask(m) => Some(m),
            Operator::Gaussian(_) => None,
        }
    }

    /// Rows that carry information, as an `r × n` matrix (`r` may be zero).
    pub fn reduced(&self) -> DMatrix<f64> {
        match self {
            Operator::Mask(m) => {
                let obs: Vec<usize> = m.observed().collect();
                DMatrix::from_fn(obs.len(), m.len(), |r, c| if obs[r] == c { 1.0 } else { 0.0 })
            }
            Operator::Gaussian(g) => {
                let keep: Vec<usize> = (0..g.m()).filter(|&i| g.valid[i]).collect();
                g.rows.select_rows(keep.iter())
            }
        }
    }

    /// Indices of measurement entries that carry information.
    pub fn informative_rows(&self) -> Vec<usize> {
        match self {
            Operator::Mask(m) => m.observed().collect(),
            Operator::Gaussian(g) => (0..g.m()).filter(|&i| g.valid[i]).collect(),
        }
    }
}

impl From<Mask> for Operator {
    fn from(m: Mask) -> Self {
        Operator::Mask(m)
    }
}

impl From<GaussianMeasurement> for Operator {
    fn from(g: GaussianMeasurement) -> Self {
        Operator::Gaussian(g)
    }
}

impl Operator {
    /// `Ã x` computed from `A x` alone, for `Ã` dominated by `self = A`.
    ///
    /// Masks multiply through; Gaussian operators keep the surviving rows of
    /// the measurement and zero the rest.
    pub fn remeasure(&self, atilde: &Operator, values: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.out_dim(), values.len())?;
        if !atilde.is_dominated_by(self) {
            return Err(Error::Contract("further-corrupted operator observes more than A".into()));
        }
        Ok(match atilde {
            Operator::Mask(t) => t.apply(values)?,
            Operator::Gaussian(t) => {
                values.iter().zip(&t.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect()
            }
        })
    }
}

/// One dataset record: the measurement `A x₀` together with `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub op: Operator,
    pub values: Vec<f64>,
}

impl Measurement {
    /// Measures `x0` through `op`.
    pub fn of(op: Operator, x0: &[f64]) -> Result<Self> {
        let values = op.apply(x0)?;
        Ok(Self { op, values })
    }
}

/// Grid geometry for block inpainting; vectors are `h × w × c` flattened
/// row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }
}

/// Distribution over `A` and over `Ã | A`.
#[derive(Debug, Clone, PartialEq)]
pub enum CorruptionProcess {
    /// Each pixel erased i.i.d. with probability `p`; each survivor further
    /// erased with probability `delta`.
    RandomInpainting { n: usize, p: f64, delta: f64 },
    /// One uniformly placed `block_size²` square missing in every channel;
    /// further corruption erases one more square of the same size that does
    /// not overlap missing pixels.
    BlockInpainting { shape: ImageShape, block_size: usize },
    /// `m` standard normal rows; further corruption zeroes `drop_rows`
    /// uniformly chosen surviving rows.
    Gaussian { m: usize, n: usize, drop_rows: usize },
}

/// Monte Carlo estimate of `E[AᵀA | Ã]`.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub mean: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    pub num_samples: usize,
    /// Fraction of proposals accepted; 1 for direct conditional sampling.
    pub acceptance_rate: f64,
}

impl MomentEstimate {
    /// Largest `|estimate − reference|` in units of standard error. Entries
    /// with zero standard error must match exactly (up to `1e-12`) or count
    /// as infinitely far.
    pub fn max_z_score(&self, reference: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for ((&m, &s), &r) in self.mean.iter().zip(self.std_error.iter()).zip(reference.iter()) {
            let diff = (m - r).abs();
            let z = if s > 0.0 {
                diff / s
            } else if diff <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
        worst
    }
}

/// Posterior probability that a pixel erased in `Ã` was observed in `A`
/// under random inpainting: `(1−p)δ / ((1−p)δ + p)`.
///
/// With `p = 0` every pixel was observed, so the value is 1 even when
/// `δ = 0` (the ratio is then `0/0`).
pub fn inpainting_keep_posterior(p: f64, delta: f64) -> f64 {
    if p == 0.0 {
        return 1.0;
    }
    let kept = (1.0 - p) * delta;
    kept / (kept + p)
}

impl CorruptionProcess {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CorruptionProcess::RandomInpainting { n, p, delta } => {
                if n == 0 {
                    return Err(Error::Config("inpainting dimension must be positive".into()));
                }
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!("erasure probability p={p} outside [0, 1)")));
                }
                if !(0.0..1.0).contains(&delta) {
                    return Err(Error::Config(format!("further-corruption delta={delta} outside [0, 1)")));
                }
            }
            CorruptionProcess::BlockInpainting { shape, block_size } => {
                if shape.is_empty() || block_size == 0 {
                    return Err(Error::Config("block inpainting needs a non-empty image and block".into()));
                }
                if block_size > shape.height || block_size > shape.width {
                    return Err(Error::Config(format!(
                        "block of side {block_size} does not fit a {}x{} image",
                        shape.height, shape.width
                    )));
                }
            }
            CorruptionProcess::Gaussian { m, n, drop_rows } => {
                if m == 0 || n == 0 {
                    return Err(Error::Config("gaussian measurements need m, n > 0".into()));
                }
                if drop_rows > m {
                    return Err(Error::Config(format!("cannot drop {drop_rows} of {m} rows")));
                }
            }
        }
        Ok(())
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        match self {
            CorruptionProcess::RandomInpainting { n, .. } => *n,
            CorruptionProcess::BlockInpainting { shape, .. } => shape.len(),
            CorruptionProcess::Gaussian { n, .. } => *n,
        }
    }

    /// Measurement dimension.
    pub fn out_dim(&self) -> usize {
        match self {
            CorruptionProcess::Gaussian { m, .. } => *m,
            _ => self.dim(),
        }
    }

    /// Draw `A ~ p(A)`.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Result<Operator> {
        self.validate()?;
        Ok(match *self {
            CorruptionProcess::RandomInpainting { n, p, .. } => {
                let diag = (0..n).map(|_| bernoulli(rng, 1.0 - p) as u8).collect();
                Operator::Mask(Mask { diag })
            }
            CorruptionProcess::BlockInpainting { shape, block_size } => {
                let row = rng.gen_range(0..=shape.height - block_size);
                let col = rng.gen_range(0..=shape.width - block_size);
                let mut diag = vec![1; shape.len()];
                erase_block(&mut diag, shape, block_size, row, col);
                Operator::Mask(Mask { diag })
            }
            CorruptionProcess::Gaussian { m, n, .. } => {
                let data = standard_normal(rng, m * n);
                Operator::Gaussian(GaussianMeasurement {
                    rows: DMatrix::from_row_slice(m, n, &data),
                    valid: vec![true; m],
                })
            }
        })
    }

    /// Draw `Ã ~ p(Ã | A)`.
    pub fn further_corrupt(&self, a: &Operator, rng: &mut impl rand::Rng) -> Result<Operator> {
        self.validate()?;
        check_dim(self.dim(), a.dim())?;
        match (self, a) {
            (CorruptionProcess::RandomInpainting { delta, .. }, Operator::Mask(mask)) => {
                let diag = mask
                    .diag
                    .iter()
                    .map(|&v| {
                        let keep = bernoulli(rng, 1.0 - delta);
                        v & keep as u8
                    })
                    .collect();
                Ok(Operator::Mask(Mask { diag }))
            }
            (CorruptionProcess::BlockInpainting { shape, block_size }, Operator::Mask(mask)) => {
                let placements = free_block_placements(mask, *shape, *block_size);
                if placements.is_empty() {
                    return Err(Error::Config(format!(
                        "no non-overlapping placement for a second {block_size}x{block_size} block"
                    )));
                }
                let (row, col) = placements[rng.gen_range(0..placements.len())];
                let mut diag = mask.diag.clone();
                erase_block(&mut diag, *shape, *block_size, row, col);
                Ok(Operator::Mask(Mask { diag }))
            }
            (CorruptionProcess::Gaussian { m, drop_rows, .. }, Operator::Gaussian(g)) => {
                check_dim(*m, g.m())?;
                let survivors: Vec<usize> = (0..g.m()).filter(|&i| g.valid[i]).collect();
                if survivors.len() < *drop_rows {
                    return Err(Error::Config(format!(
                        "cannot drop {drop_rows} rows, only {} survive",
                        survivors.len()
                    )));
                }
                let mut out = g.clone();
                for k in index::sample(rng, survivors.len(), *drop_rows) {
                    out.zero_row(survivors[k]);
                }
                Ok(Operator::Gaussian(out))
            }
            _ => Err(Error::Config("operator kind does not match the corruption process".into())),
        }
    }

    /// Draw `A` and then `Ã | A`; returns `(A, Ã)`.
    pub fn sample_pair(&self, rng: &mut impl rand::Rng) -> Result<(Operator, Operator)> {
        let a = self.sample(rng)?;
        let t = self.further_corrupt(&a, rng)?;
        Ok((a, t))
    }

    /// Closed-form `E[AᵀA | Ã]`.
    ///
    /// Random inpainting gives a diagonal with 1 where `Ã` observes and
    /// [`inpainting_keep_posterior`] elsewhere. Gaussian measurements give
    /// `ÃᵀÃ + k·I` where `k` counts the zeroed rows of `Ã`, each of which
    /// is an independent fresh draw under `A | Ã`. Block inpainting has no
    /// simple closed form and returns [`Error::NoClosedForm`].
    pub fn conditional_second_moment(&self, atilde: &Operator) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), atilde.dim())?;
        match (self, atilde) {
            (CorruptionProcess::RandomInpainting { p, delta, .. }, Operator::Mask(t)) => {
                let q = inpainting_keep_posterior(*p, *delta);
                let diag = DVector::from_iterator(t.len(), t.diag.iter().map(|&v| if v == 1 { 1.0 } else { q }));
                Ok(DMatrix::from_diagonal(&diag))
            }
            (CorruptionProcess::Gaussian { n, .. }, Operator::Gaussian(t)) => {
                let zeroed = t.valid.iter().filter(|&&v| !v).count() as f64;
                Ok(atilde.gram() + DMatrix::identity(*n, *n) * zeroed)
            }
            (CorruptionProcess::BlockInpainting { .. }, Operator::Mask(_)) => {
                Err(Error::NoClosedForm("block inpainting"))
            }
            _ => Err(Error::Config("operator kind does not match the corruption process".into())),
        }
    }

    /// Monte Carlo `E[AᵀA | Ã]` with per-entry standard errors.
    ///
    /// Random inpainting and Gaussian measurements sample `A | Ã` directly;
    /// block inpainting uses rejection against the forward process and fails
    /// with [`Error::Infeasible`] when the acceptance rate drops below
    /// [`MIN_ACCEPTANCE_RATE`].
    pub fn estimate_second_moment(
        &self,
        atilde: &Operator,
        num_samples: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<MomentEstimate> {
        if num_samples < 100 {
            return Err(Error::TooFewSamples { need: 100, got: num_samples });
        }
        self.validate()?;
        check_dim(self.dim(), atilde.dim())?;
        let n = self.dim();
        let mut acc = MomentAccumulator::new(n);
        let mut acceptance_rate = 1.0;
        match (self, atilde) {
            (CorruptionProcess::RandomInpainting { p, delta, .. }, Operator::Mask(t)) => {
                let q = inpainting_keep_posterior(*p, *delta);
                let mut diag = vec![0.0; n];
                for _ in 0..num_samples {
                    for (d, &v) in diag.iter_mut().zip(&t.diag) {
                        *d = if v == 1 || bernoulli(rng, q) { 1.0 } else { 0.0 };
                    }
                    acc.push_diagonal(&diag);
                }
            }
            (CorruptionProcess::Gaussian { .. }, Operator::Gaussian(t)) => {
                let base = atilde.gram();
                let zeroed: Vec<usize> = (0..t.m()).filter(|&i| !t.valid[i]).collect();
                for _ in 0..num_samples {
                    let mut sample = base.clone();
                    for _ in &zeroed {
                        let b = DVector::from_vec(standard_normal(rng, n));
                        sample.ger(1.0, &b, &b, 1.0);
                    }
                    acc.push_dense(&sample);
                }
            }
            (CorruptionProcess::BlockInpainting { .. }, Operator::Mask(_)) => {
                let max_attempts = (num_samples as f64 / MIN_ACCEPTANCE_RATE).ceil() as usize;
                let pilot = 1000.max(num_samples / 10);
                let mut attempts = 0usize;
                let mut accepted = 0usize;
                while accepted < num_samples {
                    let (a, t) = self.sample_pair(rng)?;
                    attempts += 1;
                    if &t == atilde {
                        accepted += 1;
                        let diag: Vec<f64> = a.as_mask().unwrap().diag.iter().map(|&v| v as f64).collect();
                        acc.push_diagonal(&diag);
                    }
                    let rate = accepted as f64 / attempts as f64;
                    if (attempts == pilot || attempts >= max_attempts) && rate < MIN_ACCEPTANCE_RATE {
                        return Err(Error::Infeasible { rate, floor: MIN_ACCEPTANCE_RATE });
                    }
                }
                acceptance_rate = accepted as f64 / attempts as f64;
            }
            _ => return Err(Error::Config("operator kind does not match the corruption process".into())),
        }
        let (mean, std_error) = acc.finish();
        Ok(MomentEstimate { mean, std_error, num_samples, acceptance_rate })
    }
}

struct MomentAccumulator {
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
    count: usize,
}

impl MomentAccumulator {
    fn new(n: usize) -> Self {
        Self { sum: DMatrix::zeros(n, n), sum_sq: DMatrix::zeros(n, n), count: 0 }
    }

    fn push_diagonal(&mut self, diag: &[f64]) {
        for (i, &v) in diag.iter().enumerate() {
            self.sum[(i, i)] += v;
            self.sum_sq[(i, i)] += v * v;
        }
        self.count += 1;
    }

    fn push_dense(&mut self, m: &DMatrix<f64>) {
        self.sum += m;
        self.sum_sq += m.component_mul(m);
        self.count += 1;
    }

    fn finish(self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.count as f64;
        let mean = &self.sum / n;
        let se = DMatrix::from_fn(mean.nrows(), mean.ncols(), |r, c| {
            let mu = mean[(r, c)];
            let var = ((self.sum_sq[(r, c)] - n * mu * mu) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        });
        (mean, se)
    }
}

fn erase_block(diag: &mut [u8], shape: ImageShape, size: usize, row: usize, col: usize) {
    for r in row..row + size {
        for c in col..col + size {
            for ch in 0..shape.channels {
                diag[shape.index(r, c, ch)] = 0;
            }
        }
    }
}

fn free_block_placements(mask: &Mask, shape: ImageShape, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for row in 0..=shape.height - size {
        for col in 0..=shape.width - size {
            let free = (row..row + size)
                .all(|r| (col..col + size).all(|c| (0..shape.channels).all(|ch| mask.diag[shape.index(r, c, ch)] == 1)));
            if free {
                out.push((row, col));
            }
        }
    }
    out
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn inpaint(n: usize, p: f64, delta: f64) -> CorruptionProcess {
        CorruptionProcess::RandomInpainting { n, p, delta }
    }

    /// `P(A_ii = 1 | Ã_ii = 0)` by enumerating the four joint outcomes.
    fn keep_posterior_by_enumeration(p: f64, delta: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for a in [0u8, 1] {
            for b in [0u8, 1] {
                let pa = if a == 1 { 1.0 - p } else { p };
                let pb = if b == 1 { 1.0 - delta } else { delta };
                if a * b == 0 {
                    den += pa * pb;
                    if a == 1 {
                        num += pa * pb;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn zero_erasure_gives_identity() {
        let mut rng = stream(1, 0);
        let a = inpaint(50, 0.0, 0.1).sample(&mut rng).unwrap();
        assert_eq!(a, Operator::Mask(Mask::ones(50)));
    }

    #[test]
    fn observed_fraction_matches_binomial() {
        let p = 0.999;
        let n = 10_000;
        let mut rng = stream(2, 0);
        let mut total = 0usize;
        let reps = 50;
        for _ in 0..reps {
            total += inpaint(n, p, 0.1).sample(&mut rng).unwrap().as_mask().unwrap().observed_count();
        }
        let trials = (n * reps) as f64;
        let frac = total as f64 / trials;
        let se = ((1.0 - p) * p / trials).sqrt();
        assert!((frac - (1.0 - p)).abs() <= 3.0 * se, "frac {frac}, se {se}");
    }

    #[test]
    fn gaussian_rows_have_chi_norms() {
        let mut rng = stream(3, 0);
        let proc = CorruptionProcess::Gaussian { m: 3, n: 5, drop_rows: 1 };
        let a = proc.sample(&mut rng).unwrap();
        let Operator::Gaussian(g) = &a else { panic!() };
        assert_eq!((g.m(), g.n()), (3, 5));
        assert!(g.rows().iter().all(|v| v.is_finite()));
        // squared row norms are chi²(5): mean 5, sd √10
        let mut sq = 0.0;
        let reps = 2000;
        for _ in 0..reps {
            let Operator::Gaussian(g) = proc.sample(&mut rng).unwrap() else { panic!() };
            sq += g.rows().row_iter().map(|r| r.norm_squared()).sum::<f64>();
        }
        let mean = sq / (3 * reps) as f64;
        let se = (10.0 / (3 * reps) as f64).sqrt();
        assert!((mean - 5.0).abs() < 3.0 * se, "mean squared norm {mean}");
    }

    #[test]
    fn block_larger_than_image_is_config_error() {
        let proc = CorruptionProcess::BlockInpainting {
            shape: ImageShape { height: 4, width: 4, channels: 1 },
            block_size: 5,
        };
        assert!(matches!(proc.sample(&mut stream(0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn block_without_room_for_second_block_fails() {
        let proc = CorruptionProcess::BlockInpainting {
            shape: ImageShape { height: 3, width: 3, channels: 2 },
            block_size: 2,
        };
        let mut rng = stream(4, 0);
        let a = proc.sample(&mut rng).unwrap();
        assert_eq!(a.as_mask().unwrap().observed_count(), 18 - 8);
        assert!(matches!(proc.further_corrupt(&a, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn block_further_corruption_adds_disjoint_block() {
        let shape = ImageShape { height: 6, width: 6, channels: 3 };
        let proc = CorruptionProcess::BlockInpainting { shape, block_size: 2 };
        let mut rng = stream(5, 0);
        for _ in 0..50 {
            let (a, t) = proc.sample_pair(&mut rng).unwrap();
            assert!(t.is_dominated_by(&a));
            let lost = a.as_mask().unwrap().observed_count() - t.as_mask().unwrap().observed_count();
            assert_eq!(lost, 2 * 2 * 3);
        }
    }

    #[test]
    fn zero_delta_leaves_operator_unchanged() {
        let mut rng = stream(6, 0);
        let proc = inpaint(100, 0.3, 0.0);
        let a = proc.sample(&mut rng).unwrap();
        assert_eq!(proc.further_corrupt(&a, &mut rng).unwrap(), a);
    }

    #[test]
    fn further_corruption_survival_is_one_minus_delta() {
        let n = 10_000;
        let delta = 0.1;
        let proc = inpaint(n, 0.0, delta);
        let a = Operator::Mask(Mask::ones(n));
        let mut rng = stream(7, 0);
        let t = proc.further_corrupt(&a, &mut rng).unwrap();
        let frac = t.as_mask().unwrap().observed_count() as f64 / n as f64;
        let se = (delta * (1.0 - delta) / n as f64).sqrt();
        assert!((frac - 0.9).abs() <= 3.0 * se, "{frac}");
    }

    #[test]
    fn joint_survival_is_product() {
        let (p, delta) = (0.3, 0.2);
        let n = 20_000;
        let proc = inpaint(n, p, delta);
        let mut rng = stream(8, 0);
        let (_, t) = proc.sample_pair(&mut rng).unwrap();
        let frac = t.as_mask().unwrap().observed_count() as f64 / n as f64;
        let expect = (1.0 - p) * (1.0 - delta);
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((frac - expect).abs() <= 3.0 * se);
    }

    #[test]
    fn gaussian_further_corruption_zeroes_one_row() {
        let proc = CorruptionProcess::Gaussian { m: 4, n: 3, drop_rows: 1 };
        let mut rng = stream(9, 0);
        let (a, t) = proc.sample_pair(&mut rng).unwrap();
        let (Operator::Gaussian(ga), Operator::Gaussian(gt)) = (&a, &t) else { panic!() };
        let zero_rows: Vec<usize> = (0..4).filter(|&i| gt.rows().row(i).iter().all(|&v| v == 0.0)).collect();
        assert_eq!(zero_rows.len(), 1);
        assert!(!gt.is_valid_row(zero_rows[0]));
        for i in (0..4).filter(|i| *i != zero_rows[0]) {
            assert_eq!(ga.rows().row(i), gt.rows().row(i));
        }
    }

    #[test]
    fn gaussian_dropped_row_is_uniform() {
        let proc = CorruptionProcess::Gaussian { m: 4, n: 2, drop_rows: 1 };
        let mut rng = stream(10, 0);
        let mut counts = [0usize; 4];
        let reps = 8000;
        for _ in 0..reps {
            let Operator::Gaussian(t) = proc.sample_pair(&mut rng).unwrap().1 else { panic!() };
            counts[(0..4).find(|&i| !t.is_valid_row(i)).unwrap()] += 1;
        }
        let se = (0.25 * 0.75 * reps as f64).sqrt();
        for c in counts {
            assert!((c as f64 - reps as f64 / 4.0).abs() < 4.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn apply_examples() {
        let id = Operator::Mask(Mask::ones(3));
        assert_eq!(id.apply(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        let m = Operator::Mask(Mask::new(vec![1, 0, 1]).unwrap());
        assert_eq!(m.apply(&[2.0, 5.0, -3.0]).unwrap(), vec![2.0, 0.0, -3.0]);
        let g = Operator::Gaussian(GaussianMeasurement::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]).unwrap());
        assert_eq!(g.apply(&[3.0, 4.0]).unwrap(), vec![3.0, 8.0]);
        assert!(matches!(m.apply(&[1.0]), Err(Error::Dimension { expected: 3, got: 1 })));
    }

    #[test]
    fn q_matches_enumeration() {
        let q = inpainting_keep_posterior(0.8, 0.1);
        assert!((q - keep_posterior_by_enumeration(0.8, 0.1)).abs() < 1e-15);
        assert!((q - 0.02 / 0.82).abs() < 1e-15);
        assert!((q - 0.024390).abs() < 1e-6);
        assert_eq!(inpainting_keep_posterior(0.0, 0.3), 1.0);
        assert!((keep_posterior_by_enumeration(0.0, 0.3) - 1.0).abs() < 1e-15);
        for &p in &[0.2, 0.5, 0.8] {
            for &d in &[0.05, 0.1, 0.3] {
                assert!((inpainting_keep_posterior(p, d) - keep_posterior_by_enumeration(p, d)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn closed_form_gaussian_moment() {
        let proc = CorruptionProcess::Gaussian { m: 3, n: 4, drop_rows: 1 };
        let mut rng = stream(11, 0);
        let (_, t) = proc.sample_pair(&mut rng).unwrap();
        let m = proc.conditional_second_moment(&t).unwrap();
        let expect = t.gram() + DMatrix::identity(4, 4);
        assert_eq!(m, expect);
        let eig = m.symmetric_eigenvalues();
        assert!(eig.min() >= 1.0 - 1e-12);
    }

    #[test]
    fn block_moment_has_no_closed_form() {
        let shape = ImageShape { height: 4, width: 4, channels: 1 };
        let proc = CorruptionProcess::BlockInpainting { shape, block_size: 2 };
        let (_, t) = proc.sample_pair(&mut stream(12, 0)).unwrap();
        assert!(matches!(proc.conditional_second_moment(&t), Err(Error::NoClosedForm(_))));
    }

    #[test]
    fn block_moment_by_rejection() {
        let shape = ImageShape { height: 5, width: 5, channels: 1 };
        let proc = CorruptionProcess::BlockInpainting { shape, block_size: 2 };
        let mut rng = stream(13, 0);
        let (_, t) = proc.sample_pair(&mut rng).unwrap();
        let est = proc.estimate_second_moment(&t, 2000, &mut rng).unwrap();
        assert!(est.acceptance_rate > MIN_ACCEPTANCE_RATE);
        let tm = t.as_mask().unwrap();
        for i in 0..25 {
            let v = est.mean[(i, i)];
            if tm.is_observed(i) {
                assert_eq!(v, 1.0);
            } else {
                // exactly one of the two erased blocks was the original one
                assert!(v > 0.2 && v < 0.8, "entry {i}: {v}");
            }
        }
    }

    #[test]
    fn rejection_floor_is_reported() {
        let shape = ImageShape { height: 30, width: 30, channels: 1 };
        let proc = CorruptionProcess::BlockInpainting { shape, block_size: 1 };
        let mut rng = stream(14, 0);
        let (_, t) = proc.sample_pair(&mut rng).unwrap();
        match proc.estimate_second_moment(&t, 100, &mut rng) {
            Err(Error::Infeasible { rate, .. }) => assert!(rate < MIN_ACCEPTANCE_RATE),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn estimate_needs_enough_samples() {
        let proc = inpaint(3, 0.5, 0.5);
        let t = Operator::Mask(Mask::zeros(3));
        assert!(matches!(
            proc.estimate_second_moment(&t, 99, &mut stream(0, 0)),
            Err(Error::TooFewSamples { need: 100, got: 99 })
        ));
    }

    #[test]
    fn inpainting_moment_estimate() {
        let proc = inpaint(6, 0.5, 0.5);
        let t = Operator::Mask(Mask::new(vec![1, 0, 0, 1, 0, 1]).unwrap());
        let est = proc.estimate_second_moment(&t, 100_000, &mut stream(15, 0)).unwrap();
        let q = keep_posterior_by_enumeration(0.5, 0.5);
        assert!((q - 1.0 / 3.0).abs() < 1e-15);
        let reference = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, q, q, 1.0, q, 1.0]));
        assert!(est.max_z_score(&reference) <= 3.0);
    }

    #[test]
    fn zero_delta_estimate_is_exact() {
        let proc = inpaint(5, 0.4, 0.0);
        let mut rng = stream(16, 0);
        let (_, t) = proc.sample_pair(&mut rng).unwrap();
        let est = proc.estimate_second_moment(&t, 500, &mut rng).unwrap();
        assert_eq!(est.mean, t.gram());
        assert!(est.std_error.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn gaussian_moment_estimate() {
        let proc = CorruptionProcess::Gaussian { m: 3, n: 4, drop_rows: 1 };
        let mut rng = stream(17, 0);
        let (_, t) = proc.sample_pair(&mut rng).unwrap();
        let est = proc.estimate_second_moment(&t, 10_000, &mut rng).unwrap();
        let closed = proc.conditional_second_moment(&t).unwrap();
        assert!(est.max_z_score(&closed) <= 3.5, "{}", est.max_z_score(&closed));
    }

    #[test]
    fn serialization_round_trips() {
        let m = Mask::new(vec![1, 0, 0, 1, 1]).unwrap();
        assert_eq!(Mask::from_bytes(&m.to_bytes()).unwrap(), m);
        assert_eq!(&m.to_bytes()[..4], &5u32.to_le_bytes());
        assert!(Mask::from_bytes(&m.to_bytes()[..6]).is_err());
        assert!(Mask::new(vec![0, 2]).is_err());

        let mut g = GaussianMeasurement::from_row_slice(2, 3, &[0.5, -1.25, 2.0, 0.0, 3.0, -0.75]).unwrap();
        g.zero_row(1);
        let back = GaussianMeasurement::from_bytes(&g.to_bytes()).unwrap();
        assert_eq!(back, g);
        assert!(!back.is_valid_row(1));
    }

    proptest! {
        #[test]
        fn masks_are_idempotent(diag in proptest::collection::vec(0u8..2, 1..40), seed in any::<u64>()) {
            let m = Mask::new(diag).unwrap();
            let x = standard_normal(&mut stream(seed, 0), m.len());
            let once = m.apply(&x).unwrap();
            prop_assert_eq!(m.apply(&once).unwrap(), once);
        }

        #[test]
        fn further_corruption_never_resurrects(p in 0.0..0.95f64, delta in 0.0..0.95f64, seed in any::<u64>()) {
            let proc = inpaint(32, p, delta);
            let mut rng = stream(seed, 1);
            let (a, t) = proc.sample_pair(&mut rng).unwrap();
            prop_assert!(t.is_dominated_by(&a));
            let x = standard_normal(&mut rng, 32);
            prop_assert_eq!(t.apply(&x).unwrap(), t.apply(&a.apply(&x).unwrap()).unwrap());
        }

        #[test]
        fn gaussian_survivors_are_rows_of_a(m in 1usize..6, n in 1usize..5, seed in any::<u64>()) {
            let proc = CorruptionProcess::Gaussian { m, n, drop_rows: 1 };
            let (a, t) = proc.sample_pair(&mut stream(seed, 2)).unwrap();
            prop_assert!(t.is_dominated_by(&a));
        }

        #[test]
        fn remeasure_matches_direct_measurement(gauss in any::<bool>(), seed in any::<u64>()) {
            let proc = if gauss {
                CorruptionProcess::Gaussian { m: 5, n: 4, drop_rows: 2 }
            } else {
                inpaint(4, 0.4, 0.3)
            };
            let mut rng = stream(seed, 4);
            let (a, t) = proc.sample_pair(&mut rng).unwrap();
            let x = standard_normal(&mut rng, 4);
            let direct = t.apply(&x).unwrap();
            let via = a.remeasure(&t, &a.apply(&x).unwrap()).unwrap();
            for (u, v) in direct.iter().zip(&via) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }

        #[test]
        fn gaussian_closed_form_is_coercive(seed in any::<u64>()) {
            let proc = CorruptionProcess::Gaussian { m: 4, n: 6, drop_rows: 1 };
            let mut rng = stream(seed, 3);
            let (_, t) = proc.sample_pair(&mut rng).unwrap();
            let mm = proc.conditional_second_moment(&t).unwrap();
            let v = DVector::from_vec(standard_normal(&mut rng, 6));
            let quad = (v.transpose() * &mm * &v)[(0, 0)];
            prop_assert!(quad >= v.norm_squared() * (1.0 - 1e-12));
        }
    }
}
