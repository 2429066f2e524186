//! The trainable restoration network `h_θ(Ã, Ãx_t, σ)`.
//!
//! The network sees three things, concatenated: the measured vector (scaled
//! by `1/√(σ² + σ_data²)`), an encoding of the operator itself, and a small
//! embedding of `log σ`. It always predicts all `n` coordinates of `x₀`,
//! including those the operator did not observe.
//!
//! Operator encodings:
//! - masks: the 0/1 diagonal, `n` values;
//! - Gaussian measurements: the `m·n` row-major entries followed by `m`
//!   row-validity bits.

mod checkpoint;
mod mlp;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corruption::Operator;
use crate::digest::Digest;
use crate::error::{Error, Result};

pub use checkpoint::CHECKPOINT_VERSION;
pub use mlp::BatchTrace;
use mlp::Layout;

/// Features produced by [`noise_embedding`].
pub const NOISE_FEATURES: usize = 5;

/// `[log σ / 4, sin(½ log σ), cos(½ log σ), sin(log σ), cos(log σ)]`.
pub fn noise_embedding(sigma: f64) -> [f64; NOISE_FEATURES] {
    let l = sigma.ln();
    [l / 4.0, (0.5 * l).sin(), (0.5 * l).cos(), l.sin(), l.cos()]
}

/// Which operator family the network is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorEncoding {
    Mask,
    Gaussian,
}

/// Network shape and conditioning contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub encoding: OperatorEncoding,
    /// Ambient dimension (network output size).
    pub n: usize,
    /// Number of measurement rows; equals `n` for masks.
    pub m: usize,
    pub hidden: Vec<usize>,
    pub sigma_data: f64,
}

impl ModelArch {
    pub fn for_masks(n: usize, hidden: Vec<usize>) -> Self {
        Self { encoding: OperatorEncoding::Mask, n, m: n, hidden, sigma_data: 0.5 }
    }

    pub fn for_gaussian(m: usize, n: usize, hidden: Vec<usize>) -> Self {
        Self { encoding: OperatorEncoding::Gaussian, n, m, hidden, sigma_data: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.encoding == OperatorEncoding::Mask && self.m != self.n {
            return Err(Error::Config("mask-conditioned models need m == n".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(())
    }

    pub fn operator_features(&self) -> usize {
        match self.encoding {
            OperatorEncoding::Mask => self.n,
            OperatorEncoding::Gaussian => self.m * self.n + self.m,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.m + self.operator_features() + NOISE_FEATURES
    }

    fn layout(&self) -> Layout {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim());
        dims.extend_from_slice(&self.hidden);
        dims.push(self.n);
        Layout::new(dims)
    }

    pub fn num_params(&self) -> usize {
        self.layout().num_params()
    }
}

/// A dense SiLU network with a linear output head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: ModelArch,
    layout: Layout,
    params: Vec<f64>,
    digest: Digest,
}

/// Single-sample activation record; pass it back to
/// [`DenoiserModel::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    inner: BatchTrace,
    obs_scale: f64,
}

impl DenoiserModel {
    /// Glorot-uniform hidden layers, zero biases, zero output head.
    pub fn new(arch: ModelArch, rng: &mut impl rand::Rng) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.num_params()];
        let offsets = layout.offsets();
        for &(w_off, b_off, inp, out) in &offsets[..offsets.len() - 1] {
            let bound = (6.0 / (inp + out) as f64).sqrt();
            for p in &mut params[w_off..b_off] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { arch, layout, params, digest: Digest::default() })
    }

    pub fn from_params(arch: ModelArch, params: Vec<f64>, digest: Digest) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.num_params() {
            return Err(Error::Dimension { expected: layout.num_params(), got: params.len() });
        }
        Ok(Self { arch, layout, params, digest })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    pub fn config_digest(&self) -> Digest {
        self.digest
    }

    pub fn set_config_digest(&mut self, digest: Digest) {
        self.digest = digest;
    }

    /// Compares the stamped digest with `expected`, warning on mismatch.
    pub fn check_digest(&self, expected: &Digest) -> bool {
        let ok = &self.digest == expected;
        if !ok {
            log::warn!(
                "checkpoint was trained under config {} but is used with {}",
                self.digest.short(),
                expected.short()
            );
        }
        ok
    }

    fn obs_scale(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.arch.sigma_data * self.arch.sigma_data).sqrt()
    }

    /// Writes the network input for one sample into `out`.
    pub fn encode_into(&self, op: &Operator, y: &[f64], sigma: f64, out: &mut [f64]) -> Result<()> {
        if op.dim() != self.arch.n {
            return Err(Error::Dimension { expected: self.arch.n, got: op.dim() });
        }
        if y.len() != self.arch.m {
            return Err(Error::Dimension { expected: self.arch.m, got: y.len() });
        }
        if out.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: out.len() });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::ZeroSigma(sigma));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser input"));
        }
        let scale = self.obs_scale(sigma);
        let (obs, rest) = out.split_at_mut(self.arch.m);
        for (o, &v) in obs.iter_mut().zip(y) {
            *o = v * scale;
        }
        let (enc, noise) = rest.split_at_mut(self.arch.operator_features());
        match (self.arch.encoding, op) {
            (OperatorEncoding::Mask, Operator::Mask(mask)) => {
                for (e, &v) in enc.iter_mut().zip(mask.as_slice()) {
                    *e = v as f64;
                }
            }
            (OperatorEncoding::Gaussian, Operator::Gaussian(g)) => {
                if g.m() != self.arch.m {
                    return Err(Error::Dimension { expected: self.arch.m, got: g.m() });
                }
                let (rows, bits) = enc.split_at_mut(g.m() * g.n());
                for r in 0..g.m() {
                    for c in 0..g.n() {
                        rows[r * g.n() + c] = g.rows()[(r, c)];
                    }
                }
                for (b, &v) in bits.iter_mut().zip(g.valid_rows()) {
                    *b = v as u8 as f64;
                }
            }
            _ => return Err(Error::Config("operator kind does not match the model encoding".into())),
        }
        noise.copy_from_slice(&noise_embedding(sigma));
        Ok(())
    }

    pub fn encode(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.input_dim()];
        self.encode_into(op, y, sigma, &mut out)?;
        Ok(out)
    }

    /// `h_θ(op, y, σ)`.
    pub fn forward(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.forward_traced(op, y, sigma)?.0)
    }

    pub fn forward_traced(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<(Vec<f64>, Trace)> {
        let input = DMatrix::from_vec(self.input_dim(), 1, self.encode(op, y, sigma)?);
        let inner = self.forward_batch(input)?;
        let out = inner.output().as_slice().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output"));
        }
        Ok((out, Trace { inner, obs_scale: self.obs_scale(sigma) }))
    }

    /// Gradient over all parameters of `⟨d_output, h_θ⟩` at the traced input.
    pub fn backward(&self, trace: &Trace, d_output: &[f64]) -> Result<Vec<f64>> {
        if d_output.len() != self.arch.n {
            return Err(Error::Dimension { expected: self.arch.n, got: d_output.len() });
        }
        let d = DMatrix::from_column_slice(self.arch.n, 1, d_output);
        self.backward_batch(&trace.inner, &d)
    }

    /// `(∂h/∂y)ᵀ v`: pulls an output-space vector back to the measurement.
    pub fn input_vjp(&self, trace: &Trace, v: &[f64]) -> Result<Vec<f64>> {
        self.check_trace(&trace.inner)?;
        if v.len() != self.arch.n {
            return Err(Error::Dimension { expected: self.arch.n, got: v.len() });
        }
        let d = DMatrix::from_column_slice(self.arch.n, 1, v);
        let (_, d_in) = mlp::backward(&self.layout, &self.params, &trace.inner, &d, true);
        let d_in = d_in.expect("input gradient requested");
        Ok(d_in.as_slice()[..self.arch.m].iter().map(|g| g * trace.obs_scale).collect())
    }

    /// Forward pass on encoded inputs (`input_dim × batch`).
    pub fn forward_batch(&self, input: DMatrix<f64>) -> Result<BatchTrace> {
        if input.nrows() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: input.nrows() });
        }
        Ok(mlp::forward(&self.layout, &self.params, input))
    }

    /// Gradient of `Σ_b ⟨d_output[:, b], output[:, b]⟩` over the parameters.
    pub fn backward_batch(&self, trace: &BatchTrace, d_output: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_trace(trace)?;
        if d_output.shape() != trace.output().shape() {
            return Err(Error::Dimension { expected: trace.output().len(), got: d_output.len() });
        }
        Ok(mlp::backward(&self.layout, &self.params, trace, d_output, false).0)
    }

    fn check_trace(&self, trace: &BatchTrace) -> Result<()> {
        if trace.num_params != self.params.len() || trace.input.nrows() != self.input_dim() {
            return Err(Error::StaleTrace(format!(
                "trace built for {} parameters / {} inputs, model has {} / {}",
                trace.num_params,
                trace.input.nrows(),
                self.params.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Evaluates many `(op, y, σ)` queries in one batched pass.
    pub fn forward_many(&self, queries: &[(&Operator, &[f64], f64)]) -> Result<Vec<Vec<f64>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let dim = self.input_dim();
        let mut input = DMatrix::zeros(dim, queries.len());
        for (b, (op, y, sigma)) in queries.iter().enumerate() {
            self.encode_into(op, y, *sigma, &mut input.as_mut_slice()[b * dim..(b + 1) * dim])?;
        }
        let trace = self.forward_batch(input)?;
        let out = trace.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output"));
        }
        Ok(out.column_iter().map(|c| c.as_slice().to_vec()).collect())
    }
}
