//! Objectives and the optimisation loop.
//!
//! Every objective scores the restorer through the operator `A` that
//! produced a record: `½‖A h − A x₀‖²`. They differ in what the network sees.
//!
//! - [`Objective::Ambient`]: the further-corrupted `Ã(x₀ + σ η)` with `Ã`
//!   redrawn from `p(Ã | A)` at each visit.
//! - [`Objective::Naive`]: `A(x₀ + σ η)`, so coordinates `A` never observes
//!   are never penalised.
//! - [`Objective::Clean`]: full observation; records must come from the
//!   identity operator.
//!
//! The loss functions only ever receive `A x₀`, never `x₀`.

mod optim;
pub mod tabular;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionProcess, Measurement, Operator};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::oracle::DataDistribution;
use crate::rng::{standard_normal, stream};
use crate::schedule::NoiseSchedule;

pub use optim::{clip_grad_norm, Adam, OptimizerSpec};

/// RNG stream used by the training loop for shuffling and per-visit draws.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Ambient,
    Naive,
    Clean,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ambient" => Ok(Objective::Ambient),
            "naive" => Ok(Objective::Naive),
            "clean" => Ok(Objective::Clean),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

/// One visit of a record: the record itself, the further-corrupted operator
/// drawn for this visit, the noise level and the full-length noise draw.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub record: &'a Measurement,
    pub atilde: &'a Operator,
    pub sigma: f64,
    pub eta: &'a [f64],
}

/// Batch-mean loss and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `½‖A h − A x₀‖²` for one restoration `h`.
pub fn sample_loss(a: &Operator, measured: &[f64], h: &[f64]) -> Result<f64> {
    let ah = a.apply(h)?;
    if ah.len() != measured.len() {
        return Err(Error::Dimension { expected: ah.len(), got: measured.len() });
    }
    Ok(0.5 * ah.iter().zip(measured).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
}

fn observed_only(record: &Measurement) -> bool {
    match &record.op {
        Operator::Mask(m) => record.values.iter().enumerate().all(|(i, &v)| m.is_observed(i) || v == 0.0),
        Operator::Gaussian(g) => record.values.iter().enumerate().all(|(i, &v)| g.is_valid_row(i) || v == 0.0),
    }
}

fn is_identity(op: &Operator) -> bool {
    matches!(op, Operator::Mask(m) if m.observed_count() == m.len())
}

/// The operator the network is conditioned on under `objective`.
fn input_operator<'a>(objective: Objective, ex: &Example<'a>) -> Result<&'a Operator> {
    match objective {
        Objective::Ambient => {
            if !ex.atilde.is_dominated_by(&ex.record.op) {
                return Err(Error::Contract("Ã observes coordinates that A erased".into()));
            }
            Ok(ex.atilde)
        }
        Objective::Naive => Ok(&ex.record.op),
        Objective::Clean => {
            if !is_identity(&ex.record.op) {
                return Err(Error::Contract("the clean objective needs fully observed records".into()));
            }
            Ok(&ex.record.op)
        }
    }
}

/// Loss and gradient of `objective` averaged over `batch`.
pub fn objective_loss(model: &DenoiserModel, objective: Objective, batch: &[Example]) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n = model.arch().n;
    let dim = model.input_dim();
    let mut input = DMatrix::zeros(dim, batch.len());
    let mut ops = Vec::with_capacity(batch.len());
    for (b, ex) in batch.iter().enumerate() {
        debug_assert!(observed_only(ex.record), "record carries values outside A's support");
        if ex.eta.len() != n {
            return Err(Error::Dimension { expected: n, got: ex.eta.len() });
        }
        let op = input_operator(objective, ex)?;
        let mut y = ex.record.op.remeasure(op, &ex.record.values)?;
        for (v, e) in y.iter_mut().zip(op.apply(ex.eta)?) {
            *v += ex.sigma * e;
        }
        model.encode_into(op, &y, ex.sigma, &mut input.as_mut_slice()[b * dim..(b + 1) * dim])?;
        ops.push(op);
    }
    let trace = model.forward_batch(input)?;
    let out = trace.output();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut d_out = DMatrix::zeros(n, batch.len());
    for (b, ex) in batch.iter().enumerate() {
        let h = out.column(b);
        let a = &ex.record.op;
        let mut resid = a.apply(h.as_slice())?;
        for (r, &v) in resid.iter_mut().zip(&ex.record.values) {
            *r -= v;
        }
        loss += 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
        let back = a.apply_transpose(&resid)?;
        for (d, g) in d_out.column_mut(b).iter_mut().zip(back) {
            *d = g * scale;
        }
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grad = model.backward_batch(&trace, &d_out)?;
    Ok(LossGrad { loss, grad })
}

/// The further-corruption objective.
pub fn ambient_loss(model: &DenoiserModel, batch: &[Example]) -> Result<LossGrad> {
    objective_loss(model, Objective::Ambient, batch)
}

/// The baseline that conditions on `A` itself; `atilde` is ignored.
pub fn naive_loss(model: &DenoiserModel, batch: &[Example]) -> Result<LossGrad> {
    objective_loss(model, Objective::Naive, batch)
}

/// Ordinary denoising on fully observed records.
pub fn clean_loss(model: &DenoiserModel, batch: &[Example]) -> Result<LossGrad> {
    objective_loss(model, Objective::Clean, batch)
}

/// A fixed set of `(Ã, y, σ)` queries with their exact posterior means.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub queries: Vec<(Operator, Vec<f64>, f64)>,
    pub targets: Vec<Vec<f64>>,
}

impl HeldOut {
    /// `count` queries drawn from the forward process, cycling through
    /// `sigmas`.
    pub fn build(
        dist: &DataDistribution,
        process: &CorruptionProcess,
        sigmas: &[f64],
        count: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Config("held-out set needs at least one noise level".into()));
        }
        let mut queries = Vec::with_capacity(count);
        let mut targets = Vec::with_capacity(count);
        for i in 0..count {
            let sigma = sigmas[i % sigmas.len()];
            let x0 = dist.sample(rng);
            let (_, atilde) = process.sample_pair(rng)?;
            let eta = standard_normal(rng, x0.len());
            let xt: Vec<f64> = x0.iter().zip(&eta).map(|(x, e)| x + sigma * e).collect();
            let y = atilde.apply(&xt)?;
            targets.push(dist.posterior_mean(&atilde, &y, sigma)?);
            queries.push((atilde, y, sigma));
        }
        Ok(Self { queries, targets })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// `mean ‖h − o‖ / mean ‖o‖` over the set, for any restorer `h`.
    pub fn relative_gap_with(&self, mut h: impl FnMut(&Operator, &[f64], f64) -> Result<Vec<f64>>) -> Result<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((op, y, sigma), target) in self.queries.iter().zip(&self.targets) {
            let out = h(op, y, *sigma)?;
            num += out.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            den += target.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Ok(num / den)
    }

    /// [`relative_gap_with`](Self::relative_gap_with) for a network,
    /// evaluated in one batch.
    pub fn relative_gap(&self, model: &DenoiserModel) -> Result<f64> {
        let queries: Vec<(&Operator, &[f64], f64)> =
            self.queries.iter().map(|(op, y, s)| (op, y.as_slice(), *s)).collect();
        let outs = model.forward_many(&queries)?;
        let mut it = outs.into_iter();
        self.relative_gap_with(|_, _, _| Ok(it.next().expect("one output per query")))
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    /// Mean batch loss since the previous row.
    pub loss: f64,
    /// Pre-clip gradient norm of the last step.
    pub grad_norm: f64,
    pub oracle_gap: Option<f64>,
    pub wall_ms: u64,
}

/// Writes `step,loss,grad_norm,oracle_gap,wall_ms` rows; a missing gap is
/// left empty.
pub fn write_metrics_csv(rows: &[MetricRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,loss,grad_norm,oracle_gap,wall_ms")?;
    for r in rows {
        let gap = r.oracle_gap.map(|g| g.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, r.grad_norm, gap, r.wall_ms)?;
    }
    Ok(())
}

/// Everything the loop needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub records: &'a [Measurement],
    pub process: &'a CorruptionProcess,
    pub schedule: &'a NoiseSchedule,
    pub optimizer: &'a OptimizerSpec,
    pub objective: Objective,
    pub seed: u64,
    pub held_out: Option<&'a HeldOut>,
    pub checkpoint_dir: Option<&'a Path>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Name of the checkpoint written for `step`.
pub fn checkpoint_name(step: usize) -> String {
    format!("step-{step:08}.ckpt")
}

/// Runs `setup.optimizer.steps` Adam steps on `model`.
///
/// Records are visited in a fresh random order each epoch; at every visit
/// `Ã`, `σ` and `η` are redrawn while `(A x₀, A)` stays fixed. The result is
/// a deterministic function of the model, the setup and the seed.
///
/// A non-finite loss, gradient or parameter aborts with
/// [`Error::Diverged`]; when a checkpoint directory is set the last finite
/// parameters are saved there first.
pub fn train(model: &mut DenoiserModel, setup: &TrainSetup) -> Result<TrainReport> {
    let spec = setup.optimizer;
    spec.validate()?;
    setup.schedule.validate()?;
    setup.process.validate()?;
    if setup.records.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = setup.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let n = model.arch().n;
    let mut rng = stream(setup.seed, TRAIN_STREAM);
    let mut adam = Adam::new(model.num_params(), spec);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..setup.records.len()).collect();
    let mut cursor = order.len();
    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    let started = Instant::now();
    let mut backup = model.params().to_vec();

    for step in 1..=spec.steps {
        let mut picks = Vec::with_capacity(spec.batch_size);
        for _ in 0..spec.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let mut draws = Vec::with_capacity(picks.len());
        for &i in &picks {
            let record = &setup.records[i];
            let atilde = match setup.objective {
                Objective::Ambient => setup.process.further_corrupt(&record.op, &mut rng)?,
                _ => record.op.clone(),
            };
            let sigma = setup.schedule.sample_sigma(&mut rng);
            let eta = standard_normal(&mut rng, n);
            draws.push((atilde, sigma, eta));
        }
        let batch: Vec<Example> = picks
            .iter()
            .zip(&draws)
            .map(|(&i, (atilde, sigma, eta))| Example { record: &setup.records[i], atilde, sigma: *sigma, eta })
            .collect();

        let lg = match objective_loss(model, setup.objective, &batch) {
            Ok(lg) => lg,
            Err(Error::NonFinite(_)) => return Err(diverged(model, setup, step)),
            Err(e) => return Err(e),
        };
        let mut grad = lg.grad;
        let grad_norm = clip_grad_norm(&mut grad, spec.clip_max_norm);
        if !grad_norm.is_finite() {
            return Err(diverged(model, setup, step));
        }
        backup.copy_from_slice(model.params());
        adam.update(model.params_mut(), &grad, spec.lr_at(step));
        if model.params().iter().any(|p| !p.is_finite()) {
            model.params_mut().copy_from_slice(&backup);
            return Err(diverged(model, setup, step));
        }

        window_loss += lg.loss;
        window_len += 1;
        if step % spec.log_every == 0 || step == spec.steps {
            let oracle_gap = setup.held_out.map(|h| h.relative_gap(model)).transpose()?;
            let row = MetricRow {
                step,
                loss: window_loss / window_len as f64,
                grad_norm,
                oracle_gap,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            log::info!(
                "step {step}: loss {:.5} grad_norm {:.4}{}",
                row.loss,
                row.grad_norm,
                oracle_gap.map(|g| format!(" oracle_gap {g:.4}")).unwrap_or_default()
            );
            report.metrics.push(row);
            window_loss = 0.0;
            window_len = 0;
        }
        if let Some(dir) = setup.checkpoint_dir {
            if spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0 {
                let path = dir.join(checkpoint_name(step));
                model.save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    Ok(report)
}

fn diverged(model: &DenoiserModel, setup: &TrainSetup, step: usize) -> Error {
    let last_good = setup.checkpoint_dir.and_then(|dir| {
        let path = dir.join("last-good.ckpt");
        match model.save(&path) {
            Ok(()) => Some(path),
            Err(e) => {
                log::error!("could not save last good parameters: {e}");
                None
            }
        }
    });
    log::error!("training diverged at step {step}");
    Error::Diverged { step, last_good }
}
