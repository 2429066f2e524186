//! Generation and one-step restoration with an injected restorer.
//!
//! A [`Restorer`] is anything that maps `(Ã, y, σ)` to an estimate of `x₀`:
//! a trained [`DenoiserModel`] or an exact posterior mean. The fixed-mask
//! sampler draws one `Ã` and walks the noise grid with
//!
//! ```text
//! x ← γ x + (1 − γ) r(Ã, Ã x, σ),   γ = σ_next / σ
//! ```
//!
//! starting from `x ~ N(0, σ_max² I)`. The guided sampler additionally
//! subtracts `w · ∇ₓ D(x)` where `D` is the mean squared disagreement between
//! the restoration under `Ã` and under `K′` freshly drawn masks.

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionProcess, Operator};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::oracle::DataDistribution;
use crate::rng::{standard_normal, stream, Rng};
use crate::schedule::NoiseSchedule;

/// Relative finite-difference step for the guidance gradient, in units of σ.
pub const GUIDANCE_FD_STEP: f64 = 1e-3;

/// Maps a measurement to an estimate of the clean signal.
pub trait Restorer {
    fn restore(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// Evaluates many queries; implementations may batch them.
    fn restore_many(&self, queries: &[(&Operator, &[f64], f64)]) -> Result<Vec<Vec<f64>>> {
        queries.iter().map(|(op, y, s)| self.restore(op, y, *s)).collect()
    }

    /// `(r, (∂r/∂y)ᵀ v)` when the restorer can differentiate its input.
    fn restore_vjp(&self, _op: &Operator, _y: &[f64], _sigma: f64, _v: &[f64]) -> Option<Result<(Vec<f64>, Vec<f64>)>> {
        None
    }
}

impl Restorer for DenoiserModel {
    fn restore(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.forward(op, y, sigma)
    }

    fn restore_many(&self, queries: &[(&Operator, &[f64], f64)]) -> Result<Vec<Vec<f64>>> {
        self.forward_many(queries)
    }

    fn restore_vjp(&self, op: &Operator, y: &[f64], sigma: f64, v: &[f64]) -> Option<Result<(Vec<f64>, Vec<f64>)>> {
        Some(self.forward_traced(op, y, sigma).and_then(|(out, trace)| Ok((out, self.input_vjp(&trace, v)?))))
    }
}

impl Restorer for DataDistribution {
    fn restore(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.posterior_mean(op, y, sigma)
    }
}

/// Wraps a closure as a [`Restorer`].
pub struct FnRestorer<F>(pub F);

impl<F> Restorer for FnRestorer<F>
where
    F: Fn(&Operator, &[f64], f64) -> Result<Vec<f64>>,
{
    fn restore(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (self.0)(op, y, sigma)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    FixedMask,
    ReconstructionGuidance,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed_mask" => Ok(SamplerKind::FixedMask),
            "guided" | "reconstruction_guidance" => Ok(SamplerKind::ReconstructionGuidance),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

/// How `∇ₓ D` is obtained in the guided sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceGradient {
    /// Coordinate-wise central differences with step `10⁻³ σ`.
    #[default]
    FiniteDifference,
    /// Through the restorer's input vector-Jacobian product.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub guidance_weight: f64,
    pub num_guidance_masks: usize,
    pub gradient: GuidanceGradient,
    /// Samples produced by the `sample` command.
    pub num_samples: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::FixedMask,
            guidance_weight: 5e-4,
            num_guidance_masks: 4,
            gradient: GuidanceGradient::FiniteDifference,
            num_samples: 1000,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            return Err(Error::Config("guidance weight must be finite and nonnegative".into()));
        }
        if self.kind == SamplerKind::ReconstructionGuidance && self.num_guidance_masks == 0 {
            return Err(Error::Config("reconstruction guidance needs at least one auxiliary mask".into()));
        }
        Ok(())
    }
}

/// A finished trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub atilde: Operator,
    pub x_init: Vec<f64>,
    /// `γ` of every step, in order.
    pub gammas: Vec<f64>,
    pub sample: Vec<f64>,
}

/// Per-trajectory state for lockstep sampling.
struct Walker<'r> {
    atilde: Operator,
    x: Vec<f64>,
    x_init: Vec<f64>,
    aux: &'r mut Rng,
}

fn start<'r>(process: &CorruptionProcess, schedule: &NoiseSchedule, rng: &mut Rng, aux: &'r mut Rng) -> Result<Walker<'r>> {
    let (_, atilde) = process.sample_pair(rng)?;
    let x: Vec<f64> = standard_normal(rng, process.dim()).into_iter().map(|v| v * schedule.sigma_max).collect();
    Ok(Walker { atilde, x_init: x.clone(), x, aux })
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::SamplerNonFinite { step })
    }
}

/// `(1/K′) Σ_k ‖r(Ã, Ãx) − r(Ã′_k, Ã′_k x)‖²` for every probe point, batched.
fn discrepancies(
    restorer: &dyn Restorer,
    atilde: &Operator,
    aux: &[Operator],
    points: &[Vec<f64>],
    sigma: f64,
) -> Result<Vec<f64>> {
    let mut ys = Vec::with_capacity(points.len() * (aux.len() + 1));
    for x in points {
        ys.push(atilde.apply(x)?);
        for a in aux {
            ys.push(a.apply(x)?);
        }
    }
    let mut queries = Vec::with_capacity(ys.len());
    let mut k = 0;
    for _ in points {
        queries.push((atilde, ys[k].as_slice(), sigma));
        k += 1;
        for a in aux {
            queries.push((a, ys[k].as_slice(), sigma));
            k += 1;
        }
    }
    let outs = restorer.restore_many(&queries)?;
    let stride = aux.len() + 1;
    Ok(outs
        .chunks(stride)
        .map(|c| {
            c[1..]
                .iter()
                .map(|r| r.iter().zip(&c[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
                / aux.len() as f64
        })
        .collect())
}

fn guidance_gradient_fd(
    restorer: &dyn Restorer,
    atilde: &Operator,
    aux: &[Operator],
    x: &[f64],
    sigma: f64,
) -> Result<Vec<f64>> {
    let h = GUIDANCE_FD_STEP * sigma;
    let mut probes = Vec::with_capacity(2 * x.len());
    for j in 0..x.len() {
        for s in [1.0, -1.0] {
            let mut p = x.to_vec();
            p[j] += s * h;
            probes.push(p);
        }
    }
    let d = discrepancies(restorer, atilde, aux, &probes, sigma)?;
    Ok(d.chunks(2).map(|pm| (pm[0] - pm[1]) / (2.0 * h)).collect())
}

fn guidance_gradient_exact(
    restorer: &dyn Restorer,
    atilde: &Operator,
    aux: &[Operator],
    x: &[f64],
    sigma: f64,
) -> Result<Vec<f64>> {
    let no_vjp = || Error::Config("restorer has no input gradient; use finite differences".into());
    let y = atilde.apply(x)?;
    let base = restorer.restore(atilde, &y, sigma)?;
    let mut grad = vec![0.0; x.len()];
    for a in aux {
        let ya = a.apply(x)?;
        let other = restorer.restore(a, &ya, sigma)?;
        let diff: Vec<f64> = base.iter().zip(&other).map(|(u, v)| 2.0 * (u - v)).collect();
        let neg: Vec<f64> = diff.iter().map(|d| -d).collect();
        let (_, gy) = restorer.restore_vjp(atilde, &y, sigma, &diff).ok_or_else(no_vjp)??;
        let (_, ga) = restorer.restore_vjp(a, &ya, sigma, &neg).ok_or_else(no_vjp)??;
        for ((g, u), v) in grad.iter_mut().zip(atilde.apply_transpose(&gy)?).zip(a.apply_transpose(&ga)?) {
            *g += (u + v) / aux.len() as f64;
        }
    }
    Ok(grad)
}

/// `∇ₓ` of the mean discrepancy between `Ã` and the auxiliary masks.
pub fn guidance_gradient(
    restorer: &dyn Restorer,
    mode: GuidanceGradient,
    atilde: &Operator,
    aux: &[Operator],
    x: &[f64],
    sigma: f64,
) -> Result<Vec<f64>> {
    if aux.is_empty() {
        return Err(Error::Config("guidance needs at least one auxiliary mask".into()));
    }
    match mode {
        GuidanceGradient::FiniteDifference => guidance_gradient_fd(restorer, atilde, aux, x, sigma),
        GuidanceGradient::Exact => guidance_gradient_exact(restorer, atilde, aux, x, sigma),
    }
}

fn run(
    restorer: &dyn Restorer,
    process: &CorruptionProcess,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    walkers: &mut [Walker],
) -> Result<Vec<f64>> {
    let sigmas = schedule.sigmas();
    let mut gammas = Vec::with_capacity(schedule.num_steps);
    for step in 0..schedule.num_steps {
        let (sigma, next) = (sigmas[step], sigmas[step + 1]);
        let gamma = next / sigma;
        assert!((0.0..=1.0).contains(&gamma), "γ = {gamma} leaves [0, 1]");
        gammas.push(gamma);
        let ys: Vec<Vec<f64>> = walkers.iter().map(|w| w.atilde.apply(&w.x)).collect::<Result<_>>()?;
        let queries: Vec<(&Operator, &[f64], f64)> =
            walkers.iter().zip(&ys).map(|(w, y)| (&w.atilde, y.as_slice(), sigma)).collect();
        let restored = restorer.restore_many(&queries)?;
        for (w, r) in walkers.iter_mut().zip(&restored) {
            check_finite(r, step)?;
            let guide = if spec.kind == SamplerKind::ReconstructionGuidance {
                let aux: Vec<Operator> = (0..spec.num_guidance_masks)
                    .map(|_| process.sample_pair(&mut *w.aux).map(|(_, t)| t))
                    .collect::<Result<_>>()?;
                let g = guidance_gradient(restorer, spec.gradient, &w.atilde, &aux, &w.x, sigma)?;
                check_finite(&g, step)?;
                Some(g)
            } else {
                None
            };
            for (i, (xi, &ri)) in w.x.iter_mut().zip(r).enumerate() {
                *xi = gamma * *xi + (1.0 - gamma) * ri;
                if let Some(g) = &guide {
                    *xi -= spec.guidance_weight * g[i];
                }
            }
            check_finite(&w.x, step)?;
        }
    }
    Ok(gammas)
}

/// One trajectory with the full record. `rng` draws `Ã` and the initial
/// point; `aux_rng` draws only guidance masks, so turning guidance off does
/// not disturb the main stream.
pub fn sample_trajectory(
    restorer: &dyn Restorer,
    process: &CorruptionProcess,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    rng: &mut Rng,
    aux_rng: &mut Rng,
) -> Result<Trajectory> {
    spec.validate()?;
    schedule.validate()?;
    let mut walkers = [start(process, schedule, rng, aux_rng)?];
    let gammas = run(restorer, process, schedule, spec, &mut walkers)?;
    let [w] = walkers;
    Ok(Trajectory { atilde: w.atilde, x_init: w.x_init, gammas, sample: w.x })
}

/// A fixed-mask sample.
pub fn fixed_mask_sample(
    restorer: &dyn Restorer,
    process: &CorruptionProcess,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let spec = SamplerSpec { kind: SamplerKind::FixedMask, ..Default::default() };
    let mut unused = stream(0, 0);
    Ok(sample_trajectory(restorer, process, schedule, &spec, rng, &mut unused)?.sample)
}

/// A reconstruction-guided sample; `spec.kind` is ignored.
pub fn guided_sample(
    restorer: &dyn Restorer,
    process: &CorruptionProcess,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    rng: &mut Rng,
    aux_rng: &mut Rng,
) -> Result<Vec<f64>> {
    let spec = SamplerSpec { kind: SamplerKind::ReconstructionGuidance, ..spec.clone() };
    Ok(sample_trajectory(restorer, process, schedule, &spec, rng, aux_rng)?.sample)
}

/// Main and auxiliary streams of trajectory `index` under `seed`.
pub fn trajectory_streams(seed: u64, index: u64) -> (Rng, Rng) {
    (stream(seed, (1 << 32) | index), stream(seed, (2 << 32) | index))
}

/// `count` independent samples advanced in lockstep so that restorer calls
/// are batched across trajectories.
pub fn sample_many(
    restorer: &dyn Restorer,
    process: &CorruptionProcess,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    schedule.validate()?;
    let mut streams: Vec<(Rng, Rng)> = (0..count as u64).map(|i| trajectory_streams(seed, i)).collect();
    let mut walkers = streams
        .iter_mut()
        .map(|(main, aux)| start(process, schedule, main, aux))
        .collect::<Result<Vec<_>>>()?;
    run(restorer, process, schedule, spec, &mut walkers)?;
    Ok(walkers.into_iter().map(|w| w.x).collect())
}

/// A single restorer call `r(Ã, y, σ)`.
pub fn restore(restorer: &dyn Restorer, atilde: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let out = restorer.restore(atilde, y, sigma)?;
    check_finite(&out, 0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::Mask;
    use crate::denoiser::ModelArch;
    use crate::oracle::GmmDistribution;
    use rand::Rng as _;

    fn constant(c: Vec<f64>) -> FnRestorer<impl Fn(&Operator, &[f64], f64) -> Result<Vec<f64>>> {
        FnRestorer(move |_: &Operator, _: &[f64], _: f64| Ok(c.clone()))
    }

    fn inpaint(n: usize, p: f64, delta: f64) -> CorruptionProcess {
        CorruptionProcess::RandomInpainting { n, p, delta }
    }

    #[test]
    fn single_step_is_the_midpoint() {
        let sched = NoiseSchedule::new(0.5, 1.0, 1).unwrap();
        let r = constant(vec![4.0, -2.0]);
        let t = sample_trajectory(
            &r,
            &inpaint(2, 0.0, 0.0),
            &sched,
            &SamplerSpec::default(),
            &mut stream(1, 0),
            &mut stream(1, 1),
        )
        .unwrap();
        assert_eq!(t.gammas, vec![0.5]);
        for i in 0..2 {
            assert_eq!(t.sample[i], 0.5 * t.x_init[i] + 0.5 * [4.0, -2.0][i]);
        }
    }

    #[test]
    fn constant_restorer_telescopes() {
        let sched = NoiseSchedule::default();
        let c = vec![0.7, -1.3, 2.0];
        let t = sample_trajectory(
            &constant(c.clone()),
            &inpaint(3, 0.3, 0.1),
            &sched,
            &SamplerSpec::default(),
            &mut stream(2, 0),
            &mut stream(2, 1),
        )
        .unwrap();
        let prod: f64 = t.gammas.iter().product();
        assert!((prod - sched.sigma_min / sched.sigma_max).abs() < 1e-12);
        let mut dist2 = 0.0;
        let mut init2 = 0.0;
        for i in 0..3 {
            let closed = c[i] + prod * (t.x_init[i] - c[i]);
            assert!((t.sample[i] - closed).abs() < 1e-8);
            dist2 += (t.sample[i] - c[i]).powi(2);
            init2 += (t.x_init[i] - c[i]).powi(2);
        }
        assert!(dist2.sqrt() <= sched.sigma_min / sched.sigma_max * init2.sqrt() * (1.0 + 1e-9));
        assert!(t.gammas.iter().all(|g| (0.0..=1.0).contains(g)));
    }

    fn standard_normal_data() -> DataDistribution {
        DataDistribution::Gmm(GmmDistribution::new(vec![1.0], vec![vec![0.0]], vec![vec![vec![1.0]]]).unwrap())
    }

    /// For N(0, 1) data the oracle is `y / (1 + σ²)`, so every step scales
    /// `x` by `γ + (1 − γ)/(1 + σ²)` and the output variance is
    /// `σ_max² Π c²`.
    fn standard_normal_output_variance(sched: &NoiseSchedule) -> f64 {
        let s = sched.sigmas();
        let mut v = sched.sigma_max * sched.sigma_max;
        for w in s.windows(2) {
            let g = w[1] / w[0];
            let c = g + (1.0 - g) / (1.0 + w[0] * w[0]);
            v *= c * c;
        }
        v
    }

    #[test]
    fn oracle_sampler_follows_the_linear_recursion() {
        let sched = NoiseSchedule::default();
        let target = standard_normal_output_variance(&sched);
        // 64 steps from N(0, σ_max²) land slightly below unit variance
        assert!((0.91..0.92).contains(&target), "{target}");
        let t = sample_trajectory(
            &standard_normal_data(),
            &inpaint(1, 0.0, 0.0),
            &sched,
            &SamplerSpec::default(),
            &mut stream(1, 0),
            &mut stream(1, 1),
        )
        .unwrap();
        let ratio = t.sample[0] / t.x_init[0];
        assert!((ratio * ratio * sched.sigma_max * sched.sigma_max - target).abs() < 1e-12);
    }

    #[test]
    fn oracle_sampler_reproduces_a_standard_normal() {
        let samples = sample_many(
            &standard_normal_data(),
            &inpaint(1, 0.0, 0.0),
            &NoiseSchedule::default(),
            &SamplerSpec::default(),
            10_000,
            1,
        )
        .unwrap();
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s[0]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "variance {var}");
        let target = standard_normal_output_variance(&NoiseSchedule::default());
        let se = target * (2.0 / n).sqrt();
        assert!((var - target).abs() < 3.0 * se, "variance {var} vs {target}");
    }

    #[test]
    fn zero_guidance_weight_is_bitwise_fixed_mask() {
        let dist = DataDistribution::Gmm(GmmDistribution::canonical());
        let proc = inpaint(2, 0.4, 0.1);
        let sched = NoiseSchedule { num_steps: 16, ..Default::default() };
        let fixed = fixed_mask_sample(&dist, &proc, &sched, &mut stream(5, 0)).unwrap();
        let spec = SamplerSpec { guidance_weight: 0.0, ..Default::default() };
        let guided = guided_sample(&dist, &proc, &sched, &spec, &mut stream(5, 0), &mut stream(5, 1)).unwrap();
        assert_eq!(fixed, guided);
    }

    #[test]
    fn identical_auxiliary_masks_give_no_guidance() {
        let dist = DataDistribution::Gmm(GmmDistribution::canonical());
        // p = δ = 0: every Ã′ equals Ã = I
        let proc = inpaint(2, 0.0, 0.0);
        let sched = NoiseSchedule { num_steps: 16, ..Default::default() };
        let fixed = fixed_mask_sample(&dist, &proc, &sched, &mut stream(6, 0)).unwrap();
        let spec = SamplerSpec { guidance_weight: 0.3, ..Default::default() };
        let guided = guided_sample(&dist, &proc, &sched, &spec, &mut stream(6, 0), &mut stream(6, 1)).unwrap();
        assert_eq!(fixed, guided);
    }

    #[test]
    fn lockstep_batches_match_single_trajectories() {
        let dist = DataDistribution::Gmm(GmmDistribution::canonical());
        let proc = inpaint(2, 0.5, 0.1);
        let sched = NoiseSchedule { num_steps: 12, ..Default::default() };
        for kind in [SamplerKind::FixedMask, SamplerKind::ReconstructionGuidance] {
            let spec = SamplerSpec { kind, ..Default::default() };
            let many = sample_many(&dist, &proc, &sched, &spec, 4, 9).unwrap();
            for (i, s) in many.iter().enumerate() {
                let (mut a, mut b) = trajectory_streams(9, i as u64);
                let one = sample_trajectory(&dist, &proc, &sched, &spec, &mut a, &mut b).unwrap();
                assert_eq!(&one.sample, s);
            }
        }
    }

    #[test]
    fn non_finite_restorer_reports_the_step() {
        let sched = NoiseSchedule { num_steps: 8, ..Default::default() };
        let r = FnRestorer(|_: &Operator, _: &[f64], s: f64| Ok(vec![if s < 1.0 { f64::NAN } else { 0.0 }]));
        let err = fixed_mask_sample(&r, &inpaint(1, 0.0, 0.0), &sched, &mut stream(0, 0)).unwrap_err();
        let first_bad = sched.sigmas().iter().position(|&s| s < 1.0).unwrap();
        assert!(matches!(err, Error::SamplerNonFinite { step } if step == first_bad));
    }

    #[test]
    fn exact_and_finite_difference_guidance_agree() {
        let mut rng = stream(11, 0);
        let mut model = DenoiserModel::new(ModelArch::for_masks(3, vec![16, 16]), &mut rng).unwrap();
        for p in model.params_mut() {
            *p = rng.gen_range(-0.4..0.4);
        }
        let proc = inpaint(3, 0.3, 0.3);
        for &sigma in &[0.05, 0.5, 3.0] {
            let (_, atilde) = proc.sample_pair(&mut rng).unwrap();
            let aux: Vec<Operator> = (0..4).map(|_| proc.sample_pair(&mut rng).unwrap().1).collect();
            let x = standard_normal(&mut rng, 3);
            let fd = guidance_gradient(&model, GuidanceGradient::FiniteDifference, &atilde, &aux, &x, sigma).unwrap();
            let ex = guidance_gradient(&model, GuidanceGradient::Exact, &atilde, &aux, &x, sigma).unwrap();
            let norm = ex.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = fd.iter().zip(&ex).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(err <= 1e-3 * norm.max(1e-8), "σ={sigma}: {fd:?} vs {ex:?}");
        }
    }

    #[test]
    fn exact_guidance_needs_a_differentiable_restorer() {
        let dist = DataDistribution::Gmm(GmmDistribution::canonical());
        let a = Operator::Mask(Mask::ones(2));
        let b = Operator::Mask(Mask::new(vec![1, 0]).unwrap());
        assert!(guidance_gradient(&dist, GuidanceGradient::Exact, &a, &[b], &[0.1, 0.2], 1.0).is_err());
    }

    #[test]
    fn restore_at_small_noise_returns_the_measurement() {
        let dist = DataDistribution::Gmm(GmmDistribution::canonical());
        let id = Operator::Mask(Mask::ones(2));
        let y = [0.9, 0.3];
        let out = restore(&dist, &id, &y, 1e-4).unwrap();
        assert!((out[0] - y[0]).abs() < 1e-3 && (out[1] - y[1]).abs() < 1e-3);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SamplerSpec { guidance_weight: -1.0, ..Default::default() }.validate().is_err());
        let s = SamplerSpec { kind: SamplerKind::ReconstructionGuidance, num_guidance_masks: 0, ..Default::default() };
        assert!(s.validate().is_err());
        assert_eq!("guided".parse::<SamplerKind>().unwrap(), SamplerKind::ReconstructionGuidance);
    }
}
