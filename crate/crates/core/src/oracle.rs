//! Closed-form conditional expectations `E[x₀ | Ã(x₀ + σ η), Ã]`.
//!
//! Two data families admit exact answers: Gaussian mixtures (conjugate
//! update per component, mixed by log-domain responsibilities) and finite
//! atom sets (direct enumeration). These are the ground truth that trained
//! denoisers and samplers are measured against.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::corruption::Operator;
use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Relative jitter added to a Gram matrix whose factorisation fails.
pub const JITTER: f64 = 1e-9;

/// Mixture `Σ_k w_k N(μ_k, Σ_k)`.
#[derive(Debug, Clone)]
pub struct GmmDistribution {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
}

impl GmmDistribution {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::Config(format!(
                "mixture needs matching non-empty weights/means/covariances, got {k}/{}/{}",
                means.len(),
                covs.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("mixture weights must be nonnegative and sum to 1".into()));
        }
        let n = means[0].len();
        let mut mvecs = Vec::with_capacity(k);
        let mut cmats = Vec::with_capacity(k);
        let mut chols = Vec::with_capacity(k);
        for (mu, cov) in means.into_iter().zip(covs) {
            if mu.len() != n || cov.len() != n || cov.iter().any(|r| r.len() != n) {
                return Err(Error::Config(format!("mixture component is not {n}-dimensional")));
            }
            let c = DMatrix::from_fn(n, n, |r, col| cov[r][col]);
            if (&c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::Config("covariance is not symmetric".into()));
            }
            let l = Cholesky::new(c.clone())
                .ok_or_else(|| Error::Config("covariance is not positive definite".into()))?
                .unpack();
            mvecs.push(DVector::from_vec(mu));
            cmats.push(c);
            chols.push(l);
        }
        Ok(Self { weights, means: mvecs, covs: cmats, chols })
    }

    /// Three equally weighted isotropic components (`Σ = 0.1² I`) centred on
    /// the vertices of an equilateral triangle of circumradius 1 about the
    /// origin, rotated by 15° so that each coordinate alone separates the
    /// components.
    pub fn canonical() -> Self {
        let means = (0..3)
            .map(|k| {
                let a = PI / 12.0 + 2.0 * PI * k as f64 / 3.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let cov = vec![vec![0.01, 0.0], vec![0.0, 0.01]];
        Self::new(vec![1.0 / 3.0; 3], means, vec![cov.clone(), cov.clone(), cov]).expect("canonical mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            out += mu * *w;
        }
        out.as_slice().to_vec()
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut k = self.weights.len() - 1;
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = DVector::from_vec(standard_normal(rng, self.dim()));
        (&self.means[k] + &self.chols[k] * z).as_slice().to_vec()
    }
}

/// Atoms `x⁽ʲ⁾` with probabilities `π_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDistribution {
    atoms: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl FiniteDistribution {
    pub fn new(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != probs.len() {
            return Err(Error::Config("finite distribution needs one probability per atom".into()));
        }
        let n = atoms[0].len();
        if atoms.iter().any(|a| a.len() != n) {
            return Err(Error::Config("atoms must share a dimension".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("atom probabilities must be nonnegative and sum to 1".into()));
        }
        for i in 0..atoms.len() {
            for j in 0..i {
                if atoms[i] == atoms[j] {
                    return Err(Error::Config(format!("atoms {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { atoms, probs })
    }

    /// Equal weights on `atoms`.
    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let k = atoms.len();
        Self::new(atoms, vec![1.0 / k as f64; k])
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, &p) in self.atoms.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return a.clone();
            }
        }
        self.atoms.last().unwrap().clone()
    }
}

/// Any data family with an exact posterior mean.
#[derive(Debug, Clone)]
pub enum DataDistribution {
    Gmm(GmmDistribution),
    Finite(FiniteDistribution),
}

impl DataDistribution {
    pub fn dim(&self) -> usize {
        match self {
            DataDistribution::Gmm(g) => g.dim(),
            DataDistribution::Finite(f) => f.dim(),
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        match self {
            DataDistribution::Gmm(g) => g.sample(rng),
            DataDistribution::Finite(f) => f.sample(rng),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            DataDistribution::Gmm(g) => g.mean(),
            DataDistribution::Finite(f) => {
                let mut out = vec![0.0; f.dim()];
                for (a, &p) in f.atoms.iter().zip(&f.probs) {
                    for (o, &v) in out.iter_mut().zip(a) {
                        *o += p * v;
                    }
                }
                out
            }
        }
    }

    pub fn posterior_mean(&self, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            DataDistribution::Gmm(g) => gmm_posterior_mean(g, op, y, sigma),
            DataDistribution::Finite(f) => finite_posterior_mean(f, op, y, sigma),
        }
    }
}

/// Rows of `op` that carry information and the matching entries of `y`.
fn reduce(op: &Operator, y: &[f64], n: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if op.dim() != n {
        return Err(Error::Dimension { expected: n, got: op.dim() });
    }
    if y.len() != op.out_dim() {
        return Err(Error::Dimension { expected: op.out_dim(), got: y.len() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("oracle observation"));
    }
    let rows = op.informative_rows();
    let s = op.reduced();
    let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    Ok((s, ys))
}

/// Cholesky of a symmetric positive definite matrix, retried once with
/// `JITTER · trace / dim` on the diagonal.
fn factor(c: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let dim = c.nrows();
    let bump = JITTER * c.trace().abs().max(f64::MIN_POSITIVE) / dim as f64;
    match Cholesky::new(c.clone()) {
        Some(ch) => Ok(ch),
        None => Cholesky::new(c + DMatrix::identity(dim, dim) * bump)
            .ok_or_else(|| Error::Numerical(format!("{dim}x{dim} observation Gram matrix is singular beyond jitter"))),
    }
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logw);
    logw.iter().map(|l| (l - z).exp()).collect()
}

/// `E[x₀ | Ãx_t = y, Ã]` for a Gaussian mixture, `x_t = x₀ + σ η`.
///
/// With `S` the informative rows of `Ã`, component `k` contributes the
/// conjugate mean `μ_k + Σ_k Sᵀ C_k⁻¹ (y_S − Sμ_k)` with
/// `C_k = SΣ_kSᵀ + σ²SSᵀ`, weighted by `w_k N(y_S; Sμ_k, C_k)`.
pub fn gmm_posterior_mean(dist: &GmmDistribution, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise level {sigma} must be finite and nonnegative")));
    }
    let (s, ys) = reduce(op, y, dist.dim())?;
    let r = s.nrows();
    if r == 0 {
        return Ok(dist.mean());
    }
    let sst = &s * s.transpose() * (sigma * sigma);
    let mut logw = Vec::with_capacity(dist.num_components());
    let mut post = Vec::with_capacity(dist.num_components());
    for k in 0..dist.num_components() {
        let sigma_st = &dist.covs[k] * s.transpose();
        let c = &s * &sigma_st + &sst;
        let ch = factor(c)?;
        let resid = &ys - &s * &dist.means[k];
        let sol = ch.solve(&resid);
        let quad = resid.dot(&sol);
        logw.push(dist.weights[k].ln() - 0.5 * (quad + log_det(&ch) + r as f64 * (2.0 * PI).ln()));
        post.push(&dist.means[k] + sigma_st * sol);
    }
    let resp = normalize_log_weights(&logw);
    let mut out = DVector::zeros(dist.dim());
    for (w, m) in resp.iter().zip(&post) {
        out += m * *w;
    }
    Ok(out.as_slice().to_vec())
}

/// `E[x₀ | Ãx_t = y, Ã]` for a finite distribution, by enumeration of the
/// atoms with likelihood `N(y_S; S x⁽ʲ⁾, σ² SSᵀ)`.
pub fn finite_posterior_mean(dist: &FiniteDistribution, op: &Operator, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::ZeroSigma(sigma));
    }
    let (s, ys) = reduce(op, y, dist.dim())?;
    if s.nrows() == 0 {
        return Ok(DataDistribution::Finite(dist.clone()).mean());
    }
    let ch = factor(&s * s.transpose() * (sigma * sigma))?;
    let logw: Vec<f64> = dist
        .atoms
        .iter()
        .zip(&dist.probs)
        .map(|(a, &p)| {
            let resid = &ys - &s * DVector::from_column_slice(a);
            p.ln() - 0.5 * resid.dot(&ch.solve(&resid))
        })
        .collect();
    let resp = normalize_log_weights(&logw);
    let mut out = vec![0.0; dist.dim()];
    for (w, a) in resp.iter().zip(&dist.atoms) {
        for (o, &v) in out.iter_mut().zip(a) {
            *o += w * v;
        }
    }
    Ok(out)
}

fn smoothed_components(dist: &GmmDistribution, x: &DVector<f64>, sigma: f64) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let n = dist.dim();
    let mut logw = Vec::with_capacity(dist.num_components());
    let mut pulls = Vec::with_capacity(dist.num_components());
    for k in 0..dist.num_components() {
        let c = &dist.covs[k] + DMatrix::identity(n, n) * (sigma * sigma);
        let ch = factor(c)?;
        let diff = &dist.means[k] - x;
        let sol = ch.solve(&diff);
        logw.push(dist.weights[k].ln() - 0.5 * (diff.dot(&sol) + log_det(&ch) + n as f64 * (2.0 * PI).ln()));
        pulls.push(sol);
    }
    Ok((logw, pulls))
}

/// `∇ log p_σ(x)` for the mixture smoothed by `N(0, σ²I)`.
pub fn gmm_marginal_score(dist: &GmmDistribution, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if x_t.len() != dist.dim() {
        return Err(Error::Dimension { expected: dist.dim(), got: x_t.len() });
    }
    let x = DVector::from_column_slice(x_t);
    let (logw, pulls) = smoothed_components(dist, &x, sigma)?;
    let resp = normalize_log_weights(&logw);
    let mut out = DVector::zeros(dist.dim());
    for (w, p) in resp.iter().zip(&pulls) {
        out += p * *w;
    }
    Ok(out.as_slice().to_vec())
}

/// Largest `‖s − s_T‖ / ‖s‖` over `points × sigmas`, where `s` is the
/// mixture score and `s_T` is Tweedie's score built from the posterior mean
/// under full observation.
pub fn tweedie_max_rel_error(dist: &GmmDistribution, points: &[Vec<f64>], sigmas: &[f64]) -> Result<f64> {
    let full = Operator::Mask(crate::corruption::Mask::ones(dist.dim()));
    let mut worst: f64 = 0.0;
    for &sigma in sigmas {
        for x in points {
            let score = gmm_marginal_score(dist, x, sigma)?;
            let den = gmm_posterior_mean(dist, &full, x, sigma)?;
            let tw = crate::schedule::score_from_denoiser(&den, x, sigma)?;
            let num = score.iter().zip(&tw).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = score.iter().map(|a| a * a).sum::<f64>().sqrt();
            worst = worst.max(num / norm.max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}

/// `log p_σ(x)` for the smoothed mixture.
pub fn gmm_log_density(dist: &GmmDistribution, x_t: &[f64], sigma: f64) -> Result<f64> {
    if x_t.len() != dist.dim() {
        return Err(Error::Dimension { expected: dist.dim(), got: x_t.len() });
    }
    let (logw, _) = smoothed_components(dist, &DVector::from_column_slice(x_t), sigma)?;
    Ok(log_sum_exp(&logw))
}

/// Serializable description of a data family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    },
    Finite {
        atoms: Vec<Vec<f64>>,
        probs: Vec<f64>,
    },
}

impl DataSpec {
    pub fn canonical() -> Self {
        let g = GmmDistribution::canonical();
        DataSpec::Gmm {
            weights: g.weights.clone(),
            means: g.means.iter().map(|m| m.as_slice().to_vec()).collect(),
            covariances: g
                .covs
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().cloned().collect()).collect())
                .collect(),
        }
    }

    pub fn build(&self) -> Result<DataDistribution> {
        Ok(match self {
            DataSpec::Gmm { weights, means, covariances } => {
                DataDistribution::Gmm(GmmDistribution::new(weights.clone(), means.clone(), covariances.clone())?)
            }
            DataSpec::Finite { atoms, probs } => {
                DataDistribution::Finite(FiniteDistribution::new(atoms.clone(), probs.clone())?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{GaussianMeasurement, Mask};
    use crate::rng::stream;
    use crate::schedule::{score_from_denoiser, NoiseSchedule};

    fn full(n: usize) -> Operator {
        Operator::Mask(Mask::ones(n))
    }

    #[test]
    fn conjugate_scalar_case() {
        let g = GmmDistribution::new(vec![1.0], vec![vec![0.0]], vec![vec![vec![1.0]]]).unwrap();
        let m = gmm_posterior_mean(&g, &full(1), &[2.0], 1.0).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nothing_observed_gives_prior_mean() {
        let g = GmmDistribution::new(
            vec![0.25, 0.75],
            vec![vec![1.0, 2.0], vec![-1.0, 0.0]],
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2],
        )
        .unwrap();
        let m = gmm_posterior_mean(&g, &Operator::Mask(Mask::zeros(2)), &[0.0, 0.0], 0.3).unwrap();
        assert!((m[0] + 0.5).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GmmDistribution::new(vec![0.5, 0.4], vec![vec![0.0]; 2], vec![vec![vec![1.0]]; 2]).is_err());
        assert!(GmmDistribution::new(vec![1.0], vec![vec![0.0]], vec![vec![vec![-1.0]]]).is_err());
        assert!(FiniteDistribution::uniform(vec![vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn canonical_mixture_shape() {
        let g = GmmDistribution::canonical();
        assert_eq!(g.num_components(), 3);
        for mu in g.means() {
            assert!((mu.norm() - 1.0).abs() < 1e-15);
        }
        let m = g.mean();
        assert!(m[0].abs() < 1e-15 && m[1].abs() < 1e-15);
        // each coordinate alone separates the component means by > 0.44
        for c in 0..2 {
            let mut v: Vec<f64> = g.means().iter().map(|mu| mu[c]).collect();
            v.sort_by(f64::total_cmp);
            assert!(v.windows(2).all(|w| w[1] - w[0] > 0.44));
        }
    }

    #[test]
    fn finite_single_atom_and_symmetry() {
        let one = FiniteDistribution::uniform(vec![vec![0.3, -2.0]]).unwrap();
        let m = finite_posterior_mean(&one, &full(2), &[5.0, 5.0], 0.1).unwrap();
        assert_eq!(m, vec![0.3, -2.0]);

        let sym = FiniteDistribution::uniform(vec![vec![1.5], vec![-1.5]]).unwrap();
        let m = finite_posterior_mean(&sym, &full(1), &[0.0], 0.7).unwrap();
        assert!(m[0].abs() < 1e-15);
    }

    #[test]
    fn finite_matches_narrow_mixture() {
        let atoms = vec![vec![0.0, 1.0], vec![1.0, -0.5], vec![-0.8, 0.2]];
        let fin = FiniteDistribution::new(atoms.clone(), vec![0.2, 0.5, 0.3]).unwrap();
        let eps = 1e-6;
        let gmm = GmmDistribution::new(
            vec![0.2, 0.5, 0.3],
            atoms,
            vec![vec![vec![eps, 0.0], vec![0.0, eps]]; 3],
        )
        .unwrap();
        let op = Operator::Mask(Mask::new(vec![1, 0]).unwrap());
        for &y0 in &[-1.0, -0.1, 0.4, 0.9] {
            let a = finite_posterior_mean(&fin, &op, &[y0, 0.0], 0.5).unwrap();
            let b = gmm_posterior_mean(&gmm, &op, &[y0, 0.0], 0.5).unwrap();
            for i in 0..2 {
                assert!((a[i] - b[i]).abs() < 1e-4, "y0={y0}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn gaussian_operator_posterior_matches_direct_conjugate_update() {
        let g = GmmDistribution::new(vec![1.0], vec![vec![0.5, -0.5, 1.0]], vec![vec![
            vec![1.0, 0.2, 0.0],
            vec![0.2, 0.5, 0.1],
            vec![0.0, 0.1, 0.8],
        ]])
        .unwrap();
        let mut a = GaussianMeasurement::from_row_slice(2, 3, &[1.0, 0.5, -0.3, 0.2, -1.0, 0.7]).unwrap();
        let full_op = Operator::Gaussian(a.clone());
        a.zero_row(1);
        let part = Operator::Gaussian(a);
        let y = [0.4, 0.0];
        let sigma = 0.3;
        // one informative row: scalar Kalman update
        let row = DVector::from_vec(vec![1.0, 0.5, -0.3]);
        let cov = &g.covariances()[0];
        let mu = &g.means()[0];
        let s = (row.transpose() * cov * &row)[(0, 0)] + sigma * sigma * row.norm_squared();
        let gain = cov * &row / s;
        let expect = mu + gain * (y[0] - row.dot(mu));
        let got = gmm_posterior_mean(&g, &part, &y, sigma).unwrap();
        for i in 0..3 {
            assert!((got[i] - expect[i]).abs() < 1e-12);
        }
        assert!(gmm_posterior_mean(&g, &full_op, &[0.4, 0.1], sigma).is_ok());
    }

    #[test]
    fn tweedie_consistency_on_grid() {
        let g = GmmDistribution::canonical();
        let sched = NoiseSchedule::default();
        let mut rng = stream(1, 0);
        for sigma in sched.sigmas() {
            for _ in 0..20 {
                let x: Vec<f64> = standard_normal(&mut rng, 2).iter().map(|v| v * (1.0 + sigma)).collect();
                let score = gmm_marginal_score(&g, &x, sigma).unwrap();
                let den = gmm_posterior_mean(&g, &full(2), &x, sigma).unwrap();
                let tw = score_from_denoiser(&den, &x, sigma).unwrap();
                let num: f64 = score.iter().zip(&tw).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = score.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(num <= 1e-10 * den.max(1e-12), "σ={sigma}: {score:?} vs {tw:?}");
            }
        }
    }

    #[test]
    fn score_matches_log_density_differences() {
        let g = GmmDistribution::canonical();
        let mut rng = stream(2, 0);
        for &sigma in &[0.05, 0.3, 1.0, 4.0] {
            for _ in 0..10 {
                let x = standard_normal(&mut rng, 2);
                let score = gmm_marginal_score(&g, &x, sigma).unwrap();
                let h = 1e-5 * sigma.max(0.1);
                for i in 0..2 {
                    let mut xp = x.clone();
                    xp[i] += h;
                    let mut xm = x.clone();
                    xm[i] -= h;
                    let fd = (gmm_log_density(&g, &xp, sigma).unwrap() - gmm_log_density(&g, &xm, sigma).unwrap()) / (2.0 * h);
                    let scale = score.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
                    assert!((fd - score[i]).abs() <= 1e-6 * scale, "σ={sigma}: {fd} vs {}", score[i]);
                }
            }
        }
    }

    #[test]
    fn single_component_score_is_precision_pull() {
        let g = GmmDistribution::new(vec![1.0], vec![vec![1.0, -1.0]], vec![vec![vec![0.5, 0.1], vec![0.1, 0.3]]]).unwrap();
        let sigma = 0.7;
        let x = [0.2, 0.4];
        let s = gmm_marginal_score(&g, &x, sigma).unwrap();
        let c = g.covariances()[0].clone() + DMatrix::identity(2, 2) * (sigma * sigma);
        let expect = c.try_inverse().unwrap() * (DVector::from_vec(vec![1.0, -1.0]) - DVector::from_vec(x.to_vec()));
        assert!((s[0] - expect[0]).abs() < 1e-12 && (s[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn fewer_observations_never_help() {
        // conditional expectation is an L² projection: coarser information
        // cannot lower the mean squared error
        let g = GmmDistribution::canonical();
        let mut rng = stream(3, 0);
        let sigma = 0.2;
        let fine = Operator::Mask(Mask::ones(2));
        let coarse = Operator::Mask(Mask::new(vec![1, 0]).unwrap());
        let reps = 4000;
        let mut diffs = Vec::with_capacity(reps);
        for _ in 0..reps {
            let x0 = g.sample(&mut rng);
            let xt: Vec<f64> = x0.iter().zip(standard_normal(&mut rng, 2)).map(|(a, e)| a + sigma * e).collect();
            let ef = gmm_posterior_mean(&g, &fine, &fine.apply(&xt).unwrap(), sigma).unwrap();
            let ec = gmm_posterior_mean(&g, &coarse, &coarse.apply(&xt).unwrap(), sigma).unwrap();
            let se = |e: &[f64]| e.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            diffs.push(se(&ec) - se(&ef));
        }
        let mean = diffs.iter().sum::<f64>() / reps as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!(mean + 3.0 * (var / reps as f64).sqrt() >= 0.0);
        assert!(mean > 0.0);
    }

    #[test]
    fn data_spec_round_trip() {
        let spec = DataSpec::canonical();
        let txt = toml::to_string(&spec).unwrap();
        let back: DataSpec = toml::from_str(&txt).unwrap();
        assert_eq!(back, spec);
        assert!(matches!(back.build().unwrap(), DataDistribution::Gmm(_)));
    }
}
