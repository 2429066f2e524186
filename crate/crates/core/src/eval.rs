//! Sample-set distances, restoration PSNR and a memorisation statistic.
//!
//! Distribution quality is measured by sliced Wasserstein and energy
//! distance, both computable from samples alone. Memorisation is the
//! distribution of each generated sample's top-1 cosine similarity to the
//! training set after centring on the training mean.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Serialize, Serializer};

use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Smallest sample set accepted by [`sliced_wasserstein`] and
/// [`memorization_stat`].
pub const MIN_SAMPLES: usize = 100;

/// Number of equal-width histogram bins on `[-1, 1]`.
pub const HISTOGRAM_BINS: usize = 40;

fn check_sets(x: &[Vec<f64>], y: &[Vec<f64>], min: usize) -> Result<usize> {
    for set in [x, y] {
        if set.len() < min {
            return Err(Error::TooFewSamples { need: min, got: set.len() });
        }
    }
    let d = x[0].len();
    if let Some(bad) = x.iter().chain(y).find(|v| v.len() != d) {
        return Err(Error::Dimension { expected: d, got: bad.len() });
    }
    Ok(d)
}

/// `W₂` between two 1-D empirical distributions given as sorted values.
///
/// Quantile levels are tracked in integer units of `1/(n·m)` so the result
/// is exactly symmetric in its arguments.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as u64, b.len() as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut left_a, mut left_b) = (m, n);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let step = left_a.min(left_b);
        let d = a[i] - b[j];
        acc += step as f64 * d * d;
        left_a -= step;
        left_b -= step;
        if left_a == 0 {
            i += 1;
            left_a = m;
        }
        if left_b == 0 {
            j += 1;
            left_b = n;
        }
    }
    (acc / (n * m) as f64).sqrt()
}

fn project_sorted(set: &[Vec<f64>], dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = set.iter().map(|v| v.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean over `num_projections` uniform random unit directions of the 1-D
/// 2-Wasserstein distance between the projected sets.
pub fn sliced_wasserstein(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    num_projections: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let d = check_sets(x, y, MIN_SAMPLES)?;
    if num_projections == 0 {
        return Err(Error::Config("sliced Wasserstein needs at least one projection".into()));
    }
    let mut total = 0.0;
    for _ in 0..num_projections {
        let dir = loop {
            let g = DVector::from_vec(standard_normal(rng, d));
            let norm = g.norm();
            if norm > 0.0 {
                break (g / norm).as_slice().to_vec();
            }
        };
        total += w2_sorted(&project_sorted(x, &dir), &project_sorted(y, &dir));
    }
    Ok(total / num_projections as f64)
}

fn mean_pairwise(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for a in x {
        for b in y {
            total += a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        }
    }
    total / (x.len() * y.len()) as f64
}

/// Energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` (V-statistic).
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_sets(x, y, 2)?;
    let e = 2.0 * mean_pairwise(x, y) - mean_pairwise(x, x) - mean_pairwise(y, y);
    Ok(e.max(0.0))
}

/// `10 log₁₀(peak² / MSE)`; `+∞` when the inputs are identical.
pub fn psnr(x: &[f64], reference: &[f64], peak: f64) -> Result<f64> {
    psnr_pooled(&[x.to_vec()], &[reference.to_vec()], peak)
}

/// PSNR of the mean squared error pooled over a set of restorations.
pub fn psnr_pooled(outputs: &[Vec<f64>], references: &[Vec<f64>], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!("PSNR peak {peak} must be positive")));
    }
    if outputs.len() != references.len() || outputs.is_empty() {
        return Err(Error::Dimension { expected: references.len(), got: outputs.len() });
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (o, r) in outputs.iter().zip(references) {
        if o.len() != r.len() {
            return Err(Error::Dimension { expected: r.len(), got: o.len() });
        }
        sq += o.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += o.len();
    }
    let mse = sq / count as f64;
    if mse == 0.0 {
        log::info!("PSNR of identical signals reported as +inf");
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `p50 ≤ p90 ≤ p99` of the nearest-neighbour similarities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Counts on fixed bin edges `-1 + 2k/HISTOGRAM_BINS`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn of(values: &[f64]) -> Self {
        let edges = (0..=HISTOGRAM_BINS).map(|k| -1.0 + 2.0 * k as f64 / HISTOGRAM_BINS as f64).collect();
        let mut counts = vec![0; HISTOGRAM_BINS];
        for &v in values {
            let k = (((v + 1.0) / 2.0) * HISTOGRAM_BINS as f64).floor();
            counts[(k.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        Self { edges, counts }
    }

    /// A bar chart of the counts.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (480.0, 240.0, 30.0);
        let top = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bar = (w - 2.0 * pad) / self.counts.len() as f64;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
        let _ = writeln!(s, r#"<text x="{pad}" y="18" font-size="13">{}</text>"#, escape(title));
        for (k, &c) in self.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * c as f64 / top;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue"/>"#,
                pad + k as f64 * bar,
                h - pad - bh,
                bar * 0.9,
                bh
            );
        }
        let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-size="11">-1</text>"#, h - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">1</text>"#, w - pad - 6.0, h - 10.0);
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorizationStats {
    pub quantiles: Quantiles,
    pub histogram: Histogram,
    /// Top-1 similarity of every generated sample that was not excluded.
    pub similarities: Vec<f64>,
    /// Generated samples dropped for having zero norm after centring.
    pub excluded_generated: usize,
    /// Training points dropped for the same reason.
    pub excluded_train: usize,
}

/// Top-1 cosine similarity of each generated sample to the training set,
/// both centred on the training mean.
pub fn memorization_stat(generated: &[Vec<f64>], train: &[Vec<f64>]) -> Result<MemorizationStats> {
    check_sets(generated, train, 1)?;
    if generated.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples { need: MIN_SAMPLES, got: generated.len() });
    }
    let d = train[0].len();
    let mut mean = vec![0.0; d];
    for t in train {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v / train.len() as f64;
        }
    }
    let unit = |v: &Vec<f64>| -> Option<Vec<f64>> {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(a, m)| a - m).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm > 0.0).then(|| c.into_iter().map(|x| x / norm).collect())
    };
    let train_units: Vec<Vec<f64>> = train.iter().filter_map(unit).collect();
    let excluded_train = train.len() - train_units.len();
    if train_units.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mut similarities = Vec::with_capacity(generated.len());
    let mut excluded_generated = 0;
    for g in generated {
        match unit(g) {
            Some(u) => {
                let best = train_units
                    .iter()
                    .map(|t| t.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
                similarities.push(best.clamp(-1.0, 1.0));
            }
            None => excluded_generated += 1,
        }
    }
    if excluded_generated + excluded_train > 0 {
        log::warn!("memorisation: excluded {excluded_generated} generated and {excluded_train} training zero-norm vectors");
    }
    if similarities.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mut sorted = similarities.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = Quantiles { p50: quantile(&sorted, 0.5), p90: quantile(&sorted, 0.9), p99: quantile(&sorted, 0.99) };
    Ok(MemorizationStats {
        quantiles,
        histogram: Histogram::of(&similarities),
        similarities,
        excluded_generated,
        excluded_train,
    })
}

fn ser_metric<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        Some(x) if *x > 0.0 => s.serialize_str("inf"),
        Some(_) => s.serialize_str("nan"),
        None => s.serialize_none(),
    }
}

fn ser_digest<S: Serializer>(d: &Digest, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&d.to_hex())
}

/// Stand-ins for FID, restoration PSNR and the nearest-neighbour
/// memorisation analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub note: &'static str,
    #[serde(serialize_with = "ser_metric")]
    pub sliced_wasserstein: Option<f64>,
    #[serde(serialize_with = "ser_metric")]
    pub energy_distance: Option<f64>,
    #[serde(serialize_with = "ser_metric")]
    pub psnr_db: Option<f64>,
    pub nn_similarity_quantiles: Option<Quantiles>,
    pub nn_similarity_histogram: Option<Histogram>,
    pub n_generated: usize,
    pub n_reference: usize,
    #[serde(serialize_with = "ser_digest")]
    pub config_digest: Digest,
}

/// Header written with every report.
pub const REPORT_NOTE: &str = "FID/IS replaced by sliced Wasserstein and energy distance; \
LPIPS omitted (PSNR only); DINO similarity replaced by cosine similarity in data space";

impl MetricReport {
    pub fn new(n_generated: usize, n_reference: usize, config_digest: Digest) -> Self {
        Self {
            note: REPORT_NOTE,
            sliced_wasserstein: None,
            energy_distance: None,
            psnr_db: None,
            nn_similarity_quantiles: None,
            nn_similarity_histogram: None,
            n_generated,
            n_reference,
            config_digest,
        }
    }

    pub const CSV_HEADER: &'static str =
        "sliced_wasserstein,energy_distance,psnr_db,nn_p50,nn_p90,nn_p99,n_generated,n_reference,config_digest";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let q = self.nn_similarity_quantiles;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            f(self.sliced_wasserstein),
            f(self.energy_distance),
            f(self.psnr_db),
            f(q.map(|q| q.p50)),
            f(q.map(|q| q.p90)),
            f(q.map(|q| q.p99)),
            self.n_generated,
            self.n_reference,
            self.config_digest.to_hex()
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
