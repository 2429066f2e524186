use std::fs;
use std::path::{Path, PathBuf};

use ambient::corruption::Operator;
use ambient::dataio::{ensure_same_digest, generate_dataset, CorruptedDataset, ExperimentConfig, ReferenceSet, SeedSpec};
use ambient::denoiser::DenoiserModel;
use ambient::eval::{energy_distance, memorization_stat, psnr_pooled, sliced_wasserstein, MetricReport};
use ambient::oracle::{tweedie_max_rel_error, DataDistribution};
use ambient::rng::{standard_normal, stream};
use ambient::sampler::{restore as restore_once, sample_many, Restorer, SamplerKind};
use ambient::training::{self, write_metrics_csv, HeldOut, Objective, TrainSetup};
use ambient::Error;
use anyhow::{Context, Result};
use serde_json::{json, Value};

use crate::Common;

const DATASET: &str = "dataset.ambd";
const REFERENCE: &str = "reference.ambr";
const MODEL: &str = "model.ckpt";
const SAMPLES: &str = "samples.ambd";
const RESTORE: &str = "restore.json";

// stream ids under the sample seed
const TRUE_SET_A: u64 = 10 << 32;
const TRUE_SET_B: u64 = 11 << 32;
const PROJECTIONS: u64 = 12 << 32;
const RESTORE_CASES: u64 = 13 << 32;
const TWEEDIE_POINTS: u64 = 14 << 32;
const MOMENT_DRAWS: u64 = 15 << 32;

struct Run {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Run {
    fn open(c: &Common) -> Result<Self> {
        let mut config = ExperimentConfig::load(&c.config)?;
        if let Some(seed) = c.seed {
            config.seeds = SeedSpec::derive(seed);
        }
        let out = config.output_dir(c.out.as_deref());
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn digest_hex(&self) -> String {
        self.config.digest().to_hex()
    }

    /// Writes `<name>.json` and returns it for printing.
    fn finish(&self, name: &str, summary: Value) -> Result<String> {
        let text = serde_json::to_string_pretty(&summary)?;
        fs::write(self.path(&format!("{name}.json")), &text)?;
        Ok(text)
    }

    fn load_model(&self) -> Result<DenoiserModel> {
        let path = self.path(MODEL);
        let model = DenoiserModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
        ensure_same_digest("checkpoint", &model.config_digest(), &self.config.digest())?;
        Ok(model)
    }

    fn dist(&self) -> Result<DataDistribution> {
        Ok(self.config.distribution()?)
    }
}

pub fn gen_data(c: &Common) -> Result<String> {
    let run = Run::open(c)?;
    let (dataset, reference) = generate_dataset(&run.config, run.config.seeds.data)?;
    dataset.write(run.path(DATASET))?;
    reference.write(run.path(REFERENCE))?;
    fs::write(run.path("config.toml"), run.config.to_toml_string()?)?;
    run.finish(
        "gen-data",
        json!({
            "command": "gen-data",
            "config_digest": run.digest_hex(),
            "records": dataset.len(),
            "n": dataset.n,
            "m": dataset.m,
            "dataset": run.path(DATASET),
            "reference": run.path(REFERENCE),
        }),
    )
}

pub fn train(c: &Common, steps: Option<usize>, objective: Option<Objective>) -> Result<String> {
    let mut run = Run::open(c)?;
    if let Some(s) = steps {
        run.config.optimizer.steps = s;
    }
    let objective = objective.unwrap_or_default();
    let config = &run.config;
    let dataset = CorruptedDataset::read(run.path(DATASET)).context("reading dataset")?;
    ensure_same_digest("dataset", &dataset.digest, &config.digest())?;

    let dist = run.dist()?;
    let process = config.process()?;
    let mut model = DenoiserModel::new(config.arch()?, &mut stream(config.seeds.train, 0))?;
    model.set_config_digest(config.digest());
    let held_out = HeldOut::build(&dist, &process, &[0.05, 0.2, 1.0], 256, &mut stream(config.seeds.train, 2))?;
    let ckpt_dir = run.path("checkpoints");
    let setup = TrainSetup {
        records: &dataset.records,
        process: &process,
        schedule: &config.schedule,
        optimizer: &config.optimizer,
        objective,
        seed: config.seeds.train,
        held_out: Some(&held_out),
        checkpoint_dir: Some(&ckpt_dir),
    };
    let report = training::train(&mut model, &setup)?;
    model.save(run.path(MODEL))?;
    let mut csv = Vec::new();
    write_metrics_csv(&report.metrics, &mut csv)?;
    fs::write(run.path("metrics.csv"), csv)?;
    let last = report.metrics.last();
    run.finish(
        "train",
        json!({
            "command": "train",
            "config_digest": run.digest_hex(),
            "objective": format!("{objective:?}").to_lowercase(),
            "steps": config.optimizer.steps,
            "final_loss": last.map(|r| r.loss),
            "oracle_gap": held_out.relative_gap(&model)?,
            "checkpoint": run.path(MODEL),
            "periodic_checkpoints": report.checkpoints,
        }),
    )
}

pub fn sample(c: &Common, kind: Option<SamplerKind>, oracle: bool) -> Result<String> {
    let mut run = Run::open(c)?;
    if let Some(k) = kind {
        run.config.sampler.kind = k;
    }
    let config = &run.config;
    let dist = run.dist()?;
    let model;
    let restorer: &dyn Restorer = if oracle {
        &dist
    } else {
        model = run.load_model()?;
        &model
    };
    let spec = &config.sampler;
    let samples =
        sample_many(restorer, &config.process()?, &config.schedule, spec, spec.num_samples, config.seeds.sample)?;
    let batch = CorruptedDataset::from_clean(&samples, config.digest(), config.seeds.sample)?;
    fs::write(run.path(SAMPLES), batch.to_bytes()?)?;
    fs::write(run.path("samples.toml"), config.to_toml_string()?)?;
    run.finish(
        "sample",
        json!({
            "command": "sample",
            "config_digest": run.digest_hex(),
            "sampler": format!("{:?}", spec.kind),
            "restorer": if oracle { "oracle" } else { "model" },
            "count": samples.len(),
            "samples": run.path(SAMPLES),
        }),
    )
}

/// Observed entries keep the measurement; the rest take the prior mean.
fn prior_fill(atilde: &Operator, y: &[f64], prior_mean: &[f64]) -> Vec<f64> {
    match atilde.as_mask() {
        Some(mask) => (0..prior_mean.len()).map(|i| if mask.is_observed(i) { y[i] } else { prior_mean[i] }).collect(),
        None => prior_mean.to_vec(),
    }
}

pub fn restore(c: &Common) -> Result<String> {
    let run = Run::open(c)?;
    let config = &run.config;
    let dist = run.dist()?;
    let process = config.process()?;
    let sigma = config.eval.restore_sigma;
    let model = if run.path(MODEL).exists() { Some(run.load_model()?) } else { None };
    let mut rng = stream(config.seeds.sample, RESTORE_CASES);
    let prior_mean = dist.mean();
    let (mut truth, mut oracle_out, mut fill_out, mut model_out) = (vec![], vec![], vec![], vec![]);
    for _ in 0..config.eval.restore_cases {
        let x0 = dist.sample(&mut rng);
        let (_, atilde) = process.sample_pair(&mut rng)?;
        let noisy: Vec<f64> =
            x0.iter().zip(standard_normal(&mut rng, x0.len())).map(|(x, e)| x + sigma * e).collect();
        let y = atilde.apply(&noisy)?;
        oracle_out.push(restore_once(&dist, &atilde, &y, sigma)?);
        fill_out.push(prior_fill(&atilde, &y, &prior_mean));
        if let Some(m) = &model {
            model_out.push(restore_once(m, &atilde, &y, sigma)?);
        }
        truth.push(x0);
    }
    let peak = config.eval.psnr_peak;
    let model_psnr = if model.is_some() { Some(psnr_pooled(&model_out, &truth, peak)?) } else { None };
    run.finish(
        "restore",
        json!({
            "command": "restore",
            "config_digest": run.digest_hex(),
            "cases": truth.len(),
            "sigma": sigma,
            "psnr_db": {
                "oracle": finite_or_string(psnr_pooled(&oracle_out, &truth, peak)?),
                "prior_fill": finite_or_string(psnr_pooled(&fill_out, &truth, peak)?),
                "model": model_psnr.map(finite_or_string),
            },
        }),
    )
}

fn finite_or_string(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

pub fn eval(c: &Common) -> Result<String> {
    let run = Run::open(c)?;
    let config = &run.config;
    let digest = config.digest();
    let generated = CorruptedDataset::read(run.path(SAMPLES)).context("reading samples")?;
    ensure_same_digest("sample batch", &generated.digest, &digest)?;
    let generated = generated.values();
    let dist = run.dist()?;
    let k = config.eval.reference_samples;
    let draw = |id: u64| {
        let mut rng = stream(config.seeds.sample, id);
        (0..k).map(|_| dist.sample(&mut rng)).collect::<Vec<_>>()
    };
    let (truth, truth_b) = (draw(TRUE_SET_A), draw(TRUE_SET_B));
    let projections = config.eval.num_projections;
    let sw = sliced_wasserstein(&generated, &truth, projections, &mut stream(config.seeds.sample, PROJECTIONS))?;
    let floor = sliced_wasserstein(&truth_b, &truth, projections, &mut stream(config.seeds.sample, PROJECTIONS))?;

    let mut report = MetricReport::new(generated.len(), truth.len(), digest);
    report.sliced_wasserstein = Some(sw);
    report.energy_distance = Some(energy_distance(&generated, &truth)?);

    let reference_path = run.path(REFERENCE);
    if reference_path.exists() {
        let train_set = ReferenceSet::read(&reference_path)?;
        ensure_same_digest("reference set", &train_set.digest, &digest)?;
        let stats = memorization_stat(&generated, &train_set.samples)?;
        fs::write(run.path("nn_similarity.svg"), stats.histogram.to_svg("top-1 cosine similarity to training data"))?;
        report.nn_similarity_quantiles = Some(stats.quantiles);
        report.nn_similarity_histogram = Some(stats.histogram);
    }
    if let Some(p) = restored_psnr(&run.path(RESTORE))? {
        report.psnr_db = Some(p);
    }
    fs::write(run.path("report.csv"), format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))?;
    fs::write(run.path("report.json"), report.to_json()?)?;
    run.finish(
        "eval",
        json!({
            "command": "eval",
            "config_digest": run.digest_hex(),
            "sliced_wasserstein": sw,
            "sliced_wasserstein_floor": floor,
            "energy_distance": report.energy_distance,
            "nn_similarity_quantiles": report.nn_similarity_quantiles,
            "report": run.path("report.json"),
        }),
    )
}

/// Model PSNR from a previous `restore` run, else the oracle's.
fn restored_psnr(path: &Path) -> Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let pick = |k: &str| match &v["psnr_db"][k] {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    };
    Ok(pick("model").or_else(|| pick("oracle")))
}

pub fn oracle_check(c: &Common) -> Result<String> {
    let run = Run::open(c)?;
    let config = &run.config;
    let DataDistribution::Gmm(gmm) = run.dist()? else {
        return Err(Error::Config("oracle-check needs a gaussian-mixture data family".into()).into());
    };
    let mut rng = stream(config.seeds.sample, TWEEDIE_POINTS);
    let sigmas = config.schedule.sigmas();
    let points: Vec<Vec<f64>> = (0..100)
        .map(|i| {
            let spread = 1.0 + sigmas[i % sigmas.len()];
            let x = gmm.sample(&mut rng);
            let e = standard_normal(&mut rng, x.len());
            x.iter().zip(e).map(|(a, b)| a + spread * b).collect()
        })
        .collect();
    let err = tweedie_max_rel_error(&gmm, &points, &sigmas)?;
    let threshold = 1e-6;
    let text = run.finish(
        "oracle-check",
        json!({
            "command": "oracle-check",
            "config_digest": run.digest_hex(),
            "points": points.len(),
            "sigmas": sigmas.len(),
            "max_rel_err": err,
            "threshold": threshold,
            "pass": err < threshold,
        }),
    )?;
    if err < threshold {
        Ok(text)
    } else {
        println!("{text}");
        anyhow::bail!("Tweedie consistency error {err:.3e} exceeds {threshold:.0e}")
    }
}

pub fn diagnose_moment(c: &Common, draws: usize) -> Result<String> {
    let run = Run::open(c)?;
    let config = &run.config;
    let process = config.process()?;
    let mut rng = stream(config.seeds.sample, MOMENT_DRAWS);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let (_, atilde) = process.sample_pair(&mut rng)?;
        let estimate = process.estimate_second_moment(&atilde, draws, &mut rng)?;
        let closed = match process.conditional_second_moment(&atilde) {
            Ok(m) => Some(m),
            Err(Error::NoClosedForm(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let z = closed.as_ref().map(|m| estimate.max_z_score(m));
        if let Some(z) = z {
            worst = worst.max(z);
        }
        let observed = match &atilde {
            Operator::Mask(m) => json!(m.observed().collect::<Vec<_>>()),
            Operator::Gaussian(g) => json!(g.valid_rows()),
        };
        rows.push(json!({
            "atilde_observed": observed,
            "estimate_diagonal": estimate.mean.diagonal().as_slice(),
            "closed_form_diagonal": closed.as_ref().map(|m| m.diagonal().as_slice().to_vec()),
            "max_z": z,
            "acceptance_rate": estimate.acceptance_rate,
        }));
    }
    let pass = worst <= 3.0;
    let text = run.finish(
        "diagnose-moment",
        json!({
            "command": "diagnose-moment",
            "config_digest": run.digest_hex(),
            "draws": draws,
            "operators": rows,
            "max_z": worst,
            "pass": pass,
        }),
    )?;
    if pass {
        Ok(text)
    } else {
        println!("{text}");
        anyhow::bail!("Monte Carlo moment differs from the closed form by {worst:.2} standard errors")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ambient::corruption::Mask;

    #[test]
    fn prior_fill_keeps_observed_entries() {
        let mask = Operator::Mask(Mask::with_erased(3, &[1]).unwrap());
        assert_eq!(prior_fill(&mask, &[1.0, 0.0, 3.0], &[9.0, 8.0, 7.0]), vec![1.0, 8.0, 3.0]);
    }
}
