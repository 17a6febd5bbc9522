use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use stgp_core::covariance::distance_matrix;
use stgp_core::diagnostics::{acf_by_location, ape_brackets, moran_by_time, residuals, share_significant, CellSummary};
use stgp_core::dnc::{draw_moments, summarize, write_summary_csv, SummaryRow};
use stgp_core::rng::chain_rng;
use stgp_core::sampler::read_draws_csv;
use stgp_core::*;

use crate::config::{parse_kv, RunConfig};
use crate::CliError;

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates the output directory and writes the config echo into it.
fn prepare_out(cfg: &RunConfig, command: &str) -> CliResult<PathBuf> {
    let out = cfg.require_path("out")?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_text(&out.join("config.txt"), &cfg.echo(command))?;
    Ok(out)
}

/// Loads a CSV and applies the configured covariate transforms. The time
/// trend is computed against `span` months from `origin` when given.
fn load_input(cfg: &RunConfig, path: &Path, origin: Option<i64>, span: Option<usize>) -> CliResult<Dataset> {
    let mut schema = cfg.schema()?;
    if origin.is_some() {
        schema.time_origin = origin;
    }
    let mut ds = load_dataset(path, &schema)?;
    let log1p = cfg.list("log1p");
    if !log1p.is_empty() {
        ds = ds.log1p_covariates(&log1p)?;
    }
    if cfg.get::<bool>("time_trend")? {
        ds = ds.with_time_trend(span.unwrap_or(ds.n_times));
    }
    Ok(ds)
}

pub fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let out = prepare_out(cfg, "simulate")?;
    let sim = cfg.simulation()?;
    let (ds, truth) = stgp_core::simulate(&sim)?;
    ds.write_csv(out.join("data.csv"))?;
    truth.write_kv(out.join("truth.txt"))?;
    truth.write_v_csv(out.join("truth_v.csv"), &ds)?;

    let months: usize = cfg.get("holdout_months")?;
    let held: usize = cfg.get("holdout_locations")?;
    match (months, held) {
        (0, 0) => {}
        (k, 0) => {
            if k >= ds.n_times {
                return Err(CliError::Usage(format!("cannot hold out {k} of {} months", ds.n_times)));
            }
            let cut = ds.n_times - k;
            let (test, train) = ds.split_observations(|o| o.time_index >= cut);
            train.write_csv(out.join("train.csv"))?;
            test.write_csv(out.join("test.csv"))?;
        }
        (0, k) => {
            if k >= ds.n_locations() {
                return Err(CliError::Usage(format!("cannot hold out {k} of {} locations", ds.n_locations())));
            }
            let mut order: Vec<usize> = (0..ds.n_locations()).collect();
            order.shuffle(&mut chain_rng(sim.seed, u64::MAX));
            let (test_locs, train_locs) = order.split_at(k);
            let (mut test_locs, mut train_locs) = (test_locs.to_vec(), train_locs.to_vec());
            test_locs.sort_unstable();
            train_locs.sort_unstable();
            ds.select_locations(&train_locs).write_csv(out.join("train.csv"))?;
            ds.select_locations(&test_locs).write_csv(out.join("test.csv"))?;
        }
        _ => {
            return Err(CliError::Usage(
                "`holdout_months` and `holdout_locations` are mutually exclusive".into(),
            ))
        }
    }
    write_text(&out.join("timing.txt"), &format!("total_secs={}\n", start.elapsed().as_secs_f64()))?;
    eprintln!(
        "simulate: {} locations, {} months, {} observations -> {}",
        ds.n_locations(),
        ds.n_times,
        ds.n_obs(),
        out.display()
    );
    Ok(())
}

fn subset_dir(root: &Path, q: usize) -> PathBuf {
    root.join(format!("subset_{q:03}"))
}

pub fn fit(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let data = cfg.require_path("data")?;
    let out = prepare_out(cfg, "fit")?;
    let ds = load_input(cfg, &data, None, None)?;
    let q: usize = cfg.get("subsets")?;
    let seed: u64 = cfg.get("seed")?;
    let partition = partition_locations(&ds, q, seed)?;
    let priors = cfg.priors()?;
    let mcmc = cfg.mcmc()?;
    let inverse = cfg.spatial_inverse()?;

    let dnc = fit_dnc_with(&ds, &partition, &priors, &mcmc, inverse)?;
    let combine_start = Instant::now();
    let combined = wasp_combine(&dnc.fits)?;
    let summary = summarize(&combined)?;
    let v_hat = stack_v(&dnc.fits, ds.n_locations())?;
    let combine_secs = combine_start.elapsed().as_secs_f64();

    ds.write_csv(out.join("training.csv"))?;
    write_text(
        &out.join("dataset.txt"),
        &format!("time_origin={}\nn_times={}\n", ds.time_origin, ds.n_times),
    )?;
    partition.write_csv(out.join("partition.csv"), &ds)?;
    for f in &dnc.fits {
        f.save(subset_dir(&out, f.subset_index), &ds)?;
    }
    combined.write_csv(out.join("combined_draws.csv"))?;
    write_summary_csv(out.join("summary.csv"), &summary)?;
    v_hat.write_csv(out.join("v_hat.csv"), &ds)?;
    write_geweke(&out.join("geweke.csv"), &dnc.fits)?;

    let t = &dnc.times;
    write_text(
        &out.join("timing.txt"),
        &format!(
            "designs_secs={}\ntables_secs={}\nsampling_secs={}\ncombine_secs={combine_secs}\ntotal_secs={}\n",
            t.designs.as_secs_f64(),
            t.tables.as_secs_f64(),
            t.sampling.as_secs_f64(),
            start.elapsed().as_secs_f64()
        ),
    )?;
    let converged = dnc.fits.iter().filter(|f| f.chain.meta.converged).count();
    eprintln!(
        "fit: {} observations in {q} subset(s), {} draws each; Geweke-converged subsets {converged}/{q} -> {}",
        ds.n_obs(),
        mcmc.n_retained(),
        out.display()
    );
    Ok(())
}

fn write_geweke(path: &Path, fits: &[SubsetFit]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(["subset_index", "parameter", "z", "converged"]).map_err(Error::from)?;
    for f in fits {
        for g in &f.chain.meta.geweke {
            let z = g.z.map_or("NA".to_string(), |z| z.to_string());
            let ok = g.z.is_none_or(|z| z.abs() <= 1.96);
            w.write_record([f.subset_index.to_string(), g.name.clone(), z, ok.to_string()])
                .map_err(Error::from)?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Everything `fit` leaves behind, reloaded.
struct FitArtifacts {
    config: RunConfig,
    training: Dataset,
    fits: Vec<SubsetFit>,
    combined: CombinedPosterior,
}

fn load_fit(dir: &Path) -> CliResult<FitArtifacts> {
    let read = |name: &str| -> CliResult<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| io_err(&p, e))
    };
    let mut config = RunConfig::default();
    config.apply(parse_kv(&read("config.txt")?, "config.txt")?)?;
    let shape: HashMap<String, String> = parse_kv(&read("dataset.txt")?, "dataset.txt")?.into_iter().collect();
    let num = |k: &str| -> CliResult<i64> {
        shape
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Core(Error::Data(format!("dataset.txt: bad or missing `{k}`"))))
    };
    let schema = CsvSchema {
        time_origin: Some(num("time_origin")?),
        n_times: Some(num("n_times")? as usize),
        ..CsvSchema::default()
    };
    let training = load_dataset(dir.join("training.csv"), &schema)?;
    let partition = Partition::read_csv(dir.join("partition.csv"), &training)?;
    let fits = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(q, locs)| SubsetFit::load(subset_dir(dir, q), &training, locs.clone()))
        .collect::<Result<Vec<_>>>()?;
    let (names, draws) = read_draws_csv(dir.join("combined_draws.csv"))?;
    let (mean, cov) = draw_moments(&draws)?;
    Ok(FitArtifacts {
        config,
        training,
        fits,
        combined: CombinedPosterior { names, draws, mean, cov },
    })
}

impl FitArtifacts {
    fn beta_hat(&self) -> Vec<f64> {
        let k = self.training.n_covariates() + 1;
        self.combined.mean.as_slice()[..k].to_vec()
    }

    fn v_hat(&self) -> CliResult<LatentEstimate> {
        Ok(stack_v(&self.fits, self.training.n_locations())?)
    }
}

/// Reorders the covariate columns of `ds` to `names`.
fn align_covariates(ds: Dataset, names: &[String]) -> CliResult<Dataset> {
    if ds.covariate_names == names {
        return Ok(ds);
    }
    let cols = names
        .iter()
        .map(|n| {
            ds.covariate_names.iter().position(|c| c == n).ok_or_else(|| {
                CliError::Core(Error::Data(format!(
                    "test data lacks covariate `{n}` used by the fit (has {:?})",
                    ds.covariate_names
                )))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut out = ds;
    for o in &mut out.observations {
        o.covariates = cols.iter().map(|&c| o.covariates[c]).collect();
    }
    out.covariate_names = names.to_vec();
    Ok(out)
}

fn write_group_metrics(path: &Path, key: &str, rows: &[(String, MetricsReport)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record([key, "n", "mae", "mape", "rmse", "vae"]).map_err(Error::from)?;
    for (k, m) in rows {
        w.write_record([
            k.clone(),
            m.n.to_string(),
            m.mae.to_string(),
            m.mape.map_or("NA".into(), |v| v.to_string()),
            m.rmse.to_string(),
            m.vae.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_brackets(path: &Path, shares: [f64; 4]) -> CliResult<()> {
    let labels = ["<3%", "3-5%", "5-10%", ">=10%"];
    let mut text = String::from("ape_bracket,share\n");
    for (l, s) in labels.iter().zip(shares) {
        text.push_str(&format!("{l},{s}\n"));
    }
    write_text(path, &text)
}

pub fn predict(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let fit_dir = cfg.require_path("fit_dir")?;
    let test_path = cfg.require_path("test")?;
    let out = prepare_out(cfg, "predict")?;
    let fit = load_fit(&fit_dir)?;
    let training = &fit.training;
    let test = load_input(&fit.config, &test_path, Some(training.time_origin), Some(training.n_times))?;
    let test = align_covariates(test, &training.covariate_names)?;

    let preds = build_predictors(&fit.fits, training, &fit.config.grid()?, cfg.spatial_inverse()?)?;
    let mode = match cfg.raw("predict_mode") {
        "plugin" => PredictMode::PlugIn,
        "draws" => PredictMode::Draws {
            n_draws: cfg.get("n_draws")?,
            seed: cfg.get("seed")?,
        },
        other => return Err(CliError::Usage(format!("`predict_mode={other}`: expected plugin or draws"))),
    };
    let batch = predict_batch(&preds, &test, 0, mode)?;

    batch.write_csv(out.join("predictions.csv"), &test, 0, cfg.get("per_subset")?)?;
    let mut kv = batch.metrics.to_kv();
    kv.push_str(&format!("n_subsets={}\nfloored_variances={}\n", preds.len(), batch.n_floored));
    write_text(&out.join("metrics.txt"), &kv)?;
    let by_loc: Vec<(String, MetricsReport)> = batch
        .per_location
        .iter()
        .map(|(i, m)| (test.locations[*i].id.clone(), m.clone()))
        .collect();
    write_group_metrics(&out.join("metrics_by_location.csv"), "location_id", &by_loc)?;
    let by_time: Vec<(String, MetricsReport)> = batch
        .per_time
        .iter()
        .map(|(t, m)| ((*t as i64 + test.time_origin).to_string(), m.clone()))
        .collect();
    write_group_metrics(&out.join("metrics_by_time.csv"), "time_index", &by_time)?;
    write_brackets(&out.join("ape_brackets.csv"), batch.ape_brackets)?;
    write_text(&out.join("timing.txt"), &format!("total_secs={}\n", start.elapsed().as_secs_f64()))?;
    eprintln!(
        "predict: {} test rows, MAPE {} -> {}",
        test.n_obs(),
        batch.metrics.mape.map_or("NA".into(), |m| format!("{m:.3}%")),
        out.display()
    );
    Ok(())
}

pub fn diagnose(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let residual_mode = match cfg.raw("mode") {
        "raw" => false,
        "residual" => true,
        other => return Err(CliError::Usage(format!("`mode={other}`: expected raw or residual"))),
    };
    let fit = match cfg.path("fit_dir") {
        Some(dir) => Some(load_fit(&dir)?),
        None if residual_mode => {
            return Err(CliError::Usage("residual diagnostics need `fit_dir`".into()));
        }
        None => None,
    };
    let summary = match cfg.raw("cell_summary") {
        "mean" => CellSummary::Mean,
        "median" => CellSummary::Median,
        other => return Err(CliError::Usage(format!("`cell_summary={other}`: expected mean or median"))),
    };
    let alpha: f64 = cfg.get("alpha")?;
    let max_lag: usize = cfg.get("max_lag")?;
    let out = prepare_out(cfg, "diagnose")?;

    let loaded;
    let ds = match &fit {
        Some(f) => &f.training,
        None => {
            loaded = load_input(cfg, &cfg.require_path("data")?, None, None)?;
            &loaded
        }
    };
    let fitted_parts = match &fit {
        Some(f) => Some((f.beta_hat(), f.v_hat()?)),
        None => None,
    };
    let values: Vec<f64> = match (&fitted_parts, residual_mode) {
        (Some((beta, v_hat)), true) => residuals(ds, beta, v_hat)?,
        _ => ds.observations.iter().map(|o| o.response).collect(),
    };

    let distances = distance_matrix(&ds.locations);
    let slices = moran_by_time(ds, &values, &distances, alpha, summary)?;
    let mut text = String::from("time_index,n_locations,I,expected,z,p,significant\n");
    for s in &slices {
        let t = s.time_index as i64 + ds.time_origin;
        match &s.result {
            Ok(m) => {
                let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
                let sig = m.significant().map_or("NA".to_string(), |b| b.to_string());
                text.push_str(&format!("{t},{},{},{},{},{},{sig}\n", s.n_locations, m.i, m.expected, opt(m.z), opt(m.p_value)));
            }
            Err(_) => text.push_str(&format!("{t},{},NA,NA,NA,NA,NA\n", s.n_locations)),
        }
    }
    write_text(&out.join("moran.csv"), &text)?;

    let acfs = acf_by_location(ds, &values, max_lag, alpha)?;
    let mut text = String::from("location_id,lag,acf,bound\n");
    for a in &acfs {
        if let Ok(r) = &a.result {
            for (lag, v) in r.values.iter().enumerate() {
                text.push_str(&format!("{},{},{v},{}\n", ds.locations[a.location].id, lag + 1, r.bound));
            }
        }
    }
    write_text(&out.join("acf.csv"), &text)?;

    let share = share_significant(&slices);
    write_text(
        &out.join("moran_summary.txt"),
        &format!(
            "mode={}\nalpha={alpha}\nslices={}\nshare_significant={}\n",
            cfg.raw("mode"),
            slices.len(),
            share.map_or("NA".into(), |s| s.to_string())
        ),
    )?;
    if let Some((beta, v_hat)) = &fitted_parts {
        let res = residuals(ds, beta, v_hat)?;
        let y: Vec<f64> = ds.observations.iter().map(|o| o.response).collect();
        let fitted: Vec<f64> = y.iter().zip(&res).map(|(y, r)| y - r).collect();
        write_text(&out.join("metrics.txt"), &metrics(&y, &fitted)?.to_kv())?;
    }
    write_text(&out.join("timing.txt"), &format!("total_secs={}\n", start.elapsed().as_secs_f64()))?;
    eprintln!(
        "diagnose: {} slices, {} Moran-significant at {alpha} -> {}",
        slices.len(),
        share.map_or("NA".into(), |s| format!("{:.1}%", 100.0 * s)),
        out.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let fit_dir = cfg.require_path("fit_dir")?;
    let out = prepare_out(cfg, "evaluate")?;
    let fit = load_fit(&fit_dir)?;
    let ds = &fit.training;
    let res = residuals(ds, &fit.beta_hat(), &fit.v_hat()?)?;
    let y: Vec<f64> = ds.observations.iter().map(|o| o.response).collect();
    let fitted: Vec<f64> = y.iter().zip(&res).map(|(y, r)| y - r).collect();
    let m = metrics(&y, &fitted)?;
    write_text(&out.join("metrics.txt"), &m.to_kv())?;
    write_brackets(&out.join("ape_brackets.csv"), ape_brackets(&y, &fitted))?;

    if let Some(truth_path) = cfg.path("truth") {
        let text = fs::read_to_string(&truth_path).map_err(|e| io_err(&truth_path, e))?;
        let truth: HashMap<String, String> = parse_kv(&text, "truth")?.into_iter().collect();
        let rows = summarize(&fit.combined)?;
        write_recovery(&out.join("recovery.csv"), &rows, &truth)?;
    }
    write_text(&out.join("timing.txt"), &format!("total_secs={}\n", start.elapsed().as_secs_f64()))?;
    eprintln!(
        "evaluate: R2 {}, MAPE {} -> {}",
        m.r2.map_or("NA".into(), |v| format!("{v:.4}")),
        m.mape.map_or("NA".into(), |v| format!("{v:.3}%")),
        out.display()
    );
    Ok(())
}

/// Truth keys are `beta_<k>` in coefficient order, then the variance and
/// decay names as they appear in the draws.
fn write_recovery(path: &Path, rows: &[SummaryRow], truth: &HashMap<String, String>) -> CliResult<()> {
    let mut text = String::from("parameter,truth,mean,q2.5,q97.5,covered\n");
    let mut beta_k = 0;
    for r in rows {
        let key = if r.name.starts_with("sigma_") || r.name.starts_with("phi_") {
            r.name.clone()
        } else {
            beta_k += 1;
            format!("beta_{}", beta_k - 1)
        };
        let Some(t) = truth.get(&key).and_then(|v| v.parse::<f64>().ok()) else {
            continue;
        };
        let covered = r.lower <= t && t <= r.upper;
        text.push_str(&format!("{},{t},{},{},{},{covered}\n", r.name, r.mean, r.lower, r.upper));
    }
    write_text(path, &text)
}
