use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::Serialize;
use zest_core::bootstrap::{
    self, BootstrapOutcome, BootstrapPlan, CommandEstimator, ConstantEstimator, IndexChoice, InitialEstimator,
    NaiveEstimator, RidgeEstimator,
};
use zest_core::data::{self, ColumnRef};
use zest_core::naive::{self, Estimate};
use zest_core::rng::{derive_seed, Domain};
use zest_core::simgen::{self, EstimatorSpec, EvalContext, ScenarioConfig, ScenarioSummary, SubsampleConfig};
use zest_core::zeroest;
use zest_core::{CovariateModel, LabeledDataset, UnlabeledDataset, VarSource};

use crate::artifact::{self, cell, join, Header};
use crate::{
    Cli, Command, CorrelateArgs, DataArgs, EstimateArgs, Failure, ImproveArgs, MomentArgs, MomentOptions,
    PreprocessArgs, RealbenchArgs, SimulateArgs, SourceArgs,
};

type Result<T> = std::result::Result<T, Failure>;

fn config_err(msg: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{msg}"))
}

fn note(cli: &Cli, msg: impl std::fmt::Display) {
    if !cli.quiet {
        eprintln!("{msg}");
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Estimate(a) => estimate(cli, a, seed),
        Command::Improve(a) => improve(cli, a, seed),
        Command::Preprocess(a) => preprocess(cli, a, seed),
        Command::Realbench(a) => realbench(cli, a, seed),
        Command::Correlate(a) => correlate(cli, a, seed),
    }
}

fn emit<C: Serialize, R: Serialize>(
    cli: &Cli,
    header: &Header<'_, C>,
    result: &R,
    csv: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>,
) -> Result<()> {
    artifact::emit(cli.out.as_deref(), cli.output, header, result, csv).map_err(Failure::Runtime)
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::Config)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))
        .map_err(Failure::Config)?;
    // an artifact carries its config in the header
    let body = match value.get("header").and_then(|h| h.get("config")) {
        Some(c) => c.to_string(),
        None => text,
    };
    ScenarioConfig::from_json(&body)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Config)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    let summary = simgen::run_scenario(&cfg)?;
    if summary.incomplete {
        note(cli, format!("{} estimator evaluations failed; see `failures`", summary.failures.len()));
    }
    let header = Header::new("simulate", cfg.seed, &cfg);
    emit(cli, &header, &summary, |w| Ok(summary.write_table_csv(w)?))?;
    if let Some(path) = &a.replicates {
        let mut w = artifact::sink(Some(path)).map_err(Failure::Runtime)?;
        let mut run = || -> anyhow::Result<()> {
            w.write_all(header.comment_lines()?.as_bytes())?;
            summary.write_replicates_csv(&mut w)?;
            w.flush()?;
            Ok(())
        };
        run().map_err(Failure::Runtime)?;
    }
    Ok(())
}

fn response(s: &str) -> ColumnRef {
    s.parse().expect("infallible")
}

fn load_labeled(path: &Path, resp: &str, no_header: bool) -> Result<LabeledDataset> {
    data::load_csv(path, &response(resp), !no_header)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Runtime)
}

/// Covariate model and, for the empirical variance of `g`, the whitened
/// unlabeled rows.
fn covariate_model(
    m: &MomentArgs,
    o: &MomentOptions,
    no_header: bool,
    p: usize,
) -> Result<(CovariateModel, Option<UnlabeledDataset>)> {
    let source = VarSource::from(o.var_source);
    if source == VarSource::EmpiricalUnlabeled && m.unlabeled.is_none() {
        return Err(config_err("--var-source empirical needs --unlabeled"));
    }
    if o.bandwidth.is_some() && m.unlabeled.is_none() {
        return Err(config_err("--bandwidth only applies to --unlabeled"));
    }
    if let Some(path) = &m.unlabeled {
        let u = data::load_unlabeled_csv(path, !no_header)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(Failure::Runtime)?;
        let model = zest_core::estimate_moments(&u, o.bandwidth)?;
        let uw = match source {
            VarSource::EmpiricalUnlabeled => Some(zest_core::whiten_unlabeled(&model, &u)?),
            VarSource::AnalyticIndependent => None,
        };
        return Ok((model, uw));
    }
    if let Some(path) = &m.moments {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(Failure::Config)?;
        let model = CovariateModel::from_json(&text)
            .with_context(|| format!("invalid covariate model {}", path.display()))
            .map_err(Failure::Config)?;
        return Ok((model, None));
    }
    Ok((CovariateModel::identity(p), None))
}

fn prepared(d: &DataArgs, m: &MomentArgs, o: &MomentOptions) -> Result<(LabeledDataset, Option<UnlabeledDataset>)> {
    let raw = load_labeled(&d.data, &d.response, d.no_header)?;
    let (model, u) = covariate_model(m, o, d.no_header, raw.p())?;
    let mut w = zest_core::whiten(&model, &raw)?;
    if !d.no_center {
        w = w.center_response();
    }
    Ok((w, u))
}

#[derive(Debug, Serialize)]
struct EstimateRecord {
    estimator: String,
    tau2: f64,
    sigma2: f64,
    variance_hat: Option<f64>,
    raw_variance_hat: Option<f64>,
    selection_set: Option<Vec<usize>>,
    flags: Vec<zest_core::Flag>,
}

/// Variance estimate attached to the estimators that have one.
fn variance_for(
    spec: EstimatorSpec,
    e: &Estimate,
    ctx: &EvalContext<'_>,
) -> zest_core::Result<Option<f64>> {
    let (d, w) = (ctx.data, ctx.w);
    let vn = naive::var_naive_ustat_hat(w)?;
    let single_over = |s: &[usize]| -> zest_core::Result<f64> {
        if s.len() < 2 {
            return Ok(vn);
        }
        let z = zeroest::pairwise_zero_stat(d, s, ctx.var_source, ctx.unlabeled)?;
        zeroest::var_single_hat(vn, w, d, &z)
    };
    Ok(match spec {
        EstimatorSpec::Naive => Some(vn),
        EstimatorSpec::Single => Some(single_over(&(0..d.p()).collect::<Vec<_>>())?),
        EstimatorSpec::SelectionSingle => Some(single_over(e.selection_set.as_deref().unwrap_or(&[]))?),
        EstimatorSpec::Selection => {
            let b = naive::beta_sq_hat_all(w)?;
            let sel: Vec<f64> = e.selection_set.as_deref().unwrap_or(&[]).iter().map(|&j| b[j]).collect();
            Some(zeroest::var_selection_hat(vn, &sel, d.n(), None)?)
        }
        _ => None,
    })
}

fn estimate(cli: &Cli, a: &EstimateArgs, seed: u64) -> Result<()> {
    if a.estimator.is_empty() {
        return Err(config_err("no estimators requested"));
    }
    let (d, u) = prepared(&a.data, &a.moments, &a.options)?;
    let w = zest_core::w_matrix(&d)?;
    let ctx = EvalContext {
        data: &d,
        w: &w,
        beta: None,
        unlabeled: u.as_ref(),
        var_source: a.options.var_source.into(),
        bootstrap_m: 100,
        seed,
        split_selection: false,
        resampling: Default::default(),
    };
    let mut records = Vec::with_capacity(a.estimator.len());
    for &spec in &a.estimator {
        let mut e = simgen::evaluate(spec, &ctx)?;
        if let Some(v) = variance_for(spec, &e, &ctx)? {
            e = e.with_variance(v);
        }
        records.push(EstimateRecord {
            estimator: spec.to_string(),
            tau2: e.value,
            sigma2: naive::sigma2_hat(&d, &e)?.value,
            variance_hat: e.variance_hat,
            raw_variance_hat: e.raw_variance_hat,
            selection_set: e.selection_set,
            flags: e.flags,
        });
    }
    let header = Header::new("estimate", seed, a);
    emit(cli, &header, &records, |w| {
        writeln!(w, "estimator,tau2,sigma2,variance_hat,raw_variance_hat,selection_set,flags")?;
        for r in &records {
            let flags: Vec<String> = r
                .flags
                .iter()
                .map(|f| serde_json::to_value(f).map(|v| v.as_str().unwrap_or_default().to_string()))
                .collect::<serde_json::Result<_>>()?;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.estimator,
                r.tau2,
                r.sigma2,
                cell(r.variance_hat),
                cell(r.raw_variance_hat),
                r.selection_set.as_deref().map(|s| join(s, ";")).unwrap_or_default(),
                flags.join(";")
            )?;
        }
        Ok(())
    })
}

struct DickerEstimator;

impl InitialEstimator for DickerEstimator {
    fn name(&self) -> &str {
        "dicker"
    }

    fn estimate(&self, d: &LabeledDataset) -> zest_core::Result<f64> {
        Ok(naive::dicker_tau2(d))
    }
}

fn initial_estimator(spec: &str, n: usize, seed: u64) -> Result<Box<dyn InitialEstimator>> {
    if let Some(v) = spec.strip_prefix("constant:") {
        let v: f64 = v.trim().parse().map_err(|_| config_err(format!("bad constant {v:?}")))?;
        return Ok(Box::new(ConstantEstimator(v)));
    }
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        return Ok(Box::new(CommandEstimator::parse(cmd)?));
    }
    Ok(match spec {
        "naive" => Box::new(NaiveEstimator),
        "dicker" => Box::new(DickerEstimator),
        "ridge" => Box::new(RidgeEstimator {
            lambda_grid: None,
            folds: 10.min(n),
            seed: derive_seed(seed, Domain::CrossValidation, 0),
        }),
        other => return Err(config_err(format!("unknown initial estimator {other:?}"))),
    })
}

fn index_choice(s: &str, p: usize) -> Result<IndexChoice> {
    Ok(match s {
        "all" => IndexChoice::All,
        "gap" => IndexChoice::Gap,
        list => {
            let idx = list
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| config_err(format!("bad index list {list:?}")))?;
            if let Some(&j) = idx.iter().find(|&&j| j >= p) {
                return Err(config_err(format!("index {j} out of range for {p} covariates")));
            }
            IndexChoice::Fixed(idx)
        }
    })
}

#[derive(Debug, Serialize)]
struct ImproveResult<'a> {
    initial_estimator: &'a str,
    #[serde(flatten)]
    outcome: &'a BootstrapOutcome,
}

fn improve(cli: &Cli, a: &ImproveArgs, seed: u64) -> Result<()> {
    let (d, u) = prepared(&a.data, &a.moments, &a.options)?;
    let est = initial_estimator(&a.initial, d.n(), seed)?;
    let plan = BootstrapPlan {
        m: a.m,
        seed,
        selection: index_choice(&a.selection, d.p())?,
        resampling: a.resampling.into(),
    };
    let outcome = bootstrap::empirical_improve(&d, est.as_ref(), &plan, a.options.var_source.into(), u.as_ref())?;
    let result = ImproveResult {
        initial_estimator: est.name(),
        outcome: &outcome,
    };
    let header = Header::new("improve", seed, a);
    emit(cli, &header, &result, |w| {
        writeln!(w, "initial_estimator,estimate,initial,c_tilde,covariance,covariance_se,zero_value,selection_set")?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            est.name(),
            outcome.estimate.value,
            outcome.initial,
            outcome.c_tilde,
            outcome.covariance,
            outcome.covariance_se,
            outcome.zero_value,
            outcome.estimate.selection_set.as_deref().map(|s| join(s, ";")).unwrap_or_default()
        )?;
        Ok(())
    })
}

#[derive(Debug, Default, Serialize)]
struct PreprocessReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<DataReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    moments: Option<MomentsReport>,
}

#[derive(Debug, Serialize)]
struct DataReport {
    n: usize,
    p_in: usize,
    p_with_interactions: usize,
    /// Columns kept by the collinearity pruning, zero-based.
    kept: Vec<usize>,
    p_out: usize,
}

#[derive(Debug, Serialize)]
struct MomentsReport {
    n: usize,
    p: usize,
    bandwidth: Option<usize>,
    floored_eigenvalues: usize,
}

fn preprocess(cli: &Cli, a: &PreprocessArgs, seed: u64) -> Result<()> {
    if a.data.is_none() && a.unlabeled.is_none() {
        return Err(config_err("nothing to do: give --data and/or --unlabeled"));
    }
    let header = Header::new("preprocess", seed, a);
    let mut report = PreprocessReport::default();
    if let (Some(path), Some(out)) = (&a.data, &a.data_out) {
        let d = load_labeled(path, &a.response, a.no_header)?;
        let p_in = d.p();
        let d = match a.interactions.as_deref() {
            None => d,
            Some("all") => data::add_pairwise_interactions(&d, None)?,
            Some(spec) => {
                let k: usize = spec
                    .strip_prefix("top:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| config_err(format!("--interactions expects `all` or `top:K`, got {spec:?}")))?;
                let top = data::top_t_value_columns(&d, k)?;
                data::add_pairwise_interactions(&d, Some(&top))?
            }
        };
        let p_with = d.p();
        let (d, kept) = match a.drop_collinear {
            Some(tol) => data::drop_collinear(&d, tol)?,
            None => {
                let all = (0..d.p()).collect();
                (d, all)
            }
        };
        let mut w = artifact::sink(Some(out)).map_err(Failure::Runtime)?;
        let mut write = || -> anyhow::Result<()> {
            w.write_all(header.comment_lines()?.as_bytes())?;
            data::write_csv(&d, &mut w)?;
            w.flush()?;
            Ok(())
        };
        write().map_err(Failure::Runtime)?;
        report.data = Some(DataReport {
            n: d.n(),
            p_in,
            p_with_interactions: p_with,
            p_out: d.p(),
            kept,
        });
    }
    if let (Some(path), Some(out)) = (&a.unlabeled, &a.moments_out) {
        let u = data::load_unlabeled_csv(path, !a.unlabeled_no_header)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(Failure::Runtime)?;
        let m = zest_core::estimate_moments(&u, a.bandwidth)?;
        let mut doc: serde_json::Value = serde_json::from_str(&m.to_json()?).map_err(|e| Failure::Runtime(e.into()))?;
        doc["header"] = serde_json::to_value(&header).map_err(|e| Failure::Runtime(e.into()))?;
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::Runtime(e.into()))? + "\n";
        fs::write(out, text)
            .with_context(|| format!("cannot write {}", out.display()))
            .map_err(Failure::Runtime)?;
        report.moments = Some(MomentsReport {
            n: u.n(),
            p: u.p(),
            bandwidth: m.bandwidth(),
            floored_eigenvalues: m.floored_eigenvalues(),
        });
    }
    emit(cli, &header, &report, |w| {
        writeln!(w, "artifact,n,p_in,p_out,detail")?;
        if let Some(r) = &report.data {
            writeln!(w, "data,{},{},{},kept={}", r.n, r.p_in, r.p_out, join(&r.kept, ";"))?;
        }
        if let Some(r) = &report.moments {
            let b = r.bandwidth.map(|b| b.to_string()).unwrap_or_default();
            writeln!(w, "moments,{},{},{},bandwidth={b};floored={}", r.n, r.p, r.p, r.floored_eigenvalues)?;
        }
        Ok(())
    })
}

fn dataset(source: &SourceArgs, resp: &str, no_header: bool, seed: u64) -> Result<LabeledDataset> {
    match (&source.data, source.synthetic) {
        (Some(path), _) => load_labeled(path, resp, no_header),
        (None, Some(n)) => Ok(simgen::synthetic_dataset(n, seed)?),
        (None, None) => Err(config_err("give --data or --synthetic")),
    }
}

#[derive(Debug, Serialize)]
struct RealbenchConfig<'a> {
    source: &'a SourceArgs,
    response: &'a str,
    subsample: &'a SubsampleConfig,
}

fn realbench(cli: &Cli, a: &RealbenchArgs, seed: u64) -> Result<()> {
    let d = dataset(&a.source, &a.response, a.no_header, seed)?;
    let cfg = SubsampleConfig {
        n_sub: a.n_sub,
        reps: a.reps,
        estimators: a.estimator.clone(),
        seed,
        bandwidth: a.options.bandwidth,
        center_response: !a.no_center,
        var_source: a.options.var_source.into(),
        bootstrap_m: a.bootstrap_m,
        resampling: a.resampling.into(),
    };
    let summary: ScenarioSummary = simgen::subsample_study(&d, &cfg)?;
    if summary.incomplete {
        note(cli, format!("{} estimator evaluations failed; see `failures`", summary.failures.len()));
    }
    let config = RealbenchConfig {
        source: &a.source,
        response: &a.response,
        subsample: &cfg,
    };
    let header = Header::new("realbench", seed, &config);
    emit(cli, &header, &summary, |w| Ok(summary.write_table_csv(w)?))
}

/// Fewer subsamples give meaningless correlations.
const MIN_CORRELATION_REPS: usize = 10;

fn correlate(cli: &Cli, a: &CorrelateArgs, seed: u64) -> Result<()> {
    if a.reps < MIN_CORRELATION_REPS {
        return Err(config_err(format!("--reps must be at least {MIN_CORRELATION_REPS}, got {}", a.reps)));
    }
    let d = dataset(&a.source, &a.response, a.no_header, seed)?;
    let table = simgen::correlation_study(&d, a.n_sub, a.reps, &a.initial, &a.zero, seed, a.bandwidth)?;
    let header = Header::new("correlate", seed, a);
    emit(cli, &header, &table, |w| {
        writeln!(w, "initial,{}", table.zero.join(","))?;
        for (name, row) in table.initial.iter().zip(&table.cells) {
            let cells: Vec<String> = row.iter().map(|c| cell(*c)).collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    })
}
