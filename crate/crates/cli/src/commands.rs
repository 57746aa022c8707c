use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use vessel::dataset::{
    generate_dataset, sample_conditions, split, stream_rng, ConditionDataset, Provenance,
};
use vessel::evaluation::{
    axial_profile, ensemble_tracer_report, fmt_float, held_out_residual_points, residual_mse,
    test_mse, write_ensemble_csv, write_profile_csv, ForcingSource, ProfileReference, ResidualMse,
    TestMse,
};
use vessel::inr::SurrogateModel;
use vessel::mms::{MmsSolution, MmsSpec};
use vessel::physics::PhysicsContext;
use vessel::tracer::{simulate, DivergenceSummary, ProbeSeries};
use vessel::trainer::{
    density_for, run_dir_name, run_study, train, write_history_csv, EpochRecord, RunStatus,
    StudyReport,
};
use vessel::{DomainBounds, FlowField, OperatingCondition};

use crate::config::PipelineConfig;
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::{Cli, Command, Usage};

const EVAL_STREAM: u64 = 20;

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.command)?;
    if let Some(w) = cli.workers {
        cfg.study.workers = w;
    }
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    vessel::par::with_workers(cli.workers.unwrap_or(0), || dispatch(&cli.command, &cfg))
}

fn apply_overrides(cfg: &mut PipelineConfig, cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => {
            set(&mut cfg.data.conditions, a.conditions);
            set(&mut cfg.data.points, a.points);
            set(&mut cfg.data.seed, a.seed);
            if let Some(p) = &a.spec {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                cfg.data.spec = toml::from_str(&text)
                    .map_err(|e| Usage(format!("spec {}: {e}", p.display())))?;
            }
        }
        Command::Train(a) => {
            set(&mut cfg.train.variant, a.variant);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.seed, a.seed);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.lr0, a.lr);
        }
        Command::Study(a) => {
            set(&mut cfg.study.sizes, a.sizes.clone());
            set(&mut cfg.study.seeds, a.seeds.clone());
            set(&mut cfg.study.variants, a.variants.clone());
            set(&mut cfg.train.epochs, a.epochs);
        }
        Command::Profiles(a) => {
            set(&mut cfg.eval.profile_r, a.r);
            set(&mut cfg.eval.profile_theta, a.theta);
        }
        Command::Tracer(a) => {
            if let Some(g) = &a.grid {
                cfg.tracer.grid = g
                    .as_slice()
                    .try_into()
                    .map_err(|_| Usage(format!("--grid needs three cell counts, got {g:?}")))?;
            }
            set(&mut cfg.tracer.scheme, a.scheme);
            set(&mut cfg.tracer.t_end, a.t_end);
            set(&mut cfg.tracer.dt, a.dt);
        }
        Command::Report(a) => set(&mut cfg.tracer.t_end, a.t_end),
        Command::Eval(_) | Command::Verify(_) => {}
    }
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Usage(format!("missing required flag --{flag}")).into())
}

fn out_dir(out: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = need(out, "out")?.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_dataset(path: &Path) -> anyhow::Result<ConditionDataset> {
    ConditionDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<SurrogateModel> {
    SurrogateModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn condition(bounds: &DomainBounds, rpm: f64, height: f64) -> anyhow::Result<OperatingCondition> {
    let c = OperatingCondition::new(rpm, height);
    bounds
        .check_condition(&c)
        .map_err(|e| Usage(e.to_string()))?;
    Ok(c)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_config(dir: &Path, cfg: &PipelineConfig, m: &mut ManifestBuilder) -> anyhow::Result<()> {
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()?).with_context(|| format!("writing {}", p.display()))?;
    m.artifact(&p)
}

fn dispatch(cmd: &Command, cfg: &PipelineConfig) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(cfg, &a.out),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Study(a) => study_cmd(cfg, need(&a.data, "data")?, &a.out),
        Command::Eval(a) => eval_cmd(cfg, a),
        Command::Profiles(a) => profiles_cmd(cfg, a),
        Command::Tracer(a) => tracer_cmd(cfg, a),
        Command::Report(a) => report_cmd(cfg, a),
        Command::Verify(a) => {
            let n = RunManifest::load(&a.dir)?.verify(&a.dir)?;
            println!("{}: {n} files verified", a.dir.display());
            Ok(())
        }
    }
}

fn gen_data(cfg: &PipelineConfig, out: &Option<PathBuf>) -> anyhow::Result<()> {
    let dir = out_dir(out)?;
    let d = &cfg.data;
    let mut m = ManifestBuilder::new(&dir, "gen-data", cfg.to_toml()?, vec![d.seed]);
    let conds = sample_conditions(d.conditions, d.seed, &cfg.bounds, d.sampling)?;
    let sol = MmsSolution::new(d.spec, cfg.bounds, PhysicsContext::default_for(&cfg.bounds));
    let ds = generate_dataset(&conds, d.points, d.seed, &sol)?;
    let path = dir.join("dataset.vds");
    ds.save(&path)?;
    m.artifact(&path)?;
    let table = dir.join("conditions.csv");
    let rows: Vec<Vec<f64>> = conds
        .iter()
        .enumerate()
        .map(|(i, c)| vec![i as f64, c.rpm, c.height])
        .collect();
    vessel::evaluation::write_csv(
        &table,
        &["index".into(), "rpm".into(), "height".into()],
        &rows,
    )?;
    m.artifact(&table)?;
    write_config(&dir, cfg, &mut m)?;
    m.finish()?;
    println!(
        "wrote {} conditions × {} points to {}",
        d.conditions,
        d.points,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    status: &'a RunStatus,
    epochs_completed: usize,
    steps: u64,
    wall_time_s: f64,
    train_conditions: &'a [usize],
    test_conditions: &'a [usize],
    last_epoch: Option<&'a EpochRecord>,
    test_mse: Option<TestMse>,
    residual_mse: Option<ResidualMse>,
}

fn held_out_residuals(
    cfg: &PipelineConfig,
    ds: &ConditionDataset,
    model: &SurrogateModel,
    conds: &[usize],
) -> anyhow::Result<ResidualMse> {
    let ctx = PhysicsContext::default_for(&ds.bounds);
    let density = density_for(ds, &ctx);
    let forcing = ForcingSource::for_dataset(ds, &ctx);
    let cs: Vec<OperatingCondition> = conds.iter().map(|&c| ds.blocks[c].cond).collect();
    let mut rng = stream_rng(cfg.eval.seed, EVAL_STREAM);
    let pts =
        held_out_residual_points(&cs, cfg.eval.residual_points, &density, &forcing, &mut rng)?;
    Ok(residual_mse(model, &pts, &ctx)?)
}

fn train_cmd(cfg: &PipelineConfig, a: &crate::TrainArgs) -> anyhow::Result<()> {
    let data = need(&a.data, "data")?;
    let dir = out_dir(&a.out)?;
    let ds = load_dataset(data)?;
    let n = ds.n_conditions();
    let (train_set, test_set) = match (&a.train_conditions, a.train_size) {
        (Some(list), _) => {
            if let Some(&bad) = list.iter().find(|&&c| c >= n) {
                bail!(Usage(format!(
                    "train condition {bad} out of range (dataset has {n})"
                )));
            }
            let mut t = list.clone();
            t.sort_unstable();
            t.dedup();
            let rest = (0..n).filter(|c| !t.contains(c)).collect();
            (t, rest)
        }
        (None, Some(size)) => {
            let s = split(n, size, a.split_seed).map_err(|e| Usage(e.to_string()))?;
            (s.train, s.test)
        }
        (None, None) => bail!(Usage("give --train-conditions or --train-size".into())),
    };
    let mut m = ManifestBuilder::new(
        &dir,
        "train",
        cfg.to_toml()?,
        vec![cfg.train.seed, a.split_seed],
    );
    m.input(data)?;
    let ctx = PhysicsContext::default_for(&ds.bounds);
    let ckpt_dir = dir.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        std::fs::create_dir_all(&ckpt_dir)?;
    }
    let run = train(&ds, &train_set, &cfg.train, &ctx, Some(&ckpt_dir))?;
    if let RunStatus::Diverged { epoch, step, term } = &run.status {
        log::warn!("training diverged at epoch {epoch}, step {step} ({term}); keeping the last finite model");
    }
    let (test, residual) = if test_set.is_empty() {
        (None, None)
    } else {
        (
            Some(test_mse(&run.model, &run.model.stats, &ds, &test_set)?),
            Some(held_out_residuals(cfg, &ds, &run.model, &test_set)?),
        )
    };
    write_config(&dir, cfg, &mut m)?;
    let hist = dir.join("history.csv");
    write_history_csv(&hist, &run.history)?;
    m.artifact(&hist)?;
    let ckpt = dir.join("model.ckpt");
    run.model.save(&ckpt)?;
    m.artifact(&ckpt)?;
    if ckpt_dir.is_dir() {
        let mut saved: Vec<PathBuf> = std::fs::read_dir(&ckpt_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        saved.sort();
        for p in saved {
            m.artifact(&p)?;
        }
    }
    let metrics = dir.join("metrics.json");
    write_json(
        &metrics,
        &TrainMetrics {
            status: &run.status,
            epochs_completed: run.history.len(),
            steps: run.steps,
            wall_time_s: run.wall_time_s,
            train_conditions: &train_set,
            test_conditions: &test_set,
            last_epoch: run.history.last(),
            test_mse: test,
            residual_mse: residual,
        },
    )?;
    m.artifact(&metrics)?;
    m.finish()?;
    match test {
        Some(t) => println!(
            "{}: test MSE {:.6e} over {} conditions",
            cfg.train.variant,
            t.aggregate,
            test_set.len()
        ),
        None => println!("{}: trained on all {n} conditions", cfg.train.variant),
    }
    Ok(())
}

fn study_cmd(cfg: &PipelineConfig, data: &Path, out: &Option<PathBuf>) -> anyhow::Result<()> {
    let dir = out_dir(out)?;
    let ds = load_dataset(data)?;
    let study = cfg.study_config();
    study
        .validate(ds.n_conditions())
        .map_err(|e| Usage(e.to_string()))?;
    let mut m = ManifestBuilder::new(&dir, "study", cfg.to_toml()?, study.seeds.clone());
    m.input(data)?;
    let ctx = PhysicsContext::default_for(&ds.bounds);
    let outcome = run_study(&ds, &study, &ctx, Some(&dir))?;
    let report = &outcome.report;
    write_config(&dir, cfg, &mut m)?;
    let rj = dir.join("report.json");
    write_json(&rj, report)?;
    for f in ["runs.csv", "aggregate.csv", "report.json"] {
        m.artifact(&dir.join(f))?;
    }
    for r in &report.runs {
        let p = dir
            .join(run_dir_name(r.size, r.seed, r.variant))
            .join("model.ckpt");
        if p.is_file() {
            m.artifact(&p)?;
        }
    }
    m.finish()?;
    println!(
        "{:>5}  {:<7} {:>12} {:>12} {:>12}",
        "size", "variant", "median MSE", "IQR", "median cont"
    );
    for a in &report.aggregates {
        let f = |x: Option<f64>| x.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>5}  {:<7} {:>12} {:>12} {:>12}",
            a.size,
            a.variant.to_string(),
            f(a.test_mse.map(|s| s.median)),
            f(a.test_mse.map(|s| s.iqr())),
            f(a.continuity.map(|s| s.median))
        );
    }
    let failed = report.runs.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!(
            "{failed} of {} runs failed; see runs.csv",
            report.runs.len()
        );
    }
    Ok(())
}

fn eval_cmd(cfg: &PipelineConfig, a: &crate::EvalArgs) -> anyhow::Result<()> {
    let model_path = need(&a.model, "model")?;
    let data = need(&a.data, "data")?;
    let dir = out_dir(&a.out)?;
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let conds = a
        .conditions
        .clone()
        .unwrap_or_else(|| (0..ds.n_conditions()).collect());
    let mut m = ManifestBuilder::new(&dir, "eval", cfg.to_toml()?, vec![cfg.eval.seed]);
    m.input(model_path)?;
    m.input(data)?;
    let t = test_mse(&model, &model.stats, &ds, &conds).map_err(|e| match e {
        vessel::Error::Argument(s) => anyhow::Error::from(Usage(s)),
        e => e.into(),
    })?;
    let res = held_out_residuals(cfg, &ds, &model, &conds)?;
    write_config(&dir, cfg, &mut m)?;
    let csv_path = dir.join("per_variable.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["variable", "mse_standardized", "mse_physical"])?;
    for v in vessel::Var::ALL {
        let i = v.index();
        w.write_record([
            v.name().to_string(),
            fmt_float(t.per_var_std[i]),
            fmt_float(t.per_var_phys[i]),
        ])?;
    }
    w.flush()?;
    m.artifact(&csv_path)?;
    let metrics = dir.join("metrics.json");
    write_json(
        &metrics,
        &serde_json::json!({ "conditions": conds, "test_mse": t, "residual_mse": res }),
    )?;
    m.artifact(&metrics)?;
    m.finish()?;
    println!(
        "test MSE {:.6e}; continuity residual {:.6e}",
        t.aggregate, res.cont
    );
    Ok(())
}

fn mms_for(ds: Option<&ConditionDataset>, cfg: &PipelineConfig) -> Option<MmsSolution> {
    let (spec, bounds): (MmsSpec, DomainBounds) = match ds {
        Some(ds) => match &ds.provenance {
            Provenance::Mms { spec, .. } => (*spec, ds.bounds),
            Provenance::External { .. } => return None,
        },
        None => (cfg.data.spec, cfg.bounds),
    };
    Some(MmsSolution::new(
        spec,
        bounds,
        PhysicsContext::default_for(&bounds),
    ))
}

fn profiles_cmd(cfg: &PipelineConfig, a: &crate::ProfilesArgs) -> anyhow::Result<()> {
    let model_path = need(&a.model, "model")?;
    let dir = out_dir(&a.out)?;
    let model = load_model(model_path)?;
    let cond = condition(&model.bounds, a.rpm, a.height)?;
    let mut m = ManifestBuilder::new(&dir, "profiles", cfg.to_toml()?, vec![]);
    m.input(model_path)?;
    let ds = match &a.data {
        Some(p) => {
            m.input(p)?;
            Some(load_dataset(p)?)
        }
        None => None,
    };
    let exact = mms_for(ds.as_ref(), cfg);
    let reference = match (&exact, &ds) {
        (Some(sol), _) => ProfileReference::Exact(sol),
        (None, Some(ds)) => ProfileReference::Nearest {
            ds,
            k: cfg.eval.reference_k,
        },
        (None, None) => unreachable!("without data the exact solution is always available"),
    };
    let e = &cfg.eval;
    let line = axial_profile(
        &model,
        &reference,
        e.profile_r,
        e.profile_theta,
        cond,
        (a.z_min, a.z_max.unwrap_or(cond.height)),
        e.profile_points,
    )?;
    if let Some(note) = &line.note {
        log::warn!("{note}");
    }
    write_config(&dir, cfg, &mut m)?;
    let p = dir.join("profile.csv");
    write_profile_csv(&p, &line)?;
    m.artifact(&p)?;
    m.finish()?;
    println!("wrote {} samples to {}", line.z.len(), p.display());
    Ok(())
}

#[derive(Serialize)]
struct TracerSummary {
    rpm: f64,
    height: f64,
    steps: usize,
    divergence: DivergenceSummary,
    final_probe: Option<f64>,
}

fn tracer_cmd(cfg: &PipelineConfig, a: &crate::TracerArgs) -> anyhow::Result<()> {
    let dir = out_dir(&a.out)?;
    let mut m = ManifestBuilder::new(&dir, "tracer", cfg.to_toml()?, vec![]);
    let source: Box<dyn FlowField> = match (&a.model, a.exact) {
        (Some(p), false) => {
            m.input(p)?;
            Box::new(load_model(p)?)
        }
        (None, true) => Box::new(mms_for(None, cfg).expect("exact solution without data")),
        _ => bail!(Usage("give exactly one of --model or --exact".into())),
    };
    let bounds = match &a.model {
        Some(_) => {
            let model = load_model(a.model.as_ref().unwrap())?;
            model.bounds
        }
        None => cfg.bounds,
    };
    let cond = condition(&bounds, a.rpm, a.height)?;
    cfg.tracer
        .validate(&bounds, cond.height)
        .map_err(|e| Usage(e.to_string()))?;
    let run = simulate(source.as_ref(), &bounds, cond, &cfg.tracer)?;
    write_config(&dir, cfg, &mut m)?;
    let p = dir.join("tracer.csv");
    run.series.write_csv(&p)?;
    m.artifact(&p)?;
    let s = dir.join("summary.json");
    write_json(
        &s,
        &TracerSummary {
            rpm: cond.rpm,
            height: cond.height,
            steps: run.series.times.len().saturating_sub(1),
            divergence: run.divergence,
            final_probe: run.series.values.last().copied(),
        },
    )?;
    m.artifact(&s)?;
    m.finish()?;
    println!(
        "final normalized probe concentration {:.6}; max |div u| {:.3e}",
        run.series.values.last().copied().unwrap_or(f64::NAN),
        run.divergence.max_abs
    );
    Ok(())
}

fn report_cmd(cfg: &PipelineConfig, a: &crate::ReportArgs) -> anyhow::Result<()> {
    let study_dir = need(&a.study, "study")?;
    let data = need(&a.data, "data")?;
    let dir = out_dir(&a.out)?;
    let text = std::fs::read_to_string(study_dir.join("report.json"))
        .context("reading the study report")?;
    let report: StudyReport = serde_json::from_str(&text).context("parsing the study report")?;
    let ds = load_dataset(data)?;
    let mut m = ManifestBuilder::new(&dir, "report", cfg.to_toml()?, vec![]);
    m.input(&study_dir.join("report.json"))?;
    m.input(data)?;

    let curve = dir.join("learning_curve.csv");
    let mut w = csv::Writer::from_path(&curve)?;
    w.write_record([
        "size",
        "variant",
        "mse_median",
        "mse_q1",
        "mse_q3",
        "cont_median",
        "cont_q1",
        "cont_q3",
    ])?;
    let f = |x: Option<f64>| x.map(fmt_float).unwrap_or_default();
    for g in &report.aggregates {
        let (t, c) = (g.test_mse, g.continuity);
        w.write_record([
            g.size.to_string(),
            g.variant.to_string(),
            f(t.map(|s| s.median)),
            f(t.map(|s| s.q1)),
            f(t.map(|s| s.q3)),
            f(c.map(|s| s.median)),
            f(c.map(|s| s.q1)),
            f(c.map(|s| s.q3)),
        ])?;
    }
    w.flush()?;
    m.artifact(&curve)?;

    let sizes: Vec<usize> = match &a.tracer_sizes {
        Some(s) => s.clone(),
        None => {
            let mut all: Vec<usize> = report.runs.iter().map(|r| r.size).collect();
            all.sort_unstable();
            all.dedup();
            match (all.first(), all.last()) {
                (Some(&lo), Some(&hi)) if lo != hi => vec![lo, hi],
                (Some(&lo), _) => vec![lo],
                _ => vec![],
            }
        }
    };
    let Some(ci) = a.condition.or(report.reserved_condition) else {
        bail!(Usage(
            "no --condition given and the study reserved none".into()
        ));
    };
    if ci >= ds.n_conditions() {
        bail!(Usage(format!("condition {ci} out of range")));
    }
    let cond = ds.blocks[ci].cond;
    let Some(exact) = mms_for(Some(&ds), cfg) else {
        bail!(Usage(
            "tracer ensembles need a manufactured dataset for the reference flow".into()
        ));
    };
    cfg.tracer
        .validate(&ds.bounds, cond.height)
        .map_err(|e| Usage(e.to_string()))?;
    let reference = simulate(&exact, &ds.bounds, cond, &cfg.tracer)?.series;
    let rp = dir.join("tracer_reference.csv");
    reference.write_csv(&rp)?;
    m.artifact(&rp)?;

    let sp = dir.join("ensemble_summary.csv");
    let mut summary = csv::Writer::from_path(&sp)?;
    summary.write_record(["size", "variant", "n_models", "end_bias", "end_band"])?;
    for size in sizes {
        let mut runs: Vec<ProbeSeries> = Vec::new();
        for r in report
            .runs
            .iter()
            .filter(|r| r.size == size && r.variant == a.tracer_variant)
        {
            let p = study_dir
                .join(run_dir_name(r.size, r.seed, r.variant))
                .join("model.ckpt");
            if !p.is_file() {
                log::warn!("no checkpoint for size {size} seed {}; skipped", r.seed);
                continue;
            }
            m.input(&p)?;
            runs.push(simulate(&load_model(&p)?, &ds.bounds, cond, &cfg.tracer)?.series);
        }
        if runs.is_empty() {
            log::warn!("no {} models of size {size} in the study", a.tracer_variant);
            continue;
        }
        let ens = ensemble_tracer_report(&runs, &reference)?;
        let ep = dir.join(format!("ensemble_size{size:03}.csv"));
        write_ensemble_csv(&ep, &ens)?;
        m.artifact(&ep)?;
        summary.write_record([
            size.to_string(),
            a.tracer_variant.to_string(),
            runs.len().to_string(),
            fmt_float(ens.end_bias),
            fmt_float(ens.end_band),
        ])?;
        println!(
            "size {size}: end-state bias {:.4e}, band {:.4e} ({} models)",
            ens.end_bias,
            ens.end_band,
            runs.len()
        );
    }
    summary.flush()?;
    m.artifact(&sp)?;
    write_config(&dir, cfg, &mut m)?;
    m.finish()?;
    Ok(())
}
