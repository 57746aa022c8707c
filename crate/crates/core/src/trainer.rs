//! Optimization loop (Adam with step decay), run artifacts, and the
//! train-size × seed × variant data-efficiency study.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Jet;
use crate::dataset::{
    sample_residual_points, split_reserving, stream_rng, ConditionDataset, LabeledSampler,
    Provenance, SpatialDensity,
};
use crate::domain::{OperatingCondition, Query, N_VARS};
use crate::error::{Error, Result};
use crate::evaluation::{
    held_out_residual_points, residual_mse, test_mse, ForcingSource, ResidualMse, TestMse,
};
use crate::inr::{ModelConfig, OutputStats, SurrogateModel};
use crate::mms::MmsSpec;
use crate::objective::{total_loss_grad, LossWeights, ResidualBatch, Variant};
use crate::physics::PhysicsContext;

const STREAM_SAMPLER: u64 = 10;
const STREAM_RESIDUAL: u64 = 11;
const STREAM_EVAL: u64 = 12;

/// Upper bound on the cached Fourier features of the training points.
const FEATURE_CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    crate::error::ensure_len("Adam gradient", params.len(), grad.len())?;
    crate::error::ensure_len("Adam state", params.len(), state.m.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            term: "parameter gradient".into(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powf(state.t as f64);
    let c2 = 1.0 - cfg.beta2.powf(state.t as f64);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Architecture; its `seed` is replaced by the run seed.
    pub model: ModelConfig,
    pub lr0: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Residual points per step; defaults to the batch size.
    pub residual_points: Option<usize>,
    pub loss: LossWeights,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Rescale gradients whose norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Draw one residual pool at the start instead of fresh points per step.
    pub fixed_residual_pool: bool,
    /// Save a checkpoint every this many epochs (0 = only the final model).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mlp,
            model: ModelConfig::default(),
            lr0: 1e-3,
            step_size: 100,
            gamma: 0.75,
            epochs: 1000,
            batch_size: 5000,
            residual_points: None,
            loss: LossWeights::default(),
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: None,
            fixed_residual_pool: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.step_size == 0 {
            return bad("step_size must be at least 1");
        }
        if self.batch_size == 0 || self.residual_points == Some(0) {
            return bad("batch sizes must be at least 1");
        }
        if self.loss.lambda_pde < 0.0 || self.loss.eps < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn residual_points(&self) -> usize {
        self.residual_points.unwrap_or(self.batch_size)
    }
}

/// `lr0 · gamma^⌊epoch / step_size⌋`, epochs counted from 0.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.gamma.powi((epoch / cfg.step_size.max(1)) as i32)
}

/// Per-epoch means of the step losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_data")]
    pub l_data: f64,
    #[serde(rename = "L_cont")]
    pub l_cont: Option<f64>,
    #[serde(rename = "L_mom")]
    pub l_mom: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    /// Training stopped at a non-finite loss or gradient; the model holds the
    /// last finite parameters.
    Diverged {
        epoch: usize,
        step: usize,
        term: String,
    },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: SurrogateModel,
    pub history: Vec<EpochRecord>,
    pub status: RunStatus,
    pub seed: u64,
    pub steps: u64,
    pub wall_time_s: f64,
}

/// Training rows with cached network inputs where memory allows.
struct DataFeed {
    width: usize,
    features: Option<Vec<f64>>,
    queries: Vec<Query>,
    targets: Vec<[f64; N_VARS]>,
    base: HashMap<usize, usize>,
}

impl DataFeed {
    fn new(model: &SurrogateModel, ds: &ConditionDataset, train: &[usize]) -> Result<Self> {
        let queries: Vec<Query> = ds.records_of(train).map(|r| r.query()).collect();
        let targets = ds
            .records_of(train)
            .map(|r| model.stats.standardize(&r.fields))
            .collect();
        let width = model.n_features();
        let features = if queries.len() * width * 8 <= FEATURE_CACHE_BYTES {
            Some(model.input_jet(&queries, 0, false)?.value)
        } else {
            None
        };
        let base = train
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i * ds.n_points()))
            .collect();
        Ok(Self {
            width,
            features,
            queries,
            targets,
            base,
        })
    }

    fn gather(
        &self,
        model: &SurrogateModel,
        idx: &[(usize, usize)],
    ) -> Result<(Jet, Vec<[f64; N_VARS]>)> {
        let rows: Vec<usize> = idx.iter().map(|(c, i)| self.base[c] + i).collect();
        let targets = rows.iter().map(|&r| self.targets[r]).collect();
        let jet = match &self.features {
            Some(f) => {
                let w = self.width;
                let mut jet = Jet::zeros(rows.len(), w, 0, false);
                for (o, &r) in rows.iter().enumerate() {
                    jet.value[o * w..(o + 1) * w].copy_from_slice(&f[r * w..(r + 1) * w]);
                }
                jet
            }
            None => {
                let qs: Vec<Query> = rows.iter().map(|&r| self.queries[r]).collect();
                model.input_jet(&qs, 0, false)?
            }
        };
        Ok((jet, targets))
    }
}

/// Spatial sampling density matching the dataset's generator.
pub fn density_for(ds: &ConditionDataset, ctx: &PhysicsContext) -> SpatialDensity {
    let spec = match &ds.provenance {
        Provenance::Mms { spec, .. } => *spec,
        Provenance::External { .. } => MmsSpec::default(),
    };
    SpatialDensity::new(&ds.bounds, &spec, &ctx.zones)
}

fn residual_batch(
    m: usize,
    ds: &ConditionDataset,
    density: &SpatialDensity,
    forcing: &ForcingSource,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ResidualBatch> {
    let queries = sample_residual_points(m, &ds.bounds, density, rng)?;
    let f = crate::par::map_slice(&queries, |q| forcing.at(q));
    ResidualBatch::new(queries, f)
}

/// Trains a fresh surrogate on the `train` conditions of `ds`.
///
/// Output statistics come from the training records; the run seed drives
/// the initialization, the batch order and the residual points, so a given
/// `(dataset, config)` reproduces the same history bit-for-bit.
pub fn train(
    ds: &ConditionDataset,
    train: &[usize],
    cfg: &TrainConfig,
    ctx: &PhysicsContext,
    checkpoint_dir: Option<&Path>,
) -> Result<RunResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let start = Instant::now();
    let stats = OutputStats::from_samples(
        ds.records_of(train)
            .map(|r| r.fields)
            .collect::<Vec<_>>()
            .iter(),
    )?;
    let model_cfg = ModelConfig {
        seed: cfg.seed,
        ..cfg.model
    };
    let mut model = SurrogateModel::new(model_cfg, ds.bounds, stats)?;
    let mut sampler = LabeledSampler::new(ds, train, stream_rng(cfg.seed, STREAM_SAMPLER))?;
    let feed = DataFeed::new(&model, ds, train)?;
    let batch = cfg.batch_size.min(sampler.len());
    let steps_per_epoch = sampler.len().div_ceil(batch);

    let constrained = cfg.variant != Variant::Mlp;
    let density = density_for(ds, ctx);
    let forcing = ForcingSource::for_dataset(ds, ctx);
    let mut res_rng = stream_rng(cfg.seed, STREAM_RESIDUAL);
    let mut pool = None;
    if constrained && cfg.fixed_residual_pool {
        pool = Some(residual_batch(
            cfg.residual_points(),
            ds,
            &density,
            &forcing,
            &mut res_rng,
        )?);
    }

    let mut adam = AdamState::new(model.params.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut status = RunStatus::Completed;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut sums = [0.0; 4];
        for step in 0..steps_per_epoch {
            let idx = sampler.next_indices(batch)?;
            let (inputs, targets) = feed.gather(&model, &idx)?;
            let fresh;
            let residual = match (&pool, constrained) {
                (_, false) => None,
                (Some(p), true) => Some(p),
                (None, true) => {
                    fresh = residual_batch(
                        cfg.residual_points(),
                        ds,
                        &density,
                        &forcing,
                        &mut res_rng,
                    )?;
                    Some(&fresh)
                }
            };
            let (report, mut grad) = match total_loss_grad(
                &model,
                &inputs,
                &targets,
                residual,
                cfg.variant,
                ctx,
                &cfg.loss,
            ) {
                Ok(x) => x,
                Err(Error::Divergence { term }) => {
                    status = RunStatus::Diverged { epoch, step, term };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Some(c) = cfg.clip_norm {
                let n = grad.norm();
                if n > c {
                    grad.scale(c / n);
                }
            }
            let mut next = model.params.as_slice().to_vec();
            adam_step(&mut next, grad.as_slice(), &mut adam, lr, &cfg.adam)?;
            if next.iter().any(|p| !p.is_finite()) {
                status = RunStatus::Diverged {
                    epoch,
                    step,
                    term: "parameters".into(),
                };
                break 'epochs;
            }
            model.params.as_mut_slice().copy_from_slice(&next);
            sums[0] += report.l_data;
            sums[1] += report.pde.cont.unwrap_or(0.0);
            sums[2] += report.pde.mom.unwrap_or(0.0);
            sums[3] += report.total;
        }
        let n = steps_per_epoch as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            l_data: sums[0] / n,
            l_cont: cfg.variant.uses_continuity().then_some(sums[1] / n),
            l_mom: cfg.variant.uses_momentum().then_some(sums[2] / n),
            total: sums[3] / n,
        };
        log::debug!("epoch {epoch}: {rec:?}");
        history.push(rec);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model.save(&dir.join(format!("epoch_{:05}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok(RunResult {
        model,
        steps: adam.t,
        history,
        status,
        seed: cfg.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// History CSV: `epoch, lr, L_data, L_cont, L_mom, total` (inactive terms empty).
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::evaluation::csv_err(path, e))?;
    if history.is_empty() {
        w.write_record(["epoch", "lr", "L_data", "L_cont", "L_mom", "total"])
            .map_err(|e| crate::evaluation::csv_err(path, e))?;
    }
    for rec in history {
        w.serialize(rec)
            .map_err(|e| crate::evaluation::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Strictly increasing numbers of training conditions.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    /// Operating condition whose nearest dataset condition is never trained
    /// on and is part of every test split.
    pub reserve: Option<OperatingCondition>,
    /// Held-out residual points per run.
    pub residual_test_points: usize,
    /// Concurrent runs (0 = all available threads).
    pub workers: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4, 8, 16],
            seeds: (0..10).collect(),
            variants: vec![Variant::Mlp, Variant::CMlp],
            train: TrainConfig::default(),
            reserve: Some(OperatingCondition::new(100.0, 4.0)),
            residual_test_points: 5000,
            workers: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self, n_conditions: usize) -> Result<()> {
        self.train.validate()?;
        if self.sizes.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config(
                "study needs at least one size, seed and variant".into(),
            ));
        }
        if self.sizes.windows(2).any(|w| w[1] <= w[0]) || self.sizes[0] == 0 {
            return Err(Error::Config(format!(
                "train sizes must be positive and strictly increasing: {:?}",
                self.sizes
            )));
        }
        let avail = n_conditions - usize::from(self.reserve.is_some()).min(n_conditions);
        if *self.sizes.last().unwrap() >= n_conditions || *self.sizes.last().unwrap() > avail {
            return Err(Error::Config(format!(
                "largest train size {} leaves no test conditions out of {n_conditions}",
                self.sizes.last().unwrap()
            )));
        }
        if self.residual_test_points == 0 {
            return Err(Error::Config(
                "residual_test_points must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub train_conditions: Vec<usize>,
    pub status: Option<RunStatus>,
    pub error: Option<String>,
    pub epochs_completed: usize,
    pub final_total: Option<f64>,
    pub test: Option<TestMse>,
    pub residual: Option<ResidualMse>,
    pub wall_time_s: f64,
}

/// Median and quartiles (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub size: usize,
    pub variant: Variant,
    pub n_runs: usize,
    pub n_failed: usize,
    pub test_mse: Option<Spread>,
    pub continuity: Option<Spread>,
    /// Absent for C-MLP, whose reported residual is continuity only.
    pub momentum: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub reserved_condition: Option<usize>,
    pub runs: Vec<RunSummary>,
    pub aggregates: Vec<AggregateRow>,
}

impl StudyReport {
    pub fn aggregate(&self, size: usize, variant: Variant) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.size == size && a.variant == variant)
    }
}

pub struct StudyOutcome {
    pub report: StudyReport,
    /// Trained models aligned with `report.runs` (None for failed runs).
    pub models: Vec<Option<SurrogateModel>>,
}

/// Index of the dataset condition closest to `c` in normalized `(rpm, H)`.
pub fn nearest_condition_index(ds: &ConditionDataset, c: &OperatingCondition) -> Option<usize> {
    let b = &ds.bounds;
    let d = |x: &OperatingCondition| {
        ((x.rpm - c.rpm) / (b.rpm_max - b.rpm_min)).powi(2)
            + ((x.height - c.height) / (b.height_max - b.height_min)).powi(2)
    };
    (0..ds.n_conditions())
        .min_by(|&a, &bb| d(&ds.blocks[a].cond).total_cmp(&d(&ds.blocks[bb].cond)))
}

/// Runs every `(size, seed, variant)` job. Jobs are independent and run on
/// a worker pool; each is deterministic, so the report does not depend on
/// scheduling. Individual failures are recorded and the study continues.
/// With `out_dir`, per-run histories and checkpoints plus `runs.csv` and
/// `aggregate.csv` are written there.
pub fn run_study(
    ds: &ConditionDataset,
    study: &StudyConfig,
    ctx: &PhysicsContext,
    out_dir: Option<&Path>,
) -> Result<StudyOutcome> {
    study.validate(ds.n_conditions())?;
    let reserved = study.reserve.and_then(|c| nearest_condition_index(ds, &c));
    let reserved_list: Vec<usize> = reserved.into_iter().collect();
    let mut jobs = Vec::new();
    for &size in &study.sizes {
        for &seed in &study.seeds {
            for &variant in &study.variants {
                jobs.push((size, seed, variant));
            }
        }
    }
    let density = density_for(ds, ctx);
    let forcing = ForcingSource::for_dataset(ds, ctx);

    let run_job =
        |&(size, seed, variant): &(usize, u64, Variant)| -> (RunSummary, Option<SurrogateModel>) {
            let mut summary = RunSummary {
                size,
                seed,
                variant,
                train_conditions: Vec::new(),
                status: None,
                error: None,
                epochs_completed: 0,
                final_total: None,
                test: None,
                residual: None,
                wall_time_s: 0.0,
            };
            let result = (|| -> Result<SurrogateModel> {
                let split = split_reserving(ds.n_conditions(), size, seed, &reserved_list)?;
                summary.train_conditions = split.train.clone();
                let cfg = TrainConfig {
                    variant,
                    seed,
                    ..study.train.clone()
                };
                let run = train(ds, &split.train, &cfg, ctx, None)?;
                summary.status = Some(run.status.clone());
                summary.epochs_completed = run.history.len();
                summary.final_total = run.history.last().map(|h| h.total);
                summary.wall_time_s = run.wall_time_s;
                summary.test = Some(test_mse(&run.model, &run.model.stats, ds, &split.test)?);
                // same points for every variant of a (size, seed) pair
                let mut rng = stream_rng(seed ^ ((size as u64) << 32), STREAM_EVAL);
                let test_conds: Vec<OperatingCondition> =
                    split.test.iter().map(|&c| ds.blocks[c].cond).collect();
                let pts = held_out_residual_points(
                    &test_conds,
                    study.residual_test_points,
                    &density,
                    &forcing,
                    &mut rng,
                )?;
                summary.residual = Some(residual_mse(&run.model, &pts, ctx)?);
                Ok(run.model)
            })();
            match result {
                Ok(m) => (summary, Some(m)),
                Err(e) => {
                    log::warn!("study run size={size} seed={seed} {variant} failed: {e}");
                    summary.error = Some(format!("{}: {e}", e.category()));
                    (summary, None)
                }
            }
        };
    let results = crate::par::with_workers(study.workers, || crate::par::map_slice(&jobs, run_job));
    let (runs, models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let aggregates = aggregate(&runs, &study.sizes, &study.variants);
    let report = StudyReport {
        reserved_condition: reserved,
        runs,
        aggregates,
    };
    if let Some(dir) = out_dir {
        write_study(dir, &report, &models)?;
    }
    Ok(StudyOutcome { report, models })
}

/// Location of a study run's checkpoint directory, relative to the study
/// output directory.
pub fn run_dir_name(size: usize, seed: u64, variant: Variant) -> String {
    format!(
        "runs/size{size:03}_seed{seed:03}_{}",
        variant.label().to_lowercase()
    )
}

fn ok_run(r: &RunSummary) -> bool {
    r.error.is_none() && matches!(r.status, Some(RunStatus::Completed))
}

fn aggregate(runs: &[RunSummary], sizes: &[usize], variants: &[Variant]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &size in sizes {
        for &variant in variants {
            let group: Vec<&RunSummary> = runs
                .iter()
                .filter(|r| r.size == size && r.variant == variant)
                .collect();
            let good: Vec<&&RunSummary> = group.iter().filter(|r| ok_run(r)).collect();
            let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>| {
                Spread::of(&good.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            rows.push(AggregateRow {
                size,
                variant,
                n_runs: group.len(),
                n_failed: group.len() - good.len(),
                test_mse: pick(&|r| r.test.map(|t| t.aggregate)),
                continuity: pick(&|r| r.residual.map(|x| x.cont)),
                momentum: if variant == Variant::CMlp {
                    None
                } else {
                    pick(&|r| r.residual.map(|x| x.mom))
                },
            });
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(crate::evaluation::fmt_float).unwrap_or_default()
}

fn write_study(dir: &Path, report: &StudyReport, models: &[Option<SurrogateModel>]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("runs.csv");
    let mut w =
        csv::Writer::from_path(&csv_path).map_err(|e| crate::evaluation::csv_err(&csv_path, e))?;
    let mut header = vec![
        "size",
        "seed",
        "variant",
        "status",
        "epochs",
        "final_total",
        "test_mse",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend(
        crate::domain::Var::ALL
            .iter()
            .map(|v| format!("mse_{}", v.name())),
    );
    header.extend(["res_cont", "res_mom", "res_k", "res_omega"].map(String::from));
    w.write_record(&header)
        .map_err(|e| crate::evaluation::csv_err(&csv_path, e))?;
    for (r, model) in report.runs.iter().zip(models) {
        let status = match (&r.error, &r.status) {
            (Some(e), _) => format!("error ({e})"),
            (None, Some(RunStatus::Diverged { epoch, step, .. })) => {
                format!("diverged at epoch {epoch} step {step}")
            }
            _ => "completed".into(),
        };
        let mut row = vec![
            r.size.to_string(),
            r.seed.to_string(),
            r.variant.to_string(),
            status,
            r.epochs_completed.to_string(),
            opt(r.final_total),
            opt(r.test.map(|t| t.aggregate)),
        ];
        row.extend((0..N_VARS).map(|v| opt(r.test.map(|t| t.per_var_std[v]))));
        let (c, m) = match r.residual {
            Some(x) => {
                let (c, m) = x.reported(r.variant);
                (Some(c), m)
            }
            None => (None, None),
        };
        row.extend([
            opt(c),
            opt(m),
            opt(r.residual.map(|x| x.k)),
            opt(r.residual.map(|x| x.omega)),
        ]);
        w.write_record(&row)
            .map_err(|e| crate::evaluation::csv_err(&csv_path, e))?;
        if let Some(m) = model {
            let run_dir = dir.join(run_dir_name(r.size, r.seed, r.variant));
            std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
            m.save(&run_dir.join("model.ckpt"))?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let agg_path = dir.join("aggregate.csv");
    let mut w =
        csv::Writer::from_path(&agg_path).map_err(|e| crate::evaluation::csv_err(&agg_path, e))?;
    w.write_record([
        "size",
        "variant",
        "n_runs",
        "n_failed",
        "mse_median",
        "mse_q1",
        "mse_q3",
        "cont_median",
        "cont_q1",
        "cont_q3",
        "mom_median",
        "mom_q1",
        "mom_q3",
    ])
    .map_err(|e| crate::evaluation::csv_err(&agg_path, e))?;
    for a in &report.aggregates {
        let s = |x: Option<Spread>| {
            [
                opt(x.map(|s| s.median)),
                opt(x.map(|s| s.q1)),
                opt(x.map(|s| s.q3)),
            ]
        };
        let mut row = vec![
            a.size.to_string(),
            a.variant.to_string(),
            a.n_runs.to_string(),
            a.n_failed.to_string(),
        ];
        row.extend(s(a.test_mse));
        row.extend(s(a.continuity));
        row.extend(s(a.momentum));
        w.write_record(&row)
            .map_err(|e| crate::evaluation::csv_err(&agg_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&agg_path, e))
}
