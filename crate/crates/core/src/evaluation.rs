//! Metrics and reports: held-out test error, PDE residual error, axial
//! profiles, and tracer-ensemble summaries.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConditionDataset, SpatialDensity};
use crate::domain::{FlowField, OperatingCondition, Query, Var, N_VARS};
use crate::error::{Error, Result};
use crate::inr::OutputStats;
use crate::mms::MmsSolution;
use crate::objective::{ResidualBatch, Variant};
use crate::physics::{evaluate_residuals, PhysicsContext};
use crate::tracer::ProbeSeries;

/// Rows per batched derivative evaluation; bounds the tape memory.
const EVAL_CHUNK: usize = 4096;

/// Held-out error per variable, standardized and in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMse {
    pub per_var_std: [f64; N_VARS],
    pub per_var_phys: [f64; N_VARS],
    /// Mean of the seven standardized per-variable errors.
    pub aggregate: f64,
    pub n_points: usize,
}

/// Mean squared error of `field` over every record of the `test`
/// conditions; standardization uses `stats` (the training statistics).
pub fn test_mse(
    field: &dyn FlowField,
    stats: &OutputStats,
    ds: &ConditionDataset,
    test: &[usize],
) -> Result<TestMse> {
    if test.is_empty() || ds.n_points() == 0 {
        return Err(Error::Argument("test set is empty".into()));
    }
    if let Some(&c) = test.iter().find(|&&c| c >= ds.n_conditions()) {
        return Err(Error::Argument(format!("test condition {c} out of range")));
    }
    // per condition: sums of squared physical errors, in condition order
    let partial: Vec<Result<[f64; N_VARS]>> = crate::par::map_slice(test, |&c| {
        let block = &ds.blocks[c];
        let mut sums = [0.0; N_VARS];
        for range in crate::par::chunk_ranges(block.len(), EVAL_CHUNK) {
            let qs: Vec<Query> = block.points[range.clone()]
                .iter()
                .map(|&p| Query::new(p, block.cond))
                .collect();
            let pred = field.fields_batch(&qs)?;
            for (p, t) in pred.iter().zip(&block.fields[range]) {
                for v in 0..N_VARS {
                    let e = p.0[v] - t.0[v];
                    sums[v] += e * e;
                }
            }
        }
        Ok(sums)
    });
    let mut sums = [0.0; N_VARS];
    for p in partial {
        let p = p?;
        for v in 0..N_VARS {
            sums[v] += p[v];
        }
    }
    let n = test.len() * ds.n_points();
    let per_var_phys = sums.map(|s| s / n as f64);
    let per_var_std: [f64; N_VARS] =
        std::array::from_fn(|v| per_var_phys[v] / (stats.std[v] * stats.std[v]));
    let aggregate = per_var_std.iter().sum::<f64>() / N_VARS as f64;
    if !aggregate.is_finite() {
        return Err(Error::Divergence {
            term: "test MSE".into(),
        });
    }
    Ok(TestMse {
        per_var_std,
        per_var_phys,
        aggregate,
        n_points: n,
    })
}

/// Raw mean squared residuals (evaluation includes the k/ω equations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualMse {
    pub cont: f64,
    pub mom: f64,
    pub k: f64,
    pub omega: f64,
    /// Fraction of points where a k/ω floor or clamp fired.
    pub flagged_fraction: f64,
    pub n_points: usize,
}

impl ResidualMse {
    /// The residuals shown for a variant: the C-MLP row carries continuity
    /// only; the other variants carry continuity and momentum.
    pub fn reported(&self, variant: Variant) -> (f64, Option<f64>) {
        match variant {
            Variant::CMlp => (self.cont, None),
            _ => (self.cont, Some(self.mom)),
        }
    }
}

pub fn residual_mse(
    field: &dyn FlowField,
    batch: &ResidualBatch,
    ctx: &PhysicsContext,
) -> Result<ResidualMse> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Argument("no residual points".into()));
    }
    let mut acc = [0.0; 4];
    let mut flagged = 0usize;
    let mut counted = 0usize;
    for range in crate::par::chunk_ranges(n, EVAL_CHUNK) {
        let derivs = field.derivs_batch(&batch.queries[range.clone()])?;
        for (i, d) in range.zip(&derivs) {
            let Some(r) = evaluate_residuals(d, &batch.queries[i], ctx, &batch.forcing[i]) else {
                continue;
            };
            counted += 1;
            flagged += r.flagged as usize;
            acc[0] += r.r_cont * r.r_cont;
            acc[1] += r.r_mom.iter().map(|x| x * x).sum::<f64>();
            acc[2] += r.r_k * r.r_k;
            acc[3] += r.r_omega * r.r_omega;
        }
    }
    if counted == 0 {
        return Err(Error::Argument(
            "no residual point lies in the liquid".into(),
        ));
    }
    let m = counted as f64;
    Ok(ResidualMse {
        cont: acc[0] / m,
        mom: acc[1] / m,
        k: acc[2] / m,
        omega: acc[3] / m,
        flagged_fraction: flagged as f64 / m,
        n_points: counted,
    })
}

/// Fresh liquid-region collocation points spread evenly over the given
/// conditions, with MMS forcing when available and gravity otherwise.
pub fn held_out_residual_points(
    conditions: &[OperatingCondition],
    m: usize,
    density: &SpatialDensity,
    forcing: &ForcingSource,
    rng: &mut impl Rng,
) -> Result<ResidualBatch> {
    if conditions.is_empty() || m == 0 {
        return Err(Error::Argument(
            "held-out residual points need conditions and m > 0".into(),
        ));
    }
    let queries: Vec<Query> = (0..m)
        .map(|i| {
            let c = conditions[i % conditions.len()];
            Query::new(density.sample(rng, c.height), c)
        })
        .collect();
    let f = queries.iter().map(|q| forcing.at(q)).collect();
    ResidualBatch::new(queries, f)
}

/// Where body forces and k/ω sources come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ForcingSource {
    Manufactured(Box<MmsSolution>),
    Gravity(PhysicsContext),
}

impl ForcingSource {
    /// MMS forcing for generated data; plain gravity for imports.
    pub fn for_dataset(ds: &ConditionDataset, ctx: &PhysicsContext) -> Self {
        match &ds.provenance {
            crate::dataset::Provenance::Mms { spec, .. } => ForcingSource::Manufactured(Box::new(
                MmsSolution::new(*spec, ds.bounds, ctx.clone()),
            )),
            crate::dataset::Provenance::External { .. } => ForcingSource::Gravity(ctx.clone()),
        }
    }

    pub fn at(&self, q: &Query) -> crate::physics::Forcing {
        match self {
            ForcingSource::Manufactured(sol) => sol.forcing(q.pos, q.cond),
            ForcingSource::Gravity(ctx) => crate::physics::Forcing::gravity(&ctx.fluid),
        }
    }

    pub fn solution(&self) -> Option<&MmsSolution> {
        match self {
            ForcingSource::Manufactured(sol) => Some(sol),
            ForcingSource::Gravity(_) => None,
        }
    }
}

/// Predicted and reference fields along a vertical line.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileLine {
    pub r: f64,
    pub theta: f64,
    pub cond: OperatingCondition,
    pub z: Vec<f64>,
    pub predicted: Vec<[f64; N_VARS]>,
    pub reference: Vec<[f64; N_VARS]>,
    /// Set when the requested extent was clipped to the liquid column.
    pub note: Option<String>,
}

/// Reference values for profiles: exact manufactured fields or
/// inverse-distance interpolation of the nearest dataset records.
pub enum ProfileReference<'a> {
    Exact(&'a MmsSolution),
    Nearest { ds: &'a ConditionDataset, k: usize },
}

/// Samples `n_z` points on `z ∈ [z_lo, z_hi]` (clipped to `[0, H]`) at fixed
/// `(r, θ)`.
pub fn axial_profile(
    model: &dyn FlowField,
    reference: &ProfileReference<'_>,
    r: f64,
    theta: f64,
    cond: OperatingCondition,
    z_range: (f64, f64),
    n_z: usize,
) -> Result<ProfileLine> {
    if n_z < 2 {
        return Err(Error::Argument(
            "a profile needs at least two samples".into(),
        ));
    }
    let (mut lo, mut hi) = z_range;
    let mut note = None;
    if lo < 0.0 || hi > cond.height {
        note = Some(format!(
            "profile clipped from [{lo}, {hi}] to the liquid column [0, {}]",
            cond.height
        ));
        lo = lo.max(0.0);
        hi = hi.min(cond.height);
    }
    if !(hi > lo) {
        return Err(Error::Argument(format!(
            "empty profile extent [{lo}, {hi}]"
        )));
    }
    let pos_at = |z: f64| [r * theta.cos(), r * theta.sin(), z];
    let z: Vec<f64> = (0..n_z)
        .map(|i| lo + (hi - lo) * i as f64 / (n_z - 1) as f64)
        .collect();
    let qs: Vec<Query> = z.iter().map(|&zz| Query::new(pos_at(zz), cond)).collect();
    let predicted = model.fields_batch(&qs)?.into_iter().map(|f| f.0).collect();
    let reference = match reference {
        ProfileReference::Exact(sol) => qs.iter().map(|q| sol.fields_at(q.pos, q.cond).0).collect(),
        ProfileReference::Nearest { ds, k } => {
            let c = nearest_condition(ds, &cond)?;
            qs.iter().map(|q| idw(ds, c, q.pos, *k)).collect()
        }
    };
    Ok(ProfileLine {
        r,
        theta,
        cond,
        z,
        predicted,
        reference,
        note,
    })
}

fn nearest_condition(ds: &ConditionDataset, cond: &OperatingCondition) -> Result<usize> {
    let b = &ds.bounds;
    let (sr, sh) = (b.rpm_max - b.rpm_min, b.height_max - b.height_min);
    let dist = |c: &OperatingCondition| {
        ((c.rpm - cond.rpm) / sr).powi(2) + ((c.height - cond.height) / sh).powi(2)
    };
    ds.blocks
        .iter()
        .enumerate()
        .min_by(|a, b| dist(&a.1.cond).total_cmp(&dist(&b.1.cond)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Argument("dataset has no conditions".into()))
}

/// Inverse-distance weighting over the `k` nearest records of one condition.
fn idw(ds: &ConditionDataset, cond: usize, pos: [f64; 3], k: usize) -> [f64; N_VARS] {
    let block = &ds.blocks[cond];
    let mut near: Vec<(f64, usize)> = block
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| ((0..3).map(|a| (p[a] - pos[a]).powi(2)).sum::<f64>(), i))
        .collect();
    let k = k.clamp(1, near.len());
    near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
    near.truncate(k);
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if near[0].0 == 0.0 {
        return block.fields[near[0].1].0;
    }
    let mut out = [0.0; N_VARS];
    let mut wsum = 0.0;
    for &(d2, i) in &near {
        let w = 1.0 / d2.sqrt();
        wsum += w;
        for v in 0..N_VARS {
            out[v] += w * block.fields[i].0[v];
        }
    }
    out.map(|x| x / wsum)
}

/// CSV with columns `z`, seven predicted, seven reference.
pub fn write_profile_csv(path: &Path, line: &ProfileLine) -> Result<()> {
    let mut header = vec!["z".to_string()];
    header.extend(Var::ALL.iter().map(|v| format!("pred_{}", v.name())));
    header.extend(Var::ALL.iter().map(|v| format!("ref_{}", v.name())));
    let mut rows = Vec::with_capacity(line.z.len());
    for (i, z) in line.z.iter().enumerate() {
        let mut row = vec![*z];
        row.extend_from_slice(&line.predicted[i]);
        row.extend_from_slice(&line.reference[i]);
        rows.push(row);
    }
    write_csv(path, &header, &rows)
}

/// Per-time ensemble statistics of probe curves.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub reference: Vec<f64>,
    /// `|mean(c(T_end)) − c_ref(T_end)|`.
    pub end_bias: f64,
    /// `max − min` at the final time.
    pub end_band: f64,
}

pub fn ensemble_tracer_report(
    runs: &[ProbeSeries],
    reference: &ProbeSeries,
) -> Result<EnsembleSummary> {
    if runs.is_empty() || reference.times.is_empty() {
        return Err(Error::Argument(
            "ensemble report needs at least one run and a reference".into(),
        ));
    }
    for r in runs {
        if r.times != reference.times {
            return Err(Error::Argument(
                "probe series are on different time grids".into(),
            ));
        }
    }
    let nt = reference.times.len();
    let n = runs.len() as f64;
    let col = |t: usize| runs.iter().map(move |r| r.values[t]);
    let mean: Vec<f64> = (0..nt).map(|t| col(t).sum::<f64>() / n).collect();
    let min: Vec<f64> = (0..nt)
        .map(|t| col(t).fold(f64::INFINITY, f64::min))
        .collect();
    let max: Vec<f64> = (0..nt)
        .map(|t| col(t).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let last = nt - 1;
    Ok(EnsembleSummary {
        end_bias: (mean[last] - reference.values[last]).abs(),
        end_band: max[last] - min[last],
        times: reference.times.clone(),
        mean,
        min,
        max,
        reference: reference.values.clone(),
    })
}

/// CSV with columns `t, mean, min, max, reference`.
pub fn write_ensemble_csv(path: &Path, s: &EnsembleSummary) -> Result<()> {
    let header: Vec<String> = ["t", "mean", "min", "max", "reference"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<f64>> = (0..s.times.len())
        .map(|i| vec![s.times[i], s.mean[i], s.min[i], s.max[i], s.reference[i]])
        .collect();
    write_csv(path, &header, &rows)
}

/// Shortest representation that parses back to the same `f64`, with an
/// exponent for very large or small magnitudes.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a numeric table; floats use the shortest round-trip formatting so
/// identical values always produce identical bytes.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|&v| fmt_float(v)))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
