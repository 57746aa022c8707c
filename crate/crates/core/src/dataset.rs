//! Labeled datasets: generation from the manufactured solution, the on-disk
//! format, condition-level splits, and the two training samplers.
//!
//! All randomness comes from `ChaCha8Rng` seeded with `seed_from_u64(seed)`;
//! independent consumers use separate ChaCha streams, so a seed reproduces a
//! dataset bit-for-bit regardless of worker count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainBounds, FieldVector, OperatingCondition, Query, Var, N_VARS};
use crate::error::{Error, Result};
use crate::framed;
use crate::mms::{MmsSolution, MmsSpec};
use crate::physics::RotatingZoneSpec;

pub const DATASET_MAGIC: &str = "VESSEL-DATASET v1";
const SCHEMA: u32 = 1;

/// Column order of each condition block on disk.
pub const COLUMNS: [&str; 3 + N_VARS] = ["x", "y", "z", "alpha", "u", "v", "w", "p", "k", "omega"];

const STREAM_CONDITIONS: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_POINTS: u64 = 1 << 32;

/// Seeded generator on a dedicated stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Where the records of a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Mms {
        spec: MmsSpec,
        spec_hash: String,
        seed: u64,
    },
    External {
        source: String,
    },
}

/// One labeled sample `(x, µ, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub pos: [f64; 3],
    pub cond: OperatingCondition,
    pub fields: FieldVector,
}

impl PointRecord {
    pub fn query(&self) -> Query {
        Query::new(self.pos, self.cond)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBlock {
    pub cond: OperatingCondition,
    pub points: Vec<[f64; 3]>,
    pub fields: Vec<FieldVector>,
}

impl ConditionBlock {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn record(&self, i: usize) -> PointRecord {
        PointRecord {
            pos: self.points[i],
            cond: self.cond,
            fields: self.fields[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionDataset {
    pub bounds: DomainBounds,
    pub blocks: Vec<ConditionBlock>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    bounds: DomainBounds,
    conditions: Vec<OperatingCondition>,
    n_points: usize,
    columns: Vec<String>,
    provenance: Provenance,
}

impl ConditionDataset {
    /// Assembles a dataset from already-evaluated blocks (e.g. an external
    /// import in the same columnar layout) and checks its invariants.
    pub fn from_blocks(
        bounds: DomainBounds,
        blocks: Vec<ConditionBlock>,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self {
            bounds,
            blocks,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_conditions(&self) -> usize {
        self.blocks.len()
    }

    /// Points per condition (equal across blocks).
    pub fn n_points(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }

    pub fn n_records(&self) -> usize {
        self.n_conditions() * self.n_points()
    }

    pub fn conditions(&self) -> Vec<OperatingCondition> {
        self.blocks.iter().map(|b| b.cond).collect()
    }

    pub fn record(&self, cond: usize, point: usize) -> PointRecord {
        self.blocks[cond].record(point)
    }

    /// Iterates every record of the listed conditions.
    pub fn records_of<'a>(&'a self, conds: &'a [usize]) -> impl Iterator<Item = PointRecord> + 'a {
        conds
            .iter()
            .flat_map(move |&c| (0..self.blocks[c].len()).map(move |i| self.blocks[c].record(i)))
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let n = self.n_points();
        let r = self.bounds.radius();
        for (ci, b) in self.blocks.iter().enumerate() {
            if b.points.len() != n || b.fields.len() != n {
                return Err(Error::Format(format!(
                    "condition {ci} has {} points / {} records, expected {n}",
                    b.points.len(),
                    b.fields.len()
                )));
            }
            self.bounds.check_condition(&b.cond)?;
            for (p, f) in b.points.iter().zip(&b.fields) {
                let inside = p[0].hypot(p[1]) <= r * (1.0 + 1e-12)
                    && (0.0..=self.bounds.tank_height).contains(&p[2]);
                let alpha = f.get(Var::Alpha);
                if !inside
                    || !f.is_finite()
                    || !(0.0..=1.0).contains(&alpha)
                    || f.get(Var::K) < 0.0
                    || f.get(Var::Omega) <= 0.0
                {
                    return Err(Error::Domain(format!(
                        "invalid record at condition {ci}: {p:?} {f:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fails if the data was generated from a different manufactured solution.
    pub fn check_provenance(&self, spec: &MmsSpec) -> Result<()> {
        match &self.provenance {
            Provenance::Mms { spec_hash, .. } if *spec_hash == spec.hash() => Ok(()),
            Provenance::Mms { spec_hash, .. } => Err(Error::Config(format!(
                "dataset was generated with spec {spec_hash}, expected {}",
                spec.hash()
            ))),
            Provenance::External { source } => Err(Error::Config(format!(
                "dataset is an external import ({source})"
            ))),
        }
    }

    /// Restriction to the given conditions, in that order.
    pub fn subset(&self, conds: &[usize]) -> Result<Self> {
        let blocks = conds
            .iter()
            .map(|&c| {
                self.blocks
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("condition index {c} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            bounds: self.bounds,
            blocks,
            provenance: self.provenance.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.n_points();
        let header = Header {
            schema: SCHEMA,
            bounds: self.bounds,
            conditions: self.conditions(),
            n_points: n,
            columns: COLUMNS.iter().map(|s| s.to_string()).collect(),
            provenance: self.provenance.clone(),
        };
        let mut payload = Vec::with_capacity(self.n_records() * COLUMNS.len());
        for b in &self.blocks {
            for axis in 0..3 {
                payload.extend(b.points.iter().map(|p| p[axis]));
            }
            for v in 0..N_VARS {
                payload.extend(b.fields.iter().map(|f| f.0[v]));
            }
        }
        framed::encode(DATASET_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (Header, Vec<f64>) = framed::decode(DATASET_MAGIC, bytes)?;
        if h.schema != SCHEMA {
            return Err(Error::Format(format!(
                "unsupported dataset schema {}",
                h.schema
            )));
        }
        if h.columns != COLUMNS {
            return Err(Error::Format(format!(
                "unexpected column list {:?}",
                h.columns
            )));
        }
        let n = h.n_points;
        let per_block = n * COLUMNS.len();
        crate::error::ensure_len(
            "dataset payload",
            h.conditions.len() * per_block,
            payload.len(),
        )?;
        let blocks = h
            .conditions
            .iter()
            .zip(payload.chunks_exact(per_block.max(1)))
            .map(|(&cond, col)| ConditionBlock {
                cond,
                points: (0..n)
                    .map(|i| [col[i], col[n + i], col[2 * n + i]])
                    .collect(),
                fields: (0..n)
                    .map(|i| FieldVector(std::array::from_fn(|v| col[(3 + v) * n + i])))
                    .collect(),
            })
            .collect();
        Self::from_blocks(h.bounds, blocks, h.provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// How operating conditions are drawn over the `(rpm, H)` rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionSampling {
    #[default]
    Uniform,
    LatinHypercube,
}

pub fn sample_conditions(
    n: usize,
    seed: u64,
    bounds: &DomainBounds,
    how: ConditionSampling,
) -> Result<Vec<OperatingCondition>> {
    if n == 0 {
        return Err(Error::Argument(
            "number of conditions must be positive".into(),
        ));
    }
    let mut rng = stream_rng(seed, STREAM_CONDITIONS);
    let (rpm, h) = (
        (bounds.rpm_min, bounds.rpm_max),
        (bounds.height_min, bounds.height_max),
    );
    let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
    let out = match how {
        ConditionSampling::Uniform => (0..n)
            .map(|_| {
                let a = rng.random::<f64>();
                let b = rng.random::<f64>();
                OperatingCondition::new(lerp(rpm, a), lerp(h, b))
            })
            .collect(),
        ConditionSampling::LatinHypercube => {
            let mut strata: [Vec<usize>; 2] = [(0..n).collect(), (0..n).collect()];
            for s in &mut strata {
                s.shuffle(&mut rng);
            }
            (0..n)
                .map(|i| {
                    let a = (strata[0][i] as f64 + rng.random::<f64>()) / n as f64;
                    let b = (strata[1][i] as f64 + rng.random::<f64>()) / n as f64;
                    OperatingCondition::new(lerp(rpm, a), lerp(h, b))
                })
                .collect()
        }
    };
    Ok(out)
}

/// Spatial sampling density: refined toward the wall and boosted inside
/// rotating zones.
///
/// The radial coordinate is drawn as `s = v^(1/(q+1))`, i.e. with density
/// `∝ s^q` on `[0, 1]`; `q = 1` is area-uniform over the cross-section and
/// larger `q` pushes mass toward the wall. A fraction of the points is drawn
/// area-uniformly inside a randomly chosen zone.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDensity {
    pub radius: f64,
    pub q: f64,
    pub zone_fraction: f64,
    pub zones: RotatingZoneSpec,
}

impl SpatialDensity {
    pub fn new(bounds: &DomainBounds, spec: &MmsSpec, zones: &RotatingZoneSpec) -> Self {
        Self {
            radius: bounds.radius(),
            q: spec.q,
            zone_fraction: spec.zone_fraction,
            zones: zones.clone(),
        }
    }

    /// A point with `0 ≤ z < z_max` inside the tank cylinder.
    pub fn sample(&self, rng: &mut impl Rng, z_max: f64) -> [f64; 3] {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let use_zone = self.zone_fraction > 0.0 && rng.random::<f64>() < self.zone_fraction;
        let (r, z) = match use_zone.then(|| self.pick_zone(rng, z_max)).flatten() {
            Some((zr, lo, hi)) => (zr * rng.random::<f64>().sqrt(), rng.random_range(lo..hi)),
            None => {
                let s = rng.random::<f64>().powf(1.0 / (self.q + 1.0));
                (self.radius * s, rng.random_range(0.0..z_max))
            }
        };
        [r * theta.cos(), r * theta.sin(), z]
    }

    fn pick_zone(&self, rng: &mut impl Rng, z_max: f64) -> Option<(f64, f64, f64)> {
        let live: Vec<_> = self
            .zones
            .zones
            .iter()
            .filter(|z| z.z_low.max(0.0) < z_max)
            .map(|z| {
                (
                    z.radius.min(self.radius),
                    z.z_low.max(0.0),
                    z.z_high.min(z_max),
                )
            })
            .collect();
        if live.is_empty() {
            None
        } else {
            Some(live[rng.random_range(0..live.len())])
        }
    }
}

/// Evaluates the manufactured solution at `n_points` sampled points for each
/// condition. Conditions are processed in parallel; each draws from its own
/// RNG stream.
pub fn generate_dataset(
    conditions: &[OperatingCondition],
    n_points: usize,
    seed: u64,
    sol: &MmsSolution,
) -> Result<ConditionDataset> {
    if n_points == 0 {
        return Err(Error::Argument("n_points must be positive".into()));
    }
    if conditions.is_empty() {
        return Err(Error::Argument(
            "at least one operating condition is required".into(),
        ));
    }
    sol.spec.validate(&sol.bounds)?;
    for c in conditions {
        sol.bounds.check_condition(c)?;
    }
    let density = SpatialDensity::new(&sol.bounds, &sol.spec, &sol.ctx.zones);
    let blocks = crate::par::map_indexed(conditions.len(), |i| {
        let cond = conditions[i];
        let mut rng = stream_rng(seed, STREAM_POINTS + i as u64);
        let z_max = (cond.height + 3.0 * sol.spec.delta).min(sol.bounds.tank_height);
        let points: Vec<[f64; 3]> = (0..n_points)
            .map(|_| density.sample(&mut rng, z_max))
            .collect();
        let fields = points.iter().map(|&p| sol.fields_at(p, cond)).collect();
        ConditionBlock {
            cond,
            points,
            fields,
        }
    });
    ConditionDataset::from_blocks(
        sol.bounds,
        blocks,
        Provenance::Mms {
            spec: sol.spec,
            spec_hash: sol.spec.hash(),
            seed,
        },
    )
}

/// Condition indices of a train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Condition-level split of `n_conditions` conditions.
pub fn split(n_conditions: usize, train_size: usize, seed: u64) -> Result<Split> {
    split_reserving(n_conditions, train_size, seed, &[])
}

/// Like [`split`], but the `reserved` conditions are never trained on and
/// always appear in the test set. For a fixed seed, training sets of
/// increasing size are nested.
pub fn split_reserving(
    n_conditions: usize,
    train_size: usize,
    seed: u64,
    reserved: &[usize],
) -> Result<Split> {
    if reserved.iter().any(|&r| r >= n_conditions) {
        return Err(Error::Argument(
            "reserved condition index out of range".into(),
        ));
    }
    let mut pool: Vec<usize> = (0..n_conditions)
        .filter(|i| !reserved.contains(i))
        .collect();
    if train_size == 0 || train_size >= n_conditions || train_size > pool.len() {
        return Err(Error::Argument(format!(
            "train size {train_size} must be in [1, {}) with {} reserved condition(s)",
            n_conditions,
            reserved.len()
        )));
    }
    pool.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let train = pool[..train_size].to_vec();
    let mut test: Vec<usize> = pool[train_size..].iter().chain(reserved).copied().collect();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Mini-batches of `(condition, point)` pairs drawn uniformly from the
/// training conditions as a sequence of random permutations: every pair is
/// seen once per pass.
#[derive(Debug, Clone)]
pub struct LabeledSampler {
    conds: Vec<usize>,
    n_points: usize,
    order: Vec<u32>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl LabeledSampler {
    pub fn new(ds: &ConditionDataset, train: &[usize], rng: ChaCha8Rng) -> Result<Self> {
        if train.is_empty() || ds.n_points() == 0 {
            return Err(Error::Argument(
                "labeled sampler needs a non-empty training set".into(),
            ));
        }
        if let Some(&c) = train.iter().find(|&&c| c >= ds.n_conditions()) {
            return Err(Error::Argument(format!(
                "training condition {c} out of range"
            )));
        }
        let total = train.len() * ds.n_points();
        let total =
            u32::try_from(total).map_err(|_| Error::Argument("training set too large".into()))?;
        let mut s = Self {
            conds: train.to_vec(),
            n_points: ds.n_points(),
            order: (0..total).collect(),
            cursor: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Records per pass.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Next `batch_size` `(dataset condition index, point index)` pairs.
    pub fn next_indices(&mut self, batch_size: usize) -> Result<Vec<(usize, usize)>> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let flat = self.order[self.cursor] as usize;
            self.cursor += 1;
            out.push((self.conds[flat / self.n_points], flat % self.n_points));
        }
        Ok(out)
    }

    pub fn next_batch(
        &mut self,
        ds: &ConditionDataset,
        batch_size: usize,
    ) -> Result<Vec<PointRecord>> {
        Ok(self
            .next_indices(batch_size)?
            .into_iter()
            .map(|(c, i)| ds.record(c, i))
            .collect())
    }
}

/// Collocation points for the physics loss: positions from the same density
/// as the labeled data (restricted to the liquid, `z < H`), conditions drawn
/// uniformly and independently of position.
pub fn sample_residual_points(
    m: usize,
    bounds: &DomainBounds,
    density: &SpatialDensity,
    rng: &mut impl Rng,
) -> Result<Vec<Query>> {
    if m == 0 {
        return Err(Error::Argument(
            "number of residual points must be positive".into(),
        ));
    }
    Ok((0..m)
        .map(|_| {
            let cond = OperatingCondition::new(
                rng.random_range(bounds.rpm_min..=bounds.rpm_max),
                rng.random_range(bounds.height_min..=bounds.height_max),
            );
            Query::new(density.sample(rng, cond.height), cond)
        })
        .collect())
}
