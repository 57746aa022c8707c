//! Implicit neural representation of the parametric flow field.
//!
//! Pipeline: physical `(x, y, z, rpm, H)` → affine map to `[-1, 1]^5` →
//! Fourier features `[cos(2πBv), sin(2πBv)]` → tanh MLP → per-variable
//! de-standardization. Spatial derivatives are chained through the affine
//! input and output scalings, so they come back in physical units.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_jet, Activation, DenseParams, Jet};
use crate::domain::{
    DomainBounds, FieldVector, FlowField, OperatingCondition, Query, SpatialDerivs, N_VARS,
};
use crate::error::{Error, Result};
use crate::framed;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const CHECKPOINT_MAGIC: &str = "VESSEL-CHECKPOINT v1";

/// Which normalized inputs go through the Fourier map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FourierMode {
    /// All five inputs (coordinates and operating condition).
    #[default]
    All,
    /// Coordinates only; `(rpm, H)` are appended to the features unchanged.
    Spatial,
}

impl FourierMode {
    fn mapped_dims(self) -> usize {
        match self {
            FourierMode::All => 5,
            FourierMode::Spatial => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of hidden tanh layers.
    pub depth: usize,
    /// Hidden width; also the Fourier feature count `2m`.
    pub width: usize,
    /// Standard deviation of the Gaussian frequency matrix.
    pub sigma_b: f64,
    pub seed: u64,
    pub fourier: FourierMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 10,
            width: 100,
            sigma_b: 1.0,
            seed: 0,
            fourier: FourierMode::All,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width < 2 || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model needs depth >= 1 and an even width >= 2 (got depth {}, width {})",
                self.depth, self.width
            )));
        }
        if !(self.sigma_b > 0.0 && self.sigma_b.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_b must be positive, got {}",
                self.sigma_b
            )));
        }
        Ok(())
    }

    fn n_features(&self) -> usize {
        match self.fourier {
            FourierMode::All => self.width,
            FourierMode::Spatial => self.width + 2,
        }
    }

    fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_features()];
        w.extend(std::iter::repeat_n(self.width, self.depth));
        w.push(N_VARS);
        w
    }
}

/// Result of [`normalize_input`]: the mapped vector and whether the physical
/// input was inside the domain box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedInput {
    pub v: [f64; 5],
    pub in_bounds: bool,
}

/// Affine per-axis map of `(x, y, z, rpm, H)` onto `[-1, 1]`.
pub fn normalize_input(
    bounds: &DomainBounds,
    pos: [f64; 3],
    cond: OperatingCondition,
) -> Result<NormalizedInput> {
    let raw = [pos[0], pos[1], pos[2], cond.rpm, cond.height];
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite model input {raw:?}")));
    }
    let mut v = [0.0; 5];
    let mut in_bounds = true;
    for (i, (lo, hi)) in bounds.axis_ranges().into_iter().enumerate() {
        v[i] = 2.0 * (raw[i] - lo) / (hi - lo) - 1.0;
        in_bounds &= (-1.0..=1.0).contains(&v[i]);
    }
    Ok(NormalizedInput { v, in_bounds })
}

/// Inverse of [`normalize_input`].
pub fn denormalize_input(bounds: &DomainBounds, v: [f64; 5]) -> ([f64; 3], OperatingCondition) {
    let mut raw = [0.0; 5];
    for (i, (lo, hi)) in bounds.axis_ranges().into_iter().enumerate() {
        raw[i] = lo + 0.5 * (v[i] + 1.0) * (hi - lo);
    }
    (
        [raw[0], raw[1], raw[2]],
        OperatingCondition::new(raw[3], raw[4]),
    )
}

/// `dv_d / dx_d` for the three spatial axes.
pub fn input_scales(bounds: &DomainBounds) -> [f64; 3] {
    let r = bounds.axis_ranges();
    [0, 1, 2].map(|d| 2.0 / (r[d].1 - r[d].0))
}

/// Fixed random Fourier feature map. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMap {
    /// Frequency matrix, `m x dims`, row-major.
    b: Vec<f64>,
    m: usize,
    dims: usize,
    sigma: f64,
}

impl FourierMap {
    pub fn sample(m: usize, dims: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let b = (0..m * dims).map(|_| normal.sample(rng)).collect();
        Ok(Self { b, m, dims, sigma })
    }

    pub fn from_matrix(b: Vec<f64>, m: usize, dims: usize) -> Result<Self> {
        crate::error::ensure_len("frequency matrix", m * dims, b.len())?;
        Ok(Self {
            b,
            m,
            dims,
            sigma: f64::NAN,
        })
    }

    pub fn n_frequencies(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn phase(&self, k: usize, v: &[f64]) -> f64 {
        let row = &self.b[k * self.dims..(k + 1) * self.dims];
        TWO_PI * row.iter().zip(v).map(|(b, x)| b * x).sum::<f64>()
    }

    /// `[cos(2πBv); sin(2πBv)]` over the first `dims` entries of `v`.
    pub fn features(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.m];
        for k in 0..self.m {
            let (s, c) = self.phase(k, v).sin_cos();
            out[k] = c;
            out[self.m + k] = s;
        }
        out
    }

    /// Writes features and their first/second derivatives along the listed
    /// input axes into row `row` of `jet` (columns `0..2m`).
    fn fill_jet_row(&self, v: &[f64], axes: &[usize], jet: &mut Jet, row: usize) {
        let w = jet.width;
        let base = row * w;
        for k in 0..self.m {
            let (s, c) = self.phase(k, v).sin_cos();
            jet.value[base + k] = c;
            jet.value[base + self.m + k] = s;
            for (d, &axis) in axes.iter().enumerate() {
                let f = TWO_PI * self.b[k * self.dims + axis];
                jet.d1[d][base + k] = -s * f;
                jet.d1[d][base + self.m + k] = c * f;
                if jet.second {
                    jet.d2[d][base + k] = -c * f * f;
                    jet.d2[d][base + self.m + k] = -s * f * f;
                }
            }
        }
    }
}

/// Per-variable standardization of the network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputStats {
    pub mean: [f64; N_VARS],
    pub std: [f64; N_VARS],
}

impl OutputStats {
    pub const STD_FLOOR: f64 = 1e-12;

    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_VARS],
            std: [1.0; N_VARS],
        }
    }

    /// Mean and (population) standard deviation of each variable.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a FieldVector>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; N_VARS];
        let mut all = Vec::new();
        for s in samples {
            n += 1;
            for v in 0..N_VARS {
                sum[v] += s.0[v];
            }
            all.push(*s);
        }
        if n == 0 {
            return Err(Error::Argument(
                "cannot compute output statistics of an empty set".into(),
            ));
        }
        let mean = sum.map(|s| s / n as f64);
        let mut var = [0.0; N_VARS];
        for s in &all {
            for v in 0..N_VARS {
                let d = s.0[v] - mean[v];
                var[v] += d * d;
            }
        }
        let std = var.map(|q| (q / n as f64).sqrt().max(Self::STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, f: &FieldVector) -> [f64; N_VARS] {
        std::array::from_fn(|v| (f.0[v] - self.mean[v]) / self.std[v])
    }
}

/// Trained (or freshly initialized) surrogate `y(x, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub bounds: DomainBounds,
    pub config: ModelConfig,
    fmap: FourierMap,
    pub params: DenseParams,
    pub stats: OutputStats,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema: u32,
    config: ModelConfig,
    bounds: DomainBounds,
    stats: OutputStats,
    widths: Vec<usize>,
    n_params: usize,
}

impl SurrogateModel {
    /// Seeded construction: the frequency matrix is drawn first, then the
    /// network weights, from one ChaCha8 stream.
    pub fn new(config: ModelConfig, bounds: DomainBounds, stats: OutputStats) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fmap = FourierMap::sample(
            config.width / 2,
            config.fourier.mapped_dims(),
            config.sigma_b,
            &mut rng,
        )?;
        let params =
            DenseParams::glorot_uniform(&config.layer_widths(), Activation::Linear, &mut rng)?;
        Ok(Self {
            bounds,
            config,
            fmap,
            params,
            stats,
        })
    }

    pub fn fourier_map(&self) -> &FourierMap {
        &self.fmap
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features()
    }

    /// Features for a single normalized input.
    pub fn fourier_features(&self, v: &[f64; 5]) -> Vec<f64> {
        let mut f = self.fmap.features(v);
        if self.config.fourier == FourierMode::Spatial {
            f.extend_from_slice(&v[3..5]);
        }
        f
    }

    /// Network input jets for a batch of queries. `n_dirs` spatial axes
    /// (`x`, `y`, `z` in that order, at most 3) carry tangents.
    pub fn input_jet(&self, queries: &[Query], n_dirs: usize, second: bool) -> Result<Jet> {
        if n_dirs > 3 {
            return Err(Error::Argument(format!(
                "at most 3 spatial directions, got {n_dirs}"
            )));
        }
        let width = self.n_features();
        let mut jet = Jet::zeros(queries.len(), width, n_dirs, second);
        let axes: Vec<usize> = (0..n_dirs).collect();
        for (row, q) in queries.iter().enumerate() {
            let v = normalize_input(&self.bounds, q.pos, q.cond)?.v;
            self.fmap.fill_jet_row(&v, &axes, &mut jet, row);
            if self.config.fourier == FourierMode::Spatial {
                let m2 = 2 * self.fmap.m;
                jet.value[row * width + m2] = v[3];
                jet.value[row * width + m2 + 1] = v[4];
            }
        }
        Ok(jet)
    }

    /// Physical field values of row `row` of a network output jet.
    pub fn fields_from_output(&self, out: &Jet, row: usize) -> FieldVector {
        FieldVector(std::array::from_fn(|v| {
            self.stats.mean[v] + self.stats.std[v] * out.value[row * N_VARS + v]
        }))
    }

    /// Physical derivatives of row `row`; `out` must carry three directions.
    pub fn derivs_from_output(&self, out: &Jet, row: usize) -> SpatialDerivs {
        let scales = input_scales(&self.bounds);
        let mut d = SpatialDerivs {
            fields: self.fields_from_output(out, row),
            ..Default::default()
        };
        for v in 0..N_VARS {
            let s = self.stats.std[v];
            for axis in 0..out.n_dirs() {
                d.grad[v][axis] = s * scales[axis] * out.d1[axis][row * N_VARS + v];
                if out.second {
                    d.lap[v] += s * scales[axis] * scales[axis] * out.d2[axis][row * N_VARS + v];
                }
            }
        }
        d
    }

    /// Maps an adjoint with respect to physical quantities onto the network
    /// output jet (inverse chain of [`Self::derivs_from_output`]).
    pub fn pull_back_adjoint(&self, adj: &SpatialDerivs, cot: &mut Jet, row: usize, scale: f64) {
        let scales = input_scales(&self.bounds);
        for v in 0..N_VARS {
            let s = self.stats.std[v] * scale;
            cot.value[row * N_VARS + v] += s * adj.fields.0[v];
            for axis in 0..cot.n_dirs() {
                cot.d1[axis][row * N_VARS + v] += s * scales[axis] * adj.grad[v][axis];
                if cot.second {
                    cot.d2[axis][row * N_VARS + v] += s * scales[axis] * scales[axis] * adj.lap[v];
                }
            }
        }
    }

    pub fn predict(&self, pos: [f64; 3], cond: OperatingCondition) -> Result<FieldVector> {
        self.fields(&Query::new(pos, cond))
    }

    /// Writes the checkpoint: header (config, bounds, stats) then the flat
    /// parameter vector. The frequency matrix is re-derived from the seed.
    pub fn save(&self, path: &Path) -> Result<()> {
        framed::write_file(
            path,
            CHECKPOINT_MAGIC,
            &self.checkpoint_header(),
            self.params.as_slice(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        framed::encode(
            CHECKPOINT_MAGIC,
            &self.checkpoint_header(),
            self.params.as_slice(),
        )
    }

    fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            schema: 1,
            config: self.config,
            bounds: self.bounds,
            stats: self.stats,
            widths: self.params.widths().to_vec(),
            n_params: self.params.len(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (CheckpointHeader, Vec<f64>) = framed::decode(CHECKPOINT_MAGIC, bytes)?;
        if h.schema != 1 {
            return Err(Error::Format(format!(
                "unsupported checkpoint schema {}",
                h.schema
            )));
        }
        if payload.len() != h.n_params {
            return Err(Error::Format(format!(
                "checkpoint declares {} parameters but holds {}",
                h.n_params,
                payload.len()
            )));
        }
        let mut model = Self::new(h.config, h.bounds, h.stats)?;
        if model.params.widths() != h.widths.as_slice() {
            return Err(Error::Format(
                "checkpoint layer widths disagree with its config".into(),
            ));
        }
        model.params = DenseParams::from_flat(&h.widths, Activation::Linear, payload)?;
        Ok(model)
    }
}

impl FlowField for SurrogateModel {
    fn fields(&self, q: &Query) -> Result<FieldVector> {
        let jet = self.input_jet(std::slice::from_ref(q), 0, false)?;
        let (out, _) = forward_jet(&self.params, &jet)?;
        Ok(self.fields_from_output(&out, 0))
    }

    fn spatial_derivs(&self, q: &Query) -> Result<SpatialDerivs> {
        let jet = self.input_jet(std::slice::from_ref(q), 3, true)?;
        let (out, _) = forward_jet(&self.params, &jet)?;
        Ok(self.derivs_from_output(&out, 0))
    }

    fn fields_batch(&self, qs: &[Query]) -> Result<Vec<FieldVector>> {
        let jet = self.input_jet(qs, 0, false)?;
        let (out, _) = forward_jet(&self.params, &jet)?;
        Ok((0..qs.len())
            .map(|r| self.fields_from_output(&out, r))
            .collect())
    }

    fn derivs_batch(&self, qs: &[Query]) -> Result<Vec<SpatialDerivs>> {
        let jet = self.input_jet(qs, 3, true)?;
        let (out, _) = forward_jet(&self.params, &jet)?;
        Ok((0..qs.len())
            .map(|r| self.derivs_from_output(&out, r))
            .collect())
    }
}
