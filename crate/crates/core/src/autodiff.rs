//! Differentiation engine for dense tanh networks.
//!
//! Inputs are propagated as second-order jets: for every requested direction
//! the network carries the value, the first directional derivative and the
//! pure second directional derivative through each layer analytically. The
//! reverse pass runs back through those jet rules, so gradients of objectives
//! that depend on input derivatives (PDE residuals) are exact.
//!
//! All batch work is split into fixed row chunks; chunk results are combined
//! in chunk order, which keeps results bit-identical between the parallel and
//! sequential builds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::par;

/// Rows per work unit in batched passes.
const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

/// Trainable parameters of a fully connected network.
///
/// Stored flat, layer by layer: the weight matrix (`out x in`, row-major)
/// followed by the bias vector. Hidden layers use `tanh`; the last layer uses
/// `output_activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    widths: Vec<usize>,
    output_activation: Activation,
    data: Vec<f64>,
}

/// Read-only view of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseParams {
    /// All-zero parameters for the layer widths `[n_in, h_1, ..., n_out]`.
    pub fn zeros(widths: &[usize], output_activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Argument(format!(
                "network needs at least two non-zero widths, got {widths:?}"
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            output_activation,
            data: vec![0.0; param_count(widths)],
        })
    }

    pub fn from_flat(
        widths: &[usize],
        output_activation: Activation,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut p = Self::zeros(widths, output_activation)?;
        ensure_len("parameter vector", p.data.len(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite network parameter".into()));
        }
        p.data = data;
        Ok(p)
    }

    /// Builds parameters from explicit `(weight row-major, bias)` pairs.
    pub fn from_layers(
        layers: &[(Vec<f64>, Vec<f64>)],
        n_in: usize,
        output_activation: Activation,
    ) -> Result<Self> {
        let mut widths = vec![n_in];
        let mut data = Vec::new();
        for (w, b) in layers {
            let prev = *widths.last().unwrap();
            ensure_len("layer weight", b.len() * prev, w.len())?;
            widths.push(b.len());
            data.extend_from_slice(w);
            data.extend_from_slice(b);
        }
        Self::from_flat(&widths, output_activation, data)
    }

    /// Symmetric uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot_uniform<R: Rng + ?Sized>(
        widths: &[usize],
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(widths, output_activation)?;
        let mut offset = 0;
        for w in widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for v in &mut p.data[offset..offset + n_in * n_out] {
                *v = rng.random_range(-limit..limit);
            }
            offset += n_in * n_out + n_out;
        }
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let o = self.offset(l);
        LayerView {
            n_in,
            n_out,
            weight: &self.data[o..o + n_in * n_out],
            bias: &self.data[o + n_in * n_out..o + n_in * n_out + n_out],
        }
    }

    /// Mutable `(weight, bias)` of layer `l`.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let o = self.offset(l);
        let (w, rest) = self.data[o..o + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        (w, rest)
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() {
            self.output_activation
        } else {
            Activation::Tanh
        }
    }

    /// Evaluates the network at a single input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let jet = Jet::from_points(input.len(), input.to_vec(), &[], false)?;
        let (out, _) = forward_jet(self, &jet)?;
        Ok(out.value)
    }

    /// Value plus first and pure second directional derivatives at a single
    /// input, one pair per direction.
    pub fn pushforward2(&self, input: &[f64], directions: &[Vec<f64>]) -> Result<TangentBundle> {
        let jet = Jet::from_points(input.len(), input.to_vec(), directions, true)?;
        let (out, _) = forward_jet(self, &jet)?;
        Ok(TangentBundle {
            value: out.value,
            d1: out.d1,
            d2: out.d2,
        })
    }
}

/// Derivative of some scalar with respect to every entry of a [`DenseParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    widths: Vec<usize>,
    data: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(params: &DenseParams) -> Self {
        Self {
            widths: params.widths.clone(),
            data: vec![0.0; params.data.len()],
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Single-point derivative carrier returned by [`DenseParams::pushforward2`].
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBundle {
    pub value: Vec<f64>,
    /// `d1[d][o]`: first derivative of output `o` along direction `d`.
    pub d1: Vec<Vec<f64>>,
    /// `d2[d][o]`: second derivative of output `o` along direction `d`.
    pub d2: Vec<Vec<f64>>,
}

/// A batch of second-order jets, row-major `rows x width` per component.
///
/// `d1[d]` holds the first-order coefficient along direction `d`; when
/// `second` is set `d2[d]` holds the second-order one, otherwise `d2` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub rows: usize,
    pub width: usize,
    pub value: Vec<f64>,
    pub d1: Vec<Vec<f64>>,
    pub d2: Vec<Vec<f64>>,
    pub second: bool,
}

impl Jet {
    pub fn zeros(rows: usize, width: usize, n_dirs: usize, second: bool) -> Self {
        let block = || vec![0.0; rows * width];
        Self {
            rows,
            width,
            value: block(),
            d1: (0..n_dirs).map(|_| block()).collect(),
            d2: if second {
                (0..n_dirs).map(|_| block()).collect()
            } else {
                Vec::new()
            },
            second,
        }
    }

    /// Plain input rows with constant directions (same for every row) and
    /// zero second-order coefficients.
    pub fn from_points(
        width: usize,
        values: Vec<f64>,
        directions: &[Vec<f64>],
        second: bool,
    ) -> Result<Self> {
        if width == 0 || !values.len().is_multiple_of(width) {
            return Err(Error::Shape {
                context: "jet input",
                expected: width,
                got: values.len(),
            });
        }
        let rows = values.len() / width;
        let mut jet = Self::zeros(rows, width, directions.len(), second);
        jet.value = values;
        for (d, dir) in directions.iter().enumerate() {
            ensure_len("direction", width, dir.len())?;
            for r in 0..rows {
                jet.d1[d][r * width..(r + 1) * width].copy_from_slice(dir);
            }
        }
        Ok(jet)
    }

    pub fn n_dirs(&self) -> usize {
        self.d1.len()
    }

    pub fn like(&self, width: usize) -> Self {
        Self::zeros(self.rows, width, self.n_dirs(), self.second)
    }

    fn all_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
            && self.d1.iter().flatten().all(|v| v.is_finite())
            && self.d2.iter().flatten().all(|v| v.is_finite())
    }

    pub fn rows_range(&self, range: std::ops::Range<usize>) -> Self {
        let w = self.width;
        let cut = |v: &Vec<f64>| v[range.start * w..range.end * w].to_vec();
        Self {
            rows: range.len(),
            width: w,
            value: cut(&self.value),
            d1: self.d1.iter().map(cut).collect(),
            d2: self.d2.iter().map(cut).collect(),
            second: self.second,
        }
    }

    pub fn concat(parts: &[Jet]) -> Self {
        let first = &parts[0];
        let mut out = Jet {
            rows: parts.iter().map(|p| p.rows).sum(),
            width: first.width,
            value: Vec::new(),
            d1: vec![Vec::new(); first.n_dirs()],
            d2: vec![Vec::new(); first.d2.len()],
            second: first.second,
        };
        for p in parts {
            out.value.extend_from_slice(&p.value);
            for (o, s) in out.d1.iter_mut().zip(&p.d1) {
                o.extend_from_slice(s);
            }
            for (o, s) in out.d2.iter_mut().zip(&p.d2) {
                o.extend_from_slice(s);
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.value[row * self.width + col]
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `out (n x m) = a (n x k) * w^T` where `w` is `m x k` row-major; when
/// `accumulate` is false `out` is overwritten.
fn gemm_a_wt(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    w: &[f64],
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= n * k && w.len() >= m * k && out.len() >= n * m);
    if n == 0 || m == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            beta,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `out (n x k) = g (n x m) * w` where `w` is `m x k` row-major.
fn gemm_g_w(n: usize, m: usize, k: usize, g: &[f64], w: &[f64], out: &mut [f64], accumulate: bool) {
    if n == 0 || k == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: see gemm_a_wt.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.as_ptr(),
            m as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            beta,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `gw (m x k) += g^T (m x n) * h (n x k)`.
fn gemm_gt_h(n: usize, m: usize, k: usize, g: &[f64], h: &[f64], gw: &mut [f64]) {
    if n == 0 {
        return;
    }
    // SAFETY: see gemm_a_wt.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            g.as_ptr(),
            1,
            m as isize,
            h.as_ptr(),
            k as isize,
            1,
            1.0,
            gw.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// forward / reverse over jets

struct LayerTape {
    /// Layer output (post-activation jet).
    out: Jet,
    /// Pre-activation tangents, kept for tanh layers only.
    z1: Vec<Vec<f64>>,
    z2: Vec<Vec<f64>>,
}

struct ChunkTape {
    input: Jet,
    layers: Vec<LayerTape>,
}

/// Stored intermediate state of a batched forward pass.
pub struct Tape {
    chunks: Vec<ChunkTape>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.chunks.iter().map(|c| c.input.rows).sum()
    }
}

fn forward_chunk(params: &DenseParams, input: Jet) -> ChunkTape {
    let n = input.rows;
    let mut layers: Vec<LayerTape> = Vec::with_capacity(params.n_layers());
    for l in 0..params.n_layers() {
        let lv = params.layer(l);
        let h = layers.last().map(|t| &t.out).unwrap_or(&input);
        let (k, m) = (lv.n_in, lv.n_out);
        let mut z = h.like(m);
        gemm_a_wt(n, k, m, &h.value, lv.weight, &mut z.value, false);
        for row in z.value.chunks_exact_mut(m) {
            for (v, b) in row.iter_mut().zip(lv.bias) {
                *v += b;
            }
        }
        for d in 0..h.n_dirs() {
            gemm_a_wt(n, k, m, &h.d1[d], lv.weight, &mut z.d1[d], false);
            if h.second {
                gemm_a_wt(n, k, m, &h.d2[d], lv.weight, &mut z.d2[d], false);
            }
        }
        match params.activation(l) {
            Activation::Linear => layers.push(LayerTape {
                out: z,
                z1: Vec::new(),
                z2: Vec::new(),
            }),
            Activation::Tanh => {
                let mut out = z.like(m);
                for (a, &zv) in out.value.iter_mut().zip(&z.value) {
                    *a = zv.tanh();
                }
                for d in 0..z.n_dirs() {
                    for i in 0..n * m {
                        let t = out.value[i];
                        let s1 = 1.0 - t * t;
                        out.d1[d][i] = s1 * z.d1[d][i];
                        if z.second {
                            let s2 = -2.0 * t * s1;
                            let z1 = z.d1[d][i];
                            out.d2[d][i] = s1 * z.d2[d][i] + s2 * z1 * z1;
                        }
                    }
                }
                layers.push(LayerTape {
                    out,
                    z1: z.d1,
                    z2: z.d2,
                });
            }
        }
    }
    ChunkTape { input, layers }
}

fn backward_chunk(params: &DenseParams, tape: &ChunkTape, cot: Jet) -> ParamGradient {
    let mut grad = ParamGradient::zeros_like(params);
    let n = tape.input.rows;
    let mut g = cot;
    for l in (0..params.n_layers()).rev() {
        let lv = params.layer(l);
        let (k, m) = (lv.n_in, lv.n_out);
        let lt = &tape.layers[l];
        // cotangent with respect to the pre-activation jet
        let gz = match params.activation(l) {
            Activation::Linear => g,
            Activation::Tanh => {
                let a = &lt.out.value;
                let mut gz = g.like(m);
                for i in 0..n * m {
                    gz.value[i] = (1.0 - a[i] * a[i]) * g.value[i];
                }
                for d in 0..g.n_dirs() {
                    for i in 0..n * m {
                        let t = a[i];
                        let s1 = 1.0 - t * t;
                        let s2 = -2.0 * t * s1;
                        let z1 = lt.z1[d][i];
                        let g1 = g.d1[d][i];
                        if g.second {
                            let s3 = -2.0 * s1 * s1 + 4.0 * t * t * s1;
                            let z2 = lt.z2[d][i];
                            let g2 = g.d2[d][i];
                            gz.d2[d][i] = s1 * g2;
                            gz.d1[d][i] = s1 * g1 + 2.0 * s2 * z1 * g2;
                            gz.value[i] += s2 * z1 * g1 + s2 * z2 * g2 + s3 * z1 * z1 * g2;
                        } else {
                            gz.d1[d][i] = s1 * g1;
                            gz.value[i] += s2 * z1 * g1;
                        }
                    }
                }
                gz
            }
        };
        let h = if l == 0 {
            &tape.input
        } else {
            &tape.layers[l - 1].out
        };
        let o = params.offset(l);
        {
            let gw = &mut grad.data[o..o + m * k];
            gemm_gt_h(n, m, k, &gz.value, &h.value, gw);
            for d in 0..gz.n_dirs() {
                gemm_gt_h(n, m, k, &gz.d1[d], &h.d1[d], gw);
                if gz.second {
                    gemm_gt_h(n, m, k, &gz.d2[d], &h.d2[d], gw);
                }
            }
        }
        {
            let gb = &mut grad.data[o + m * k..o + m * k + m];
            for row in gz.value.chunks_exact(m) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
        }
        if l > 0 {
            let mut gh = gz.like(k);
            gemm_g_w(n, m, k, &gz.value, lv.weight, &mut gh.value, false);
            for d in 0..gz.n_dirs() {
                gemm_g_w(n, m, k, &gz.d1[d], lv.weight, &mut gh.d1[d], false);
                if gz.second {
                    gemm_g_w(n, m, k, &gz.d2[d], lv.weight, &mut gh.d2[d], false);
                }
            }
            g = gh;
        } else {
            break;
        }
    }
    grad
}

/// Batched forward pass over input jets; returns the output jet and the tape
/// needed by [`backward`].
pub fn forward_jet(params: &DenseParams, input: &Jet) -> Result<(Jet, Tape)> {
    ensure_len("network input", params.n_inputs(), input.width)?;
    if input.second && input.d2.len() != input.d1.len() {
        return Err(Error::Shape {
            context: "second-order directions",
            expected: input.d1.len(),
            got: input.d2.len(),
        });
    }
    if !input.all_finite() {
        return Err(Error::Domain("non-finite network input".into()));
    }
    let ranges = par::chunk_ranges(input.rows, CHUNK_ROWS);
    let chunks = par::map_slice(&ranges, |r| {
        forward_chunk(params, input.rows_range(r.clone()))
    });
    let outs: Vec<Jet> = chunks
        .iter()
        .map(|c| c.layers.last().unwrap().out.clone())
        .collect();
    let out = if outs.is_empty() {
        input.like(params.n_outputs())
    } else {
        Jet::concat(&outs)
    };
    Ok((out, Tape { chunks }))
}

/// Reverse pass: gradient of `sum(cot * outputs)` over all jet components.
pub fn backward(params: &DenseParams, tape: &Tape, cot: &Jet) -> Result<ParamGradient> {
    ensure_len("output cotangent rows", tape.rows(), cot.rows)?;
    ensure_len("output cotangent width", params.n_outputs(), cot.width)?;
    let mut starts = Vec::with_capacity(tape.chunks.len());
    let mut s = 0;
    for c in &tape.chunks {
        starts.push(s..s + c.input.rows);
        s += c.input.rows;
    }
    let idx: Vec<usize> = (0..tape.chunks.len()).collect();
    let parts = par::map_slice(&idx, |&i| {
        backward_chunk(params, &tape.chunks[i], cot.rows_range(starts[i].clone()))
    });
    let mut grad = ParamGradient::zeros_like(params);
    for p in &parts {
        grad.add_scaled(p, 1.0);
    }
    Ok(grad)
}

/// A scalar objective over a batch of network output jets.
///
/// `evaluate` returns the objective value and its derivative with respect to
/// every component of the output jet.
pub trait Objective {
    fn evaluate(&self, outputs: &Jet) -> Result<(f64, Jet)>;
}

impl<F> Objective for F
where
    F: Fn(&Jet) -> Result<(f64, Jet)>,
{
    fn evaluate(&self, outputs: &Jet) -> Result<(f64, Jet)> {
        self(outputs)
    }
}

/// Loss and exact parameter gradient of `objective` evaluated on the network
/// outputs for `inputs`.
pub fn grad_objective(
    params: &DenseParams,
    inputs: &Jet,
    objective: &dyn Objective,
) -> Result<(f64, ParamGradient)> {
    let (out, tape) = forward_jet(params, inputs)?;
    if !out.all_finite() {
        return Err(Error::Divergence {
            term: "network output".into(),
        });
    }
    let (loss, cot) = objective.evaluate(&out)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            term: "objective value".into(),
        });
    }
    if !cot.all_finite() {
        return Err(Error::Divergence {
            term: "objective adjoint".into(),
        });
    }
    let grad = backward(params, &tape, &cot)?;
    if !grad.is_finite() {
        return Err(Error::Divergence {
            term: "parameter gradient".into(),
        });
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(widths: &[usize], seed: u64) -> DenseParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DenseParams::glorot_uniform(widths, Activation::Linear, &mut rng).unwrap();
        for v in p.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
        p
    }

    #[test]
    fn identity_single_layer() {
        let p = DenseParams::from_layers(&[(vec![1.0], vec![0.0])], 1, Activation::Linear).unwrap();
        assert_eq!(p.forward(&[0.5]).unwrap(), vec![0.5]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = DenseParams::zeros(&[3, 4, 2], Activation::Linear).unwrap();
        assert_eq!(p.forward(&[0.3, -1.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn shape_and_domain_errors() {
        let p = DenseParams::zeros(&[3, 2], Activation::Linear).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            p.forward(&[1.0, f64::NAN, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(DenseParams::zeros(&[3], Activation::Linear).is_err());
    }

    #[test]
    fn linear_network_tangents() {
        let w = vec![1.0, 2.0, -3.0, 0.5, 4.0, -1.0];
        let p = DenseParams::from_layers(&[(w.clone(), vec![0.1, 0.2])], 3, Activation::Linear)
            .unwrap();
        let dir = vec![0.6, 0.0, 0.8];
        let tb = p
            .pushforward2(&[0.2, -0.4, 0.9], std::slice::from_ref(&dir))
            .unwrap();
        let expect0 = 1.0 * 0.6 + -3.0 * 0.8;
        let expect1 = 0.5 * 0.6 - 0.8;
        assert!((tb.d1[0][0] - expect0).abs() < 1e-15);
        assert!((tb.d1[0][1] - expect1).abs() < 1e-15);
        assert_eq!(tb.d2[0], vec![0.0, 0.0]);
    }

    #[test]
    fn tanh_at_origin() {
        let p = DenseParams::from_layers(&[(vec![1.0], vec![0.0])], 1, Activation::Tanh).unwrap();
        let tb = p.pushforward2(&[0.0], &[vec![1.0]]).unwrap();
        assert_eq!(tb.value, vec![0.0]);
        assert_eq!(tb.d1[0], vec![1.0]);
        assert_eq!(tb.d2[0], vec![0.0]);
    }

    #[test]
    fn quadratic_in_last_bias() {
        let mut p = DenseParams::zeros(&[2, 3, 2], Activation::Linear).unwrap();
        p.layer_mut(1).1.copy_from_slice(&[0.7, -1.3]);
        let inputs = Jet::from_points(2, vec![0.1, 0.2], &[], false).unwrap();
        let obj = |out: &Jet| -> Result<(f64, Jet)> {
            let mut cot = out.like(out.width);
            cot.value.copy_from_slice(&out.value);
            Ok((0.5 * out.value.iter().map(|v| v * v).sum::<f64>(), cot))
        };
        let (loss, g) = grad_objective(&p, &inputs, &obj).unwrap();
        assert!((loss - 0.5 * (0.49 + 1.69)).abs() < 1e-15);
        let gs = g.as_slice();
        let n = gs.len();
        assert_eq!(&gs[n - 2..], &[0.7, -1.3]);
    }

    #[test]
    fn constant_objective_zero_grad() {
        let p = random_net(&[2, 4, 1], 3);
        let inputs = Jet::from_points(2, vec![0.1, 0.2, 0.3, 0.4], &[], false).unwrap();
        let obj = |out: &Jet| -> Result<(f64, Jet)> { Ok((4.2, out.like(out.width))) };
        let (loss, g) = grad_objective(&p, &inputs, &obj).unwrap();
        assert_eq!(loss, 4.2);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let p = random_net(&[1, 3, 1], 5);
        let inputs = Jet::from_points(1, vec![0.5], &[], false).unwrap();
        let obj = |out: &Jet| -> Result<(f64, Jet)> { Ok((f64::INFINITY, out.like(1))) };
        match grad_objective(&p, &inputs, &obj) {
            Err(Error::Divergence { term }) => assert_eq!(term, "objective value"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let p = random_net(&[4, 16, 16, 3], 11);
        let x = [0.1, -0.4, 0.9, 0.2];
        let dirs = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let a = p.pushforward2(&x, &dirs).unwrap();
        let b = p.pushforward2(&x, &dirs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_batch_matches_row_by_row() {
        let p = random_net(&[3, 8, 8, 2], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = CHUNK_ROWS + 37;
        let vals: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jet = Jet::from_points(3, vals.clone(), &[vec![0.0, 1.0, 0.0]], true).unwrap();
        let (out, _) = forward_jet(&p, &jet).unwrap();
        for r in [0, 100, CHUNK_ROWS, rows - 1] {
            let tb = p
                .pushforward2(&vals[r * 3..r * 3 + 3], &[vec![0.0, 1.0, 0.0]])
                .unwrap();
            for o in 0..2 {
                assert!((out.value[r * 2 + o] - tb.value[o]).abs() < 1e-14);
                assert!((out.d1[0][r * 2 + o] - tb.d1[0][o]).abs() < 1e-14);
                assert!((out.d2[0][r * 2 + o] - tb.d2[0][o]).abs() < 1e-14);
            }
        }
    }
}
