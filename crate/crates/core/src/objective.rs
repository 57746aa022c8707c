//! Training objective: standardized data misfit plus detach-normalized PDE
//! residual terms, with exact parameter gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_objective, Jet, ParamGradient};
use crate::dataset::PointRecord;
use crate::domain::{FlowField, Query, SpatialDerivs, N_VARS};
use crate::error::{Error, Result};
use crate::inr::SurrogateModel;
use crate::physics::{
    continuity_residual, continuity_sq_adjoint, momentum_residual, momentum_sq_adjoint, Forcing,
    PhysicsContext,
};

/// Which residuals are added to the data loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mlp", alias = "MLP")]
    Mlp,
    #[serde(rename = "c-mlp", alias = "C-MLP")]
    CMlp,
    #[serde(rename = "cm-mlp", alias = "CM-MLP")]
    CmMlp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mlp, Variant::CMlp, Variant::CmMlp];

    pub fn uses_continuity(self) -> bool {
        self != Variant::Mlp
    }

    pub fn uses_momentum(self) -> bool {
        self == Variant::CmMlp
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Mlp => "MLP",
            Variant::CMlp => "C-MLP",
            Variant::CmMlp => "CM-MLP",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Variant::Mlp),
            "c-mlp" | "c_mlp" | "cmlp" => Ok(Variant::CMlp),
            "cm-mlp" | "cm_mlp" | "cmmlp" => Ok(Variant::CmMlp),
            _ => Err(Error::Argument(format!(
                "unknown variant {s:?} (expected mlp, c-mlp or cm-mlp)"
            ))),
        }
    }
}

/// Weight of the PDE term and the guard in its detached denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_pde: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pde: 1e-3,
            eps: 1e-12,
        }
    }
}

/// Raw mean-squared residuals of the active equations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PdeTerms {
    pub cont: Option<f64>,
    pub mom: Option<f64>,
}

impl PdeTerms {
    /// Sum of `L_e / (detach(L_e) + eps)` over active terms.
    pub fn normalized(&self, eps: f64) -> f64 {
        [self.cont, self.mom]
            .iter()
            .flatten()
            .map(|l| l / (l + eps))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_data: f64,
    pub pde: PdeTerms,
    /// Sum of normalized PDE terms.
    pub pde_normalized: f64,
    pub lambda_pde: f64,
    pub total: f64,
}

/// Collocation points with the forcing that applies at each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBatch {
    pub queries: Vec<Query>,
    pub forcing: Vec<Forcing>,
}

impl ResidualBatch {
    pub fn new(queries: Vec<Query>, forcing: Vec<Forcing>) -> Result<Self> {
        crate::error::ensure_len("residual forcing", queries.len(), forcing.len())?;
        Ok(Self { queries, forcing })
    }

    /// Gravity as the only body force and no k/ω sources.
    pub fn with_gravity(queries: Vec<Query>, ctx: &PhysicsContext) -> Self {
        let forcing = vec![Forcing::gravity(&ctx.fluid); queries.len()];
        Self { queries, forcing }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Standardized targets of a labeled batch.
pub fn standardized_targets(model: &SurrogateModel, batch: &[PointRecord]) -> Vec<[f64; N_VARS]> {
    batch
        .iter()
        .map(|r| model.stats.standardize(&r.fields))
        .collect()
}

fn data_objective(targets: &[[f64; N_VARS]]) -> impl Fn(&Jet) -> Result<(f64, Jet)> + '_ {
    move |out: &Jet| {
        let n = targets.len() as f64;
        let mut cot = out.like(N_VARS);
        let mut loss = 0.0;
        for (row, t) in targets.iter().enumerate() {
            for v in 0..N_VARS {
                let e = out.value[row * N_VARS + v] - t[v];
                loss += e * e;
                cot.value[row * N_VARS + v] = 2.0 * e / n;
            }
        }
        Ok((loss / n, cot))
    }
}

/// Mean squared standardized misfit over the batch.
pub fn data_loss(model: &SurrogateModel, batch: &[PointRecord]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("data loss over an empty batch".into()));
    }
    let queries: Vec<Query> = batch.iter().map(PointRecord::query).collect();
    let jet = model.input_jet(&queries, 0, false)?;
    let (out, _) = crate::autodiff::forward_jet(&model.params, &jet)?;
    let targets = standardized_targets(model, batch);
    let (loss, _) = data_objective(&targets)(&out)?;
    Ok(loss)
}

/// Data loss and gradient for precomputed network inputs (value-only jet)
/// and standardized targets.
pub fn data_loss_grad(
    model: &SurrogateModel,
    inputs: &Jet,
    targets: &[[f64; N_VARS]],
) -> Result<(f64, ParamGradient)> {
    if targets.is_empty() {
        return Err(Error::Argument("data loss over an empty batch".into()));
    }
    crate::error::ensure_len("data targets", inputs.rows, targets.len())?;
    grad_objective(&model.params, inputs, &data_objective(targets))
}

fn check_pde_args(batch: &ResidualBatch, variant: Variant) -> Result<()> {
    if variant == Variant::Mlp {
        return Err(Error::Argument("the MLP variant has no PDE term".into()));
    }
    if batch.is_empty() {
        return Err(Error::Argument(
            "PDE loss needs at least one residual point".into(),
        ));
    }
    Ok(())
}

fn residual_jet(model: &SurrogateModel, batch: &ResidualBatch, variant: Variant) -> Result<Jet> {
    check_pde_args(batch, variant)?;
    model.input_jet(&batch.queries, 3, variant.uses_momentum())
}

/// Raw PDE terms of any flow field (surrogate or analytic) on a batch.
pub fn raw_pde_terms(
    field: &dyn FlowField,
    batch: &ResidualBatch,
    variant: Variant,
    ctx: &PhysicsContext,
) -> Result<PdeTerms> {
    if batch.is_empty() {
        return Err(Error::Argument(
            "PDE loss needs at least one residual point".into(),
        ));
    }
    let derivs = field.derivs_batch(&batch.queries)?;
    let m = batch.len() as f64;
    let mut cont = 0.0;
    let mut mom = 0.0;
    for ((d, q), f) in derivs.iter().zip(&batch.queries).zip(&batch.forcing) {
        if !q.in_liquid() {
            continue;
        }
        cont += continuity_residual(&d.grad).powi(2);
        if variant.uses_momentum() {
            let (r, _) = momentum_residual(d, q.pos, q.cond.rpm, ctx, f.f);
            mom += r.iter().map(|x| x * x).sum::<f64>();
        }
    }
    Ok(PdeTerms {
        cont: variant.uses_continuity().then_some(cont / m),
        mom: variant.uses_momentum().then_some(mom / m),
    })
}

/// Sum of normalized PDE terms and the raw terms, without gradients.
pub fn pde_loss(
    model: &SurrogateModel,
    batch: &ResidualBatch,
    variant: Variant,
    ctx: &PhysicsContext,
    eps: f64,
) -> Result<(f64, PdeTerms)> {
    check_pde_args(batch, variant)?;
    let terms = raw_pde_terms(model, batch, variant, ctx)?;
    Ok((terms.normalized(eps), terms))
}

/// Normalized PDE loss with its parameter gradient
/// `Σ_e ∇L_e / (detach(L_e) + eps)`.
pub fn pde_loss_grad(
    model: &SurrogateModel,
    batch: &ResidualBatch,
    variant: Variant,
    ctx: &PhysicsContext,
    eps: f64,
) -> Result<(f64, PdeTerms, ParamGradient)> {
    let jet = residual_jet(model, batch, variant)?;
    let terms = std::cell::Cell::new(PdeTerms::default());
    let objective = |out: &Jet| -> Result<(f64, Jet)> {
        let m = batch.len();
        let per_row: Vec<Option<(f64, SpatialDerivs, f64, SpatialDerivs)>> =
            crate::par::map_indexed(m, |row| {
                let q = &batch.queries[row];
                if !q.in_liquid() {
                    return None;
                }
                let d = model.derivs_from_output(out, row);
                let (c2, ca) = continuity_sq_adjoint(&d);
                let (m2, ma) = if variant.uses_momentum() {
                    momentum_sq_adjoint(&d, q.pos, q.cond.rpm, ctx, batch.forcing[row].f)
                } else {
                    (0.0, SpatialDerivs::default())
                };
                Some((c2, ca, m2, ma))
            });
        let inv_m = 1.0 / m as f64;
        let l_cont: f64 = per_row.iter().flatten().map(|r| r.0).sum::<f64>() * inv_m;
        let l_mom: f64 = per_row.iter().flatten().map(|r| r.2).sum::<f64>() * inv_m;
        let w_cont = inv_m / (l_cont + eps);
        let w_mom = inv_m / (l_mom + eps);
        let mut cot = out.like(N_VARS);
        for (row, r) in per_row.iter().enumerate() {
            if let Some((_, ca, _, ma)) = r {
                model.pull_back_adjoint(ca, &mut cot, row, w_cont);
                if variant.uses_momentum() {
                    model.pull_back_adjoint(ma, &mut cot, row, w_mom);
                }
            }
        }
        let t = PdeTerms {
            cont: Some(l_cont),
            mom: variant.uses_momentum().then_some(l_mom),
        };
        terms.set(t);
        Ok((t.normalized(eps), cot))
    };
    let (value, grad) = grad_objective(&model.params, &jet, &objective)?;
    Ok((value, terms.get(), grad))
}

/// `L_data + λ_pde · Σ normalized PDE terms` (just `L_data` for the MLP variant).
pub fn total_loss(
    model: &SurrogateModel,
    data: &[PointRecord],
    residual: Option<&ResidualBatch>,
    variant: Variant,
    ctx: &PhysicsContext,
    weights: &LossWeights,
) -> Result<LossReport> {
    let l_data = data_loss(model, data)?;
    let (pde_normalized, pde) = match (variant, residual) {
        (Variant::Mlp, _) => (0.0, PdeTerms::default()),
        (_, Some(batch)) => pde_loss(model, batch, variant, ctx, weights.eps)?,
        (_, None) => return Err(Error::Argument(format!("{variant} needs residual points"))),
    };
    Ok(report(l_data, pde, pde_normalized, variant, weights))
}

fn report(
    l_data: f64,
    pde: PdeTerms,
    pde_normalized: f64,
    variant: Variant,
    weights: &LossWeights,
) -> LossReport {
    let total = if variant == Variant::Mlp {
        l_data
    } else {
        l_data + weights.lambda_pde * pde_normalized
    };
    LossReport {
        l_data,
        pde,
        pde_normalized,
        lambda_pde: weights.lambda_pde,
        total,
    }
}

/// Total loss and gradient from precomputed data inputs. For the MLP
/// variant this is exactly [`data_loss_grad`]; no residual work happens.
pub fn total_loss_grad(
    model: &SurrogateModel,
    data_inputs: &Jet,
    targets: &[[f64; N_VARS]],
    residual: Option<&ResidualBatch>,
    variant: Variant,
    ctx: &PhysicsContext,
    weights: &LossWeights,
) -> Result<(LossReport, ParamGradient)> {
    let (l_data, mut grad) = data_loss_grad(model, data_inputs, targets)?;
    if variant == Variant::Mlp {
        return Ok((
            report(l_data, PdeTerms::default(), 0.0, variant, weights),
            grad,
        ));
    }
    let batch =
        residual.ok_or_else(|| Error::Argument(format!("{variant} needs residual points")))?;
    let (norm, terms, g_pde) = pde_loss_grad(model, batch, variant, ctx, weights.eps)?;
    grad.add_scaled(&g_pde, weights.lambda_pde);
    Ok((report(l_data, terms, norm, variant, weights), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DomainBounds, FieldVector, OperatingCondition};
    use crate::inr::{ModelConfig, OutputStats};
    use crate::mms::{MmsSolution, MmsSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> SurrogateModel {
        let cfg = ModelConfig {
            depth: 2,
            width: 8,
            sigma_b: 1.0,
            seed,
            ..ModelConfig::default()
        };
        let stats = OutputStats {
            mean: [0.5, 0.0, 0.0, 0.0, 2e4, 0.01, 5.0],
            std: [0.4, 0.5, 0.5, 0.3, 1e4, 0.01, 3.0],
        };
        SurrogateModel::new(cfg, DomainBounds::default(), stats).unwrap()
    }

    fn residual_batch(n: usize, seed: u64) -> (ResidualBatch, PhysicsContext) {
        let b = DomainBounds::default();
        let sol = MmsSolution::new(MmsSpec::default(), b, PhysicsContext::default_for(&b));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries: Vec<Query> = (0..n)
            .map(|_| {
                let c = OperatingCondition::new(
                    rng.random_range(50.0..150.0),
                    rng.random_range(1.5..6.5),
                );
                let r = 0.9 * rng.random::<f64>();
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Query::new(
                    [r * t.cos(), r * t.sin(), rng.random_range(0.0..c.height)],
                    c,
                )
            })
            .collect();
        let forcing = queries.iter().map(|q| sol.forcing(q.pos, q.cond)).collect();
        (ResidualBatch::new(queries, forcing).unwrap(), sol.ctx)
    }

    fn record(pos: [f64; 3], fields: [f64; 7]) -> PointRecord {
        PointRecord {
            pos,
            cond: OperatingCondition::new(100.0, 4.0),
            fields: FieldVector(fields),
        }
    }

    #[test]
    fn variant_parsing_and_labels() {
        assert_eq!("C-MLP".parse::<Variant>().unwrap(), Variant::CMlp);
        assert_eq!("cm-mlp".parse::<Variant>().unwrap(), Variant::CmMlp);
        assert!("pinn".parse::<Variant>().is_err());
        assert_eq!(Variant::CmMlp.to_string(), "CM-MLP");
    }

    #[test]
    fn zero_network_at_mean_targets_has_zero_loss() {
        let mut m = tiny_model(0);
        m.params.as_mut_slice().fill(0.0);
        let batch = vec![
            record([0.1, 0.2, 0.3], m.stats.mean),
            record([-0.4, 0.0, 2.0], m.stats.mean),
        ];
        assert_eq!(data_loss(&m, &batch).unwrap(), 0.0);
        assert!(data_loss(&m, &[]).is_err());
    }

    #[test]
    fn single_standardized_error() {
        let mut m = tiny_model(0);
        m.params.as_mut_slice().fill(0.0);
        let mut target = m.stats.mean;
        target[3] += 0.5 * m.stats.std[3];
        let l = data_loss(&m, &[record([0.0, 0.0, 1.0], target)]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn normalization_rule_arithmetic() {
        let t = PdeTerms {
            cont: Some(4.0),
            mom: None,
        };
        let w = LossWeights::default();
        let r = report(0.3, t, t.normalized(w.eps), Variant::CMlp, &w);
        assert!((r.total - (0.3 + 1e-3)).abs() < 1e-14);
        let r0 = report(
            0.3,
            t,
            t.normalized(w.eps),
            Variant::CMlp,
            &LossWeights {
                lambda_pde: 0.0,
                ..w
            },
        );
        assert_eq!(r0.total, 0.3);
        let zero = PdeTerms {
            cont: Some(0.0),
            mom: Some(0.0),
        };
        assert_eq!(zero.normalized(1e-12), 0.0);
    }

    #[test]
    fn exact_solution_has_zero_raw_terms() {
        let (batch, ctx) = residual_batch(200, 1);
        let b = DomainBounds::default();
        let sol = MmsSolution::new(MmsSpec::default(), b, ctx.clone());
        let t = raw_pde_terms(&sol, &batch, Variant::CmMlp, &ctx).unwrap();
        assert!(t.cont.unwrap() < 1e-20);
        assert!(t.mom.unwrap() < 1e-16);
        assert!(t.normalized(1e-12) < 1e-4);
    }

    #[test]
    fn mlp_gradient_is_the_data_gradient() {
        let m = tiny_model(3);
        let (batch, ctx) = residual_batch(10, 2);
        let recs: Vec<_> = batch
            .queries
            .iter()
            .map(|q| record(q.pos, [0.3; 7]))
            .collect();
        let inputs = m
            .input_jet(
                &recs.iter().map(|r| r.query()).collect::<Vec<_>>(),
                0,
                false,
            )
            .unwrap();
        let targets = standardized_targets(&m, &recs);
        let (_, g1) = data_loss_grad(&m, &inputs, &targets).unwrap();
        let (rep, g2) = total_loss_grad(
            &m,
            &inputs,
            &targets,
            None,
            Variant::Mlp,
            &ctx,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(g1.as_slice(), g2.as_slice());
        assert_eq!(rep.total, rep.l_data);
    }

    // FD oracle on the raw term: ∇(normalized) = ∇L_e / (L_e + eps).
    fn check_normalized_gradient(variant: Variant) {
        let m = tiny_model(5);
        let (batch, ctx) = residual_batch(6, 3);
        let eps = 1e-12;
        let (_, terms, grad) = pde_loss_grad(&m, &batch, variant, &ctx, eps).unwrap();
        let raw = |model: &SurrogateModel| {
            let t = raw_pde_terms(model, &batch, variant, &ctx).unwrap();
            (t.cont.unwrap_or(0.0), t.mom.unwrap_or(0.0))
        };
        let (lc, lm) = (terms.cont.unwrap(), terms.mom.unwrap_or(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..12 {
            let i = rng.random_range(0..m.params.len());
            let h = 1e-5 * (1.0 + m.params.as_slice()[i].abs());
            let eval = |delta: f64| {
                let mut mm = m.clone();
                mm.params.as_mut_slice()[i] += delta;
                let (c, mo) = raw(&mm);
                c / (lc + eps)
                    + if variant.uses_momentum() {
                        mo / (lm + eps)
                    } else {
                        0.0
                    }
            };
            let fd =
                (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h);
            let g = grad.as_slice()[i];
            let scale = g
                .abs()
                .max(1e-3 * grad.norm() / (grad.as_slice().len() as f64).sqrt());
            assert!(((fd - g) / scale).abs() < 1e-5, "param {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn continuity_term_gradient_matches_fd() {
        check_normalized_gradient(Variant::CMlp);
    }

    #[test]
    fn momentum_term_gradient_matches_fd() {
        check_normalized_gradient(Variant::CmMlp);
    }

    #[test]
    fn normalized_gradient_is_scale_invariant() {
        // Scaling every output std scales u, v, w (and hence the continuity
        // residual) by c; the normalized gradient must not change.
        let m = tiny_model(6);
        let (batch, ctx) = residual_batch(8, 4);
        let mut scaled = m.clone();
        for v in 1..4 {
            scaled.stats.std[v] *= 10.0;
        }
        let (_, t1, g1) = pde_loss_grad(&m, &batch, Variant::CMlp, &ctx, 0.0).unwrap();
        let (_, t2, g2) = pde_loss_grad(&scaled, &batch, Variant::CMlp, &ctx, 0.0).unwrap();
        assert!((t2.cont.unwrap() / t1.cont.unwrap() - 100.0).abs() < 1e-9);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn pde_loss_argument_errors() {
        let m = tiny_model(0);
        let (batch, ctx) = residual_batch(3, 0);
        assert!(pde_loss(&m, &batch, Variant::Mlp, &ctx, 1e-12).is_err());
        let empty = ResidualBatch::new(vec![], vec![]).unwrap();
        assert!(pde_loss(&m, &empty, Variant::CMlp, &ctx, 1e-12).is_err());
        let (v, _) = pde_loss(&m, &batch, Variant::CmMlp, &ctx, 1e-12).unwrap();
        assert!((0.0..2.0).contains(&v));
    }
}
