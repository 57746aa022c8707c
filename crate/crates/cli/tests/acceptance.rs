//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! `VESSEL_ACCEPTANCE=full` switches the study to the full desk-scale
//! configuration (hours on a laptop); the default is a compact profile
//! sized for a single core. Trend criteria (3, 4, 5, 7) are statistical
//! and reported without failing the run unless `VESSEL_ACCEPTANCE_STRICT`
//! is set; the deterministic criteria always fail the run when violated.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use vessel::autodiff::{forward_jet, grad_objective, Activation, DenseParams, Jet};
use vessel::dataset::{
    generate_dataset, sample_conditions, stream_rng, ConditionDataset, ConditionSampling,
};
use vessel::evaluation::ensemble_tracer_report;
use vessel::inr::{FourierMode, ModelConfig, OutputStats, SurrogateModel};
use vessel::mms::{MmsSolution, MmsSpec};
use vessel::objective::Variant;
use vessel::physics::{evaluate_residuals, PhysicsContext};
use vessel::tracer::{
    sample_frozen_field, simulate, simulate_field, solid_swirl, step, CylGrid, DiffusivityMode,
    FrozenField, Scheme, TracerConfig,
};
use vessel::trainer::{run_study, StudyConfig, StudyOutcome, TrainConfig};
use vessel::{DomainBounds, FlowField, OperatingCondition, Query};

struct Outcome {
    pass: bool,
    detail: String,
}

struct Report {
    hard_failures: Vec<usize>,
    soft_failures: Vec<usize>,
}

impl Report {
    fn record(&mut self, id: usize, title: &str, hard: bool, t0: Instant, o: Outcome) {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id}: {tag}  {title} — {} [{:.1} s]",
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        if !o.pass {
            if hard {
                self.hard_failures.push(id);
            } else {
                self.soft_failures.push(id);
            }
        }
    }
}

fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn random_net(rng: &mut impl Rng, n_in: usize) -> DenseParams {
    let n_hidden = rng.random_range(1..=3);
    let mut widths = vec![n_in];
    widths.extend((0..n_hidden).map(|_| rng.random_range(3..=9)));
    widths.push(rng.random_range(1..=4));
    let act = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Linear
    };
    let mut p = DenseParams::glorot_uniform(&widths, act, rng).unwrap();
    for v in p.as_mut_slice() {
        *v += rng.random_range(-0.2..0.2);
    }
    p
}

/// Second derivative along `t` by Richardson-extrapolated central differences.
fn second_fd(f: impl Fn(f64) -> Vec<f64>, h: f64) -> Vec<f64> {
    let f0 = f(0.0);
    let d = |h: f64| -> Vec<f64> {
        let (p, m) = (f(h), f(-h));
        (0..f0.len())
            .map(|o| (p[o] - 2.0 * f0[o] + m[o]) / (h * h))
            .collect()
    };
    let (coarse, fine) = (d(h), d(h / 2.0));
    coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect()
}

fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn shifted(x: &[f64], d: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + h * b).collect()
}

/// Loss mixing outputs with their first and second input derivatives.
fn derivative_loss(out: &Jet) -> vessel::Result<(f64, Jet)> {
    let n = out.rows as f64;
    let mut cot = out.like(out.width);
    let mut loss = 0.0;
    for i in 0..out.value.len() {
        let v = out.value[i];
        let d0 = out.d1[0][i];
        loss += v * v + v.sin() * d0;
        cot.value[i] = (2.0 * v + v.cos() * d0) / n;
        for d in 0..out.d1.len() {
            let a = out.d1[d][i];
            let b = out.d2[d][i];
            loss += 0.5 * a * a + 0.25 * b * b;
            cot.d1[d][i] = (a + if d == 0 { v.sin() } else { 0.0 }) / n;
            cot.d2[d][i] = 0.5 * b / n;
        }
    }
    Ok((loss / n, cot))
}

fn criterion_1() -> Outcome {
    let mut rng = stream_rng(2024, 1);
    let (mut worst_j, mut worst_h, mut worst_g, mut worst_m) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let n_nets = 24;
    for _ in 0..n_nets {
        let n_in = rng.random_range(2..=5);
        let mut net = random_net(&mut rng, n_in);
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Jacobian columns along the coordinate axes
        let axes: Vec<Vec<f64>> = (0..n_in)
            .map(|i| (0..n_in).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let tb = net.pushforward2(&x, &axes).unwrap();
        let h = 1e-5;
        for (i, e) in axes.iter().enumerate() {
            let fp = net.forward(&shifted(&x, e, h)).unwrap();
            let fm = net.forward(&shifted(&x, e, -h)).unwrap();
            let fd: Vec<f64> = fp
                .iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            worst_j = worst_j.max(rel_inf(&tb.d1[i], &fd));
        }

        // pure second derivatives along random directions
        let dirs: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, n_in)).collect();
        let tb = net.pushforward2(&x, &dirs).unwrap();
        for (i, d) in dirs.iter().enumerate() {
            let fd = second_fd(|t| net.forward(&shifted(&x, d, t)).unwrap(), 2e-3);
            worst_h = worst_h.max(rel_inf(&tb.d2[i], &fd));
        }

        // parameter gradient of a loss on input derivatives
        let rows = 4;
        let mut inputs = Jet::zeros(rows, n_in, 2, true);
        for r in 0..rows {
            for c in 0..n_in {
                inputs.value[r * n_in + c] = rng.random_range(-1.0..1.0);
            }
            for d in 0..2 {
                let u = unit(&mut rng, n_in);
                inputs.d1[d][r * n_in..(r + 1) * n_in].copy_from_slice(&u);
            }
        }
        let (_, grad) = grad_objective(&net, &inputs, &derivative_loss).unwrap();
        let eval = |p: &DenseParams| {
            derivative_loss(&forward_jet(p, &inputs).unwrap().0)
                .unwrap()
                .0
        };
        let h = 1e-6;
        let mut fd = vec![0.0; net.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let orig = net.as_slice()[k];
            net.as_mut_slice()[k] = orig + h;
            let lp = eval(&net);
            net.as_mut_slice()[k] = orig - h;
            let lm = eval(&net);
            net.as_mut_slice()[k] = orig;
            *slot = (lp - lm) / (2.0 * h);
        }
        worst_g = worst_g.max(rel_inf(grad.as_slice(), &fd));
    }

    // physical-unit derivatives of a surrogate (input and output scalings)
    let b = DomainBounds::default();
    for seed in 0..4 {
        let cfg = ModelConfig {
            depth: 2,
            width: 12,
            seed,
            ..ModelConfig::default()
        };
        let stats = OutputStats {
            mean: [0.5, 0.0, 0.0, 0.0, 3e4, 0.01, 5.0],
            std: [0.5, 2.0, 2.0, 1.0, 1e4, 0.01, 3.0],
        };
        let model = SurrogateModel::new(cfg, b, stats).unwrap();
        let q = Query::new(
            [
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.5..3.0),
            ],
            OperatingCondition::new(rng.random_range(60.0..140.0), 3.5),
        );
        let d = model.spatial_derivs(&q).unwrap();
        let at = |dx: [f64; 3]| {
            let p = [q.pos[0] + dx[0], q.pos[1] + dx[1], q.pos[2] + dx[2]];
            model.fields(&Query::new(p, q.cond)).unwrap().0
        };
        let h1 = 1e-5;
        let mut lap_fd = [0.0; 7];
        for ax in 0..3 {
            let mut e = [0.0; 3];
            e[ax] = h1;
            let (p, m) = (at(e), at(e.map(|v| -v)));
            let g_fd: Vec<f64> = (0..7).map(|v| (p[v] - m[v]) / (2.0 * h1)).collect();
            let g_ad: Vec<f64> = (0..7).map(|v| d.grad[v][ax]).collect();
            for v in 0..7 {
                worst_m =
                    worst_m.max((g_ad[v] - g_fd[v]).abs() / g_fd[v].abs().max(1e-3 * stats.std[v]));
            }
            let axis = second_fd(
                |t| {
                    let mut e = [0.0; 3];
                    e[ax] = t;
                    at(e).to_vec()
                },
                4e-3,
            );
            for (l, a) in lap_fd.iter_mut().zip(&axis) {
                *l += a;
            }
        }
        for ((ad, fd), sd) in d.lap.iter().zip(&lap_fd).zip(&stats.std) {
            worst_m = worst_m.max((ad - fd).abs() / fd.abs().max(1e-2 * sd));
        }
    }
    let worst = worst_j.max(worst_h).max(worst_g).max(worst_m);
    Outcome {
        pass: worst < 1e-5,
        detail: format!(
            "{n_nets} random nets + 4 surrogates; max rel. err: Jacobian {worst_j:.1e}, second directional {worst_h:.1e}, parameter gradient {worst_g:.1e}, physical derivatives {worst_m:.1e} (tol 1e-5)"
        ),
    }
}

fn criterion_2() -> Outcome {
    let b = DomainBounds::default();
    let ctx = PhysicsContext::default_for(&b);
    let sol = MmsSolution::new(MmsSpec::default(), b, ctx.clone());
    let conds = sample_conditions(5, 99, &b, ConditionSampling::Uniform).unwrap();
    let mut rng = stream_rng(99, 3);
    let mut worst = [0.0f64; 4];
    let mut n = 0;
    for c in &conds {
        let mut taken = 0;
        while taken < 1000 {
            let r = b.radius() * rng.random::<f64>().sqrt();
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let pos = [r * th.cos(), r * th.sin(), rng.random_range(0.0..c.height)];
            let q = Query::new(pos, *c);
            let Some(res) =
                evaluate_residuals(&sol.derivs(pos, *c), &q, &ctx, &sol.forcing(pos, *c))
            else {
                continue;
            };
            let mom = res.r_mom.iter().map(|x| x.abs()).fold(0.0, f64::max);
            for (w, v) in
                worst
                    .iter_mut()
                    .zip([res.r_cont.abs(), mom, res.r_k.abs(), res.r_omega.abs()])
            {
                *w = w.max(v);
            }
            taken += 1;
            n += 1;
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Outcome {
        pass: max < 1e-8,
        detail: format!(
            "{n} liquid points over 5 conditions; max |residual|: continuity {:.1e}, momentum {:.1e}, k {:.1e}, ω {:.1e} (tol 1e-8)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    }
}

struct Profile {
    name: &'static str,
    points: usize,
    study: StudyConfig,
}

fn profile() -> Profile {
    let full = std::env::var("VESSEL_ACCEPTANCE").is_ok_and(|v| v == "full");
    let base = StudyConfig {
        sizes: vec![4, 8, 16],
        seeds: (0..5).collect(),
        variants: vec![Variant::Mlp, Variant::CMlp],
        ..StudyConfig::default()
    };
    if full {
        Profile {
            name: "full desk scale",
            points: 10_000,
            study: StudyConfig {
                train: TrainConfig {
                    epochs: 300,
                    ..TrainConfig::default()
                },
                ..base
            },
        }
    } else {
        Profile {
            name: "compact",
            points: 1000,
            study: StudyConfig {
                train: TrainConfig {
                    model: ModelConfig {
                        depth: 3,
                        width: 32,
                        fourier: FourierMode::Spatial,
                        ..ModelConfig::default()
                    },
                    lr0: 3e-3,
                    step_size: 10,
                    epochs: 100,
                    batch_size: 100,
                    residual_points: Some(100),
                    ..TrainConfig::default()
                },
                residual_test_points: 2000,
                ..base
            },
        }
    }
}

fn study_dataset(points: usize) -> (ConditionDataset, PhysicsContext) {
    let b = DomainBounds::default();
    let ctx = PhysicsContext::default_for(&b);
    let sol = MmsSolution::new(MmsSpec::default(), b, ctx.clone());
    let conds = sample_conditions(24, 7, &b, ConditionSampling::LatinHypercube).unwrap();
    (generate_dataset(&conds, points, 7, &sol).unwrap(), ctx)
}

fn median_mse(out: &StudyOutcome, size: usize, v: Variant) -> Option<(f64, f64)> {
    let a = out.report.aggregate(size, v)?;
    a.test_mse.map(|s| (s.median, s.iqr()))
}

fn criterion_3(out: &StudyOutcome, sizes: &[usize]) -> Outcome {
    let med: Vec<Option<f64>> = sizes
        .iter()
        .map(|&s| median_mse(out, s, Variant::Mlp).map(|m| m.0))
        .collect();
    let pass =
        med.iter().all(Option::is_some) && med.windows(2).all(|w| w[1].unwrap() <= w[0].unwrap());
    let shown: Vec<String> = sizes
        .iter()
        .zip(&med)
        .map(|(s, m)| format!("{s}: {}", fmt_opt(*m)))
        .collect();
    Outcome {
        pass,
        detail: format!("MLP median test MSE by size {{{}}}", shown.join(", ")),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}"))
        .unwrap_or_else(|| "n/a".into())
}

fn criterion_4(out: &StudyOutcome, size: usize) -> Outcome {
    let (m, c) = (
        median_mse(out, size, Variant::Mlp),
        median_mse(out, size, Variant::CMlp),
    );
    let pass = matches!((m, c), (Some(m), Some(c)) if c.0 <= m.0 && c.1 <= m.1);
    Outcome {
        pass,
        detail: format!(
            "size {size}: median MSE C-MLP {} vs MLP {}; IQR C-MLP {} vs MLP {}",
            fmt_opt(c.map(|x| x.0)),
            fmt_opt(m.map(|x| x.0)),
            fmt_opt(c.map(|x| x.1)),
            fmt_opt(m.map(|x| x.1))
        ),
    }
}

fn criterion_5(out: &StudyOutcome, sizes: &[usize]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for &s in sizes {
        let cont = |v| {
            out.report
                .aggregate(s, v)
                .and_then(|a| a.continuity)
                .map(|c| c.median)
        };
        match (cont(Variant::Mlp), cont(Variant::CMlp)) {
            (Some(m), Some(c)) => {
                pass &= 2.0 * c < m;
                parts.push(format!("{s}: MLP/C-MLP = {:.3}", m / c));
            }
            _ => {
                pass = false;
                parts.push(format!("{s}: missing"));
            }
        }
    }
    Outcome {
        pass,
        detail: format!(
            "continuity-residual ratio (need > 2) {{{}}}",
            parts.join(", ")
        ),
    }
}

fn criterion_6() -> Outcome {
    let b = DomainBounds::default();
    let height = 4.0;
    let cond = OperatingCondition::new(100.0, height);
    let grid = CylGrid::new(&b, height, [12, 8, 16]).unwrap();
    let sol = MmsSolution::new(MmsSpec::default(), b, PhysicsContext::default_for(&b));
    let cfg = TracerConfig {
        t_end: 50.0,
        grid: [12, 8, 16],
        ..TracerConfig::default()
    };
    let mut notes = Vec::new();
    let mut pass = true;

    // (a) conservative scheme on the analytically solenoidal manufactured flow
    let field =
        sample_frozen_field(&sol, &grid, cond, cfg.d_m, DiffusivityMode::Molecular).unwrap();
    let run = simulate_field(
        &field,
        &grid,
        &TracerConfig {
            scheme: Scheme::Conservative,
            ..cfg.clone()
        },
    )
    .unwrap();
    let m0 = run.series.total_mass[0];
    let drift = run
        .series
        .total_mass
        .iter()
        .map(|m| (m - m0).abs() / m0)
        .fold(0.0, f64::max);
    pass &= drift < 1e-10 && run.series.times.len() == 1001;
    notes.push(format!(
        "(a) mass drift {drift:.1e} over {} steps",
        run.series.times.len() - 1
    ));

    // (b) advective scheme bounded for arbitrary fields
    let mut rng = stream_rng(6, 1);
    let mut noisy = FrozenField::zeros(&grid, 1e-3);
    for u in noisy
        .u_r
        .iter_mut()
        .chain(noisy.u_theta.iter_mut())
        .chain(noisy.u_z.iter_mut())
    {
        *u = rng.random_range(-2.0..2.0);
    }
    let mut excess = 0.0f64;
    for f in [&field, &noisy] {
        let run = simulate_field(f, &grid, &cfg).unwrap();
        let (hi, lo) = (run.series.max_c[0], run.series.min_c[0]);
        for (mx, mn) in run.series.max_c.iter().zip(&run.series.min_c) {
            excess = excess.max(mx - hi).max(lo - mn);
        }
    }
    pass &= excess <= 1e-10;
    notes.push(format!("(b) max overshoot {excess:.1e}"));

    // (c) uniform state
    let uni = vec![0.42; grid.n_cells()];
    let swirl = FrozenField::from_velocity(&grid, 1e-4, solid_swirl(3.0));
    let mut dev = 0.0f64;
    for (f, s) in [
        (&noisy, Scheme::Advective),
        (&field, Scheme::Advective),
        (&swirl, Scheme::Conservative),
    ] {
        let out = step(&uni, f, &grid, 0.05, s).unwrap();
        dev = dev.max(out.iter().map(|v| (v - 0.42).abs()).fold(0.0, f64::max));
    }
    pass &= dev < 1e-12;
    notes.push(format!("(c) uniform-state deviation {dev:.1e}"));

    // (d) axial column against the Thomas algorithm
    let col_grid = CylGrid::new(&b, height, [2, 2, 30]).unwrap();
    let (w, d, dt) = (0.25, 3e-3, 0.1);
    let f = FrozenField::from_velocity(&col_grid, d, |_| [0.0, 0.0, w]);
    let col: Vec<f64> = (0..col_grid.n_z)
        .map(|k| (k as f64 * 0.45).cos().powi(2))
        .collect();
    let c: Vec<f64> = (0..col_grid.n_cells())
        .map(|i| col[col_grid.ijk(i).2])
        .collect();
    let mut err = 0.0f64;
    for s in [Scheme::Conservative, Scheme::Advective] {
        let mut cc = c.clone();
        let mut oc = col.clone();
        for _ in 0..20 {
            cc = step(&cc, &f, &col_grid, dt, s).unwrap();
            oc = thomas_upwind(&oc, w, d, col_grid.dz, dt, s);
        }
        err = err.max(
            (0..col_grid.n_cells())
                .map(|i| (cc[i] - oc[col_grid.ijk(i).2]).abs())
                .fold(0.0, f64::max),
        );
    }
    pass &= err < 1e-10;
    notes.push(format!("(d) tridiagonal max diff {err:.1e}"));
    Outcome {
        pass,
        detail: notes.join("; "),
    }
}

/// 1-D implicit upwind advection (velocity `w > 0`) with diffusion between
/// closed ends. Conservative form: a cell loses what it sends up and gains
/// what arrives from below. Advective form: `w (c_k − c_{k−1})` for cells with
/// an upwind neighbour whose face flux is open (all but the bottom cell; the
/// top face is closed).
fn thomas_upwind(c: &[f64], w: f64, d: f64, dz: f64, dt: f64, scheme: Scheme) -> Vec<f64> {
    let n = c.len();
    let (a, k) = (dt * w / dz, dt * d / (dz * dz));
    let (mut lo, mut di, mut up) = (vec![0.0; n], vec![1.0; n], vec![0.0; n]);
    for i in 0..n {
        if i + 1 < n {
            di[i] += k;
            up[i] -= k;
            if scheme == Scheme::Conservative {
                di[i] += a;
            }
        }
        if i > 0 {
            di[i] += k;
            lo[i] -= k + a;
            if scheme == Scheme::Advective {
                di[i] += a;
            }
        }
    }
    let (mut cp, mut dp) = (vec![0.0; n], vec![0.0; n]);
    cp[0] = up[0] / di[0];
    dp[0] = c[0] / di[0];
    for i in 1..n {
        let m = di[i] - lo[i] * cp[i - 1];
        cp[i] = up[i] / m;
        dp[i] = (c[i] - lo[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

fn criterion_7(out: &StudyOutcome, ds: &ConditionDataset, sizes: (usize, usize)) -> Outcome {
    let Some(ci) = out.report.reserved_condition else {
        return Outcome {
            pass: false,
            detail: "no held-out condition".into(),
        };
    };
    let cond = ds.blocks[ci].cond;
    let cfg = TracerConfig {
        t_end: 50.0,
        ..TracerConfig::default()
    };
    let sol = MmsSolution::new(
        MmsSpec::default(),
        ds.bounds,
        PhysicsContext::default_for(&ds.bounds),
    );
    let reference = simulate(&sol, &ds.bounds, cond, &cfg).unwrap().series;
    let mut stats = Vec::new();
    for size in [sizes.0, sizes.1] {
        let runs: Vec<_> = out
            .report
            .runs
            .iter()
            .zip(&out.models)
            .filter(|(r, _)| r.size == size && r.variant == Variant::CMlp)
            .filter_map(|(_, m)| m.as_ref())
            .map(|m| simulate(m, &ds.bounds, cond, &cfg).unwrap().series)
            .collect();
        if runs.is_empty() {
            return Outcome {
                pass: false,
                detail: format!("no C-MLP models of size {size}"),
            };
        }
        let e = ensemble_tracer_report(&runs, &reference).unwrap();
        stats.push((size, runs.len(), e.end_bias, e.end_band));
    }
    let pass = stats[1].2 <= stats[0].2 && stats[1].3 <= stats[0].3;
    let shown: Vec<String> = stats
        .iter()
        .map(|(s, n, b, w)| format!("size {s} ({n} models): bias {b:.4e}, band {w:.4e}"))
        .collect();
    Outcome {
        pass,
        detail: format!(
            "held-out ({:.1} rpm, {:.2} m), T_end 50 s, reference {:.4}: {}",
            cond.rpm,
            cond.height,
            reference.values.last().unwrap(),
            shown.join("; ")
        ),
    }
}

fn vessel_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_vessel"))
        .args(args)
        .env_remove("VESSEL_WORKERS")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const TINY_CONFIG: &str = r#"
[train]
epochs = 4
batch_size = 80
residual_points = 40

[train.model]
depth = 2
width = 12

[eval]
residual_points = 300

[tracer]
grid = [8, 6, 12]
t_end = 2.0
"#;

fn owned(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

/// Runs the seeded pipeline into `root`; returns whether every command succeeded.
fn pipeline(root: &Path, workers: &str) -> bool {
    std::fs::create_dir_all(root).unwrap();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let ds = p("data/dataset.vds");
    let runs = [
        owned(&[
            "gen-data",
            "--conditions",
            "6",
            "--points",
            "120",
            "--seed",
            "11",
            "--out",
            &p("data"),
        ]),
        owned(&[
            "--config",
            c,
            "train",
            "--data",
            &ds,
            "--train-size",
            "3",
            "--variant",
            "cm-mlp",
            "--seed",
            "4",
            "--out",
            &p("train"),
        ]),
        owned(&[
            "--config",
            c,
            "--workers",
            workers,
            "study",
            "--data",
            &ds,
            "--sizes",
            "1,3",
            "--seeds",
            "0,1",
            "--variants",
            "mlp,c-mlp",
            "--out",
            &p("study"),
        ]),
        owned(&[
            "--config",
            c,
            "eval",
            "--model",
            &p("train/model.ckpt"),
            "--data",
            &ds,
            "--out",
            &p("eval"),
        ]),
        owned(&[
            "--config",
            c,
            "profiles",
            "--model",
            &p("train/model.ckpt"),
            "--data",
            &ds,
            "--rpm",
            "90",
            "--height",
            "3.3",
            "--out",
            &p("profiles"),
        ]),
        owned(&[
            "--config",
            c,
            "tracer",
            "--model",
            &p("train/model.ckpt"),
            "--rpm",
            "90",
            "--height",
            "3.3",
            "--out",
            &p("tracer"),
        ]),
        owned(&[
            "--config",
            c,
            "report",
            "--study",
            &p("study"),
            "--data",
            &ds,
            "--out",
            &p("report"),
        ]),
    ];
    runs.iter().all(|args| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let ok = vessel_cli(&refs);
        if !ok {
            println!("    command failed: vessel {}", args.join(" "));
        }
        ok
    })
}

fn criterion_8(a: &Path, b: &Path) -> Outcome {
    let ran = pipeline(a, "1") && pipeline(b, "2");
    let fa = csv_files(a);
    let fb = csv_files(b);
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    Outcome {
        pass: ran && fa == fb && !fa.is_empty() && differing.is_empty(),
        detail: format!(
            "gen-data, train, study (1 vs 2 workers), eval, profiles, tracer, report run twice: {} CSV files, {} differ{}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    }
}

fn criterion_9(pipeline_root: &Path, scratch: &Path) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let b = DomainBounds::default();
    let sol = MmsSolution::new(MmsSpec::default(), b, PhysicsContext::default_for(&b));
    let conds = sample_conditions(3, 5, &b, ConditionSampling::Uniform).unwrap();
    let ds = generate_dataset(&conds, 300, 5, &sol).unwrap();
    let path = scratch.join("rt.vds");
    ds.save(&path).unwrap();
    let back = ConditionDataset::load(&path).unwrap();
    let bits = |d: &ConditionDataset| -> Vec<u64> {
        d.blocks
            .iter()
            .flat_map(|bl| {
                let p = bl.points.iter().flatten().map(|v| v.to_bits());
                let f = bl.fields.iter().flat_map(|f| f.0).map(|v| v.to_bits());
                [bl.cond.rpm.to_bits(), bl.cond.height.to_bits()]
                    .into_iter()
                    .chain(p)
                    .chain(f)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let ds_ok =
        bits(&ds) == bits(&back) && back.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    pass &= ds_ok;
    notes.push(format!(
        "dataset {}",
        if ds_ok { "bit-exact" } else { "MISMATCH" }
    ));

    let ckpt = pipeline_root.join("train/model.ckpt");
    let model_ok = match SurrogateModel::load(&ckpt) {
        Ok(m) => {
            let again = scratch.join("again.ckpt");
            m.save(&again).unwrap();
            let reloaded = SurrogateModel::load(&again).unwrap();
            let q = Query::new([0.1, -0.2, 1.0], OperatingCondition::new(90.0, 3.3));
            std::fs::read(&ckpt).unwrap() == std::fs::read(&again).unwrap()
                && m.params.as_slice().iter().map(|v| v.to_bits()).eq(reloaded
                    .params
                    .as_slice()
                    .iter()
                    .map(|v| v.to_bits()))
                && m.fields(&q).unwrap().0.map(f64::to_bits)
                    == reloaded.fields(&q).unwrap().0.map(f64::to_bits)
        }
        Err(_) => false,
    };
    pass &= model_ok;
    notes.push(format!(
        "checkpoint {}",
        if model_ok { "bit-exact" } else { "MISMATCH" }
    ));

    let dirs = [
        "data", "train", "study", "eval", "profiles", "tracer", "report",
    ];
    let verified = dirs
        .iter()
        .filter(|d| vessel_cli(&["verify", pipeline_root.join(d).to_str().unwrap()]))
        .count();
    let victim = pipeline_root.join("tracer/tracer.csv");
    let mut text = std::fs::read(&victim).unwrap();
    text.extend_from_slice(b"0,0,0,0,0\n");
    std::fs::write(&victim, text).unwrap();
    let detects = !vessel_cli(&["verify", pipeline_root.join("tracer").to_str().unwrap()]);
    pass &= verified == dirs.len() && detects;
    notes.push(format!(
        "manifests verified {verified}/{}; tampering {}",
        dirs.len(),
        if detects { "detected" } else { "NOT detected" }
    ));
    Outcome {
        pass,
        detail: notes.join("; "),
    }
}

fn main() {
    // libtest-style flags (e.g. from `cargo test -- --nocapture`) are ignored
    let strict = std::env::var_os("VESSEL_ACCEPTANCE_STRICT").is_some();
    let mut report = Report {
        hard_failures: Vec::new(),
        soft_failures: Vec::new(),
    };
    let prof = profile();
    println!(
        "acceptance profile: {} ({} pts/condition, {} epochs, width {}, depth {}, {} workers)",
        prof.name,
        prof.points,
        prof.study.train.epochs,
        prof.study.train.model.width,
        prof.study.train.model.depth,
        vessel::par::current_workers()
    );

    let t = Instant::now();
    let o = criterion_1();
    let o = Outcome {
        pass: o.pass && t.elapsed().as_secs_f64() < 30.0,
        ..o
    };
    report.record(1, "autodiff finite-difference oracles", true, t, o);

    let t = Instant::now();
    let o = criterion_2();
    let o = Outcome {
        pass: o.pass && t.elapsed().as_secs_f64() < 60.0,
        ..o
    };
    report.record(2, "manufactured-solution residuals", true, t, o);

    let t = Instant::now();
    let (ds, ctx) = study_dataset(prof.points);
    let study = run_study(&ds, &prof.study, &ctx, None).expect("study");
    let study_time = t.elapsed().as_secs_f64();
    let failed = study
        .report
        .runs
        .iter()
        .filter(|r| r.error.is_some())
        .count();
    println!(
        "    study: {} runs ({} failed) in {study_time:.1} s",
        study.report.runs.len(),
        failed
    );
    let sizes = prof.study.sizes.clone();
    report.record(
        3,
        "learning curve non-increasing",
        false,
        t,
        criterion_3(&study, &sizes),
    );
    let t = Instant::now();
    report.record(
        4,
        "C-MLP ≤ MLP at the smallest size",
        false,
        t,
        criterion_4(&study, sizes[0]),
    );
    let t = Instant::now();
    report.record(
        5,
        "continuity residual C-MLP < MLP / 2",
        false,
        t,
        criterion_5(&study, &sizes),
    );

    let t = Instant::now();
    let o = criterion_6();
    let o = Outcome {
        pass: o.pass && t.elapsed().as_secs_f64() < 300.0,
        ..o
    };
    report.record(6, "tracer solver properties", true, t, o);

    let t = Instant::now();
    let o = criterion_7(&study, &ds, (sizes[0], *sizes.last().unwrap()));
    report.record(
        7,
        "tracer end-state bias and band shrink with data",
        false,
        t,
        o,
    );

    let scratch = tempfile::tempdir().expect("tempdir");
    let (a, b) = (scratch.path().join("a"), scratch.path().join("b"));
    let t = Instant::now();
    report.record(
        8,
        "byte-identical CSV artifacts on rerun",
        true,
        t,
        criterion_8(&a, &b),
    );

    let t = Instant::now();
    report.record(
        9,
        "format round trips and manifest hashes",
        true,
        t,
        criterion_9(&b, scratch.path()),
    );

    println!(
        "summary: {} of 9 criteria passed; failed: {:?}",
        9 - report.hard_failures.len() - report.soft_failures.len(),
        {
            let mut all = report.hard_failures.clone();
            all.extend(&report.soft_failures);
            all.sort_unstable();
            all
        }
    );
    if !report.hard_failures.is_empty() || (strict && !report.soft_failures.is_empty()) {
        std::process::exit(1);
    }
}
