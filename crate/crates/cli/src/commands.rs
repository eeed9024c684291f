use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use wonham_control::chain::{cumulative, sample_brownian, simulate_physical};
use wonham_control::filter::{integrate_filter, integrate_filter_with, oracle_filter_openloop};
use wonham_control::hjb::{
    extract_policy, verify_optimality, Challenger, ValueGrid, VerifyOptions,
};
use wonham_control::measure::{reward_physical, truncation_time};
use wonham_control::smp::{
    check_max_principle, simulate_filter_batch, solve_adjoint, AdjointOptions,
};
use wonham_control::stats::{mean_se, MeanSe};
use wonham_control::{FilterPath, InitialLaw, SeedRecord, TimeGrid};

use crate::config::{HjbMode, Loaded, Observation};
use crate::controls::{solve_hjb, Resolver};
use crate::error::{exit, CliError};
use crate::output::{finish, num, numbered, row, OutputDir};

/// Offset mixed into the master seed of the filter oracle's chains.
const ORACLE_SEED: u64 = 0x6f72_6163_6c65;

pub struct Context {
    pub loaded: Loaded,
    pub out: Option<PathBuf>,
}

impl Context {
    fn output(&self, command: &'static str) -> Result<OutputDir, CliError> {
        let dir = self.out.clone().ok_or_else(|| {
            CliError::config("no output directory: pass --out or set `output` in the config")
        })?;
        OutputDir::create(dir, self.loaded.replay(), command)
    }

    fn seed(&self) -> u64 {
        self.loaded.config.seed
    }

    fn grid(&self, block: &str, horizon: Option<f64>, dt: f64) -> Result<TimeGrid, CliError> {
        let horizon = self.loaded.horizon(block, horizon)?;
        TimeGrid::new(horizon, dt).map_err(|e| self.loaded.error(&format!("{block}.dt"), e))
    }

    fn block<'c, T>(&self, name: &str, b: &'c Option<T>) -> Result<&'c T, CliError> {
        b.as_ref().ok_or_else(|| {
            self.loaded
                .error(name, format!("this command needs a `{name}` block"))
        })
    }
}

#[derive(Debug, Serialize)]
struct Audit {
    n_states: usize,
    d_obs: usize,
    controls: Vec<String>,
    time_knots: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    discount: Option<f64>,
    k0: f64,
    k0_declared: bool,
    sup_rate: f64,
    sup_running_reward: f64,
    sup_obs_drift: f64,
    sup_terminal_reward: f64,
    k_intensity: f64,
    k_intensity_declared: bool,
    required_intensity: f64,
}

pub fn validate(ctx: &Context) -> Result<u8, CliError> {
    let m = &ctx.loaded.model;
    let doc = &ctx.loaded.document;
    let audit = Audit {
        n_states: m.n_states(),
        d_obs: m.d_obs(),
        controls: m.controls().to_vec(),
        time_knots: m.time_knots().to_vec(),
        horizon: m.final_time(),
        discount: m.discount(),
        k0: m.k0(),
        k0_declared: doc.k0.is_some(),
        sup_rate: m.max_rate(),
        sup_running_reward: m.sup_running_reward(),
        sup_obs_drift: m.sup_obs_drift(),
        sup_terminal_reward: m.terminal_rewards().iter().fold(0.0, |a, g| a.max(g.abs())),
        k_intensity: m.k_intensity(),
        k_intensity_declared: doc.k_intensity.is_some(),
        required_intensity: m.n_states() as f64 * m.max_rate(),
    };
    let declared = |d: bool| if d { "declared" } else { "derived" };
    println!(
        "model: {} states, {} observation channel(s), {} controls, {} time knot(s)",
        audit.n_states,
        audit.d_obs,
        audit.controls.len(),
        audit.time_knots.len()
    );
    match (audit.horizon, audit.discount) {
        (Some(t), _) => println!("horizon: finite, T = {t}"),
        (_, Some(b)) => println!("horizon: infinite, discount beta = {b}"),
        _ => {}
    }
    println!("K0 = {} ({})", audit.k0, declared(audit.k0_declared));
    println!(
        "  sup q = {}, sup |f| = {}, sup |h| = {}, sup |g| = {}",
        audit.sup_rate, audit.sup_running_reward, audit.sup_obs_drift, audit.sup_terminal_reward
    );
    println!(
        "K = {} ({}) >= N * sup q = {}",
        audit.k_intensity,
        declared(audit.k_intensity_declared),
        audit.required_intensity
    );
    println!("config: ok");
    if ctx.out.is_some() {
        ctx.output("validate")?.report("validate.json", &audit)?;
    }
    Ok(exit::OK)
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    horizon: f64,
    mean_jumps: MeanSe,
    reward: MeanSe,
}

pub fn simulate(ctx: &Context) -> Result<u8, CliError> {
    let l = &ctx.loaded;
    let s = ctx.block("simulate", &l.config.simulate)?;
    let grid = ctx.grid("simulate", s.horizon, s.dt)?;
    let control = Resolver::new(l).resolve("simulate.control", &s.control, grid)?;
    let weights = s
        .initial
        .clone()
        .unwrap_or_else(|| vec![1.0; l.model.n_states()]);
    let law = InitialLaw::from_weights(&weights).map_err(|e| l.error("simulate.initial", e))?;
    let out = ctx.output("simulate")?;
    let model = &l.model;
    let paths = (0..s.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            simulate_physical(
                SeedRecord::new(ctx.seed(), p),
                grid,
                model,
                control.source(),
                &law,
                s.scheme,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let d = model.d_obs();
    let columns: Vec<String> = ["path_id", "t", "state", "control"]
        .into_iter()
        .map(String::from)
        .chain(numbered("W", d))
        .collect();
    let mut w = out.csv("paths.csv", &columns)?;
    let mut jumps = out.csv("jumps.csv", &["path_id".into(), "t".into(), "state".into()])?;
    let n = grid.n_steps();
    for (p, path) in paths.iter().enumerate() {
        let obs = cumulative(&path.obs_increments, d);
        for (k, wk) in obs.iter().enumerate() {
            let t = grid.time(k);
            let a = path.control.cell(k.min(n - 1));
            row(
                &mut w,
                [
                    p.to_string(),
                    num(t),
                    (path.chain.state_at(t) + 1).to_string(),
                ]
                .into_iter()
                .chain([model.control_label(a).to_string()])
                .chain(wk.iter().map(|&x| num(x))),
            )?;
        }
        row(
            &mut jumps,
            [
                p.to_string(),
                num(0.0),
                (path.chain.initial_state + 1).to_string(),
            ],
        )?;
        for (t, s) in path.chain.jump_times.iter().zip(&path.chain.jump_states) {
            row(&mut jumps, [p.to_string(), num(*t), (s + 1).to_string()])?;
        }
    }
    finish(w, "paths.csv")?;
    finish(jumps, "jumps.csv")?;

    let counts: Vec<f64> = paths.iter().map(|p| p.chain.n_jumps() as f64).collect();
    let rewards: Vec<f64> = paths
        .iter()
        .map(|p| reward_physical(&p.chain, &p.control, model))
        .collect();
    let summary = SimulateSummary {
        n_paths: s.n_paths,
        n_steps: n,
        dt: grid.dt(),
        horizon: grid.horizon(),
        mean_jumps: mean_se(&counts),
        reward: mean_se(&rewards),
    };
    out.report("simulate.json", &summary)?;
    println!(
        "simulated {} paths: reward {:.6} +/- {:.6}",
        summary.n_paths, summary.reward.mean, summary.reward.std_error
    );
    Ok(exit::OK)
}

#[derive(Debug, Serialize)]
struct OracleSummary {
    n_chains: usize,
    max_abs_diff: f64,
    max_z: f64,
}

#[derive(Debug, Serialize)]
struct FilterSummary {
    n_paths: usize,
    scheme: &'static str,
    observation: Observation,
    dt: f64,
    horizon: f64,
    min_entry: f64,
    terminal_mass: MeanSe,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleSummary>,
}

pub fn filter(ctx: &Context) -> Result<u8, CliError> {
    let l = &ctx.loaded;
    let f = ctx.block("filter", &l.config.filter)?;
    let model = &l.model;
    let grid = ctx.grid("filter", f.horizon, f.dt)?;
    let control = Resolver::new(l).resolve("filter.control", &f.control, grid)?;
    let law = match f.observation {
        Observation::Physical => {
            Some(InitialLaw::from_weights(&f.x0).map_err(|e| l.error("filter.x0", e))?)
        }
        Observation::Reference => None,
    };
    let out = ctx.output("filter")?;
    let runs = (0..f.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let seed = SeedRecord::new(ctx.seed(), p);
            match &law {
                Some(law) => {
                    let phys =
                        simulate_physical(seed, grid, model, control.source(), law, f.scheme)?;
                    let filt = integrate_filter(
                        &phys.obs_increments,
                        &phys.control,
                        &f.x0,
                        f.scheme,
                        model,
                    )?;
                    Ok((filt, phys.obs_increments))
                }
                None => {
                    let obs = sample_brownian(seed, grid, model.d_obs());
                    let (filt, _) = integrate_filter_with(
                        &obs,
                        grid,
                        control.source(),
                        &f.x0,
                        f.scheme,
                        model,
                    )?;
                    Ok((filt, obs))
                }
            }
        })
        .collect::<Result<Vec<(FilterPath, Vec<f64>)>, CliError>>()?;

    let n = model.n_states();
    let columns: Vec<String> = ["path_id", "t"]
        .into_iter()
        .map(String::from)
        .chain(numbered("rho", n))
        .chain(numbered("pi", n))
        .chain(["mass".to_string()])
        .collect();
    let mut w = out.csv("filter.csv", &columns)?;
    for (p, (path, _)) in runs.iter().enumerate() {
        for k in 0..=grid.n_steps() {
            let pi = path.normalized(k);
            let pi = (0..n).map(|i| pi.as_ref().map_or(String::new(), |v| num(v[i])));
            row(
                &mut w,
                [p.to_string(), num(grid.time(k))]
                    .into_iter()
                    .chain(path.rho(k).iter().map(|&x| num(x)))
                    .chain(pi)
                    .chain([num(path.mass(k))]),
            )?;
        }
    }
    finish(w, "filter.csv")?;

    let oracle = match &f.oracle {
        None => None,
        Some(o) => {
            let (path, obs) = &runs[0];
            let est = oracle_filter_openloop(
                obs,
                grid,
                control.source(),
                &f.x0,
                o.n_chains,
                ctx.seed() ^ ORACLE_SEED,
                model,
            )?;
            let columns: Vec<String> = ["t".to_string()]
                .into_iter()
                .chain(numbered("rho", n))
                .chain(numbered("oracle", n))
                .chain(numbered("oracle_se", n))
                .collect();
            let mut w = out.csv("oracle.csv", &columns)?;
            let (mut max_abs, mut max_z) = (0.0f64, 0.0f64);
            for k in 0..=grid.n_steps() {
                for i in 0..n {
                    let diff = (path.rho(k)[i] - est.mean_at(k)[i]).abs();
                    max_abs = max_abs.max(diff);
                    let se = est.std_error_at(k)[i];
                    if se > 0.0 {
                        max_z = max_z.max(diff / se);
                    }
                }
                row(
                    &mut w,
                    [num(grid.time(k))]
                        .into_iter()
                        .chain(path.rho(k).iter().map(|&x| num(x)))
                        .chain(est.mean_at(k).iter().map(|&x| num(x)))
                        .chain(est.std_error_at(k).iter().map(|&x| num(x))),
                )?;
            }
            finish(w, "oracle.csv")?;
            Some(OracleSummary {
                n_chains: o.n_chains,
                max_abs_diff: max_abs,
                max_z,
            })
        }
    };
    let masses: Vec<f64> = runs.iter().map(|(p, _)| p.mass(grid.n_steps())).collect();
    let summary = FilterSummary {
        n_paths: f.n_paths,
        scheme: f.scheme.tag(),
        observation: f.observation,
        dt: grid.dt(),
        horizon: grid.horizon(),
        min_entry: runs
            .iter()
            .map(|(p, _)| p.min_entry())
            .fold(f64::INFINITY, f64::min),
        terminal_mass: mean_se(&masses),
        oracle,
    };
    out.report("filter.json", &summary)?;
    println!(
        "filtered {} paths (min entry {:.3e})",
        summary.n_paths, summary.min_entry
    );
    Ok(exit::OK)
}

pub fn solve(ctx: &Context) -> Result<u8, CliError> {
    let l = &ctx.loaded;
    let h = ctx.block("hjb", &l.config.hjb)?;
    let out = ctx.output("solve-hjb")?;
    let values = solve_hjb(l)?;
    write_values(&out, ctx, &values, h.layer_stride.unwrap_or(1))?;
    let grid = values.grid();
    out.report(
        "solver.json",
        &json!({
            "mode": h.mode,
            "L": grid.side(),
            "dx": grid.dx(),
            "n_nodes": grid.n_nodes(),
            "solver": values.report(),
        }),
    )?;
    let r = values.report();
    match h.mode {
        HjbMode::Parabolic => println!(
            "solved {} nodes x {} steps (dt {:.3e}, CFL bound {:.3e})",
            grid.n_nodes(),
            r.n_steps.unwrap_or(0),
            r.dt,
            r.cfl_bound
        ),
        HjbMode::Elliptic => println!(
            "solved {} nodes in {} iterations (residual {:.3e})",
            grid.n_nodes(),
            r.iterations.unwrap_or(0),
            r.residual.unwrap_or(0.0)
        ),
    }
    Ok(exit::OK)
}

fn write_values(
    out: &OutputDir,
    ctx: &Context,
    values: &ValueGrid,
    stride: usize,
) -> Result<(), CliError> {
    let model = &ctx.loaded.model;
    let grid = values.grid();
    let times = values.times();
    let t_col = times.map(|_| "t".to_string());
    let coords: Vec<String> = t_col
        .into_iter()
        .chain(numbered("x", model.n_states()))
        .collect();
    let label = |a: u32| model.control_label(a as usize).to_string();
    let prefix = |n: usize, node: usize| {
        times
            .map(|g| num(g.time(n)))
            .into_iter()
            .chain(grid.coords(node).into_iter().map(num))
    };

    let columns: Vec<String> = coords
        .iter()
        .cloned()
        .chain(["value".into(), "control".into()])
        .collect();
    let mut w = out.csv("value.csv", &columns)?;
    let last = values.n_layers() - 1;
    for n in (0..values.n_layers()).filter(|&n| n % stride == 0 || n == last) {
        let controls = (n < values.n_control_layers()).then(|| values.argmax_layer(n));
        for (node, v) in values.layer(n).iter().enumerate() {
            let a = controls.map_or(String::new(), |c| label(c[node]));
            row(&mut w, prefix(n, node).chain([num(*v), a]))?;
        }
    }
    finish(w, "value.csv")?;

    let columns: Vec<String> = coords.into_iter().chain(["control".into()]).collect();
    let mut w = out.csv("policy.csv", &columns)?;
    for n in 0..values.n_control_layers() {
        for (node, a) in values.argmax_layer(n).iter().enumerate() {
            row(&mut w, prefix(n, node).chain([label(*a)]))?;
        }
    }
    finish(w, "policy.csv")
}

pub fn verify(ctx: &Context) -> Result<u8, CliError> {
    let l = &ctx.loaded;
    let v = ctx.block("verify", &l.config.verify)?;
    let model = &l.model;
    let mass: f64 = v.x0.iter().sum();
    let grid = match (v.horizon, model.final_time()) {
        (None, None) => {
            let t = truncation_time(model, 1e-3, mass).unwrap_or(0.0).max(v.dt);
            TimeGrid::with_steps(t, (t / v.dt).ceil() as usize)?
        }
        (h, _) => ctx.grid("verify", h, v.dt)?,
    };
    let out = ctx.output("verify")?;
    let mut resolver = Resolver::new(l);
    let challengers = v
        .challengers
        .iter()
        .map(|c| resolver.resolve("verify.challengers", &c.control, grid))
        .collect::<Result<Vec<_>, _>>()?;
    let values = resolver.values()?;
    let policy = extract_policy(values);
    let list: Vec<Challenger<'_>> = v
        .challengers
        .iter()
        .zip(&challengers)
        .map(|(c, r)| Challenger {
            label: &c.label,
            source: r.source(),
        })
        .collect();
    let opts = VerifyOptions {
        grid,
        scheme: v.scheme,
        n_paths: v.n_paths,
        seed: ctx.seed(),
        scheme_budget: v.scheme_budget,
        z: v.z,
    };
    let report = verify_optimality(model, values, &policy, &v.x0, &list, &opts)?;
    out.report(
        "verify.json",
        &json!({
            "horizon": grid.horizon(),
            "dt": grid.dt(),
            "solver": values.report(),
            "verification": report,
        }),
    )?;
    println!(
        "v(x0) = {:.6}, closed loop {:.6} +/- {:.6}: {}",
        report.value_at_x0,
        report.closed_loop.estimate,
        report.closed_loop.std_error,
        if report.value_pass { "PASS" } else { "FAIL" }
    );
    for c in &report.challengers {
        println!(
            "  {}: {:.6} (diff {:.6} +/- {:.6}): {}",
            c.label,
            c.estimate,
            c.diff_mean,
            c.diff_std_error,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if report.pass {
        exit::OK
    } else {
        exit::ACCEPTANCE
    })
}

pub fn smp_check(ctx: &Context) -> Result<u8, CliError> {
    let l = &ctx.loaded;
    let s = ctx.block("smp", &l.config.smp)?;
    let model = &l.model;
    let grid = ctx.grid("smp", None, s.dt)?;
    let control = Resolver::new(l).resolve("smp.control", &s.control, grid)?;
    let out = ctx.output("smp-check")?;
    let batch = simulate_filter_batch(
        model,
        control.source(),
        &s.x0,
        grid,
        s.scheme,
        s.n_samples,
        ctx.seed(),
    )?;
    let opts = AdjointOptions {
        degree: s.basis_degree,
        rcond: s.rcond,
    };
    let adjoint = solve_adjoint(model, control.source(), &batch, opts)?;
    let report = check_max_principle(&adjoint, &batch, model, s.tolerance, s.level);

    let (n, d) = (model.n_states(), model.d_obs());
    let q_cols = (1..=d).flat_map(|k| (1..=n).map(move |i| format!("q_{k}_{i}")));
    let columns: Vec<String> = ["t".to_string()]
        .into_iter()
        .chain(numbered("p", n))
        .chain(q_cols)
        .chain(["basis_size", "rank", "residual_norm"].map(String::from))
        .collect();
    let mut w = out.csv("adjoint.csv", &columns)?;
    for k in 0..=grid.n_steps() {
        let p = adjoint.mean_p(k).into_iter().map(num);
        if k < grid.n_steps() {
            let diag = &adjoint.diagnostics[k];
            row(
                &mut w,
                [num(grid.time(k))]
                    .into_iter()
                    .chain(p)
                    .chain(adjoint.mean_q(k).into_iter().map(num))
                    .chain([
                        diag.basis_size.to_string(),
                        diag.rank.to_string(),
                        num(diag.residual_norm),
                    ]),
            )?;
        } else {
            let blanks = std::iter::repeat_n(String::new(), n * d + 3);
            row(
                &mut w,
                [num(grid.time(k))].into_iter().chain(p).chain(blanks),
            )?;
        }
    }
    finish(w, "adjoint.csv")?;
    out.report("smp.json", &report)?;
    println!(
        "max principle: violation fraction {:.4} (level {}), median gap {:.3e}: {}",
        report.violation_fraction,
        report.level,
        report.gap_quantiles.p50,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(if report.pass {
        exit::OK
    } else {
        exit::ACCEPTANCE
    })
}
