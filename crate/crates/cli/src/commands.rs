//! Module pipelines behind each subcommand. Every command returns the
//! structured report it wrote, so callers can inspect measured values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use phaselab::energy::{allard_classify, check_monotone, density_profile, discrete_energy, modica_defect, MONOTONE_TOL, QUADRATURE_SLACK};
use phaselab::flatness::{
    catenoid_sample, decompose_ends, fit_sheet_log, graph_sample, helicoid_sample, run_iteration, AnnularSample, SampleSource,
};
use phaselab::io::{layers_csv, read_field, read_numeric_csv, slice_csv, write_field};
use phaselab::levelset::{check_separation_bound, extract_layers, layer_geometry};
use phaselab::radial::LogGrid;
use phaselab::solver::{explicit_step_bound, newton_from_ansatz, relax, residual, solve, sup_norm, SolveReport};
use phaselab::stability::{morse_index, stability_outside_ball, sz_inequality_check, sz_quantity, StabilityRegion};
use phaselab::toda::{
    check_gap, farina_sweep, fit_log_asymptotics, interaction_integrals, liouville_two_layer, liouville_two_layer_slope, solve_toda,
    toda_stability_test, TodaConfig, TodaEnd, TodaSolution, DEFAULT_KAPPA,
};
use phaselab::ScalarField;

use crate::config::{
    FlatnessSpec, IndexSpec, LayersSpec, RunConfig, SampleSpec, SolveMethod, SolveSpec, TodaProblem, TodaSpec, VerifySpec,
};
use crate::output::{num, Report, Sink, Table};
use crate::svg::Plot;
use crate::CliError;

pub struct Context<'a> {
    pub config: &'a RunConfig,
    pub sink: Sink,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Context<'_> {
    fn provenance(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("command".to_string(), self.sink.header.command.clone()),
            ("config_sha256".to_string(), self.sink.header.digest.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }

    /// CLI override, then the config entry, then `<out>/field.json`.
    fn checkpoint_path(&self, from_config: Option<&PathBuf>) -> PathBuf {
        if let Some(p) = &self.checkpoint {
            return p.clone();
        }
        match from_config {
            Some(p) => self.config.resolve(p),
            None => self.sink.dir.join("field.json"),
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<ScalarField, CliError> {
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint {} does not exist (run `phaselab solve` first)", path.display())));
    }
    read_field(path).map_err(|e| CliError::from_core(e).context(format!("reading checkpoint {}", path.display())))
}

fn finish(ctx: &mut Context, name: &str, report: &Report) -> Result<(), CliError> {
    ctx.sink.text(name, report)?;
    Ok(())
}

fn history_table(rep: &SolveReport) -> Table {
    let mut t = Table::new(&["iteration", "residual", "energy"]);
    for (i, r) in rep.residual_history.iter().enumerate() {
        let e = rep.energy_history.get(i).copied().unwrap_or(f64::NAN);
        t.row(vec![i.to_string(), num(*r), num(e)]);
    }
    t
}

pub fn cmd_solve(ctx: &mut Context) -> Result<Report, CliError> {
    let field_spec = ctx.config.field.as_ref().ok_or_else(|| CliError::config("solve needs a [field] section"))?;
    let spec = ctx.config.solve.clone().unwrap_or_default();
    let u0 = field_spec.build(ctx.seed)?;
    let SolveSpec { method, config } = spec;
    let result = match method {
        SolveMethod::Solve => solve(&u0, &config),
        SolveMethod::Relax => relax(&u0, &config),
        SolveMethod::Newton => newton_from_ansatz(&u0, &config),
        SolveMethod::None => {
            let r = sup_norm(&residual(&u0));
            let e = discrete_energy(&u0);
            let rep = SolveReport { final_residual: r, residual_history: vec![r], energy_history: vec![e], ..Default::default() };
            Ok((u0.clone(), rep))
        }
    };
    let mut report = Report::default();
    let dt = config.effective_time_step(&u0);
    let (u, rep) = match result {
        Ok(x) => x,
        Err(e) => {
            let s = report.section("solve");
            s.put("pass", false).put("error", &e).num("time_step", dt).num("explicit_step_bound", explicit_step_bound(&u0));
            finish(ctx, "solve", &report)?;
            let mut err = CliError::from_core(e);
            if config.time_step.is_some_and(|t| t > explicit_step_bound(&u0)) {
                err = err.context(format!("time step {} exceeds the explicit stability bound {}", num(dt), num(explicit_step_bound(&u0))));
            }
            return Err(err);
        }
    };
    let pass = method == SolveMethod::None || rep.converged || rep.final_residual <= config.residual_tol;
    report
        .section("solve")
        .put("method", format!("{method:?}").to_lowercase())
        .put("pass", pass)
        .put("converged", rep.converged)
        .num("residual", rep.final_residual)
        .num("residual_tol", config.residual_tol)
        .put("iterations", rep.iterations)
        .put("newton_steps", rep.newton_steps)
        .put("rejected_steps", rep.rejected_steps)
        .put("indefinite", rep.indefinite)
        .num("time_step", rep.time_step)
        .num("energy", rep.energy_history.last().copied().unwrap_or(f64::NAN));
    let (bin, json) = write_field(&ctx.sink.dir, "field", &u, &ctx.provenance())?;
    report.section("checkpoint").put("values", bin.display()).put("metadata", json.display());
    ctx.sink.csv("solve_history", &history_table(&rep))?;
    let g = u.grid();
    let mid: Vec<usize> = g.counts().iter().map(|c| c / 2).collect();
    ctx.sink.csv_text("profile", &slice_csv(&u, 0, &mid)?)?;
    let mut plot = Plot::new("residual history", "iteration", "sup residual");
    plot.log_y = true;
    plot.add("residual", rep.residual_history.iter().enumerate().map(|(i, r)| (i as f64, *r)).collect());
    ctx.sink.svg("solve", &plot)?;
    finish(ctx, "solve", &report)?;
    if !pass {
        return Err(CliError::numerics(format!("residual {} above tolerance {}", num(rep.final_residual), num(config.residual_tol))));
    }
    Ok(report)
}

fn grid_centre(u: &ScalarField) -> Vec<f64> {
    let g = u.grid();
    let up = g.upper();
    (0..g.dim()).map(|a| 0.5 * (g.lower()[a] + up[a])).collect()
}

fn default_radii(u: &ScalarField, center: &[f64]) -> Vec<f64> {
    let g = u.grid();
    let up = g.upper();
    let inr = (0..g.dim()).map(|a| (center[a] - g.lower()[a]).min(up[a] - center[a])).fold(f64::INFINITY, f64::min);
    (1..=(0.9 * inr).floor() as usize).map(|r| r as f64).collect()
}

pub fn cmd_verify(ctx: &mut Context) -> Result<Report, CliError> {
    let spec = ctx.config.verify.clone().unwrap_or_default();
    let path = ctx.checkpoint_path(spec.checkpoint.as_ref());
    let u = load_checkpoint(&path)?;
    verify_field(ctx, &u, &spec, &path)
}

fn verify_field(ctx: &mut Context, u: &ScalarField, spec: &VerifySpec, path: &Path) -> Result<Report, CliError> {
    let core = CliError::from_core;
    let mut report = Report::default();
    report
        .section("checkpoint")
        .put("path", path.display())
        .put("dim", u.dim())
        .put("counts", format!("{:?}", u.grid().counts()))
        .num("epsilon", u.epsilon());
    let center = spec.center.clone().unwrap_or_else(|| grid_centre(u));
    if center.len() != u.dim() {
        return Err(CliError::config(format!("verify.center has {} components, field has {}", center.len(), u.dim())));
    }

    if spec.modica {
        let m = modica_defect(u, spec.modica_margin).map_err(core)?;
        report
            .section("modica")
            .put("pass", m.max_defect <= spec.modica_tol)
            .num("max_defect", m.max_defect)
            .num("tol", spec.modica_tol)
            .nums("location", &m.location)
            .put("nodes", m.nodes_checked);
    }

    if spec.density {
        density_checks(ctx, u, spec, &center, &mut report)?;
    }

    if spec.spectrum {
        let rep = morse_index(u, &StabilityRegion::Whole, &spec.eigen).map_err(core)?;
        report
            .section("spectrum")
            .put("pass", !rep.unresolved && rep.morse_index == spec.expected_index)
            .put("morse_index", rep.index_label())
            .put("expected_index", spec.expected_index)
            .nums("eigenvalues", &rep.eigenvalues)
            .put("restarts", rep.restarts);
        let mut t = Table::new(&["k", "eigenvalue"]);
        for (k, l) in rep.eigenvalues.iter().enumerate() {
            t.row(vec![(k + 1).to_string(), num(*l)]);
        }
        ctx.sink.csv("spectrum", &t)?;
    }

    if let Some(sep) = &spec.separation {
        let layers = extract_layers(u, sep.level, &sep.options).map_err(core)?;
        let chk = check_separation_bound(&layers, u.epsilon(), sep.radius, sep.theta).map_err(core)?;
        let s = report.section("separation");
        s.put("pass", chk.pass).put("layers", layers.count()).num("bound", chk.bound);
        if let Some(m) = chk.min_separation {
            s.num("min_separation", m);
        }
    }

    if let Some(b) = &spec.sz {
        if b.center.len() != u.dim() {
            return Err(CliError::config("verify.sz.center has the wrong dimension"));
        }
        let chk = sz_inequality_check(u, &b.eta(u), &spec.eigen).map_err(core)?;
        let s = report.section("sz");
        s.put("pass", chk.satisfied != Some(false)).num("lhs", chk.lhs).num("rhs", chk.rhs).put("support_index", chk.support_index);
        if let Some(sat) = chk.satisfied {
            s.put("satisfied", sat);
        }
        if let Some(why) = &chk.skipped {
            s.put("skipped", why);
        }
    }

    if let Some(c) = &spec.curvature {
        let a = sz_quantity(u);
        let vals: Vec<f64> = (0..u.values().len()).filter(|&i| a.valid[i] && u.values()[i].abs() < c.band).map(|i| a.values[i]).collect();
        let s = report.section("curvature");
        if vals.is_empty() {
            s.put("pass", false).put("error", format!("no valid nodes with |u| < {}", num(c.band)));
        } else {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
            let ok = c.expected.map_or(true, |e| (mean - e).abs() <= c.tol && (lo - e).abs() <= c.tol && (hi - e).abs() <= c.tol);
            s.put("pass", ok).num("mean", mean).num("min", lo).num("max", hi).put("nodes", vals.len()).num("band", c.band);
            if let Some(e) = c.expected {
                s.num("expected", e).num("tol", c.tol);
            }
        }
    }
    finish(ctx, "verify", &report)?;
    Ok(report)
}

fn density_checks(ctx: &mut Context, u: &ScalarField, spec: &VerifySpec, center: &[f64], report: &mut Report) -> Result<(), CliError> {
    let core = CliError::from_core;
    let radii = if spec.radii.is_empty() { default_radii(u, center) } else { spec.radii.clone() };
    let profile = density_profile(u, center, &radii).map_err(core)?;
    let mono = check_monotone(&profile, MONOTONE_TOL, QUADRATURE_SLACK);
    {
        let s = report.section("monotonicity");
        s.put("pass", mono.violations.is_empty())
            .put("violations", mono.violations.len())
            .put("within_slack", mono.within_slack.len())
            .num("slack", mono.slack);
        for (i, d) in mono.violations.iter().enumerate() {
            s.put(&format!("violation_{}", i + 1), format!("{} -> {}: drop {}", num(d.r_lo), num(d.r_hi), num(d.amount)));
        }
    }
    let mut t = Table::new(&["r", "density"]);
    for (r, v) in profile.radii.iter().zip(&profile.values) {
        t.nums(&[*r, *v]);
    }
    ctx.sink.csv("density", &t)?;
    let mut plot = Plot::new("normalized energy density", "r", "M_r");
    plot.add("M_r", profile.radii.iter().copied().zip(profile.values.iter().copied()).collect());
    ctx.sink.svg("density", &plot)?;

    {
        let s = report.section("density");
        match allard_classify(&profile, spec.allard_delta) {
            Ok(a) => {
                let ok = spec.expected_plateau.map_or(true, |e| (a.plateau - e).abs() <= spec.plateau_tol);
                s.put("pass", ok).num("plateau", a.plateau).num("spread", a.spread).put("class", format!("{:?}", a.class));
                if let Some(e) = spec.expected_plateau {
                    s.num("expected", e).num("tol", spec.plateau_tol);
                }
            }
            Err(e) => {
                s.put("pass", false).put("error", e);
            }
        }
    }

    Ok(())
}

pub fn cmd_index(ctx: &mut Context) -> Result<Report, CliError> {
    let spec: IndexSpec = ctx.config.index.clone().unwrap_or_default();
    let path = ctx.checkpoint_path(spec.checkpoint.as_ref());
    let u = load_checkpoint(&path)?;
    let rep = morse_index(&u, &spec.region, &spec.eigen).map_err(CliError::from_core)?;
    let mut report = Report::default();
    report
        .section("index")
        .put("checkpoint", path.display())
        .put("morse_index", rep.index_label())
        .put("stable", !rep.unresolved && rep.morse_index == 0)
        .put("active_nodes", rep.active_nodes)
        .nums("eigenvalues", &rep.eigenvalues)
        .put("restarts", rep.restarts);
    let mut t = Table::new(&["k", "eigenvalue"]);
    for (k, l) in rep.eigenvalues.iter().enumerate() {
        t.row(vec![(k + 1).to_string(), num(*l)]);
    }
    ctx.sink.csv("spectrum", &t)?;
    if let Some(ext) = &spec.exterior {
        let sweep = stability_outside_ball(&u, &ext.center, ext.r_min, ext.r_max, &spec.eigen).map_err(CliError::from_core)?;
        let s = report.section("exterior");
        s.nums("radii", &sweep.radii).nums("lowest", &sweep.lowest).put("indices", format!("{:?}", sweep.indices));
        match sweep.r0 {
            Some(r) => s.num("stable_outside", r),
            None => s.put("stable_outside", "none"),
        };
        let mut t = Table::new(&["radius", "index", "lowest"]);
        for i in 0..sweep.radii.len() {
            t.row(vec![num(sweep.radii[i]), sweep.indices[i].to_string(), num(sweep.lowest[i])]);
        }
        ctx.sink.csv("exterior", &t)?;
    }
    finish(ctx, "index", &report)?;
    Ok(report)
}

pub fn cmd_layers(ctx: &mut Context) -> Result<Report, CliError> {
    let spec: LayersSpec = ctx.config.layers.clone().unwrap_or_default();
    let path = ctx.checkpoint_path(spec.checkpoint.as_ref());
    let u = load_checkpoint(&path)?;
    let layers = extract_layers(&u, spec.level, &spec.options).map_err(CliError::from_core)?;
    let geom = layer_geometry(&layers).map_err(CliError::from_core)?;
    let mut report = Report::default();
    report
        .section("layers")
        .put("checkpoint", path.display())
        .num("level", spec.level)
        .put("count", layers.count())
        .put("axis", layers.axis)
        .put("base_points", layers.base.len());
    for (i, text) in layers_csv(&layers, Some(&geom)).iter().enumerate() {
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        report
            .section(format!("layer_{}", i + 1))
            .num("min_height", layers.heights[i].iter().copied().fold(f64::INFINITY, f64::min))
            .num("max_height", layers.heights[i].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .num("sup_mean_curvature", sup(&geom.mean_curvature[i]))
            .num("sup_second_fundamental", sup(&geom.second_fundamental[i]));
        ctx.sink.csv_text(&format!("layer_{}", i + 1), text)?;
    }
    if layers.base.dim() == 1 {
        let mut plot = Plot::new("layer heights", "base coordinate", "height");
        for i in 0..layers.count() {
            let pts = (0..layers.base.len()).map(|k| (layers.base.point(k)[0], layers.heights[i][k])).collect();
            plot.add(&format!("layer {}", i + 1), pts);
        }
        ctx.sink.svg("layers", &plot)?;
    }
    finish(ctx, "layers", &report)?;
    Ok(report)
}

fn liouville_config(mu: f64, r_min: f64, r_max: f64, ppd: usize) -> Result<TodaConfig, CliError> {
    let (a1, a2) = liouville_two_layer(r_min, mu, DEFAULT_KAPPA);
    let (s1, s2) = liouville_two_layer_slope(r_max, mu);
    let mut cfg =
        TodaConfig::new(2, r_min, r_max, vec![TodaEnd::Value(a1), TodaEnd::Value(a2)], vec![TodaEnd::Slope(s1), TodaEnd::Slope(s2)]);
    cfg.points_per_decade = ppd;
    let grid = cfg.validate().map_err(CliError::config_from)?;
    // The mixed problem has several radial branches; start near this one.
    let bump = |r: f64| 0.2 * (-r.ln().powi(2)).exp();
    let (f1, f2) = grid
        .radii()
        .iter()
        .map(|&r| {
            let (e1, e2) = liouville_two_layer(r, mu, DEFAULT_KAPPA);
            (e1 - bump(r), e2 + bump(r))
        })
        .unzip();
    cfg.initial = Some(vec![f1, f2]);
    Ok(cfg)
}

fn toda_solution(problem: &TodaProblem) -> Result<(TodaSolution, Option<f64>), CliError> {
    match problem {
        TodaProblem::General(cfg) => {
            cfg.validate().map_err(CliError::config_from)?;
            Ok((solve_toda(cfg).map_err(CliError::from_core)?, None))
        }
        TodaProblem::Liouville { mu, r_min, r_max, points_per_decade } => {
            let cfg = liouville_config(*mu, *r_min, *r_max, *points_per_decade)?;
            Ok((solve_toda(&cfg).map_err(CliError::from_core)?, Some(*mu)))
        }
        TodaProblem::LogEnds { r_min, r_max, points_per_decade, dim, kappa, ends } => {
            if ends.is_empty() {
                return Err(CliError::config("toda.problem.ends is empty"));
            }
            let grid = LogGrid::new(*r_min, *r_max, *points_per_decade).map_err(CliError::config_from)?;
            let e: Vec<(f64, f64)> = ends.iter().map(|p| (p[0], p[1])).collect();
            Ok((TodaSolution::from_log_ends(grid, *dim, *kappa, &e), None))
        }
    }
}

pub fn cmd_toda(ctx: &mut Context) -> Result<Report, CliError> {
    let spec: TodaSpec = ctx.config.toda.clone().ok_or_else(|| CliError::config("toda needs a [toda] section"))?;
    let core = CliError::from_core;
    let (sol, mu) = toda_solution(&spec.problem)?;
    let radii = sol.radii();
    let n = sol.layers();
    let mut report = Report::default();
    {
        let s = report.section("solution");
        s.put("layers", n).put("dim", sol.dim).num("kappa", sol.kappa);
        if sol.residual.is_nan() {
            s.put("residual", "prescribed");
        } else {
            s.num("residual", sol.residual);
        }
        s.put("newton_steps", sol.newton_steps).put("ordered", sol.ordered).put("nodes", radii.len());
    }
    let mut cols = vec!["r".to_string()];
    cols.extend((1..=n).map(|i| format!("f{i}")));
    let mut t = Table::with_columns(cols);
    for (j, r) in radii.iter().enumerate() {
        let mut row = vec![num(*r)];
        row.extend(sol.heights.iter().map(|h| num(h[j])));
        t.row(row);
    }
    ctx.sink.csv("toda_solution", &t)?;
    let mut plot = Plot::new("layer heights", "r", "f_i");
    plot.log_x = true;
    for (i, h) in sol.heights.iter().enumerate() {
        plot.add(&format!("f{}", i + 1), radii.iter().copied().zip(h.iter().copied()).collect());
    }
    ctx.sink.svg("toda", &plot)?;

    if let Some(mu) = mu {
        let worst = radii.iter().enumerate().fold(0.0f64, |m, (j, r)| {
            let (e1, e2) = liouville_two_layer(*r, mu, sol.kappa);
            m.max((sol.heights[0][j] - e1).abs()).max((sol.heights[1][j] - e2).abs())
        });
        report.section("oracle").num("mu", mu).num("sup_error", worst);
    }

    let fits = fit_log_asymptotics(&sol).map_err(core)?;
    let mut t = Table::new(&["layer", "b", "c", "correction", "alpha", "residual_rms"]);
    for (i, f) in fits.iter().enumerate() {
        t.row(vec![(i + 1).to_string(), num(f.b), num(f.c), num(f.correction), f.alpha.map_or("none".into(), num), num(f.residual_rms)]);
        report
            .section(format!("fit_{}", i + 1))
            .num("b", f.b)
            .num("c", f.c)
            .num("residual_rms", f.residual_rms)
            .put("alpha", f.alpha.map_or("none".into(), num));
    }
    ctx.sink.csv("toda_fits", &t)?;
    if n >= 2 {
        let gap = check_gap(&fits, spec.gap_tol);
        let mut t = Table::new(&["pair", "gap", "pass"]);
        for (i, (g, p)) in gap.gaps.iter().zip(&gap.pass).enumerate() {
            t.row(vec![(i + 1).to_string(), num(*g), p.to_string()]);
        }
        ctx.sink.csv("toda_gaps", &t)?;
        report.section("gap").put("pass", gap.all_pass()).nums("gaps", &gap.gaps).num("tol", gap.tol);

        let ints = interaction_integrals(&sol);
        let mut t = Table::new(&["pair", "r_lo", "r_hi", "mass"]);
        for p in &ints {
            for (a, b, m) in &p.dyads {
                t.row(vec![(p.pair + 1).to_string(), num(*a), num(*b), num(*m)]);
            }
        }
        ctx.sink.csv("toda_interaction", &t)?;
        let s = report.section("interaction");
        s.put("pass", ints.iter().all(|p| p.convergent));
        s.put("convergent", format!("{:?}", ints.iter().map(|p| p.convergent).collect::<Vec<_>>()));
        s.nums("tail_ratio", &ints.iter().map(|p| p.tail_ratio).collect::<Vec<_>>());
        s.nums("total", &ints.iter().map(|p| p.total).collect::<Vec<_>>());
    }

    if let Some(st) = &spec.stability {
        let mut t = Table::new(&["cutoff", "inner", "outer", "pair", "lhs", "rhs", "satisfied"]);
        let mut all = true;
        if n < 2 {
            report.section("stability").put("skipped", "single layer");
        } else {
            for c in &st.cutoffs {
                let (kind, (a, b)) = match c {
                    phaselab::toda::RadialCutoff::LinearRamp { inner, outer } => ("linear-ramp", (*inner, *outer)),
                    phaselab::toda::RadialCutoff::Smooth { inner, outer } => ("smooth", (*inner, *outer)),
                };
                for p in toda_stability_test(&sol, c, st.constant).map_err(core)? {
                    all &= p.satisfied;
                    t.row(vec![kind.into(), num(a), num(b), (p.pair + 1).to_string(), num(p.lhs), num(p.rhs), p.satisfied.to_string()]);
                }
            }
            report.section("stability").put("pass", all).put("cutoffs", st.cutoffs.len()).num("constant", st.constant);
            ctx.sink.csv("toda_stability", &t)?;
        }
    }

    if let Some(f) = &spec.farina {
        if f.pair + 1 >= n {
            report.section("farina").put("skipped", format!("no pair {}", f.pair + 1));
        } else {
            let v = sol.interaction(f.pair);
            let rep = farina_sweep(&sol.grid, &v, f.dim, f.q, f.r0).map_err(core)?;
            let mut t = Table::new(&["R", "lhs", "rhs"]);
            for i in 0..rep.radii.len() {
                t.nums(&[rep.radii[i], rep.lhs[i], rep.rhs[i]]);
            }
            ctx.sink.csv("toda_farina", &t)?;
            report
                .section("farina")
                .put("dim", rep.dim)
                .num("q", rep.q)
                .num("exponent", rep.exponent)
                .num("measured_exponent", rep.measured_exponent)
                .num("last_increment", rep.last_increment)
                .put("saturated", rep.saturated);
        }
    }
    finish(ctx, "toda", &report)?;
    Ok(report)
}

fn build_sample(ctx: &Context, spec: &SampleSpec) -> Result<AnnularSample, CliError> {
    let core = CliError::from_core;
    let pair = |s: &[i32; 2]| (s[0], s[1]);
    match spec {
        SampleSpec::Plane { dim, scales, per_octave } => graph_sample(*dim, pair(scales), *per_octave, &|_, _| 0.0, ctx.seed).map_err(core),
        SampleSpec::Power { dim, scales, per_octave, amplitude, exponent } => {
            graph_sample(*dim, pair(scales), *per_octave, &|r, _| amplitude * r.powf(*exponent), ctx.seed).map_err(core)
        }
        SampleSpec::Catenoid { scales, per_octave, angles } => catenoid_sample(pair(scales), *per_octave, *angles).map_err(core),
        SampleSpec::Helicoid { scales, per_octave, pitch, z_max, turns_resolution } => {
            helicoid_sample(pair(scales), *per_octave, *pitch, *z_max, *turns_resolution).map_err(core)
        }
        SampleSpec::Points { path } => {
            let p = ctx.config.resolve(path);
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::config(format!("reading {}: {e}", p.display())))?;
            let rows = read_numeric_csv(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            AnnularSample::new(rows, SampleSource::Synthetic).map_err(CliError::config_from)
        }
        SampleSpec::Layers { checkpoint, level, center, options } => {
            let path = ctx.checkpoint_path(checkpoint.as_ref());
            let u = load_checkpoint(&path)?;
            let layers = extract_layers(&u, *level, options).map_err(core)?;
            let c = center.clone().unwrap_or_else(|| grid_centre(&u));
            AnnularSample::from_layers(&layers, &c).map_err(core)
        }
    }
}

pub fn cmd_flatness(ctx: &mut Context) -> Result<Report, CliError> {
    let spec: FlatnessSpec = ctx.config.flatness.clone().ok_or_else(|| CliError::config("flatness needs a [flatness] section"))?;
    spec.iteration.validate().map_err(CliError::config_from)?;
    let sample = build_sample(ctx, &spec.sample)?;
    let trace = match run_iteration(&sample, &spec.iteration) {
        Ok(t) => t,
        Err(e) => {
            if let phaselab::Error::ScopeGate { scale, reason } = &e {
                let mut report = Report::default();
                report.section("gate").put("pass", false).put("scale", scale).put("reason", reason).put("points", sample.points.len());
                finish(ctx, "flatness", &report)?;
            }
            return Err(CliError::from_core(e));
        }
    };
    let mut report = Report::default();
    let pass = trace.stalled.is_none() && trace.steps.iter().all(|s| s.pass);
    {
        let s = report.section("iteration");
        s.put("pass", pass).put("points", sample.points.len()).num("alpha", trace.alpha).num("delta", trace.delta);
        s.num("epsilon0", trace.epsilon0).put("window", trace.window).put("initial_base_scale", trace.initial_base_scale);
        s.put("scales", trace.scales.len()).put("steps", trace.steps.len()).num("best_flatness", trace.best_flatness);
        s.put("stalled", trace.stalled.map_or("none".into(), |k| k.to_string()));
        s.put("noise_floor_scale", trace.noise_floor_scale.map_or("none".into(), |k| k.to_string()));
        s.put("fitted_factor", trace.fitted_factor.map_or("none".into(), num));
        s.put("fitted_alpha", trace.fitted_alpha.map_or("none".into(), num));
        s.nums("limit_direction", trace.limit_direction());
        let factors: Vec<f64> = trace.decay_factors.iter().flatten().copied().collect();
        s.nums("decay_factors", &factors);
        s.num("max_excess", trace.scales.iter().map(|f| f.excess).fold(0.0, f64::max));
    }
    let d = sample.dim;
    let mut cols: Vec<String> = ["scale", "excess", "points", "decay_factor", "direction_step"].iter().map(|c| c.to_string()).collect();
    cols.extend((1..=d).map(|a| format!("e{a}")));
    let mut t = Table::with_columns(cols);
    for (i, f) in trace.scales.iter().enumerate() {
        let mut row = vec![f.scale.to_string(), num(f.excess), f.points.to_string()];
        row.push(trace.decay_factors.get(i).copied().flatten().map_or(String::new(), num));
        row.push(trace.direction_steps.get(i).map_or(String::new(), |x| num(*x)));
        row.extend(f.direction.iter().map(|x| num(*x)));
        t.row(row);
    }
    ctx.sink.csv("flatness_trace", &t)?;
    let mut t = Table::new(&["base_scale", "best_flatness", "window_ratio", "tail_ratio", "pass"]);
    for s in &trace.steps {
        t.row(vec![s.base_scale.to_string(), num(s.best_flatness), num(s.window_ratio), num(s.tail_ratio), s.pass.to_string()]);
    }
    ctx.sink.csv("flatness_steps", &t)?;
    let mut plot = Plot::new("excess by dyadic scale", "k", "excess");
    plot.log_y = true;
    plot.add("excess", trace.scales.iter().map(|f| (f.scale as f64, f.excess)).collect());
    ctx.sink.svg("flatness", &plot)?;

    if let Some(opts) = &spec.decompose {
        let dec = decompose_ends(&sample, trace.limit_direction(), opts).map_err(CliError::from_core)?;
        let certified = dec.certified.iter().all(|c| *c);
        report
            .section("ends")
            .put("pass", certified)
            .put("sheets", dec.count())
            .num("alpha", dec.alpha)
            .put("scales", format!("{:?}", dec.scales))
            .put("certified", format!("{:?}", dec.certified));
        let mut t = Table::new(&["sheet", "scale", "growth"]);
        for (i, g) in dec.growth.iter().enumerate() {
            for (k, v) in dec.scales.iter().zip(g) {
                t.row(vec![(i + 1).to_string(), k.to_string(), num(*v)]);
            }
        }
        ctx.sink.csv("decomposition", &t)?;
        if let Some(r) = spec.log_fit_radius {
            for (i, sh) in dec.sheets.iter().enumerate() {
                let (b, c, sup) = fit_sheet_log(sh, r).map_err(CliError::from_core)?;
                report.section(format!("sheet_{}", i + 1)).num("b", b).num("c", c).num("residual_sup", sup).num("r_min", r);
            }
        }
    }
    finish(ctx, "flatness", &report)?;
    Ok(report)
}

/// Collect the pass/fail lines of every report in the output directory.
pub fn cmd_report(ctx: &mut Context) -> Result<Report, CliError> {
    let dir = ctx.sink.dir.clone();
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::config(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt") && p.file_stem().is_some_and(|s| s != "summary"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::config(format!("no reports in {}", dir.display())));
    }
    let mut report = Report::default();
    let mut failed = 0;
    let mut total = 0;
    for p in &names {
        let text = std::fs::read_to_string(p)?;
        let stem = p.file_stem().unwrap().to_string_lossy().to_string();
        let mut current = String::new();
        let s = report.section(stem);
        for line in text.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.to_string();
            } else if let Some(v) = line.strip_prefix("pass = ") {
                total += 1;
                if v != "true" {
                    failed += 1;
                }
                s.put(&current, if v == "true" { "PASS" } else { "FAIL" });
            }
        }
    }
    report.section("summary").put("checks", total).put("failed", failed).put("pass", failed == 0);
    finish(ctx, "summary", &report)?;
    Ok(report)
}
