//! Subcommand pipelines. Each fills a [`Run`] with named artifacts; writing
//! them to disk is left to the caller.

use std::collections::BTreeMap;

use landreg_core::flow::{flow, push_forward, shoot_register, ShootResult};
use landreg_core::langevin::pushforward_ensemble;
use landreg_core::linearised::linearise_about;
use landreg_core::splitting::{
    arithmetic_mean, data_spread, laplace_first, laplace_multi, laplace_second, landmark_rms, map_first, map_multi,
    map_second, FirstSplitting, MapSettings,
};
use landreg_core::{FlowSettings, GaussianKernel, LandmarkConfig, PhaseState};
use log::info;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{read_landmark_csv, read_landmark_json, LandmarkSets};
use crate::procrustes::procrustes_align;
use crate::report::{axis_columns, densify_closed, heat_colour, num, nums, Bounds, Grid, Svg, Table};

/// State of one command invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub data: LandmarkSets,
    pub kernel: GaussianKernel,
    pub flow: FlowSettings,
    /// Artifacts keyed by file name.
    pub artifacts: BTreeMap<String, Vec<u8>>,
    /// Cleared when a solver stops short of its tolerance.
    pub converged: bool,
}

impl Run {
    pub fn new(cfg: RunConfig) -> CliResult<Run> {
        cfg.validate()?;
        let data = load_sets(&cfg)?;
        Ok(Run { kernel: cfg.kernel()?, flow: cfg.flow()?, cfg, data, artifacts: BTreeMap::new(), converged: true })
    }

    pub fn with_data(cfg: RunConfig, data: LandmarkSets) -> CliResult<Run> {
        cfg.validate()?;
        Ok(Run { kernel: cfg.kernel()?, flow: cfg.flow()?, cfg, data, artifacts: BTreeMap::new(), converged: true })
    }

    fn csv(&mut self, name: &str, table: &Table) -> CliResult<()> {
        self.artifacts.insert(name.to_string(), table.to_csv()?);
        Ok(())
    }

    fn svg(&mut self, name: &str, svg: Svg) {
        self.artifacts.insert(name.to_string(), svg.finish().into_bytes());
    }

    fn map_settings(&self) -> MapSettings {
        MapSettings { seed: self.cfg.seed, ..MapSettings::new(self.flow, self.cfg.obs_noise_var) }
    }

    /// All sets in file order, aligned when configured.
    fn all_sets(&self) -> CliResult<Vec<LandmarkConfig>> {
        let sets: Vec<LandmarkConfig> = self.data.sets.values().cloned().collect();
        if self.cfg.align {
            Ok(procrustes_align(&sets)?.0)
        } else {
            Ok(sets)
        }
    }

    /// The `reference` and `target` sets, aligned when configured.
    fn pair(&self) -> CliResult<(LandmarkConfig, LandmarkConfig)> {
        let pair = [self.data.get("reference")?.clone(), self.data.get("target")?.clone()];
        if self.cfg.align {
            let (mut out, _) = procrustes_align(&pair)?;
            let t = out.pop().expect("two sets");
            Ok((out.pop().expect("two sets"), t))
        } else {
            let [r, t] = pair;
            Ok((r, t))
        }
    }

    fn shoot(&mut self, q_r: &LandmarkConfig, q_t: &LandmarkConfig) -> CliResult<ShootResult> {
        let shoot = shoot_register(q_r, q_t, &self.flow, &self.kernel, self.cfg.shoot_tol)?;
        info!("shooting: residual {:.3e} after {} iterations", shoot.residual, shoot.iterations);
        if !shoot.converged {
            log::warn!("shooting did not reach tolerance {} (residual {:.3e})", self.cfg.shoot_tol, shoot.residual);
            self.converged = false;
        }
        Ok(shoot)
    }

    fn require_planar(&self, what: &str) -> CliResult<()> {
        if self.data.dim != 2 {
            return Err(CliError::input(format!("{what} needs planar landmarks, got d = {}", self.data.dim)));
        }
        Ok(())
    }
}

pub fn load_sets(cfg: &RunConfig) -> CliResult<LandmarkSets> {
    let mut data = match &cfg.input {
        Some(path) => read_landmark_json(path)?,
        None => LandmarkSets { dim: 0, labels: None, sets: Default::default() },
    };
    for (name, path) in &cfg.csv_sets {
        data.insert(name, read_landmark_csv(name, path)?)?;
    }
    if data.sets.is_empty() {
        return Err(CliError::input("no landmark sets given (use `input`, `--input` or `--set NAME=PATH`)"));
    }
    Ok(data)
}

fn label(data: &LandmarkSets, i: usize) -> String {
    data.labels.as_ref().map_or_else(|| i.to_string(), |l| l[i].clone())
}

fn points_of(v: &nalgebra::DVector<f64>, d: usize) -> Vec<Vec<f64>> {
    v.as_slice().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `sqrt(Σ‖xₛ − x̄‖² / ((S − 1) d))` per point across samples.
pub fn pointwise_sd(samples: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let s = samples.len();
    let Some(first) = samples.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| {
            let d = first[i].len();
            if s < 2 {
                return 0.0;
            }
            let mean: Vec<f64> = (0..d).map(|a| samples.iter().map(|x| x[i][a]).sum::<f64>() / s as f64).collect();
            let ss: f64 = samples.iter().map(|x| x[i].iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>()).sum();
            (ss / ((s - 1) * d) as f64).sqrt()
        })
        .collect()
}

/// Median over points of `‖Φ(x) − x‖`.
pub fn median_displacement(points: &[Vec<f64>], warped: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .zip(warped)
        .map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    median(&mut d)
}

fn draw_set(svg: &mut Svg, set: &LandmarkConfig, colour: &str) {
    for p in set.points() {
        svg.dot(&p, colour);
    }
}

/// Noisy registration of `reference` onto `target`: exact shooting plus the
/// MAP point and Laplace spreads under the first splitting.
pub fn register(run: &mut Run) -> CliResult<()> {
    let (q_r, q_t) = run.pair()?;
    let (d, n, m) = (q_r.dim(), q_r.count(), q_r.coords().len());
    let shoot = run.shoot(&q_r, &q_t)?;
    let settings = run.map_settings();
    let k = &run.kernel;
    let map = map_first(&q_r, &q_t, run.cfg.beta, &settings, k)?;
    if !map.converged {
        log::warn!("MAP optimiser stopped after {} iterations without converging", map.iterations);
        run.converged = false;
    }
    let lap = laplace_first(&map, &q_r, &q_t, run.cfg.beta, &settings, k)?;
    let obj = FirstSplitting::new(&q_r, &q_t, run.cfg.beta, run.cfg.obs_noise_var, run.flow, k)?;
    let x = map.x();
    let end = obj.endpoint(&x)?;
    let sd_start = lap.landmark_sd(m, n, d);
    let sd_end = lap.pushed(&obj.endpoint_jacobian(&x)?).landmark_sd(0, n, d);
    let path = flow(&PhaseState::new(d, map.p0.clone(), map.q0.clone())?, 0.0, 1.0, &run.flow, k)?;

    let mut header = vec!["landmark".to_string()];
    for prefix in ["reference", "target", "start", "end", "momentum", "shoot_momentum"] {
        header.extend(axis_columns(prefix, d));
    }
    header.extend(["sd_start".to_string(), "sd_end".to_string()]);
    let mut table = Table::new(&header);
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        let mut row = vec![label(&run.data, i)];
        for v in [q_r.coords(), q_t.coords(), &map.q0, &end, &map.p0, &shoot.p0] {
            row.extend(nums(&v.as_slice()[r.clone()]));
        }
        row.extend([num(sd_start[i]), num(sd_end[i])]);
        table.push(row);
    }
    run.csv("landmarks.csv", &table)?;

    let mut summary = Table::new(&["quantity", "value"]);
    for (key, v) in [
        ("shoot_residual", num(shoot.residual)),
        ("shoot_converged", shoot.converged.to_string()),
        ("shoot_iterations", shoot.iterations.to_string()),
        ("map_objective", num(map.objective_value)),
        ("map_converged", map.converged.to_string()),
        ("map_iterations", map.iterations.to_string()),
        ("residual_reference", num(map.residual_r)),
        ("residual_target", num(map.residual_t)),
        ("rms_residual_reference", num(map.residual_r / (n as f64).sqrt())),
        ("rms_residual_target", num(map.residual_t / (n as f64).sqrt())),
        ("laplace_retained", lap.retained.to_string()),
        ("laplace_discarded_fraction", num(lap.discarded_fraction)),
    ] {
        summary.push(vec![key.to_string(), v]);
    }
    run.csv("summary.csv", &summary)?;

    if d == 2 {
        let tracks: Vec<Vec<Vec<f64>>> =
            (0..n).map(|i| path.states().iter().map(|z| z.q.as_slice()[2 * i..2 * i + 2].to_vec()).collect()).collect();
        let all = tracks.iter().flatten().chain(q_t.points().iter()).map(Vec::clone).collect::<Vec<_>>();
        let mut svg = Svg::fitting(all.iter().map(Vec::as_slice));
        for (i, t) in tracks.iter().enumerate() {
            svg.disc(&t[0], sd_start[i], "steelblue", 0.3);
            svg.disc(t.last().expect("non-empty path"), sd_end[i], "firebrick", 0.3);
            svg.polyline(t, "black", 1.0, false);
        }
        draw_set(&mut svg, &q_r, "steelblue");
        draw_set(&mut svg, &q_t, "firebrick");
        run.svg("register.svg", svg);
    }
    Ok(())
}

/// Posterior of the linearised Langevin prior conditioned on both sets.
pub fn linear_posterior(run: &mut Run) -> CliResult<()> {
    let (q_r, q_t) = run.pair()?;
    let (d, n) = (q_r.dim(), q_r.count());
    let shoot = run.shoot(&q_r, &q_t)?;
    let th = run.cfg.thermostat(run.cfg.beta)?;
    let kernel = run.kernel;
    let k = &kernel;
    let sys = linearise_about(&shoot.path, &th, k)?;
    let init = sys.midpoint_init(run.cfg.prior_pos_var, k)?;
    let joint = sys.propagate_moments(&init)?;
    let post = sys.condition_on_endpoints(&joint, q_r.coords(), q_t.coords(), run.cfg.obs_noise_var)?;

    let mut sd = Table::new(&["node", "t", "landmark", "prior_sd", "posterior_sd"]);
    for node in 0..=sys.n_steps() {
        let (prior, posterior) = (sys.landmark_sd(&joint, node), sys.landmark_sd(&post, node));
        for i in 0..n {
            sd.push(vec![node.to_string(), num(shoot.path.time(node)), label(&run.data, i), num(prior[i]), num(posterior[i])]);
        }
    }
    run.csv("landmark_sd.csv", &sd)?;

    let paths = sys.sample_posterior_paths(&post, run.cfg.samples, run.cfg.seed)?;
    let mut header = vec!["sample".to_string(), "node".to_string(), "t".to_string(), "landmark".to_string()];
    header.extend(axis_columns("", d));
    let mut samples = Table::new(&header);
    for (s, path) in paths.iter().enumerate() {
        for (node, z) in path.states().iter().enumerate() {
            for i in 0..n {
                let mut row = vec![s.to_string(), node.to_string(), num(path.time(node)), label(&run.data, i)];
                row.extend(nums(&z.q.as_slice()[i * d..(i + 1) * d]));
                samples.push(row);
            }
        }
    }
    run.csv("posterior_paths.csv", &samples)?;

    if d != 2 {
        return Ok(());
    }
    let grid = Grid::around(&q_r, run.cfg.ell, run.cfg.grid);
    let warped = paths.iter().map(|p| push_forward(p, &grid.points, &run.flow, k)).collect::<Result<Vec<_>, _>>()?;
    let grid_sd = pointwise_sd(&warped);
    let mut table = Table::new(&["point", "x", "y", "mean_x", "mean_y", "sd"]);
    for (i, x) in grid.points.iter().enumerate() {
        let mean: Vec<f64> = (0..2).map(|a| warped.iter().map(|w| w[i][a]).sum::<f64>() / warped.len() as f64).collect();
        table.push(vec![i.to_string(), num(x[0]), num(x[1]), num(mean[0]), num(mean[1]), num(grid_sd[i])]);
    }
    run.csv("grid_sd.csv", &table)?;

    let step = [
        grid.points[1][0] - grid.points[0][0],
        grid.points[grid.side][1] - grid.points[0][1],
    ];
    let top = grid_sd.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let corners = [grid.points[0].clone(), grid.points[grid.points.len() - 1].clone()];
    let bounds = Bounds::of_points(corners.iter().map(Vec::as_slice)).expect("two corners").inflate(0.5 * step[0].max(step[1]));
    let mut heat = Svg::new(bounds);
    for (x, v) in grid.points.iter().zip(&grid_sd) {
        heat.cell(&[x[0] - 0.5 * step[0], x[1] - 0.5 * step[1]], step, &heat_colour(v / top));
    }
    heat.polyline(&q_r.points(), "steelblue", 1.5, true);
    heat.polyline(&q_t.points(), "firebrick", 1.5, true);
    run.svg("grid_sd.svg", heat);

    let tracks = |z: &[PhaseState], i: usize| z.iter().map(|s| s.q.as_slice()[2 * i..2 * i + 2].to_vec()).collect::<Vec<_>>();
    let all: Vec<Vec<f64>> = paths.iter().flat_map(|p| p.states().iter().flat_map(|z| points_of(&z.q, 2))).collect();
    let mut overlay = Svg::fitting(all.iter().map(Vec::as_slice));
    for p in &paths {
        for i in 0..n {
            overlay.polyline(&tracks(p.states(), i), "#999999", 0.5, false);
        }
    }
    for i in 0..n {
        overlay.polyline(&tracks(shoot.path.states(), i), "black", 1.5, false);
    }
    draw_set(&mut overlay, &q_r, "steelblue");
    draw_set(&mut overlay, &q_t, "firebrick");
    run.svg("posterior_paths.svg", overlay);
    Ok(())
}

/// Warps of a grid and of the reference outline under the Langevin prior
/// for each inverse temperature in `betas`.
pub fn sample_prior(run: &mut Run) -> CliResult<()> {
    if run.cfg.betas.is_empty() {
        return Err(CliError::input("`betas` must list at least one inverse temperature"));
    }
    run.require_planar("sample-prior")?;
    let q_r = run.all_sets()?.swap_remove(0);
    let grid = Grid::around(&q_r, run.cfg.ell, run.cfg.grid);
    let outline = densify_closed(&q_r, 8);
    let points: Vec<Vec<f64>> = grid.points.iter().chain(&outline).cloned().collect();
    let g = grid.points.len();

    let mut stats = Table::new(&["beta", "sample", "median_displacement", "mean_displacement", "max_displacement"]);
    let mut summary = Table::new(&["beta", "median_of_medians"]);
    for &beta in &run.cfg.betas.clone() {
        let th = run.cfg.thermostat(beta)?;
        let ensemble = pushforward_ensemble(&q_r, &th, &run.kernel, &run.flow, run.cfg.samples, &points, run.cfg.seed)?;
        let mut medians = Vec::with_capacity(ensemble.len());
        for (s, sample) in ensemble.iter().enumerate() {
            let disp: Vec<f64> = grid
                .points
                .iter()
                .zip(&sample.points[..g])
                .map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            let med = median(&mut disp.clone());
            let mean = disp.iter().sum::<f64>() / g as f64;
            let max = disp.iter().copied().fold(0.0, f64::max);
            stats.push(vec![num(beta), s.to_string(), num(med), num(mean), num(max)]);
            medians.push(med);
        }
        summary.push(vec![num(beta), num(median(&mut medians))]);

        let first = &ensemble[0].points;
        let mut svg = Svg::fitting(first.iter().map(Vec::as_slice));
        for line in grid.lines(&first[..g]) {
            svg.polyline(&line, "#777777", 0.7, false);
        }
        svg.polyline(&first[g..], "firebrick", 1.5, true);
        svg.polyline(&outline, "steelblue", 1.0, true);
        svg.text(&[first[0][0], first[0][1]], &format!("beta = {beta}"));
        run.svg(&format!("prior_beta_{beta}.svg"), svg);
    }
    run.csv("displacement.csv", &stats)?;
    run.csv("displacement_summary.csv", &summary)?;
    Ok(())
}

/// MAP average of all sets with Laplace spreads, against the arithmetic mean.
pub fn average(run: &mut Run) -> CliResult<()> {
    let sets = run.all_sets()?;
    if sets.len() < 2 {
        return Err(CliError::input(format!("averaging needs at least two sets, got {}", sets.len())));
    }
    let (d, n, m) = (sets[0].dim(), sets[0].count(), sets[0].coords().len());
    let th = run.cfg.thermostat(run.cfg.beta)?;
    if th.lambda() == 0.0 {
        return Err(CliError::input("averaging needs `lambda` > 0"));
    }
    let settings = run.map_settings();
    let k = &run.kernel;
    let (method, avg, objective, converged, iterations, sd) = if run.cfg.pairwise && sets.len() == 2 {
        let map = map_second(&sets[0], &sets[1], &th, &settings, k)?;
        let lap = laplace_second(&map, &sets[0], &sets[1], &th, &settings, k)?;
        ("pairwise", map.average(), map.objective_value, map.converged, map.iterations, lap.landmark_sd(m, n, d))
    } else {
        let map = map_multi(&sets, &th, &settings, k)?;
        let lap = laplace_multi(&map, &sets, &th, &settings, k)?;
        ("multi", map.average(), map.objective_value, map.converged, map.iterations, lap.landmark_sd(m, n, d))
    };
    if !converged {
        log::warn!("MAP optimiser stopped after {iterations} iterations without converging");
        run.converged = false;
    }
    let mean = arithmetic_mean(&sets);

    let mut header = vec!["landmark".to_string()];
    header.extend(axis_columns("map", d));
    header.extend(axis_columns("mean", d));
    header.push("sd".to_string());
    let mut table = Table::new(&header);
    for i in 0..n {
        let mut row = vec![label(&run.data, i)];
        row.extend(nums(avg.point(i)));
        row.extend(nums(mean.point(i)));
        row.push(num(sd[i]));
        table.push(row);
    }
    run.csv("average.csv", &table)?;

    let mut summary = Table::new(&["quantity", "value"]);
    for (key, v) in [
        ("method", method.to_string()),
        ("sets", sets.len().to_string()),
        ("objective", num(objective)),
        ("converged", converged.to_string()),
        ("iterations", iterations.to_string()),
        ("distance_to_mean", num(landmark_rms(&avg, &mean))),
        ("data_spread", num(data_spread(&sets))),
    ] {
        summary.push(vec![key.to_string(), v]);
    }
    run.csv("summary.csv", &summary)?;

    if d == 2 {
        let all: Vec<Vec<f64>> = sets.iter().flat_map(LandmarkConfig::points).chain(avg.points()).collect();
        let mut svg = Svg::fitting(all.iter().map(Vec::as_slice));
        for s in &sets {
            svg.polyline(&s.points(), "#bbbbbb", 0.7, true);
        }
        for i in 0..n {
            svg.disc(avg.point(i), sd[i], "black", 0.2);
        }
        svg.polyline(&mean.points(), "green", 1.5, true);
        svg.polyline(&avg.points(), "black", 1.5, true);
        run.svg("average.svg", svg);
    }
    Ok(())
}

/// Exact registration: intermediate shapes, landmark paths and a warped grid.
pub fn warp(run: &mut Run) -> CliResult<()> {
    let (q_r, q_t) = run.pair()?;
    let (d, n) = (q_r.dim(), q_r.count());
    let shoot = run.shoot(&q_r, &q_t)?;
    let path = &shoot.path;

    let mut header = vec!["t".to_string(), "landmark".to_string()];
    header.extend(axis_columns("", d));
    let mut shapes = Table::new(&header);
    let mut nodes = Vec::new();
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let node = path.nearest_node(t)?;
        nodes.push(node);
        for i in 0..n {
            let mut row = vec![num(path.time(node)), label(&run.data, i)];
            row.extend(nums(&path.state(node).q.as_slice()[i * d..(i + 1) * d]));
            shapes.push(row);
        }
    }
    run.csv("shapes.csv", &shapes)?;

    let mut header = vec!["node".to_string(), "t".to_string(), "landmark".to_string()];
    header.extend(axis_columns("", d));
    let mut tracks = Table::new(&header);
    for (node, z) in path.states().iter().enumerate() {
        for i in 0..n {
            let mut row = vec![node.to_string(), num(path.time(node)), label(&run.data, i)];
            row.extend(nums(&z.q.as_slice()[i * d..(i + 1) * d]));
            tracks.push(row);
        }
    }
    run.csv("paths.csv", &tracks)?;

    let mut summary = Table::new(&["quantity", "value"]);
    summary.push(vec!["residual".into(), num(shoot.residual)]);
    summary.push(vec!["converged".into(), shoot.converged.to_string()]);
    summary.push(vec!["iterations".into(), shoot.iterations.to_string()]);
    run.csv("summary.csv", &summary)?;

    if d != 2 {
        return Ok(());
    }
    let grid = Grid::around(&q_r, run.cfg.ell, run.cfg.grid);
    let warped = push_forward(path, &grid.points, &run.flow, &run.kernel)?;
    let mut table = Table::new(&["point", "x", "y", "warped_x", "warped_y"]);
    for (i, (x, y)) in grid.points.iter().zip(&warped).enumerate() {
        table.push(vec![i.to_string(), num(x[0]), num(x[1]), num(y[0]), num(y[1])]);
    }
    run.csv("warped_grid.csv", &table)?;

    let all: Vec<Vec<f64>> = warped.iter().cloned().chain(path.states().iter().flat_map(|z| points_of(&z.q, 2))).collect();
    let mut svg = Svg::fitting(all.iter().map(Vec::as_slice));
    for line in grid.lines(&warped) {
        svg.polyline(&line, "#cccccc", 0.7, false);
    }
    for i in 0..n {
        let track: Vec<Vec<f64>> = path.states().iter().map(|z| z.q.as_slice()[2 * i..2 * i + 2].to_vec()).collect();
        svg.polyline(&track, "#555555", 0.8, false);
    }
    let shades = ["steelblue", "#6a7fb0", "#8f6f9f", "#b45f7a", "firebrick"];
    for (node, colour) in nodes.iter().zip(shades) {
        svg.polyline(&points_of(&path.state(*node).q, 2), colour, 1.5, true);
    }
    run.svg("warp.svg", svg);
    Ok(())
}
