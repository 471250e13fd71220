//! Command implementations. Each parses its config section, validates it
//! through the engine's constructors and returns a report.

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use stochastica::density::{
    analytic_transition, default_space_grid_with, fokker_planck_forward, Density, DensityGrid,
};
use stochastica::mc::{exact_terminal_moments, simulate_paths, simulate_terminal_exact};
use stochastica::models::{Dynamics, ModelConfig};
use stochastica::numerics::{fmt17, variance_with_error};
use stochastica::pathintegral::{greens_function_with, step_count, LatticeOptions};
use stochastica::pricing::{
    bs_greeks_for, bs_price, fd_greeks, pv_green, pv_mc, pv_pde, risk_neutralize, BSParams,
    OptionKind, PayoffConfig, PdeGrid, TerminalPayoff, Volatility,
};
use stochastica::risk::{
    delta_hedge, delta_hedge_bs, index_weights, neutralize, portfolio_variance, Greek, IndexInputs,
    InstrumentGreeks, Normalization,
};
use stochastica::special::norm_cdf;
use stochastica::{
    make_bm, make_gbm, make_vasicek, DiscountCurve, MCEstimate, ModelSpec, TimeGrid,
};

use crate::{CliError, CliResult, Command, Output};

fn parse<T: DeserializeOwned>(command: &str, body: Map<String, Value>) -> CliResult<T> {
    serde_json::from_value(Value::Object(body))
        .map_err(|e| CliError::Input(format!("{command} config: {e}")))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

pub fn dispatch(command: Command, body: Map<String, Value>, seed: u64) -> CliResult<Output> {
    let name = command.name();
    match command {
        Command::Simulate => simulate(parse(name, body)?, seed),
        Command::Density => density(parse(name, body)?),
        Command::Price => price(parse(name, body)?, seed),
        Command::Greeks => greeks(parse(name, body)?),
        Command::Hedge => hedge(parse(name, body)?),
        Command::Index => index(parse(name, body)?),
        Command::Check => check(parse(name, body)?, seed),
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Start {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum SamplerChoice {
    #[default]
    Euler,
    Exact,
}

#[derive(Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum PathExport {
    #[default]
    Csv,
    Binary,
    None,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    model: ModelConfig,
    s0: Start,
    #[serde(default)]
    t0: f64,
    horizon: f64,
    dt: Option<f64>,
    n_steps: Option<usize>,
    n_paths: usize,
    #[serde(default)]
    sampler: SamplerChoice,
    #[serde(default)]
    paths: PathExport,
}

fn simulate(cfg: SimulateConfig, seed: u64) -> CliResult<Output> {
    let model = ModelSpec::from_config(&cfg.model)?;
    let s0 = match cfg.s0 {
        Start::Scalar(x) => vec![x; model.dim()],
        Start::Vector(v) => v,
    };
    let batch = match cfg.sampler {
        SamplerChoice::Exact => {
            simulate_terminal_exact(&model, &s0, cfg.t0, cfg.horizon, cfg.n_paths, seed)?
        }
        SamplerChoice::Euler => {
            let grid = match (cfg.n_steps, cfg.dt) {
                (Some(n), None) => TimeGrid::over(cfg.t0, cfg.horizon, n)?,
                (None, Some(dt)) => TimeGrid::with_step(cfg.t0, cfg.horizon, dt)?,
                _ => return Err(input("simulate config: give exactly one of dt and n_steps")),
            };
            simulate_paths(&model, &s0, grid, cfg.n_paths, seed)?
        }
    };
    let exact = if model.dim() == 1 {
        exact_terminal_moments(&model, s0[0], cfg.horizon)
    } else {
        None
    };
    let assets: Vec<Value> = (0..model.dim())
        .map(|a| {
            let terminal: Vec<f64> = batch.paths().map(|p| p.terminal(a)).collect();
            let est = MCEstimate::from_values(&terminal);
            let (variance, variance_se) = variance_with_error(&terminal);
            let mut row = json!({
                "asset": a,
                "mean": est.mean,
                "mean_se": est.std_error,
                "variance": variance,
                "variance_se": variance_se,
            });
            if let Some((m, v)) = exact {
                row["exact_mean"] = json!(m);
                row["exact_variance"] = json!(v);
                row["mean_z"] = json!(est.z_score(m));
            }
            row
        })
        .collect();
    let mut out = Output::report(json!({
        "model_hash": model.hash(),
        "seed": seed,
        "n_paths": batch.n_paths,
        "n_steps": batch.grid.n_steps,
        "t0": batch.grid.t0,
        "dt": batch.grid.dt,
        "sampler": match cfg.sampler { SamplerChoice::Euler => "euler", SamplerChoice::Exact => "exact" },
        "terminal": assets,
    }));
    match cfg.paths {
        PathExport::Csv => {
            let mut buf = Vec::new();
            batch.write_csv(&mut buf)?;
            out.tables.push(("paths.csv".into(), buf));
        }
        PathExport::Binary => {
            let mut buf = Vec::new();
            batch.write_binary(&mut buf)?;
            out.tables.push(("paths.bin".into(), buf));
        }
        PathExport::None => {}
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum DensityMethod {
    Analytic,
    FokkerPlanck,
    PathIntegral,
}

impl DensityMethod {
    fn name(self) -> &'static str {
        match self {
            DensityMethod::Analytic => "analytic",
            DensityMethod::FokkerPlanck => "fokker-planck",
            DensityMethod::PathIntegral => "path-integral",
        }
    }
}

fn all_density_methods() -> Vec<DensityMethod> {
    vec![
        DensityMethod::Analytic,
        DensityMethod::FokkerPlanck,
        DensityMethod::PathIntegral,
    ]
}

fn default_nodes() -> usize {
    801
}

fn default_density_steps() -> usize {
    200
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    model: ModelConfig,
    s0: f64,
    #[serde(default)]
    t0: f64,
    t: f64,
    #[serde(default = "all_density_methods")]
    methods: Vec<DensityMethod>,
    #[serde(default = "default_nodes")]
    n_nodes: usize,
    #[serde(default = "default_density_steps")]
    n_steps: usize,
}

fn density(cfg: DensityConfig) -> CliResult<Output> {
    let model = ModelSpec::from_config(&cfg.model)?;
    if cfg.methods.is_empty() {
        return Err(input("density config: methods must not be empty"));
    }
    if cfg.n_steps == 0 {
        return Err(input("density config: n_steps must be >= 1"));
    }
    let grid = default_space_grid_with(&model, cfg.t0, cfg.s0, cfg.t, cfg.n_nodes)?;
    let mut results: Vec<(DensityMethod, DensityGrid)> = Vec::new();
    for &method in &cfg.methods {
        if results.iter().any(|(m, _)| *m == method) {
            continue;
        }
        let d = match method {
            DensityMethod::Analytic => {
                analytic_transition(&model, cfg.t0, cfg.s0, cfg.t)?.tabulate(grid.clone(), cfg.t)?
            }
            DensityMethod::FokkerPlanck => {
                let start = DensityGrid::point_mass(grid.clone(), cfg.s0, cfg.t0)?;
                let time = TimeGrid::over(cfg.t0, cfg.t - cfg.t0, cfg.n_steps)?;
                let mut path = fokker_planck_forward(&model, &start, &time)?;
                path.pop()
                    .expect("solver returns the initial slice at least")
            }
            DensityMethod::PathIntegral => {
                let dt = (cfg.t - cfg.t0) / cfg.n_steps as f64;
                let options = LatticeOptions {
                    n_nodes: cfg.n_nodes,
                };
                greens_function_with(
                    &model,
                    &DiscountCurve::flat(0.0)?,
                    cfg.t0,
                    cfg.s0,
                    cfg.t,
                    dt,
                    options,
                )?
                .terminal_density()?
            }
        };
        results.push((method, d));
    }
    let mut methods = Map::new();
    let mut tables = Vec::new();
    for (m, d) in &results {
        methods.insert(
            m.name().into(),
            json!({
                "mass": d.mass(),
                "mean": d.mean(),
                "variance": d.variance(),
                "clipped_mass": d.meta.clipped_mass,
            }),
        );
        let mut buf = Vec::new();
        d.write_csv(&mut buf)?;
        tables.push((format!("density_{}.csv", m.name()), buf));
    }
    let mut l1 = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let (a, da) = &results[i];
            let (b, db) = &results[j];
            l1.push(json!({ "a": a.name(), "b": b.name(), "l1": da.l1_error(db as &dyn Density) }));
        }
    }
    let mut out = Output::report(json!({
        "model_hash": model.hash(),
        "t0": cfg.t0,
        "t": cfg.t,
        "s0": cfg.s0,
        "n_nodes": grid.len(),
        "methods": methods,
        "pairwise_l1": l1,
    }));
    out.tables = tables;
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum PriceMethod {
    Analytic,
    Mc,
    Pde,
    Green,
    #[default]
    All,
}

fn default_mc_paths() -> usize {
    100_000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct McOptions {
    #[serde(default = "default_mc_paths")]
    n_paths: usize,
    /// Defaults to a 256th of the horizon.
    dt: Option<f64>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            n_paths: default_mc_paths(),
            dt: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GreenOptions {
    /// Defaults to a 16th of the horizon.
    dt: Option<f64>,
    #[serde(default = "default_nodes")]
    n_nodes: usize,
}

impl Default for GreenOptions {
    fn default() -> Self {
        Self {
            dt: None,
            n_nodes: default_nodes(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    s0: f64,
    #[serde(default)]
    t0: f64,
    sigma: Option<f64>,
    model: Option<ModelConfig>,
    rate: Option<f64>,
    curve: Option<DiscountCurve>,
    payoff: PayoffConfig,
    #[serde(default)]
    method: PriceMethod,
    #[serde(default)]
    mc: McOptions,
    #[serde(default)]
    pde: PdeGrid,
    #[serde(default)]
    green: GreenOptions,
}

fn geometric_sigma(model: &ModelSpec) -> Option<f64> {
    match model.dynamics() {
        Dynamics::Geometric { sigma, .. } if sigma.len() == 1 => Some(sigma[0]),
        _ => None,
    }
}

fn price(cfg: PriceConfig, seed: u64) -> CliResult<Output> {
    let model = match (&cfg.model, cfg.sigma) {
        (Some(m), None) => ModelSpec::from_config(m)?,
        (None, Some(sigma)) => make_gbm(0.0, sigma)?,
        _ => return Err(input("price config: give exactly one of sigma and model")),
    };
    let curve = match (&cfg.curve, cfg.rate) {
        (Some(c), None) => c.clone(),
        (None, Some(r)) => DiscountCurve::flat(r)?,
        _ => return Err(input("price config: give exactly one of rate and curve")),
    };
    let payoff = cfg.payoff.to_spec()?;
    let horizon = payoff.expiry - cfg.t0;
    let explicit = cfg.method != PriceMethod::All;
    let wants = |m: PriceMethod| cfg.method == PriceMethod::All || cfg.method == m;
    let mut values: Vec<(&'static str, f64, Option<f64>)> = Vec::new();
    let mut results = Map::new();
    let mut skipped = Map::new();
    let mut warnings = Vec::new();
    let mut skip = |name: &str, why: &str| -> CliResult<()> {
        if explicit {
            return Err(input(format!("price method {name} unavailable: {why}")));
        }
        skipped.insert(name.into(), json!(why));
        Ok(())
    };

    if wants(PriceMethod::Analytic) {
        let kind = match payoff.terminal {
            TerminalPayoff::Call { strike } => Some((OptionKind::Call, strike)),
            TerminalPayoff::Put { strike } => Some((OptionKind::Put, strike)),
            _ => None,
        };
        match (kind, geometric_sigma(&model), curve.constant_rate()) {
            (Some((kind, k)), Some(sigma), Some(r)) => {
                let v = bs_price(&BSParams::new(cfg.s0, k, r, sigma, horizon)?, kind)?;
                results.insert("analytic".into(), json!({ "value": v }));
                values.push(("analytic", v, None));
            }
            _ => skip(
                "analytic",
                "needs a call or put under a geometric model with a flat rate",
            )?,
        }
    }
    if wants(PriceMethod::Mc) {
        let dt = cfg.mc.dt.unwrap_or(horizon / 256.0);
        let est = pv_mc(
            &model,
            &curve,
            &payoff,
            cfg.t0,
            cfg.s0,
            dt,
            cfg.mc.n_paths,
            seed,
        )?;
        results.insert(
            "mc".into(),
            json!({ "value": est.mean, "std_error": est.std_error, "n_paths": est.n_paths, "steps": step_count(horizon, dt)? }),
        );
        values.push(("mc", est.mean, Some(est.std_error)));
    }
    if wants(PriceMethod::Pde) {
        match geometric_sigma(&model) {
            Some(sigma) => {
                let sol = pv_pde(
                    &payoff,
                    &curve,
                    &Volatility::Constant(sigma),
                    cfg.t0,
                    cfg.s0,
                    cfg.pde,
                )?;
                let v = sol
                    .at(cfg.s0)
                    .ok_or_else(|| CliError::Numerical("S0 fell outside the PDE grid".into()))?;
                results.insert("pde".into(), json!({ "value": v, "n_nodes": sol.s_values.len(), "n_steps": cfg.pde.n_steps }));
                values.push(("pde", v, None));
            }
            None => skip("pde", "needs a geometric model")?,
        }
    }
    if wants(PriceMethod::Green) {
        let rn = risk_neutralize(&model, &curve)?;
        let dt = cfg.green.dt.unwrap_or(horizon / 16.0);
        let options = LatticeOptions {
            n_nodes: cfg.green.n_nodes,
        };
        let g = greens_function_with(&rn, &curve, cfg.t0, cfg.s0, payoff.expiry, dt, options)?;
        let p = pv_green(&g, &payoff)?;
        if let Some(w) = &p.warning {
            warnings.push(w.clone());
        }
        results.insert(
            "green".into(),
            json!({ "value": p.value, "leakage_bound": p.leakage_bound, "n_nodes": g.s_values.len() }),
        );
        values.push(("green", p.value, None));
    }
    let mut agreement = Vec::new();
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            let (a, va, sa) = values[i];
            let (b, vb, sb) = values[j];
            let diff = va - vb;
            let mut row = json!({
                "a": a,
                "b": b,
                "difference": diff,
                "relative": if vb != 0.0 { json!(diff / vb.abs()) } else { Value::Null },
            });
            if let Some(se) = sa.or(sb).filter(|&se| se > 0.0) {
                row["z"] = json!(diff / se);
            }
            agreement.push(row);
        }
    }
    let mut out = Output::report(json!({
        "s0": cfg.s0,
        "t0": cfg.t0,
        "expiry": payoff.expiry,
        "model_hash": model.hash(),
        "results": results,
        "skipped": skipped,
        "agreement": agreement,
    }));
    out.warnings = warnings;
    Ok(out)
}

fn default_kind() -> OptionKind {
    OptionKind::Call
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionConfig {
    s: f64,
    k: f64,
    r: f64,
    sigma: f64,
    t: f64,
    #[serde(default = "default_kind")]
    kind: OptionKind,
}

impl OptionConfig {
    fn params(&self) -> CliResult<BSParams> {
        Ok(BSParams::new(self.s, self.k, self.r, self.sigma, self.t)?)
    }
}

fn greeks(cfg: OptionConfig) -> CliResult<Output> {
    let p = cfg.params()?;
    let g = bs_greeks_for(&p, cfg.kind)?;
    let fd = if p.is_degenerate() {
        Value::Null
    } else {
        let (delta, kappa, gamma) = fd_greeks(&p, cfg.kind)?;
        json!({ "delta": delta, "kappa": kappa, "gamma": gamma })
    };
    let mut report = to_value(&g);
    report["price"] = json!(bs_price(&p, cfg.kind)?);
    report["finite_difference"] = fd;
    Ok(Output::report(report))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgeConfig {
    /// Delta hedge of one option.
    option: Option<OptionConfig>,
    instruments: Option<Vec<InstrumentGreeks>>,
    options: Option<Vec<OptionConfig>>,
    #[serde(default)]
    targets: Vec<Greek>,
    #[serde(default)]
    normalization: Normalization,
}

fn hedge(cfg: HedgeConfig) -> CliResult<Output> {
    match (cfg.option, cfg.instruments, cfg.options) {
        (Some(o), None, None) => {
            let p = o.params()?;
            let analytic = delta_hedge_bs(&p, o.kind)?;
            let fd = delta_hedge(
                |s| bs_price(&BSParams { s, ..p }, o.kind).unwrap_or(f64::NAN),
                p.s,
            )?;
            let mut out = Output::report(json!({
                "delta": analytic.delta,
                "finite_difference_delta": fd.delta,
                "residual": fd.residual,
            }));
            out.warnings
                .extend(analytic.warning.into_iter().chain(fd.warning));
            Ok(out)
        }
        (None, instruments, options) if instruments.is_some() != options.is_some() => {
            let greeks = match (instruments, options) {
                (Some(g), _) => g,
                (_, Some(opts)) => opts
                    .iter()
                    .map(|o| {
                        let g = bs_greeks_for(&o.params()?, o.kind)?;
                        Ok(InstrumentGreeks {
                            delta: g.delta,
                            kappa: g.kappa,
                            gamma: g.gamma,
                        })
                    })
                    .collect::<CliResult<Vec<_>>>()?,
                _ => unreachable!("guarded above"),
            };
            let report = neutralize(&greeks, &cfg.targets, &cfg.normalization)?;
            let mut value = to_value(&report);
            value["instruments"] = to_value(&greeks);
            Ok(Output::report(value))
        }
        _ => Err(input(
            "hedge config: give exactly one of option, instruments and options",
        )),
    }
}

fn index(cfg: IndexInputs) -> CliResult<Output> {
    let w = index_weights(&cfg)?;
    let check = portfolio_variance(&w.weights, &cfg.x, &cfg.sigma)?;
    let mut value = to_value(&w);
    value["portfolio_variance"] = json!(check);
    value["value_weights"] = json!(w
        .weights
        .iter()
        .zip(&cfg.x)
        .map(|(w, x)| w * x)
        .collect::<Vec<_>>());
    Ok(Output::report(value))
}

fn default_check_paths() -> usize {
    100_000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    #[serde(default = "default_check_paths")]
    n_paths: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            n_paths: default_check_paths(),
        }
    }
}

struct CheckRow {
    name: String,
    value: f64,
    tolerance: f64,
}

impl CheckRow {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
        }
    }

    fn pass(&self) -> bool {
        self.value.abs() <= self.tolerance
    }
}

fn check(cfg: CheckConfig, seed: u64) -> CliResult<Output> {
    let mut rows = Vec::new();
    let atm = bs_price(
        &BSParams::new(100.0, 100.0, 0.0, 0.2, 1.0)?,
        OptionKind::Call,
    )?;
    rows.push(CheckRow::new(
        "bs_atm_vs_closed_form",
        atm - 100.0 * (2.0 * norm_cdf(0.1) - 1.0),
        1e-10,
    ));

    let curve = DiscountCurve::flat(0.05)?;
    let gbm = make_gbm(0.0, 0.2)?;
    let rn = risk_neutralize(&gbm, &curve)?;
    for k in [80.0, 100.0, 120.0] {
        let p = BSParams::new(100.0, k, 0.05, 0.2, 1.0)?;
        let bs = bs_price(&p, OptionKind::Call)?;
        let payoff = PayoffConfig::Call {
            strike: k,
            expiry: 1.0,
        }
        .to_spec()?;
        let pde = pv_pde(
            &payoff,
            &curve,
            &Volatility::Constant(0.2),
            0.0,
            100.0,
            PdeGrid::default(),
        )?
        .at(100.0)
        .unwrap_or(f64::NAN);
        rows.push(CheckRow::new(format!("pde_rel_k{k}"), pde / bs - 1.0, 1e-3));
        let g = greens_function_with(
            &rn,
            &curve,
            0.0,
            100.0,
            1.0,
            1.0 / 16.0,
            LatticeOptions::default(),
        )?;
        rows.push(CheckRow::new(
            format!("green_rel_k{k}"),
            pv_green(&g, &payoff)?.value / bs - 1.0,
            1e-3,
        ));
        let mc = pv_mc(
            &gbm,
            &curve,
            &payoff,
            0.0,
            100.0,
            1.0 / 256.0,
            cfg.n_paths,
            seed,
        )?;
        rows.push(CheckRow::new(format!("mc_z_k{k}"), mc.z_score(bs), 3.0));
        let g = bs_greeks_for(&p, OptionKind::Call)?;
        let (fd_delta, fd_kappa, _) = fd_greeks(&p, OptionKind::Call)?;
        rows.push(CheckRow::new(
            format!("delta_fd_rel_k{k}"),
            fd_delta / g.delta - 1.0,
            1e-6,
        ));
        rows.push(CheckRow::new(
            format!("kappa_fd_rel_k{k}"),
            fd_kappa / g.kappa - 1.0,
            1e-6,
        ));
    }

    let models = [
        ("bm", make_bm(0.1, 0.3)?, 0.0),
        ("gbm", make_gbm(0.1, 0.3)?, 1.0),
        ("vasicek", make_vasicek(1.0, 0.05, 0.02)?, 0.03),
    ];
    for (name, model, s0) in &models {
        let grid = default_space_grid_with(model, 0.0, *s0, 1.0, 801)?;
        let exact = analytic_transition(model, 0.0, *s0, 1.0)?;
        let start = DensityGrid::point_mass(grid, *s0, 0.0)?;
        let fp = fokker_planck_forward(model, &start, &TimeGrid::over(0.0, 1.0, 200)?)?;
        let fp = fp.last().expect("non-empty");
        rows.push(CheckRow::new(
            format!("fokker_planck_l1_{name}"),
            fp.l1_error(&exact),
            5e-3,
        ));
        let pi = greens_function_with(
            model,
            &DiscountCurve::flat(0.0)?,
            0.0,
            *s0,
            1.0,
            1.0 / 200.0,
            LatticeOptions::default(),
        )?
        .terminal_density()?;
        rows.push(CheckRow::new(
            format!("path_integral_l1_{name}"),
            pi.l1_error(&exact),
            5e-3,
        ));
    }
    let g = greens_function_with(
        &rn,
        &curve,
        0.0,
        100.0,
        1.0,
        1.0 / 16.0,
        LatticeOptions::default(),
    )?;
    rows.push(CheckRow::new(
        "green_mass_minus_discount",
        g.terminal_mass() - curve.discount(0.0, 1.0),
        1e-6,
    ));

    let failed = rows.iter().any(|r| !r.pass());
    let table: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "name": r.name, "value": r.value, "tolerance": r.tolerance, "pass": r.pass() }))
        .collect();
    let mut out = Output::report(
        json!({ "seed": seed, "n_paths": cfg.n_paths, "all_pass": !failed, "checks": table }),
    );
    out.failed = failed;
    let mut text = String::from("name,value,tolerance,pass\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.name,
            fmt17(r.value),
            fmt17(r.tolerance),
            r.pass()
        ));
    }
    out.tables.push(("checks.csv".into(), text.into_bytes()));
    Ok(out)
}
