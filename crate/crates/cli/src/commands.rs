//! Subcommand implementations. Every command computes all results before
//! touching the output directory, then writes through a staging directory
//! so a failed run leaves no partial files.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dhc_core::economics::{
    base_profile, carbon_and_profit, pv_shape, static_limits, DhcProfile, EconomicsReport,
};
use dhc_core::fairness::fairness_report;
use dhc_core::hc::{
    audit_hyperrectangle, dhc_timeseries, envelope_mae, linearize, solve_hc, BoundVariant,
    DhcSeries, HcOptions, Hyperrectangle, Scenario, StepOutcome, SCENARIO_NAMES,
};
use dhc_core::io;
use dhc_core::loadflow::{sweep_admissible_set, CellClass, SweepAxis};
use dhc_core::matrices::{compact_matrices, CompactMatrices};
use dhc_core::network::{load_network, Network};
use dhc_core::series::DemandSeries;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::{self, Series};
use crate::{EconomicsArgs, MaeArgs, SweepArgs, ValidateArgs};

/// Writes its files into the given directory.
type Writer = Box<dyn FnOnce(&Path) -> Result<()>>;

/// Output files queued until the run has succeeded.
#[derive(Default)]
struct Artifacts {
    files: Vec<(Vec<String>, Writer)>,
}

impl Artifacts {
    fn add(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<()> + 'static) {
        let file = name.to_string();
        self.group(&[name], move |dir| write(&dir.join(file)));
    }

    fn group(&mut self, names: &[&str], write: impl FnOnce(&Path) -> Result<()> + 'static) {
        let names = names.iter().map(|n| n.to_string()).collect();
        self.files.push((names, Box::new(write)));
    }

    fn json<T: Serialize + 'static>(&mut self, name: &str, value: T) {
        self.add(name, move |p| Ok(io::write_json(p, &value)?));
    }

    fn text(&mut self, name: &str, text: String) {
        self.add(name, move |p| {
            std::fs::write(p, text).with_context(|| p.display().to_string())
        });
    }

    fn commit(self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let stage = tempfile::Builder::new()
            .prefix(".dhc-staging")
            .tempdir_in(out)
            .with_context(|| format!("staging in {}", out.display()))?;
        let mut names = Vec::new();
        for (group, write) in self.files {
            write(stage.path()).with_context(|| format!("writing {}", group.join(", ")))?;
            names.extend(group);
        }
        for name in &names {
            std::fs::rename(stage.path().join(name), out.join(name))
                .with_context(|| format!("moving {name} into {}", out.display()))?;
            println!("wrote {}", out.join(name).display());
        }
        Ok(())
    }
}

struct Loaded {
    net: Network,
    mats: CompactMatrices,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let path = cfg.network()?;
    let net = load_network(&path).with_context(|| format!("loading {}", path.display()))?;
    let mats = compact_matrices(&net)?;
    Ok(Loaded { net, mats })
}

fn demand(cfg: &RunConfig, net: &Network) -> Result<DemandSeries> {
    Ok(io::read_demand_csv(cfg.demand()?, net)?)
}

fn opts(cfg: &RunConfig) -> HcOptions {
    HcOptions {
        iterations: cfg.iterations(),
        ..HcOptions::default()
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

#[derive(Serialize)]
struct MatrixDump {
    bus_ids: Vec<u32>,
    branch_ids: Vec<u32>,
    incidence: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d_r: Vec<Vec<f64>>,
    d_x: Vec<Vec<f64>>,
    d_x_pos: Vec<Vec<f64>>,
    d_x_neg: Vec<Vec<f64>>,
    m_p: Vec<Vec<f64>>,
    m_q: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    h_pos: Vec<Vec<f64>>,
    h_neg: Vec<Vec<f64>>,
    r: Vec<f64>,
    x: Vec<f64>,
    z2: Vec<f64>,
}

pub fn matrices(cfg: &RunConfig) -> Result<()> {
    let Loaded { net, mats: m } = load(cfg)?;
    let dump = MatrixDump {
        bus_ids: net.buses().iter().map(|b| b.id).collect(),
        branch_ids: (0..net.n()).map(|k| net.slot_id(k)).collect(),
        incidence: rows(&m.incidence),
        a: rows(&m.a),
        c: rows(&m.c),
        d_r: rows(&m.d_r),
        d_x: rows(&m.d_x),
        d_x_pos: rows(&m.d_x_pos),
        d_x_neg: rows(&m.d_x_neg),
        m_p: rows(&m.m_p),
        m_q: rows(&m.m_q),
        h: rows(&m.h),
        h_pos: rows(&m.h_pos),
        h_neg: rows(&m.h_neg),
        r: m.r.iter().cloned().collect(),
        x: m.x.iter().cloned().collect(),
        z2: m.z2.iter().cloned().collect(),
    };
    println!("{} buses, {} branches", net.buses().len(), net.n());
    let mut art = Artifacts::default();
    art.json("matrices.json", dump);
    art.commit(&cfg.out())
}

fn range(s: &str, flag: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(':')
        .with_context(|| format!("--{flag} must be min:max"))?;
    let a: f64 = a.trim().parse().with_context(|| format!("--{flag}"))?;
    let b: f64 = b.trim().parse().with_context(|| format!("--{flag}"))?;
    if b < a {
        bail!("--{flag}: max below min");
    }
    Ok((a, b))
}

pub fn sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<()> {
    let Loaded { net, .. } = load(cfg)?;
    let ids: Vec<u32> = match &args.nodes {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse().context("--nodes must be two bus ids"))
            .collect::<Result<_>>()?,
        None => net.generator_ids().into_iter().take(2).collect(),
    };
    let [a, b] = ids[..] else {
        bail!("sweep needs exactly two nodes");
    };
    let ra = range(&args.range_a, "range-a")?;
    let rb = match &args.range_b {
        Some(s) => range(s, "range-b")?,
        None => ra,
    };
    let axis = |bus_id, (min_mw, max_mw): (f64, f64)| SweepAxis {
        bus_id,
        min_mw,
        max_mw,
        points: args.points,
    };
    let (p_d, q_d) = net.nominal_demand();
    let raster = sweep_admissible_set(&net, [axis(a, ra), axis(b, rb)], &p_d, &q_d)?;
    let classes = [CellClass::Admissible, CellClass::Violation, CellClass::Nonconverged];
    for c in classes {
        println!("{:>13}: {}", c.as_str(), raster.count(c));
    }
    let idx: Vec<usize> = raster
        .cells
        .iter()
        .map(|c| classes.iter().position(|k| *k == c.class).unwrap())
        .collect();
    let svg = plot::raster(
        "Exact load-flow admissibility",
        &format!("p_g at bus {a} (MW)"),
        &format!("p_g at bus {b} (MW)"),
        ra,
        rb,
        (raster.rows, raster.cols),
        &idx,
        &[
            ("admissible", "#9ecae1"),
            ("violation", "#de2d26"),
            ("nonconverged", "#636363"),
        ],
    );
    let mut art = Artifacts::default();
    art.add("sweep.csv", move |p| Ok(io::write_sweep_csv(p, &raster)?));
    art.text("sweep.svg", svg);
    art.commit(&cfg.out())
}

fn rect_table(rects: &[&Hyperrectangle]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<14} {:>24}", "variant", "aggregate HC (MW)").unwrap();
    for r in rects {
        let (lo, hi) = r.aggregate();
        writeln!(s, "{:<14} {:>24}", r.variant.as_str(), format!("[{lo:.3}, {hi:.3}]")).unwrap();
    }
    writeln!(s).unwrap();
    write!(s, "{:>8}", "node").unwrap();
    for r in rects {
        write!(s, " {:>24}", r.variant.as_str()).unwrap();
    }
    writeln!(s).unwrap();
    for (i, id) in rects[0].node_ids.iter().enumerate() {
        write!(s, "{id:>8}").unwrap();
        for r in rects {
            write!(s, " {:>24}", format!("[{:.4}, {:.4}]", r.lower_mw[i], r.upper_mw[i])).unwrap();
        }
        writeln!(s).unwrap();
    }
    s
}

fn hc_csv(rects: Vec<Hyperrectangle>) -> impl FnOnce(&Path) -> Result<()> {
    move |p| {
        let mut s = format!(
            "# schema: dhc-hc v{}\nnode_id,scenario,variant,pg_minus_mw,pg_plus_mw\n",
            io::SCHEMA_VERSION
        );
        for r in &rects {
            for (i, id) in r.node_ids.iter().enumerate() {
                writeln!(
                    s,
                    "{id},{},{},{},{}",
                    r.scenario, r.variant, r.lower_mw[i], r.upper_mw[i]
                )
                .unwrap();
            }
        }
        std::fs::write(p, s)?;
        Ok(())
    }
}

pub fn hc(cfg: &RunConfig) -> Result<()> {
    let Loaded { net, mats } = load(cfg)?;
    let scenario = cfg.scenario_or("s1")?;
    let (p_d, q_d) = net.nominal_demand();
    let rects: Vec<Hyperrectangle> = [BoundVariant::Conservative, BoundVariant::Soc]
        .into_iter()
        .map(|v| solve_hc(&net, &mats, &p_d, &q_d, &scenario, v, opts(cfg)))
        .collect::<Result<_, _>>()?;
    println!("scenario {}, {} iteration(s)", scenario.name, cfg.iterations());
    print!("{}", rect_table(&rects.iter().collect::<Vec<_>>()));
    let mut art = Artifacts::default();
    art.add("hc.csv", hc_csv(rects.clone()));
    art.json("hc.json", rects);
    art.commit(&cfg.out())
}

fn run_dhc(
    cfg: &RunConfig,
    l: &Loaded,
    demand: &DemandSeries,
    scenario: &Scenario,
) -> Result<DhcSeries> {
    Ok(dhc_timeseries(
        &l.net,
        &l.mats,
        demand,
        scenario,
        cfg.variant()?,
        cfg.daytime()?,
        opts(cfg),
    )?)
}

#[derive(Serialize)]
struct DhcSummary {
    scenario: String,
    variant: BoundVariant,
    daytime: String,
    steps: usize,
    solved: usize,
    skipped: usize,
    failed: Vec<(String, String)>,
    aggregate_upper_mw: [f64; 2],
    aggregate_lower_mw: [f64; 2],
    zero_hc_node_steps: usize,
}

fn span(v: impl Iterator<Item = f64>) -> [f64; 2] {
    v.fold([f64::INFINITY, f64::NEG_INFINITY], |[a, b], x| [a.min(x), b.max(x)])
}

fn summarize(cfg: &RunConfig, s: &DhcSeries) -> Result<DhcSummary> {
    let solved: Vec<&Hyperrectangle> = s.solved().map(|(_, r)| r).collect();
    Ok(DhcSummary {
        scenario: s.scenario.clone(),
        variant: s.variant,
        daytime: cfg.daytime()?.to_string(),
        steps: s.steps.len(),
        solved: solved.len(),
        skipped: s
            .steps
            .iter()
            .filter(|x| matches!(x.outcome, StepOutcome::Skipped))
            .count(),
        failed: s
            .steps
            .iter()
            .filter_map(|x| match &x.outcome {
                StepOutcome::Failed(e) => Some((x.timestamp.to_rfc3339(), e.clone())),
                _ => None,
            })
            .collect(),
        aggregate_upper_mw: span(solved.iter().map(|r| r.aggregate().1)),
        aggregate_lower_mw: span(solved.iter().map(|r| r.aggregate().0)),
        zero_hc_node_steps: solved
            .iter()
            .flat_map(|r| r.upper_mw.iter())
            .filter(|v| **v < dhc_core::economics::ZERO_HC_MW)
            .count(),
    })
}

fn hours_since_start(s: &DhcSeries, t: &chrono::DateTime<chrono::FixedOffset>) -> f64 {
    (*t - s.steps[0].timestamp).num_seconds() as f64 / 3600.0
}

pub fn dhc(cfg: &RunConfig) -> Result<()> {
    let l = load(cfg)?;
    let d = demand(cfg, &l.net)?;
    let scenario = cfg.scenario_or("s1")?;
    let series = run_dhc(cfg, &l, &d, &scenario)?;
    let summary = summarize(cfg, &series)?;
    println!(
        "{} {}: {} solved, {} skipped, {} failed; aggregate upper HC [{:.3}, {:.3}] MW",
        summary.scenario,
        summary.variant,
        summary.solved,
        summary.skipped,
        summary.failed.len(),
        summary.aggregate_upper_mw[0],
        summary.aggregate_upper_mw[1]
    );
    let line = |f: fn(&Hyperrectangle) -> f64, label: &str| Series {
        label: label.into(),
        points: series
            .solved()
            .map(|(st, r)| (hours_since_start(&series, &st.timestamp), f(r)))
            .collect(),
    };
    let svg = plot::line_chart(
        &format!("Aggregate hosting capacity, {}", series.scenario),
        "hours since first step",
        "MW",
        &[
            line(|r| r.aggregate().1, "upper"),
            line(|r| r.aggregate().0, "lower"),
        ],
    );
    let mut art = Artifacts::default();
    art.json("dhc_summary.json", summary);
    art.text("dhc.svg", svg);
    art.add("dhc.csv", move |p| Ok(io::write_dhc_csv(p, &series)?));
    art.commit(&cfg.out())
}

pub fn fairness(cfg: &RunConfig) -> Result<()> {
    let l = load(cfg)?;
    let d = demand(cfg, &l.net)?;
    let scenario = cfg.scenario_or("s1")?;
    let series = run_dhc(cfg, &l, &d, &scenario)?;
    let report = fairness_report(&series)?;
    let finite = |v: &[f64]| v.iter().filter(|x| !x.is_nan()).cloned().collect::<Vec<_>>();
    let t = finite(&report.temporal_jfi);
    let s = finite(&report.spatial_jfi);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "{}: mean temporal JFI {:.4} over {} nodes, mean spatial JFI {:.4} over {} steps",
        report.scenario,
        mean(&t),
        t.len(),
        mean(&s),
        s.len()
    );
    let svg = plot::line_chart(
        &format!("Spatial fairness, {}", report.scenario),
        "hours since first step",
        "JFI of HC-to-demand ratio",
        &[Series {
            label: report.scenario.clone(),
            points: report
                .timestamps
                .iter()
                .zip(&report.spatial_jfi)
                .map(|(ts, j)| (hours_since_start(&series, ts), *j))
                .collect(),
        }],
    );
    let mut art = Artifacts::default();
    art.text("fairness.svg", svg);
    art.json("fairness.json", report.clone());
    art.group(&["temporal_jfi.csv", "spatial_jfi.csv"], move |dir| {
        Ok(io::write_fairness_csvs(
            dir.join("temporal_jfi.csv"),
            dir.join("spatial_jfi.csv"),
            &report,
        )?)
    });
    art.commit(&cfg.out())
}

pub fn economics(cfg: &RunConfig, args: &EconomicsArgs) -> Result<()> {
    let l = load(cfg)?;
    let d = demand(cfg, &l.net)?;
    let pv = io::read_pv_csv(cfg.pv()?)?;
    let moer = io::read_moer_csv(cfg.moer()?)?;
    let window = cfg.daytime()?;
    let shape = pv_shape(&pv, window)?;
    let grid = cfg.dc_grid()?;
    let prices = cfg.prices()?;
    let scenario = cfg.scenario_or("s1f2")?;
    let series = run_dhc(cfg, &l, &d, &scenario)?;
    let failed = series.failures();
    if failed > 0 {
        bail!("{failed} DHC steps failed; static limits would be undefined");
    }
    let limits = static_limits(&series)?;
    let base = base_profile(&limits, &shape);
    let common = match args.common_base.as_str() {
        "self" => None,
        "all" => {
            let mut best = base.total_mwh();
            for name in SCENARIO_NAMES.iter().filter(|n| **n != scenario.name) {
                let s = run_dhc(cfg, &l, &d, &Scenario::preset(name)?)?;
                if s.failures() == 0 {
                    best = best.min(base_profile(&static_limits(&s)?, &shape).total_mwh());
                }
            }
            Some(best)
        }
        other => bail!("--common-base must be 'all' or 'self', got '{other}'"),
    };
    let profile = DhcProfile::from_series(&series)?;
    let report = carbon_and_profit(
        &scenario.name,
        &profile,
        &shape,
        &base,
        &moer,
        &grid,
        prices,
        common,
    )?;
    print_economics(&report);
    let pct = |f: fn(&dhc_core::economics::CurvePoint) -> f64, label: &str| Series {
        label: label.into(),
        points: report.curves.iter().map(|c| (100.0 * c.dc, f(c))).collect(),
    };
    let energy = plot::line_chart(
        &format!("Additional and curtailed energy, {}", report.scenario),
        "capacity increase (%)",
        "% of base energy",
        &[
            pct(|c| c.e_add_pct, "E_add"),
            pct(|c| c.e_curt_pct, "E_curt"),
        ],
    );
    let np = plot::line_chart(
        &format!("Net profit, {}", report.scenario),
        "capacity increase (%)",
        "$k",
        &[pct(|c| c.np.map_or(f64::NAN, |v| v / 1000.0), "NP")],
    );
    let mut art = Artifacts::default();
    art.text("economics_energy.svg", energy);
    art.text("economics_np.svg", np);
    art.json("economics.json", report.clone());
    art.add("economics.csv", move |p| Ok(io::write_economics_csv(p, &report)?));
    art.commit(&cfg.out())
}

fn print_economics(r: &EconomicsReport) {
    println!(
        "{}: base {:.1} MWh (common {:.1}), asymptote {:.1} MWh, NP maximal at dc = {:.3}",
        r.scenario,
        r.e_base_mwh.iter().sum::<f64>(),
        r.common_base_mwh,
        r.asymptote_mwh.iter().sum::<f64>(),
        r.argmax_dc
    );
    if r.moer_gap_steps > 0 {
        println!("{} producing steps had no emission rate", r.moer_gap_steps);
    }
    println!(
        "{:>6} {:>10} {:>10} {:>9} {:>9} {:>12}",
        "dc", "E_add MWh", "E_curt MWh", "E_add %", "E_curt %", "NP $"
    );
    for c in &r.curves {
        println!(
            "{:>6.3} {:>10.1} {:>10.2} {:>9.2} {:>9.2} {:>12.0}",
            c.dc,
            c.e_add_total_mwh,
            c.e_curt_total_mwh,
            c.e_add_pct,
            c.e_curt_pct,
            c.np.unwrap_or(f64::NAN)
        );
    }
}

#[derive(Serialize)]
struct Validation {
    hyperrectangle: Hyperrectangle,
    audit: dhc_core::hc::AuditReport,
    slack: f64,
}

pub fn validate(cfg: &RunConfig, args: &ValidateArgs) -> Result<()> {
    let Loaded { net, mats } = load(cfg)?;
    let scenario = cfg.scenario_or("s1")?;
    let variant = cfg.variant()?;
    let (p_d, q_d) = net.nominal_demand();
    let rect = solve_hc(&net, &mats, &p_d, &q_d, &scenario, variant, opts(cfg))?;
    let audit = audit_hyperrectangle(&net, &rect, &p_d, &q_d, args.samples, cfg.seed(), args.slack)?;
    println!(
        "{} {}: {} samples, {} violations, {} nonconverged, worst excess {:.3e}",
        rect.scenario, rect.variant, audit.samples, audit.violations, audit.nonconverged, audit.worst_violation
    );
    let passed = audit.passed();
    let mut art = Artifacts::default();
    art.json(
        "validate.json",
        Validation {
            hyperrectangle: rect,
            audit,
            slack: args.slack,
        },
    );
    art.commit(&cfg.out())?;
    if !passed {
        bail!("hyperrectangle failed the admissibility audit");
    }
    Ok(())
}

pub fn mae(cfg: &RunConfig, args: &MaeArgs) -> Result<()> {
    let Loaded { net, mats } = load(cfg)?;
    let node = match args.node {
        Some(n) => n,
        None => *net
            .generator_ids()
            .first()
            .context("network has no generation nodes")?,
    };
    let (lo, hi) = range(&args.range, "range")?;
    let (p_d, q_d) = net.nominal_demand();
    let lin = linearize(&net, &p_d, &q_d)?;
    let rep = envelope_mae(&net, &mats, &lin, node, lo, hi, args.points)?;
    println!(
        "node {node}: mean |l - l+| soc {:.5} pu, conservative {:.5} pu",
        rep.mean_soc, rep.mean_conservative
    );
    let series = |f: fn(&dhc_core::hc::MaePoint) -> f64, label: &str| Series {
        label: label.into(),
        points: rep.points.iter().map(|p| (p.pg_mw, f(p))).collect(),
    };
    let svg = plot::line_chart(
        &format!("Upper current envelope error, injection at bus {node}"),
        "p_g (MW)",
        "mean |l - l+| (pu)",
        &[
            series(|p| p.mae_soc, "soc"),
            series(|p| p.mae_conservative, "conservative"),
        ],
    );
    let mut art = Artifacts::default();
    art.text("mae.svg", svg);
    art.json("mae.json", rep.clone());
    art.add("mae.csv", move |p| Ok(io::write_mae_csv(p, &rep)?));
    art.commit(&cfg.out())
}
