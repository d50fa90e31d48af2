//! Regenerates the synthetic time-series fixtures (demand, PV, MOER).
//!
//! Usage: `cargo run -p dhc-core --example make_fixtures [out_dir]`

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, FixedOffset, TimeZone, Timelike};
use dhc_core::io::SCHEMA_VERSION;
use dhc_core::network::load_network;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20230601;
const LATITUDE: f64 = 44.5;
const LONGITUDE: f64 = -73.2;
const PANEL_KW: f64 = 0.33;

fn tz() -> FixedOffset {
    FixedOffset::west_opt(5 * 3600).unwrap()
}

fn start(y: i32, m: u32, d: u32) -> DateTime<FixedOffset> {
    tz().with_ymd_and_hms(y, m, d, 0, 0, 0).unwrap()
}

fn write(path: &Path, schema: &str, header: &str, body: &str) {
    let text = format!("# schema: {schema} v{SCHEMA_VERSION}\n{header}\n{body}");
    std::fs::write(path, text).unwrap();
    println!("wrote {}", path.display());
}

fn hours(t: &DateTime<FixedOffset>) -> f64 {
    t.hour() as f64 + t.minute() as f64 / 60.0
}

/// Residential daily shape: low night, morning shoulder, evening peak.
fn daily_shape(h: f64) -> f64 {
    let bump = |c: f64, w: f64| (-((h - c) / w).powi(2)).exp();
    0.75 + 0.35 * bump(8.0, 1.5) + 0.2 * bump(13.0, 3.0) + 0.85 * bump(19.0, 2.2)
}

fn demand(dir: &Path, rng: &mut ChaCha8Rng) {
    let net = load_network(dir.join("ieee37_mod.json")).unwrap();
    let nodes: Vec<(u32, f64)> = net
        .buses()
        .iter()
        .filter(|b| b.p_demand > 0.0)
        .map(|b| (b.id, b.p_demand * net.mw_per_pu() * 1000.0))
        .collect();
    let steps = 288;
    let t0 = start(2023, 6, 1);
    // node-specific phase shift and AR(1) noise
    let shift: Vec<f64> = nodes.iter().map(|_| rng.gen_range(-1.5..1.5)).collect();
    let mut noise = vec![0.0; nodes.len()];
    let mut raw = vec![vec![0.0; nodes.len()]; steps];
    for (s, row) in raw.iter_mut().enumerate() {
        let h = s as f64 * 5.0 / 60.0;
        for (i, (_, kw)) in nodes.iter().enumerate() {
            noise[i] = 0.9 * noise[i] + rng.gen_range(-0.06..0.06);
            let v = kw * daily_shape((h + shift[i]).rem_euclid(24.0)) * (1.0 + noise[i]);
            row[i] = v.max(0.2 * kw);
        }
    }
    // rescale so the aggregate spans 0.66 to 1.44 MW
    let agg: Vec<f64> = raw.iter().map(|r| r.iter().sum()).collect();
    let (lo, hi) = agg
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let mut body = String::new();
    for (s, row) in raw.iter().enumerate() {
        let target = 660.0 + (agg[s] - lo) / (hi - lo) * 780.0;
        let f = target / agg[s];
        let t = t0 + Duration::minutes(5 * s as i64);
        for (i, (id, _)) in nodes.iter().enumerate() {
            writeln!(body, "{},{},{:.3}", t.to_rfc3339(), id, row[i] * f).unwrap();
        }
    }
    write(
        &dir.join("demand_day.csv"),
        "dhc-demand",
        "timestamp,node_id,p_kw",
        &body,
    );
}

/// Cosine of the solar zenith angle at local standard time `t`.
fn cos_zenith(t: &DateTime<FixedOffset>) -> f64 {
    let doy = t.ordinal() as f64;
    let b = 2.0 * PI * (doy - 81.0) / 364.0;
    let eot_min = 9.87 * (2.0 * b).sin() - 7.53 * b.cos() - 1.5 * b.sin();
    let decl = (23.44f64).to_radians() * (2.0 * PI * (284.0 + doy) / 365.0).sin();
    let solar_h = hours(t) + (4.0 * (LONGITUDE + 75.0) + eot_min) / 60.0;
    let hour_angle = (15.0 * (solar_h - 12.0)).to_radians();
    let lat = LATITUDE.to_radians();
    lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos()
}

fn pv(dir: &Path, rng: &mut ChaCha8Rng) {
    let t0 = start(2023, 1, 1);
    let steps = 365 * 288;
    let mut body = String::with_capacity(steps * 36);
    let mut clear = 1.0;
    let mut cloud = 0.0;
    for s in 0..steps {
        let t = t0 + Duration::minutes(5 * s as i64);
        if s % 288 == 0 {
            clear = rng.gen_range(0.25f64..1.0).sqrt();
        }
        cloud = 0.92 * cloud + rng.gen_range(-0.05..0.05);
        let cz = cos_zenith(&t);
        let kw = if cz > 0.0 {
            let k = (clear + cloud).clamp(0.1, 1.0);
            PANEL_KW * 0.95 * cz.powf(1.15) * k
        } else {
            0.0
        };
        writeln!(body, "{},{:.5}", t.to_rfc3339(), kw).unwrap();
    }
    write(&dir.join("pv_year.csv"), "dhc-pv", "timestamp,p_kw", &body);
}

/// Hourly marginal emission rates in lbs/MWh; `gaps` hours are omitted.
fn moer(dir: &Path, name: &str, base: f64, swing: f64, gaps: usize, rng: &mut ChaCha8Rng) {
    let t0 = start(2023, 1, 1);
    let hours_in_year = 365 * 24;
    let mut missing = std::collections::BTreeSet::new();
    while missing.len() < gaps {
        let h = rng.gen_range(0..hours_in_year);
        let len = rng.gen_range(1..4);
        missing.extend(h..(h + len).min(hours_in_year));
    }
    let mut body = String::new();
    for h in 0..hours_in_year {
        let t = t0 + Duration::hours(h as i64);
        let day = (2.0 * PI * (hours(&t) - 18.0) / 24.0).cos();
        let season = (2.0 * PI * (t.ordinal() as f64 - 200.0) / 365.0).cos();
        let v = base + swing * (0.6 * day + 0.4 * season) + rng.gen_range(-0.1..0.1) * base;
        if !missing.contains(&h) {
            writeln!(body, "{},{:.1}", t.to_rfc3339(), v).unwrap();
        }
    }
    write(
        &dir.join(format!("moer_{name}.csv")),
        "dhc-moer",
        "timestamp,moer_lbs_per_mwh",
        &body,
    );
}

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    demand(&dir, &mut rng);
    pv(&dir, &mut rng);
    moer(&dir, "vt", 950.0, 150.0, 0, &mut rng);
    moer(&dir, "oh", 1550.0, 200.0, 8, &mut rng);
}
