//! Run configuration: TOML file values overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use dhc_core::economics::Prices;
use dhc_core::hc::{BoundVariant, Scenario};
use dhc_core::series::DaytimeWindow;
use serde::Deserialize;

/// Options shared by every subcommand. Each may also be given as a key of
/// the same name (with underscores) in the `--config` file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Feeder description (JSON).
    #[arg(long, global = true)]
    pub network: Option<PathBuf>,
    /// Per-node demand CSV (timestamp,node_id,p_kw).
    #[arg(long, global = true)]
    pub demand: Option<PathBuf>,
    /// Reference PV panel CSV (timestamp,p_kw).
    #[arg(long, global = true)]
    pub pv: Option<PathBuf>,
    /// Marginal emission rate CSV (timestamp,moer_lbs_per_mwh).
    #[arg(long, global = true)]
    pub moer: Option<PathBuf>,
    /// s1, s2, s3, s4, s1f1 or s1f2.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// soc or conservative.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Fairness level of s1f1/s1f2, in [0, 1].
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Capacity increases as `start:stop:step` or a comma list of fractions.
    #[arg(long, global = true)]
    pub dc_grid: Option<String>,
    /// Curtailment price ($/kWh).
    #[arg(long, global = true)]
    pub lambda_curt: Option<f64>,
    /// Carbon price ($/tCO2).
    #[arg(long, global = true)]
    pub lambda_co2: Option<f64>,
    /// Daytime window `HH:MM-HH:MM`.
    #[arg(long, global = true)]
    pub daytime: Option<String>,
    /// Seed for Monte Carlo sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Maximum number of linearizations per solve.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
}

macro_rules! merge {
    ($flags:ident, $file:ident, $($f:ident),*) => {
        RunConfig { $($f: $flags.$f.or($file.$f)),* }
    };
}

impl RunConfig {
    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.network,
            &mut cfg.demand,
            &mut cfg.pv,
            &mut cfg.moer,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Flags win over file values.
    pub fn merged(self, file: RunConfig) -> RunConfig {
        let flags = self;
        merge!(
            flags,
            file,
            network,
            demand,
            pv,
            moer,
            scenario,
            variant,
            epsilon,
            dc_grid,
            lambda_curt,
            lambda_co2,
            daytime,
            seed,
            out,
            iterations
        )
    }

    fn existing(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        let p = path.clone().ok_or_else(|| anyhow!("missing --{flag}"))?;
        if !p.is_file() {
            bail!("--{flag}: {} does not exist", p.display());
        }
        Ok(p)
    }

    pub fn network(&self) -> Result<PathBuf> {
        Self::existing(&self.network, "network")
    }

    pub fn demand(&self) -> Result<PathBuf> {
        Self::existing(&self.demand, "demand")
    }

    pub fn pv(&self) -> Result<PathBuf> {
        Self::existing(&self.pv, "pv")
    }

    pub fn moer(&self) -> Result<PathBuf> {
        Self::existing(&self.moer, "moer")
    }

    pub fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn scenario_or(&self, default: &str) -> Result<Scenario> {
        let name = self.scenario.as_deref().unwrap_or(default);
        let s = Scenario::preset(name)?;
        Ok(match self.epsilon {
            Some(e) => s.with_epsilon(e)?,
            None => s,
        })
    }

    pub fn variant(&self) -> Result<BoundVariant> {
        Ok(self.variant.as_deref().unwrap_or("soc").parse()?)
    }

    pub fn daytime(&self) -> Result<DaytimeWindow> {
        match &self.daytime {
            Some(s) => Ok(DaytimeWindow::parse(s)?),
            None => Ok(DaytimeWindow::default()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn iterations(&self) -> usize {
        self.iterations.unwrap_or(1)
    }

    pub fn prices(&self) -> Result<Prices> {
        let d = Prices::default();
        let p = Prices {
            lambda_curt: self.lambda_curt.unwrap_or(d.lambda_curt),
            lambda_co2: self.lambda_co2.unwrap_or(d.lambda_co2),
            m_pv: d.m_pv,
        };
        if !(p.lambda_curt >= 0.0 && p.lambda_co2 >= 0.0) {
            bail!("prices must be nonnegative");
        }
        Ok(p)
    }

    pub fn dc_grid(&self) -> Result<Vec<f64>> {
        parse_grid(self.dc_grid.as_deref().unwrap_or("0:1:0.05"))
    }
}

/// `start:stop:step` (inclusive of `stop` up to rounding) or `a,b,c`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let num = |t: &str| -> Result<f64> {
        t.trim()
            .parse::<f64>()
            .with_context(|| format!("bad number '{t}' in --dc-grid"))
    };
    let grid: Vec<f64> = if s.contains(':') {
        let parts: Vec<f64> = s.split(':').map(num).collect::<Result<_>>()?;
        let [a, b, step] = parts[..] else {
            bail!("--dc-grid range must be start:stop:step");
        };
        if !(step > 0.0) || b < a {
            bail!("--dc-grid range needs step > 0 and stop >= start");
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| a + step * i as f64).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|v| !(*v >= 0.0)) || grid.windows(2).any(|w| w[1] < w[0]) {
        bail!("--dc-grid must be nonnegative and sorted");
    }
    Ok(grid)
}
