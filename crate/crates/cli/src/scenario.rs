//! Scenario files: a TOML table naming a blueprint plus optional overrides.
//! Anything left out takes the simulator's default.
//!
//! ```toml
//! blueprint = "pyramid316.txt"
//! agents = 4
//! seed = 2
//! max_ticks = 500000
//! division_extent = 5
//! feed = { periodic = { interval = 120 } }
//!
//! [costs]
//! step_ms = 40000
//!
//! [latency]
//! per_hop_ms = 500
//!
//! [geometry]
//! block_side = 3.0
//!
//! [[failures]]
//! tick = 20000
//! cell = [1, 1, 0]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use smac_core::kinematics::derive_link_lengths;
use smac_core::{parse_blueprint, Blueprint, Face, FaceDir, FeedSchedule, GridCoord, Scenario};

/// Directory searched for relative paths that do not exist as given.
pub const FIXTURES_ENV: &str = "SMAC_FIXTURES";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub blueprint: PathBuf,
    #[serde(default = "one")]
    pub agents: usize,
    #[serde(default)]
    pub seed: u64,
    pub max_ticks: Option<u64>,
    pub division_extent: Option<u32>,
    pub feed: Option<FeedSchedule>,
    #[serde(default)]
    pub costs: CostsSection,
    #[serde(default)]
    pub latency: LatencySection,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub failures: Vec<FailureEntry>,
    pub start_faces: Option<Vec<StartFace>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsSection {
    pub step_ms: Option<u64>,
    pub engage_ms: Option<u64>,
    pub disengage_ms: Option<u64>,
    pub pick_ms: Option<u64>,
    pub place_ms: Option<u64>,
    pub tick_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    pub per_hop_ms: Option<u64>,
    pub heartbeat_period_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub block_side: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEntry {
    pub tick: u64,
    pub cell: [i32; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartFace {
    pub cell: [i32; 3],
    pub dir: String,
}

fn coord([x, y, z]: [i32; 3]) -> GridCoord {
    GridCoord::new(x, y, z)
}

/// Finds `path`, relative to `base` if given, falling back to the fixture
/// directory.
pub fn resolve(path: &Path, base: Option<&Path>) -> Result<PathBuf> {
    if path.is_absolute() {
        return Ok(path.to_path_buf());
    }
    let first = base.map_or_else(|| path.to_path_buf(), |b| b.join(path));
    if first.exists() {
        return Ok(first);
    }
    if let Some(dir) = std::env::var_os(FIXTURES_ENV) {
        let alt = Path::new(&dir).join(path);
        if alt.exists() {
            return Ok(alt);
        }
    }
    bail!("file not found: {}", first.display())
}

pub fn load_blueprint(path: &Path) -> Result<Blueprint> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_blueprint(&text).with_context(|| format!("parsing {}", path.display()))
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn into_scenario(self, base: Option<&Path>) -> Result<Scenario> {
        let bp = load_blueprint(&resolve(&self.blueprint, base)?)?;
        let mut s = Scenario::new(bp, self.agents);
        s.rng_seed = self.seed;
        if let Some(t) = self.max_ticks {
            s.max_ticks = t;
        }
        if let Some(e) = self.division_extent {
            s.division_extent = e;
        }
        if let Some(f) = self.feed {
            s.feed_schedule = f;
        }
        let c = &mut s.action_costs;
        let k = self.costs;
        c.step_ms = k.step_ms.unwrap_or(c.step_ms);
        c.engage_ms = k.engage_ms.unwrap_or(c.engage_ms);
        c.disengage_ms = k.disengage_ms.unwrap_or(c.disengage_ms);
        c.pick_ms = k.pick_ms.unwrap_or(c.pick_ms);
        c.place_ms = k.place_ms.unwrap_or(c.place_ms);
        c.tick_ms = k.tick_ms.unwrap_or(c.tick_ms);
        s.latency.per_hop_ms = self.latency.per_hop_ms.unwrap_or(s.latency.per_hop_ms);
        s.latency.heartbeat_period_ms = self.latency.heartbeat_period_ms.unwrap_or(s.latency.heartbeat_period_ms);
        if let Some(side) = self.geometry.block_side {
            s.geometry = derive_link_lengths(side)?;
        }
        s.failure_injections = self.failures.into_iter().map(|f| (f.tick, coord(f.cell))).collect();
        if let Some(faces) = self.start_faces {
            let faces = faces
                .into_iter()
                .map(|f| match FaceDir::parse(&f.dir) {
                    Some(d) => Ok(Face::new(coord(f.cell), d)),
                    None => bail!("unknown face direction {:?}", f.dir),
                })
                .collect::<Result<Vec<_>>>()?;
            s.agent_start_faces = Some(faces);
        }
        Ok(s)
    }
}

/// Loads a scenario file, or wraps a bare blueprint file in default settings.
pub fn load(path: &Path) -> Result<Scenario> {
    let path = resolve(path, None)?;
    if path.extension().is_some_and(|e| e == "toml") {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file = ScenarioFile::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        file.into_scenario(path.parent())
    } else {
        Ok(Scenario::new(load_blueprint(&path)?, 1))
    }
}
