//! Experiment configuration: a JSON document with namespaced sections,
//! patched by `--set key=value` overrides and seed flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use stress::acquisition::ScanProtocol;
use stress::metrics::SsimMode;
use stress::models::{BDNConfig, SRConfig};
use stress::motion::MotionStats;
use stress::phantom::PhantomSpec;
use stress::pipeline::StressConfig;
use stress::sampling::PatchGrid;
use stress::volume::DEFAULT_MASK_THRESHOLD;
use stress::{Error, Result};

pub const ECHO_FILE: &str = "config.echo.json";
pub const SEED_ENV: &str = "STRESS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every stage's inputs and outputs.
    pub work_dir: PathBuf,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub protocol: ScanProtocol,
    pub motion: MotionStats,
    pub simulation: SimulationSection,
    pub stress: StressSection,
    pub metrics: MetricsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("stress-run"),
            seed: 0,
            phantom: PhantomSpec::default(),
            protocol: ScanProtocol { stack_duration_s: 0.5, num_stacks: 8, ..ScanProtocol::default() },
            motion: MotionStats::default(),
            simulation: SimulationSection::default(),
            stress: StressSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Rician sigma as a fraction of the phantom maximum.
    pub noise_fraction: f32,
    /// Sampling interval of the synthesized trajectory.
    pub trajectory_dt_s: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { noise_fraction: 0.0, trajectory_dt_s: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressSection {
    pub context: Option<usize>,
    pub patch: PatchGrid,
    pub enable_bdn: bool,
    pub sr: SRConfig,
    pub bdn: BDNConfig,
    pub inference_batch: usize,
    /// Trailing frames excluded from training.
    pub held_out: usize,
}

impl Default for StressSection {
    fn default() -> Self {
        let desk = StressConfig::desk(ScanProtocol::default());
        Self {
            context: desk.context,
            patch: desk.patch,
            enable_bdn: desk.enable_bdn,
            sr: desk.sr,
            bdn: desk.bdn,
            inference_batch: desk.inference_batch,
            held_out: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSelection {
    HeldOut,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub ssim_mode: SsimMode,
    /// Foreground threshold as a fraction of the reference maximum.
    pub mask_threshold: f32,
    pub frames: FrameSelection,
    pub pck_thresholds_mm: Vec<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            ssim_mode: SsimMode::Volumetric,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            frames: FrameSelection::HeldOut,
            pck_thresholds_mm: (1..=10).map(f64::from).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn stress_config(&self) -> StressConfig {
        StressConfig {
            protocol: self.protocol.clone(),
            context: self.stress.context,
            patch: self.stress.patch,
            enable_bdn: self.stress.enable_bdn,
            sr: self.stress.sr.clone(),
            bdn: self.stress.bdn.clone(),
            seed: self.seed,
            inference_batch: self.stress.inference_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.motion.validate()?;
        self.stress_config().validate()?;
        if self.phantom.shape[2] != self.protocol.num_slices {
            return Err(Error::Config(format!(
                "phantom.shape z-extent {} differs from protocol.num_slices {}",
                self.phantom.shape[2], self.protocol.num_slices
            )));
        }
        if !(self.simulation.noise_fraction >= 0.0) || !self.simulation.noise_fraction.is_finite() {
            return Err(Error::Config("simulation.noise_fraction must be non-negative".into()));
        }
        if !(self.simulation.trajectory_dt_s > 0.0) || !self.simulation.trajectory_dt_s.is_finite() {
            return Err(Error::Config("simulation.trajectory_dt_s must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.metrics.mask_threshold) {
            return Err(Error::Config("metrics.mask_threshold must lie in [0, 1)".into()));
        }
        if self.metrics.pck_thresholds_mm.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("metrics.pck_thresholds_mm must be positive".into()));
        }
        Ok(())
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.work_dir.join(stage)
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ECHO_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Where the global seed comes from, highest priority first.
#[derive(Debug, Default, Clone)]
pub struct SeedSources {
    pub flag: Option<u64>,
    pub env: Option<String>,
}

/// Loads the config file (if any), applies `--set` overrides, then the seed
/// sources, and validates the result.
pub fn load(path: Option<&Path>, overrides: &[String], seeds: &SeedSources) -> Result<ExperimentConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    for item in overrides {
        apply_override(&mut doc, item)?;
    }
    let seed = match (seeds.flag, &seeds.env) {
        (Some(s), _) => Some(s),
        (None, Some(text)) => Some(
            text.trim().parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?,
        ),
        (None, None) => None,
    };
    if let Some(s) = seed {
        doc["seed"] = Value::from(s);
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(if path == "." { e.inner().to_string() } else { format!("{path}: {}", e.inner()) })
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets a dotted key to a value parsed as JSON, or as a plain string when it
/// is not valid JSON.
pub fn apply_override(doc: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {item:?}")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("invalid key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_patch_nested_keys() {
        let cfg = load(
            None,
            &["protocol.n_interleave=4".into(), "stress.sr.iterations=10".into(), "work_dir=/tmp/x".into()],
            &SeedSources::default(),
        )
        .unwrap();
        assert_eq!(cfg.protocol.n_interleave, 4);
        assert_eq!(cfg.stress.sr.iterations, 10);
        assert_eq!(cfg.work_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["protocol.bogus=1", "nonsense=2", "stress.sr.depth=3"] {
            assert!(matches!(load(None, &[bad.into()], &SeedSources::default()), Err(Error::Config(_))), "{bad}");
        }
        assert!(load(None, &["noequals".into()], &SeedSources::default()).is_err());
        assert!(load(None, &["protocol.n_interleave.x=1".into()], &SeedSources::default()).is_err());
    }

    #[test]
    fn seed_precedence() {
        let set = vec!["seed=5".to_string()];
        let env = Some("9".to_string());
        assert_eq!(load(None, &set, &SeedSources::default()).unwrap().seed, 5);
        assert_eq!(load(None, &set, &SeedSources { flag: None, env: env.clone() }).unwrap().seed, 9);
        assert_eq!(load(None, &set, &SeedSources { flag: Some(2), env }).unwrap().seed, 2);
        let bad = SeedSources { flag: None, env: Some("x".into()) };
        assert!(matches!(load(None, &[], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let r = load(None, &["protocol.num_slices=32".into()], &SeedSources::default());
        assert!(matches!(r, Err(Error::Config(_))));
        let r = load(None, &["protocol.n_interleave=\"two\"".into()], &SeedSources::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
