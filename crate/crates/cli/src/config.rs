//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! env.name = grid_circle
//! env.size = 7
//! dataset.size = 100
//! dataset.behaviors = [{"kind": "ring", "weight": 1.0}]
//! seeds = [0, 1]
//! ```
//!
//! Keys are dotted paths into the resolved configuration. Values are JSON
//! literals; anything that does not parse as JSON is taken as a bare
//! string. `env.name` is required and selects the environment defaults.

use std::fmt::Write as _;
use std::path::PathBuf;

use saferl_core::cmdp::{GridConfig, PointConfig};
use saferl_core::experiment::{EnvConfig, PipelineConfig, Variant};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Keys owned by `variant` rather than set directly.
const DERIVED: [&str; 2] = ["sac.controller", "sac.init"];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `desk` uses the small-network presets, `full` the full-size defaults.
    pub preset: String,
    pub pipeline: PipelineConfig,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub probes: usize,
    /// Monte-Carlo rollouts per probe where no exact oracle exists.
    pub rollouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 5,
            probes: 64,
            rollouts: 10,
        }
    }
}

struct Line {
    no: usize,
    key: String,
    raw: String,
}

fn parse_lines(text: &str) -> Result<Vec<Line>, CliError> {
    let mut out: Vec<Line> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|l| l.key == key) {
            return Err(CliError::Config(format!("line {}: duplicate key '{key}'", i + 1)));
        }
        out.push(Line {
            no: i + 1,
            key,
            raw: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn literal(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn base_pipeline(env: &str, preset: &str) -> Result<PipelineConfig, CliError> {
    let mut p = match (env, preset) {
        ("grid_circle", "desk") => return Ok(PipelineConfig::grid_preset()),
        ("point_circle", "desk") => return Ok(PipelineConfig::point_preset()),
        ("grid_circle", "full") => PipelineConfig {
            env: EnvConfig::GridCircle(GridConfig::default()),
            ..PipelineConfig::default()
        },
        ("point_circle", "full") => PipelineConfig {
            env: EnvConfig::PointCircle(PointConfig::default()),
            ..PipelineConfig::default()
        },
        (_, "desk" | "full") => {
            return Err(CliError::Config(format!(
                "env.name: unknown environment '{env}' (expected grid_circle or point_circle)"
            )))
        }
        _ => return Err(CliError::Config(format!("preset: unknown preset '{preset}' (expected desk or full)"))),
    };
    if env == "point_circle" {
        p.dataset.behaviors = PipelineConfig::point_preset().dataset.behaviors;
    }
    Ok(p)
}

fn set_path(root: &mut Value, key: &str, val: Value) -> Result<(), CliError> {
    if DERIVED.iter().any(|d| key == *d || key.starts_with(&format!("{d}."))) {
        return Err(CliError::Config(format!("unknown key '{key}' (set by 'variant')")));
    }
    let unknown = || CliError::Config(format!("unknown key '{key}'"));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        cur = cur.get_mut(*p).filter(|v| v.is_object()).ok_or_else(unknown)?;
    }
    let slot = cur
        .as_object_mut()
        .and_then(|m| m.get_mut(parts[parts.len() - 1]))
        .ok_or_else(unknown)?;
    if slot.is_object() {
        return Err(CliError::Config(format!("key '{key}' is a section; set its fields instead")));
    }
    *slot = val;
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if DERIVED.contains(&key.as_str()) {
                    continue;
                }
                flatten(&key, x, out);
            }
        }
        Value::String(s) if literal(s) == *v => out.push((prefix.to_string(), s.clone())),
        _ => out.push((prefix.to_string(), v.to_string())),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let lines = parse_lines(text)?;
        let get = |k: &str| lines.iter().find(|l| l.key == k);
        let env = get("env.name").ok_or_else(|| CliError::Config("missing required key 'env.name'".into()))?;
        let env_name = literal(&env.raw);
        let env_name = env_name.as_str().unwrap_or(&env.raw);
        let preset = get("preset").map(|l| l.raw.as_str()).unwrap_or("desk").to_string();
        let mut cfg = Self {
            pipeline: base_pipeline(env_name, &preset)?,
            preset,
            variant: Variant::Full,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs"),
            eval: EvalConfig::default(),
        };
        let mut tree = serde_json::to_value(&cfg.pipeline).expect("config serializes");
        let mut eval = serde_json::to_value(&cfg.eval).expect("config serializes");
        for l in &lines {
            let at = |e: CliError| CliError::Config(format!("line {}: {e}", l.no));
            match l.key.as_str() {
                "env.name" | "preset" => {}
                "variant" => cfg.variant = Variant::from_name(&l.raw).map_err(|e| at(CliError::Config(e.to_string())))?,
                "seeds" => {
                    cfg.seeds = serde_json::from_value(literal(&l.raw))
                        .map_err(|e| at(CliError::Config(format!("seeds: {e}"))))?;
                }
                "out" => cfg.out = PathBuf::from(&l.raw),
                k if k.starts_with("eval.") => set_path(&mut eval, &k[5..], literal(&l.raw))
                    .map_err(|_| at(CliError::Config(format!("unknown key '{k}'"))))?,
                k => set_path(&mut tree, k, literal(&l.raw)).map_err(at)?,
            }
        }
        if cfg.seeds.is_empty() {
            return Err(CliError::Config("seeds: need at least one seed".into()));
        }
        cfg.pipeline = serde_json::from_value(tree).map_err(|e| CliError::Config(format!("invalid value: {e}")))?;
        cfg.eval = serde_json::from_value(eval).map_err(|e| CliError::Config(format!("invalid value: {e}")))?;
        Ok(cfg)
    }

    /// Fully resolved configuration, one sorted `key = value` line per field.
    pub fn to_text(&self) -> String {
        let mut pairs = Vec::new();
        flatten("", &serde_json::to_value(&self.pipeline).expect("config serializes"), &mut pairs);
        flatten("eval", &serde_json::to_value(&self.eval).expect("config serializes"), &mut pairs);
        pairs.push(("preset".into(), self.preset.clone()));
        pairs.push(("variant".into(), self.variant.name().into()));
        pairs.push(("seeds".into(), Value::from(self.seeds.clone()).to_string()));
        pairs.push(("out".into(), self.out.display().to_string()));
        pairs.sort();
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the resolved text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn c_th(&self) -> f64 {
        match &self.pipeline.env {
            EnvConfig::GridCircle(c) => c.cost_threshold,
            EnvConfig::PointCircle(c) => c.cost_threshold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(text: &str) -> Vec<String> {
        text.lines().filter_map(|l| l.split_once(" = ").map(|(k, _)| k.to_string())).collect()
    }

    fn grid(extra: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::parse(&format!("env.name = grid_circle\n{extra}"))
    }

    #[test]
    fn missing_env_names_the_key() {
        let err = ExperimentConfig::parse("dataset.size = 100\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("env.name"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["dataset.sizes = 3", "cpq.psi.x = 1", "bogus = 1", "eval.nope = 2", "sac.controller = 1"] {
            let err = grid(bad).unwrap_err();
            assert!(err.to_string().contains("unknown key"), "{bad}: {err}");
        }
        assert!(grid("dataset = 3").is_err());
        assert!(grid("dataset.size = -4").is_err());
        assert!(grid("no equals sign").is_err());
        assert!(ExperimentConfig::parse("env.name = mars\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = grid("dataset.size = 100\ncpq.l = 0.5\nseeds = [3]\nvariant = warm_start\neval.episodes = 1\n").unwrap();
        assert_eq!(c.pipeline.dataset.size, 100);
        assert_eq!(c.pipeline.cpq.l, Some(0.5));
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.variant, Variant::WarmStart);
        assert_eq!(c.eval.episodes, 1);
        assert_eq!(c.c_th(), 2.0);
    }

    #[test]
    fn round_trip_is_idempotent() {
        for src in [
            "env.name = grid_circle\n",
            "env.name = point_circle\npreset = full\ncpq.l = 0.2\n",
            "env.name = point_circle\nout = a dir/with space\n",
        ] {
            let c = ExperimentConfig::parse(src).unwrap();
            let text = c.to_text();
            let again = ExperimentConfig::parse(&text).unwrap();
            assert_eq!(again, c);
            assert_eq!(again.to_text(), text);
            assert_eq!(again.hash(), c.hash());
            assert!(!keys(&text).iter().any(|k| k.starts_with("sac.controller")));
        }
    }

    #[test]
    fn hash_tracks_content() {
        assert_ne!(grid("").unwrap().hash(), grid("dataset.size = 10").unwrap().hash());
    }
}
