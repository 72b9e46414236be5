//! Per-run plumbing: input loading with hashes, the output directory, and
//! the manifest written next to the results.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use gaintuner_core::io::to_json_string;
use gaintuner_core::models::{self, Equilibrium};
use gaintuner_core::multibody::{parse_model, RobotModel};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Error that maps to exit code 2: the inputs were fine but the numerics
/// failed (infeasible, unstable, diverged).
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub struct Input {
    pub path: String,
    pub sha256: String,
}

pub struct Run {
    command: &'static str,
    out: PathBuf,
    inputs: Vec<Input>,
    outputs: Vec<String>,
    config: Value,
    started: Instant,
}

impl Run {
    pub fn new(command: &'static str, out: &Path, config: Value) -> anyhow::Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config,
            started: Instant::now(),
        })
    }

    fn record(&mut self, path: String, text: &str) {
        self.inputs.push(Input {
            path,
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        });
    }

    pub fn read(&mut self, path: &Path) -> anyhow::Result<String> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.record(path.display().to_string(), &text);
        Ok(text)
    }

    /// A model file path, or the name of a bundled model (`chain7`, `biped14`).
    pub fn model(&mut self, spec: &str) -> anyhow::Result<RobotModel> {
        let path = Path::new(spec);
        let text = if path.exists() {
            self.read(path)?
        } else {
            let text = match spec {
                "chain7" => models::CHAIN7_JSON,
                "biped14" => models::BIPED14_JSON,
                _ => bail!("model file {spec} not found (bundled models: chain7, biped14)"),
            };
            self.record(format!("builtin:{spec}"), text);
            text.to_string()
        };
        parse_model(&text).with_context(|| format!("parsing model {spec}"))
    }

    /// The equilibrium file, falling back to the bundled posture of a
    /// bundled model.
    pub fn equilibrium(&mut self, model_spec: &str, path: Option<&Path>, model: &RobotModel) -> anyhow::Result<Equilibrium> {
        let eq = match path {
            Some(p) => {
                let text = self.read(p)?;
                models::parse_equilibrium(&text).with_context(|| format!("parsing equilibrium {}", p.display()))?
            }
            None => {
                let text = match model_spec {
                    "chain7" if !Path::new(model_spec).exists() => models::CHAIN7_EQ_JSON,
                    "biped14" if !Path::new(model_spec).exists() => models::BIPED14_EQ_JSON,
                    _ => bail!("--equilibrium is required for model {model_spec}"),
                };
                self.record(format!("builtin:{model_spec}_eq"), text);
                models::parse_equilibrium(text)?
            }
        };
        eq.check(model)?;
        Ok(eq)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> anyhow::Result<()> {
        let text = to_json_string(value)?;
        self.write(name, &text)
    }

    /// Writes `manifest.json`; called on success and on numeric failure.
    pub fn finish(self, status: &str) -> anyhow::Result<()> {
        let inputs: Vec<Value> = self
            .inputs
            .iter()
            .map(|i| json!({"path": i.path, "sha256": i.sha256}))
            .collect();
        let manifest = json!({
            "command": self.command,
            "status": status,
            "inputs": inputs,
            "outputs": self.outputs,
            "config": self.config,
            "version": env!("CARGO_PKG_VERSION"),
            "wall_time_s": self.started.elapsed().as_secs_f64(),
        });
        let path = self.out.join("manifest.json");
        fs::write(&path, to_json_string(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
