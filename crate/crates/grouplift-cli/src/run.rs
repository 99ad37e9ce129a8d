//! Run configuration, run manifests and dataset loading shared by the commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grouplift::diffusion::{SamplerConfig, SigmaMode};
use grouplift::model::ModelConfig;
use grouplift::pose::{load_scene, Scene};
use grouplift::synthdata::{DatasetManifest, SynthConfig, DATASET_MANIFEST};
use grouplift::tracking::TrackerConfig;
use grouplift::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub split_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { count: 25, split_ratio: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Maximum joints hidden per (frame, person) in `eval` and `ablate`.
    pub occlusion: usize,
    pub levels: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { occlusion: 0, levels: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Extra (n_sup, n_sub) rows trained with the full model.
    pub grid: Vec<(usize, usize)>,
}

/// Everything a command may read from `--config`. Missing sections take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub synth: SynthConfig,
    pub dataset: DatasetConfig,
    pub tracker: TrackerConfig,
    pub evaluation: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// One seed drives every seeded component.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.train.seed = s;
            self.sampler.seed = s;
            self.synth.seed = s;
        }
    }

    pub fn apply_sampler(&mut self, flags: &SamplerFlags) -> Result<()> {
        if let Some(h) = flags.hypotheses {
            self.sampler.hypotheses = h;
        }
        if let Some(k) = flags.steps {
            self.sampler.inference_steps = k;
        }
        if let Some(s) = &flags.sigma {
            self.sampler.sigma_mode = s.parse::<SigmaMode>()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_string(self)?.as_bytes())))
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SamplerFlags {
    /// Hypotheses drawn per scene.
    #[arg(long)]
    pub hypotheses: Option<usize>,
    /// DDIM inference steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sampler noise: det or stoch.
    #[arg(long, value_parser = ["det", "stoch"])]
    pub sigma: Option<String>,
}

/// Record written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub timestamp: String,
}

/// Collects outputs of one command and writes its manifest once they are
/// all present.
pub struct Run {
    pub command: &'static str,
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(command: &'static str, config: RunConfig, seed: Option<u64>, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run { command, config, seed, out: out.to_path_buf(), inputs: Vec::new(), outputs: Vec::new() })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
        self.output(path.clone());
        Ok(path)
    }

    /// Checks every output and writes the manifest.
    pub fn finish(self) -> Result<PathBuf> {
        for p in &self.outputs {
            let meta = fs::metadata(p).with_context(|| format!("output {} missing", p.display()))?;
            if meta.len() == 0 {
                bail!("output {} is empty", p.display());
            }
            if p.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(p)?;
                serde_json::from_str::<serde_json::Value>(&text).with_context(|| format!("output {} is not valid JSON", p.display()))?;
            }
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            config_hash: self.config.hash()?,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.out.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Training and test scenes of a dataset directory written by `generate`.
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut data = Dataset { train: Vec::new(), test: Vec::new() };
    for entry in &manifest.scenes {
        let scene = load_scene(dir.join(&entry.file))?;
        match entry.split.as_str() {
            "train" => data.train.push(scene),
            "test" => data.test.push(scene),
            other => bail!("unknown split `{other}` in {}", path.display()),
        }
    }
    Ok(data)
}

/// Scene files at `path`: the file itself, or every `.json` file of a directory, sorted.
pub fn scene_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != RUN_MANIFEST && n != DATASET_MANIFEST))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no scene files in {}", path.display());
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Parses `0,1,2` or inclusive ranges such as `0..4`.
pub fn parse_levels(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
                if a > b {
                    bail!("empty level range `{part}`");
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().with_context(|| format!("bad level `{part}`"))?),
        }
    }
    if out.is_empty() {
        bail!("no occlusion levels given");
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Parses `12:0,6:6` into (n_sup, n_sub) pairs.
pub fn parse_grid(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (a, b) = pair.split_once(':').with_context(|| format!("grid entry `{pair}` is not SUP:SUB"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}
