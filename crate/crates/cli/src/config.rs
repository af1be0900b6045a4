use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use engagetag::eval::GridConfig;
use engagetag::synthgen::GeneratorConfig;
use engagetag::tagger::Hyperparams;
use serde::{Deserialize, Serialize};

/// Artifact locations. Command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cg: Option<PathBuf>,
    pub fg: Option<PathBuf>,
    pub test_cg: Option<PathBuf>,
    pub test_fg: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
}

/// Corpus sizes written by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSizes {
    pub n_human: usize,
    pub n_engagement: usize,
    pub n_test: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            n_human: 1000,
            n_engagement: 2000,
            n_test: 500,
        }
    }
}

/// Grid shape. Hyperparameters come from `[hyper]`, the beam from `beam`
/// and the base seed from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub human_sizes: Vec<usize>,
    pub engagement_multipliers: Vec<usize>,
    pub engagement_unit_size: usize,
    pub n_seeds: usize,
    pub test_size: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        GridSection {
            human_sizes: g.human_sizes,
            engagement_multipliers: g.engagement_multipliers,
            engagement_unit_size: g.engagement_unit_size,
            n_seeds: g.n_seeds,
            test_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub beam: usize,
    /// Fuzzy-matching acceptance threshold for projection.
    pub threshold: f64,
    pub max_span_len: usize,
    /// Minimum listening time of a positive session, in milliseconds.
    pub positive_ms: u64,
    pub paths: Paths,
    pub hyper: Hyperparams,
    pub generator: GeneratorConfig,
    pub synth: SynthSizes,
    pub grid: GridSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            beam: 5,
            threshold: 0.8,
            max_span_len: 10,
            positive_ms: engagetag::engagement::DEFAULT_POSITIVE_THRESHOLD_MS,
            paths: Paths::default(),
            hyper: Hyperparams::default(),
            generator: GeneratorConfig::default(),
            synth: SynthSizes::default(),
            grid: GridSection::default(),
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub kb: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub beam: Option<usize>,
    pub threshold: Option<f64>,
    pub human_size: Option<usize>,
    pub engagement_mult: Option<usize>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies flags over file values. The seed is propagated to every
    /// seeded component.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        self.generator.seed = self.seed;
        self.hyper.seed = self.seed;
        if o.kb.is_some() {
            self.paths.kb = o.kb.clone();
        }
        if o.out.is_some() {
            self.paths.out = o.out.clone();
        }
        if let Some(beam) = o.beam {
            self.beam = beam;
        }
        if let Some(t) = o.threshold {
            self.threshold = t;
        }
        if let Some(h) = o.human_size {
            self.grid.human_sizes = vec![h];
        }
        if let Some(m) = o.engagement_mult {
            self.grid.engagement_multipliers = vec![m];
        }
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            human_sizes: self.grid.human_sizes.clone(),
            engagement_multipliers: self.grid.engagement_multipliers.clone(),
            engagement_unit_size: self.grid.engagement_unit_size,
            n_seeds: self.grid.n_seeds,
            base_seed: self.seed,
            beam: self.beam,
            hyper: self.hyper.clone(),
        }
    }
}

/// An input path that must exist before the command starts.
pub fn input(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => bail!("{what} {} does not exist", p.display()),
        None => bail!("no {what} given"),
    }
}

pub fn optional_input(path: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>> {
    path.as_ref().map(|_| input(path, what)).transpose()
}

pub fn output(path: &Option<PathBuf>) -> Result<PathBuf> {
    path.clone().context("no output path given (use --out)")
}
