use std::path::{Path, PathBuf};

use clap::Args;
use ctxinf::forge::ForgeConfig;
use ctxinf::gateway::GeneratorConfig;
use ctxinf::harness::{Order, ScorerKind};
use ctxinf::metrics::MetricKind;
use ctxinf::valuation::UtilityKind;
use ctxinf::Error;
use serde::Deserialize;

pub const DEFAULT_SEED: u64 = 2024;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub order: Order,
    /// `.csmw` weights for the `csm` scorer.
    pub weights: Option<PathBuf>,
    /// Pair embedding file for the `csm` scorer.
    pub embeddings: Option<PathBuf>,
    /// Remote embedding endpoint, used when no embedding file is given.
    pub embedding_endpoint: Option<String>,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub score_file: Option<PathBuf>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::OracleCi,
            order: Order::Descending,
            weights: None,
            embeddings: None,
            embedding_endpoint: None,
            embedding_model: "text-embedding-3-small".into(),
            embedding_dim: 768,
            score_file: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub utility: UtilityKind,
    pub metric: MetricKind,
    pub top_k: usize,
    /// Curves and evaluation use only the first this-many samples.
    pub max_samples: usize,
    /// World file for the simulated backend.
    pub world: Option<PathBuf>,
    /// Query vectors (`{"query_id","vector"}` lines) for donor distinctness; cluster tags otherwise.
    pub query_vectors: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub scorer: ScorerConfig,
    pub forge: ForgeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: PathBuf::from("out"),
            seed: DEFAULT_SEED,
            utility: UtilityKind::CrossEntropy,
            metric: MetricKind::ExactMatch,
            top_k: 5,
            max_samples: 1000,
            world: None,
            query_vectors: None,
            generator: GeneratorConfig::default(),
            scorer: ScorerConfig::default(),
            forge: ForgeConfig::default(),
        }
    }
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub world: Option<PathBuf>,
    /// oracle-ci, csm, external-score-file or random.
    #[arg(long, global = true)]
    pub scorer: Option<String>,
    /// descending or ascending.
    #[arg(long, global = true)]
    pub order: Option<String>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    /// em, f1 or acc.
    #[arg(long, global = true)]
    pub metric: Option<String>,
    /// cross-entropy or a metric name.
    #[arg(long, global = true)]
    pub utility: Option<String>,
    #[arg(long, global = true)]
    pub max_samples: Option<usize>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub score_file: Option<PathBuf>,
}

fn enum_value<T: for<'de> Deserialize<'de>>(flag: &str, value: &str) -> Result<T, Error> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(value))
        .map_err(|_| Error::Config(format!("invalid value {value:?} for --{flag}")))
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Config file (if any) with relative paths resolved against its directory, then flag overrides.
    pub fn load(flags: &Overrides) -> Result<Self, Error> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let base = path.parent().unwrap_or(Path::new("."));
                resolve(base, &mut cfg.dataset);
                resolve(base, &mut cfg.world);
                resolve(base, &mut cfg.query_vectors);
                resolve(base, &mut cfg.scorer.weights);
                resolve(base, &mut cfg.scorer.embeddings);
                resolve(base, &mut cfg.scorer.score_file);
                resolve(base, &mut cfg.generator.cache_dir);
                if cfg.output_dir.is_relative() {
                    cfg.output_dir = base.join(&cfg.output_dir);
                }
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &flags.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &flags.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(v) = &flags.world {
            cfg.world = Some(v.clone());
        }
        if let Some(v) = &flags.scorer {
            cfg.scorer.kind = enum_value("scorer", v)?;
        }
        if let Some(v) = &flags.order {
            cfg.scorer.order = enum_value("order", v)?;
        }
        if let Some(v) = flags.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = &flags.metric {
            cfg.metric = v.parse()?;
        }
        if let Some(v) = &flags.utility {
            cfg.utility = v.parse()?;
        }
        if let Some(v) = flags.max_samples {
            cfg.max_samples = v;
        }
        if let Some(v) = &flags.cache_dir {
            cfg.generator.cache_dir = Some(v.clone());
        }
        if let Some(v) = &flags.score_file {
            cfg.scorer.score_file = Some(v.clone());
        }
        // one seed drives every stage
        cfg.forge.seed = cfg.seed;
        cfg.generator.validate()?;
        if cfg.max_samples == 0 {
            return Err(Error::Config("max_samples must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}
