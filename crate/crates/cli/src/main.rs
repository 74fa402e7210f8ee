use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use ctxinf::csm::{load_query_vectors, load_weights, EmbeddingProvider, EmbeddingStore, RemoteEmbedder};
use ctxinf::forge::{build_corpus, QueryDistinctness, Recompute, DEFAULT_DISTINCT_COSINE};
use ctxinf::gateway::{Gateway, GeneratorConfig, SimWorld, UtilityMode};
use ctxinf::harness::{
    curves_csv, eval_csv, run_curves, run_eval, run_spearman, score_dataset, select_dataset, spearman_csv, ScoreTable,
    Scorer, ScorerKind, SelectRule,
};
use ctxinf::simgen::{curve_fixture, generate, probe_model, SimSpec};
use ctxinf::valuation::value_sample;
use ctxinf::{jsonl, validate_dataset, Error, ErrorClass, Sample};
use rayon::prelude::*;
use tracing::info;

mod config;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "ctxinf",
    version,
    about = "Contextual influence valuation and context selection experiments"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute leave-one-out influence values for every sample.
    Value {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build the surrogate-model training corpus and its manifest.
    BuildDataset {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write one score per (sample, context) from the configured scorer.
    Score {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Select contexts per sample with the configured scorer.
    Select {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Keep the top k instead of every positively scored context.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Metric as a function of the number of kept contexts.
    Curves {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metric table over selection strategies.
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rank correlation between scorer output and oracle influence.
    Spearman {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Score file to compare; the configured scorer is used when absent.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a seeded simulated world, its samples, pair embeddings and a probe model.
    GenSim {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// additive or threshold.
        #[arg(long, default_value = "additive")]
        mode: String,
        /// Fixed-length threshold world for curve experiments.
        #[arg(long)]
        curve: bool,
        #[arg(long, default_value_t = 16)]
        embedding_dim: usize,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let class = err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::class);
            ExitCode::from(match class {
                Some(ErrorClass::Config) => 2,
                Some(ErrorClass::Gateway) => 3,
                Some(ErrorClass::Data) | None => 4,
            })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::GenSim {
        out_dir,
        samples,
        mode,
        curve,
        embedding_dim,
    } = &cli.command
    {
        let seed = cli.overrides.seed.unwrap_or(config::DEFAULT_SEED);
        return gen_sim(out_dir, *samples, mode, *curve, *embedding_dim, seed);
    }
    let cfg = RunConfig::load(&cli.overrides)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
        path: cfg.output_dir.clone(),
        source: e,
    })?;
    let valued = cfg.out("valued.jsonl");
    match cli.command {
        Command::Value { input, output } => {
            let input = input
                .or_else(|| cfg.dataset.clone())
                .ok_or_else(|| Error::Config("no dataset given".into()))?;
            let samples = load_samples(&input)?;
            let gateway = gateway(&cfg)?;
            let out: Vec<Sample> = samples
                .par_iter()
                .map(|s| value_sample(s, cfg.utility, &gateway))
                .collect::<ctxinf::Result<_>>()?;
            let stats = gateway.stats();
            info!(
                samples = out.len(),
                utility_calls = stats.utility_calls(),
                cache_hits = stats.cache_hits,
                "valued"
            );
            write_jsonl(&output.unwrap_or(valued), &out)
        }
        Command::BuildDataset {
            input,
            output,
            manifest,
        } => {
            let samples = load_samples(&input.unwrap_or(valued))?;
            let distinctness = match &cfg.query_vectors {
                Some(p) => QueryDistinctness::Embeddings {
                    vectors: load_query_vectors(p)?.into_iter().collect(),
                    threshold: DEFAULT_DISTINCT_COSINE,
                },
                None => QueryDistinctness::ClusterTags,
            };
            let gw = if cfg.forge.recompute {
                Some(gateway(&cfg)?)
            } else {
                None
            };
            let recompute = gw.as_ref().map(|g| Recompute {
                gateway: g,
                kind: cfg.utility,
            });
            let (records, man) = build_corpus(&samples, &cfg.forge, &distinctness, recompute)?;
            write_jsonl(&output.unwrap_or_else(|| cfg.out("corpus.jsonl")), &records)?;
            jsonl::write_json(&manifest.unwrap_or_else(|| cfg.out("manifest.json")), &man)?;
            Ok(())
        }
        Command::Score { input, output } => {
            let samples = load_samples(&input.unwrap_or(valued))?;
            let scorer = scorer(&cfg)?;
            write_jsonl(
                &output.unwrap_or_else(|| cfg.out("scores.jsonl")),
                &score_dataset(&samples, &scorer)?,
            )
        }
        Command::Select { input, output, k } => {
            let samples = load_samples(&input.unwrap_or(valued))?;
            let rule = k.map_or(SelectRule::Positive, SelectRule::TopK);
            let records = select_dataset(&samples, &scorer(&cfg)?, rule)?;
            write_jsonl(&output.unwrap_or_else(|| cfg.out("selections.jsonl")), &records)
        }
        Command::Curves { input, output } => {
            let samples = capped(load_samples(&input.unwrap_or(valued))?, cfg.max_samples);
            let report = run_curves(&samples, &gateway(&cfg)?, &scorer(&cfg)?, cfg.scorer.order, cfg.metric)?;
            let output = output.unwrap_or_else(|| cfg.out("curves.csv"));
            write_text(&output, &curves_csv(&report))?;
            jsonl::write_json(&output.with_extension("json"), &report)?;
            Ok(())
        }
        Command::Eval { input, output } => {
            let samples = capped(load_samples(&input.unwrap_or(valued))?, cfg.max_samples);
            let table = run_eval(
                &samples,
                &gateway(&cfg)?,
                &scorer(&cfg)?,
                cfg.metric,
                cfg.top_k,
                cfg.seed,
            )?;
            write_text(&output.unwrap_or_else(|| cfg.out("eval.csv")), &eval_csv(&table))
        }
        Command::Spearman { input, scores, output } => {
            let samples = load_samples(&input.unwrap_or(valued))?;
            let table = match scores {
                Some(p) => ScoreTable::load(&p)?,
                None => ScoreTable::from_records(score_dataset(&samples, &scorer(&cfg)?)?)?,
            };
            let report = run_spearman(&samples, &table)?;
            let output = output.unwrap_or_else(|| cfg.out("spearman.json"));
            jsonl::write_json(&output, &report)?;
            write_text(&output.with_extension("csv"), &spearman_csv(&report))
        }
        Command::GenSim { .. } => unreachable!("handled above"),
    }
}

fn load_samples(path: &Path) -> anyhow::Result<Vec<Sample>> {
    let samples: Vec<Sample> = jsonl::read(path)?;
    validate_dataset(samples).with_context(|| format!("validating {}", path.display()))
}

fn capped(mut samples: Vec<Sample>, max: usize) -> Vec<Sample> {
    samples.truncate(max);
    samples
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    jsonl::write(path, records)?;
    info!(path = %path.display(), records = records.len(), "wrote");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn gateway(cfg: &RunConfig) -> anyhow::Result<Gateway> {
    let world = match &cfg.world {
        Some(p) => Some(SimWorld::load(p)?),
        None => None,
    };
    Ok(Gateway::from_config(cfg.generator.clone(), world)?)
}

fn scorer(cfg: &RunConfig) -> anyhow::Result<Scorer> {
    let s = &cfg.scorer;
    let missing = |what: &str| Error::Config(format!("scorer {} requires {what}", s.kind.name()));
    Ok(match s.kind {
        ScorerKind::OracleCi => Scorer::OracleCi,
        ScorerKind::Random => Scorer::Random { seed: cfg.seed },
        ScorerKind::ExternalScoreFile => Scorer::External(ScoreTable::load(
            s.score_file.as_ref().ok_or_else(|| missing("score_file"))?,
        )?),
        ScorerKind::Csm => {
            let weights = load_weights(s.weights.as_ref().ok_or_else(|| missing("weights"))?)?;
            let provider = match (&s.embeddings, &s.embedding_endpoint) {
                (Some(p), _) => EmbeddingProvider::File(EmbeddingStore::load(p)?),
                (None, Some(endpoint)) => {
                    let remote = GeneratorConfig {
                        endpoint: Some(endpoint.clone()),
                        ..cfg.generator.clone()
                    };
                    EmbeddingProvider::Remote(RemoteEmbedder::new(&remote, &s.embedding_model, s.embedding_dim)?)
                }
                (None, None) => return Err(missing("embeddings or embedding_endpoint").into()),
            };
            Scorer::Csm {
                weights: Box::new(weights),
                provider,
            }
        }
    })
}

fn gen_sim(out_dir: &Path, samples: usize, mode: &str, curve: bool, dim: usize, seed: u64) -> anyhow::Result<()> {
    let mode = match mode {
        "additive" => UtilityMode::Additive,
        "threshold" => UtilityMode::Threshold,
        other => return Err(Error::Config(format!("unknown sim mode {other:?}")).into()),
    };
    let fixture = if curve {
        curve_fixture(samples, 10, seed)?
    } else {
        generate(&SimSpec {
            samples,
            mode,
            seed,
            ..SimSpec::default()
        })?
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    fixture.world.save(&out_dir.join("world.json"))?;
    jsonl::write(&out_dir.join("samples.jsonl"), &fixture.samples)?;
    let (embeddings, weights) = probe_model(&fixture, dim, 1.0 / 32.0, seed)?;
    jsonl::write(&out_dir.join("embeddings.jsonl"), &embeddings)?;
    weights.save(&out_dir.join("csm.csmw"))?;
    Ok(())
}
