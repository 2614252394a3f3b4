use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use phier::oracle::{
    llm_relations, tree_relations, CommandTransport, PredicateName, PredicateTree, DEFAULT_PREDICATES, LLM_CMD_ENV,
};
use phier::scenes::{default_manifest, generate_dataset, load_dataset, save_dataset, Dataset, DatasetManifest};
use phier::trainer::{
    adapt_few_shot, build_relations, embed_tree, evaluate, export_embeddings, ladder_table, run_ablation_ladder,
    test_examples, train, write_svg, Checkpoint, RunConfig, TrainError, TreeEmbeddingConfig,
};

#[derive(Parser)]
#[command(name = "phier", version, about = "Predicate-hierarchy state classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Dataset manifest to use instead of the default one.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Fill a relation cache for a predicate set.
    Relations {
        #[command(flatten)]
        common: Common,
        /// Comma-separated predicate names; the default twelve when omitted.
        #[arg(long, value_delimiter = ',')]
        predicates: Vec<String>,
        #[arg(long, value_enum, default_value = "tree")]
        oracle: OracleArg,
        /// Command that reads a prompt on stdin and writes the reply to stdout.
        #[arg(long, env = LLM_CMD_ENV)]
        transport: Option<String>,
        #[arg(long)]
        cache: PathBuf,
        /// Dataset whose query texts name the predicates in prompts.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a model and evaluate it on the test splits.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the metrics report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Few-shot adaptation on the novel predicates.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the five-row ablation ladder.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write every row as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export head embeddings, or embed the predicate tree directly.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "tree")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Embed the default predicate tree with free points instead.
        #[arg(long, conflicts_with = "ckpt")]
        tree: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Tree,
    Llm,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Id,
    Ood,
    All,
    Train,
}

/// Failures split by exit code: 1 for invalid input, 2 for runtime errors.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Invalid(e.into()),
            e => Failure::Runtime(e.into()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(anyhow!(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::Invalid)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display())).map_err(Failure::Invalid)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn echo(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate()?;
    log::info!("config {}", serde_json::to_string(cfg).expect("config serializes"));
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    Ok(())
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.data_dir.clone()).ok_or_else(|| invalid("no dataset: pass --data or set data_dir"))
}

fn load(dir: &Path) -> Result<Dataset, Failure> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())).map_err(Failure::Runtime)
}

fn select(d: &Dataset, split: SplitArg) -> Vec<phier::scenes::Example> {
    match split {
        SplitArg::Id => d.test_id.clone(),
        SplitArg::Ood => d.test_ood.clone(),
        SplitArg::All => test_examples(d),
        SplitArg::Train => d.train.clone(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { common, out, manifest, force } => {
            let cfg = resolve(&common)?;
            echo(&cfg)?;
            let manifest: DatasetManifest = match manifest {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))
                        .map_err(Failure::Invalid)?;
                    let mut m: DatasetManifest =
                        serde_json::from_str(&text).context("parsing manifest").map_err(Failure::Invalid)?;
                    if let Some(s) = common.seed {
                        m.seed = s;
                    }
                    m
                }
                None => default_manifest(cfg.seed),
            };
            if !force && out.is_dir() && fs::read_dir(&out).map_err(anyhow::Error::from)?.next().is_some() {
                return Err(invalid(format!("{} is not empty; pass --force to overwrite", out.display())));
            }
            let d = generate_dataset(&manifest, cfg.exec).context("generating dataset")?;
            save_dataset(&d, &out).context("writing dataset")?;
            println!("{:<34}{:>10}{:>8}{:>8}", "state", "split", "true", "false");
            for c in &d.manifest.counts {
                println!("{:<34}{:>10}{:>8}{:>8}", c.state, c.split, c.positives, c.negatives);
            }
            println!("digest {}", phier::scenes::dataset_digest(&d));
            Ok(())
        }
        Command::Relations { common, predicates, oracle, transport, cache, data } => {
            let cfg = resolve(&common)?;
            echo(&cfg)?;
            let names: Vec<&str> = if predicates.is_empty() {
                DEFAULT_PREDICATES.to_vec()
            } else {
                predicates.iter().map(String::as_str).collect()
            };
            let preds = names
                .iter()
                .map(|n| PredicateName::new(*n))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Invalid(e.into()))?;
            let out = match oracle {
                OracleArg::Tree => {
                    let c = tree_relations(&PredicateTree::default_tree(), &preds, cfg.seed)
                        .map_err(|e| Failure::Invalid(e.into()))?;
                    c.save(&cache).context("writing cache")?;
                    c
                }
                OracleArg::Llm => {
                    let command =
                        transport.ok_or_else(|| invalid(format!("llm oracle needs --transport or {LLM_CMD_ENV}")))?;
                    let mut surface = BTreeMap::new();
                    if let Some(dir) = data {
                        for e in load(&dir)?.all_examples() {
                            surface
                                .entry(e.query.predicate.clone())
                                .or_insert_with(|| phier::scenes::query_text(&e.query));
                        }
                    }
                    llm_relations(&preds, &surface, &CommandTransport::new(command), &cache, cfg.seed, cfg.exec)
                        .context("querying relations")?
                }
            };
            println!("{} relations in {}", out.len(), cache.display());
            Ok(())
        }
        Command::Train { common, data, out, report } => {
            let cfg = resolve(&common)?;
            echo(&cfg)?;
            let d = load(&data_dir(data, &cfg)?)?;
            let (ckpt, metrics) = train(&cfg, &d)?;
            ckpt.save(&out)?;
            if let Some(p) = report {
                write_json(&p, &metrics)?;
            }
            print!("{}", metrics.breakdown());
            Ok(())
        }
        Command::Adapt { common, ckpt, data, out, shots, epochs } => {
            let mut base = Checkpoint::load(&ckpt)?;
            let cfg = if common.config.is_some() || common.seed.is_some() {
                let mut c = resolve(&common)?;
                c.seed = common.seed.unwrap_or(base.config.seed);
                c
            } else {
                base.config.clone()
            };
            echo(&cfg)?;
            base.config.fewshot = cfg.fewshot;
            let d = load(&data_dir(data, &cfg)?)?;
            let relations = build_relations(&base.config, &d)?;
            let shots = shots.unwrap_or(cfg.fewshot.shots);
            let epochs = epochs.unwrap_or(cfg.fewshot.epochs);
            let adapted = adapt_few_shot(&base, &d.fewshot, shots, epochs, &relations)?;
            adapted.save(&out)?;
            print!("{}", evaluate(&adapted, &test_examples(&d))?.breakdown());
            Ok(())
        }
        Command::Eval { common, ckpt, data, split, report } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = if common.config.is_some() { resolve(&common)? } else { ck.config.clone() };
            echo(&cfg)?;
            let d = load(&data_dir(data, &cfg)?)?;
            let metrics = evaluate(&ck, &select(&d, split))?;
            if let Some(p) = report {
                write_json(&p, &metrics)?;
            }
            print!("{}", metrics.breakdown());
            Ok(())
        }
        Command::Ablate { common, data, report } => {
            let cfg = resolve(&common)?;
            echo(&cfg)?;
            let d = load(&data_dir(data, &cfg)?)?;
            let rows = run_ablation_ladder(&cfg, &d)?;
            if let Some(p) = report {
                write_json(&p, &rows)?;
            }
            print!("{}", ladder_table(&rows));
            Ok(())
        }
        Command::Embed { common, ckpt, data, split, tree, out, svg } => {
            let cfg = resolve(&common)?;
            if tree {
                let tcfg = TreeEmbeddingConfig { seed: cfg.seed, ..TreeEmbeddingConfig::default() };
                let e = embed_tree(&PredicateTree::default_tree(), &tcfg)?;
                let mut csv = String::from("predicate,norm");
                for i in 0..tcfg.dim {
                    csv += &format!(",h{i}");
                }
                csv.push('\n');
                for (name, p) in &e.points {
                    csv += &format!("{name},{}", p.norm());
                    for x in p.coords() {
                        csv += &format!(",{x}");
                    }
                    csv.push('\n');
                }
                fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
                println!("{}", serde_json::to_string(&e.report).expect("report serializes"));
                return Ok(());
            }
            let ck = Checkpoint::load(ckpt.as_deref().expect("clap enforces --ckpt"))?;
            let cfg = if common.config.is_some() { cfg } else { ck.config.clone() };
            echo(&cfg)?;
            let d = load(&data_dir(data, &cfg)?)?;
            let rows = export_embeddings(&ck, &select(&d, split), Some(&out))?;
            if let Some(p) = svg {
                write_svg(&rows, &p)?;
            }
            println!("{} rows written to {}", rows.len(), out.display());
            Ok(())
        }
    }
}
