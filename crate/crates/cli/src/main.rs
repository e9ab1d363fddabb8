use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fame_core::checkpoint::{
    decode_backbone, decode_fame, is_fame_checkpoint, load_backbone, read_bytes, save_backbone, save_fame,
};
use fame_core::config::Config;
use fame_core::data::{load_embedding_matrix, load_interactions, load_metadata, write_femb};
use fame_core::eval::{evaluate, explain_user, EvalOptions, MetricsReport, Scorer, SplitKind};
use fame_core::pipeline::{prepare, pretrain_facets, pseudo_text_matrix, Bundle, PrepareOptions};
use fame_core::synth::{self, SynthConfig};
use fame_core::trainer::{finetune_fame, grid_sweep, sweep_csv, train_backbone, EpochLog};
use fame_core::{Error, Matrix, Result};

#[derive(Parser)]
#[command(name = "fame", version, about = "Facet-aware sequential recommendation pipeline")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,
    /// Parent of the per-config run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMode {
    Pseudo,
    Import,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

impl From<Split> for SplitKind {
    fn from(s: Split) -> Self {
        match s {
            Split::Valid => SplitKind::Valid,
            Split::Test => SplitKind::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Filter, index and split raw interactions into a dataset bundle.
    PrepareData {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-facet dataset and its bundle.
    Synth {
        #[arg(long, default_value_t = 300)]
        users: usize,
        #[arg(long, default_value_t = 60)]
        items: usize,
        #[arg(long, default_value_t = 2)]
        facets: usize,
        #[arg(long, default_value_t = 12)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a catalog-aligned text embedding file.
    Embed {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        mode: EmbedMode,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Source file for `--mode import`.
        #[arg(long)]
        femb_file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive facet pre-training of the text embeddings.
    PretrainFacets {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the backbone; text init modes read `--embeddings`.
    TrainBackbone {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Swap in the facet-aware final layer and fine-tune.
    Finetune {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full-ranking HR@k and NDCG@k of a checkpoint.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation grid over heads and experts.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        heads: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        experts: Vec<usize>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gate, router and per-head rankings for one user.
    Explain {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "data" => 3,
        "format" => 4,
        "shape" => 5,
        "sampling" => 6,
        "io" => 7,
        _ => 1,
    }
}

/// Per-config output directory, created with a copy of the resolved config.
struct Run {
    dir: PathBuf,
    config: Config,
}

impl Run {
    fn open(runs: &Path, config: Config) -> Result<Run> {
        let dir = runs.join(&config.hash()[..16]);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_text(&dir.join("config.txt"), &config.canonical_text())?;
        Ok(Run { dir, config })
    }

    fn output(&self, explicit: Option<PathBuf>, name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.dir.join(name))
    }

    fn eval_options(&self) -> Result<EvalOptions> {
        let mut opts = self.config.eval_options()?;
        if let Ok(raw) = std::env::var("FAME_NUM_THREADS") {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("FAME_NUM_THREADS must be a count, got {raw:?}")))?;
            opts.threads = (n > 0).then_some(n);
        }
        Ok(opts)
    }

    fn train_config(&self) -> Result<fame_core::trainer::TrainConfig> {
        let mut t = self.config.train()?;
        t.eval = self.eval_options()?;
        Ok(t)
    }

    /// Appends JSON lines to `<run>/<name>` and echoes a short line to stderr.
    fn logger(&self, name: &str) -> Result<impl FnMut(&EpochLog)> {
        let path = self.dir.join(name);
        let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(move |entry: &EpochLog| {
            let _ = writeln!(file, "{}", entry.to_json_line());
            let metric = entry
                .valid
                .as_ref()
                .and_then(|r| r.rows.last().map(|row| format!("  valid NDCG@{} {:.4}", row.k, row.ndcg)))
                .unwrap_or_default();
            eprintln!("{} epoch {:>4}  loss {:.4}{metric}", entry.stage, entry.epoch, entry.loss);
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn load_embeddings(path: &Path, bundle: &Bundle) -> Result<Matrix> {
    load_embedding_matrix(path, &bundle.catalog)
}

enum Model {
    Backbone(fame_core::backbone::Backbone),
    Fame(fame_core::fame::FameModel),
}

impl Model {
    fn load(path: &Path) -> Result<Model> {
        let bytes = read_bytes(path)?;
        if is_fame_checkpoint(&bytes) {
            Ok(Model::Fame(decode_fame(&bytes)?))
        } else {
            Ok(Model::Backbone(decode_backbone(&bytes)?))
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            Model::Backbone(b) => b,
            Model::Fame(m) => m,
        }
    }
}

fn check_items(num_items: usize, bundle: &Bundle) -> Result<()> {
    if num_items != bundle.catalog.len() {
        return Err(Error::Consistency(format!(
            "checkpoint scores {num_items} items, bundle has {}",
            bundle.catalog.len()
        )));
    }
    Ok(())
}

fn print_report(report: &MetricsReport, out: &Path) -> Result<()> {
    print!("{}", report.to_pretty());
    write_text(out, &report.to_csv())?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = Config::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::PrepareData {
            interactions,
            metadata,
            scheme,
            out,
        } => {
            if let Some(s) = scheme {
                config.set("scheme", &s)?;
                config.validate()?;
            }
            let xs = load_interactions(&interactions)?;
            let meta = match metadata {
                Some(p) => load_metadata(&p)?,
                None => Vec::new(),
            };
            let bundle = prepare(&xs, &meta, &PrepareOptions::from_config(&config)?)?;
            bundle.write(&out, Some(&config))?;
            let m = &bundle.manifest;
            println!("users {}  items {}  interactions {}  hash {}", m.users, m.items, m.interactions, m.hash);
        }
        Command::Synth {
            users,
            items,
            facets,
            classes,
            seed,
            out,
        } => {
            config.set("scheme", synth::SCHEME.name())?;
            let data = synth::generate(&SynthConfig {
                users,
                items,
                facets,
                classes,
                seed,
                ..SynthConfig::default()
            })?;
            write_text(&out.join("raw/interactions.tsv"), &synth::interactions_tsv(&data.interactions))?;
            write_text(&out.join("raw/metadata.jsonl"), &synth::metadata_jsonl(&data.metadata)?)?;
            let bundle = prepare(&data.interactions, &data.metadata, &PrepareOptions::from_config(&config)?)?;
            bundle.write(&out, Some(&config))?;
            let m = &bundle.manifest;
            println!("users {}  items {}  interactions {}  hash {}", m.users, m.items, m.interactions, m.hash);
        }
        Command::Embed {
            bundle,
            mode,
            dim,
            seed,
            femb_file,
            out,
        } => {
            if let Some(d) = dim {
                config.set("embed_dim", &d.to_string())?;
            }
            if let Some(s) = seed {
                config.set("embed_seed", &s.to_string())?;
            }
            let run = Run::open(&cli.runs, config)?;
            let bundle = Bundle::load(&bundle)?;
            let matrix = match mode {
                EmbedMode::Pseudo => pseudo_text_matrix(
                    &bundle.catalog,
                    run.config.get("embed_dim")?,
                    run.config.get("embed_seed")?,
                ),
                EmbedMode::Import => {
                    let src = femb_file.ok_or_else(|| Error::Config("--mode import needs --femb-file".into()))?;
                    load_embeddings(&src, &bundle)?
                }
            };
            let out = run.output(out, "text.femb");
            write_femb(&out, &matrix, &bundle.catalog.item_ids)?;
            println!("{} x {} -> {}", matrix.rows(), matrix.cols(), out.display());
        }
        Command::PretrainFacets { bundle, embeddings, out } => {
            let run = Run::open(&cli.runs, config)?;
            let bundle = Bundle::load(&bundle)?;
            let text = load_embeddings(&embeddings, &bundle)?;
            let log_path = run.dir.join("pretrain.jsonl");
            let mut log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
            let (e, _) = pretrain_facets(&text, &bundle.facets, &run.config, |entry| {
                let _ = writeln!(log, "{}", serde_json::to_string(entry).unwrap_or_default());
            })?;
            let out = run.output(out, "facet.femb");
            write_femb(&out, &e, &bundle.catalog.item_ids)?;
            println!("{} x {} -> {}", e.rows(), e.cols(), out.display());
        }
        Command::TrainBackbone { bundle, embeddings, out } => {
            let run = Run::open(&cli.runs, config)?;
            let bundle = Bundle::load(&bundle)?;
            let text = embeddings.map(|p| load_embeddings(&p, &bundle)).transpose()?;
            let (model, _) = train_backbone(
                &bundle.dataset,
                &run.config.backbone()?,
                &run.train_config()?,
                text.as_ref(),
                run.logger("backbone.jsonl")?,
            )?;
            let out = run.output(out, "backbone.fckp");
            save_backbone(&out, &model)?;
            println!("backbone -> {}", out.display());
        }
        Command::Finetune { bundle, backbone, out } => {
            let run = Run::open(&cli.runs, config)?;
            let bundle = Bundle::load(&bundle)?;
            let base = load_backbone(&backbone)?;
            check_items(base.num_items(), &bundle)?;
            let (model, _) = finetune_fame(
                &base,
                &bundle.dataset,
                &run.config.fame()?,
                &run.train_config()?,
                run.logger("finetune.jsonl")?,
            )?;
            let out = run.output(out, "fame.fckp");
            save_fame(&out, &model)?;
            println!("fame -> {}", out.display());
        }
        Command::Evaluate {
            bundle,
            checkpoint,
            split,
            out,
        } => {
            let run = Run::open(&cli.runs, config)?;
            let bundle = Bundle::load(&bundle)?;
            let model = Model::load(&checkpoint)?;
            let num_items = match &model {
                Model::Backbone(b) => b.num_items(),
                Model::Fame(m) => m.num_items(),
            };
            check_items(num_items, &bundle)?;
            let split = SplitKind::from(split);
            let report = evaluate(model.scorer(), &bundle.dataset, split, &run.eval_options()?)?;
            print_report(&report, &run.output(out, &format!("metrics_{}.csv", split.name())))?;
        }
        Command::Sweep {
            bundle,
            heads,
            experts,
            embeddings,
            out,
        } => {
            let run = Run::open(&cli.runs, config)?;
            let bundle = Bundle::load(&bundle)?;
            let text = embeddings.map(|p| load_embeddings(&p, &bundle)).transpose()?;
            let cells = grid_sweep(
                &bundle.dataset,
                &run.config.backbone()?,
                &run.config.fame()?,
                &heads,
                &experts,
                &run.train_config()?,
                text.as_ref(),
                run.logger("sweep.jsonl")?,
            )?;
            let csv = sweep_csv(&cells);
            print!("{csv}");
            write_text(&run.output(out, "sweep.csv"), &csv)?;
        }
        Command::Explain {
            bundle,
            checkpoint,
            user,
            split,
            k,
            out,
        } => {
            let run = Run::open(&cli.runs, config)?;
            let bundle = Bundle::load(&bundle)?;
            let model = match Model::load(&checkpoint)? {
                Model::Fame(m) => m,
                Model::Backbone(_) => {
                    return Err(Error::Config("explain needs a fine-tuned checkpoint".into()));
                }
            };
            check_items(model.num_items(), &bundle)?;
            let index = bundle
                .dataset
                .user_ids
                .iter()
                .position(|u| *u == user)
                .ok_or_else(|| Error::Input(format!("unknown user {user:?}")))?;
            let report = explain_user(&model, &bundle.dataset, Some(&bundle.catalog), index, split.into(), k)?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            print!("{json}");
            write_text(&run.output(out, &format!("explain_{user}.json")), &json)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
