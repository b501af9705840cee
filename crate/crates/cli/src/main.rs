//! Command-line entry point: dataset synthesis, training, evaluation and
//! single-user recommendation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hekp4nbr_core::checkpoint::Checkpoint;
use hekp4nbr_core::config::Config;
use hekp4nbr_core::corpus::{
    events_to_tsv, gen_synthetic, load_interactions, load_names, preprocess, split,
    BasketDataset, SyntheticSpec,
};
use hekp4nbr_core::error::ErrorClass;
use hekp4nbr_core::head::{evaluate_checkpoint, recommend_for_user, train};
use hekp4nbr_core::knowledge::{kg_to_tsv, load_kg, TemplateSet};
use hekp4nbr_core::tensor::Tensor;
use hekp4nbr_core::Error;

#[derive(Parser)]
#[command(
    name = "hekp4nbr",
    about = "Next-basket recommendation with knowledge-tree prompts, \
             hypergraph item relations and frequency-based gating",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with planted co-purchase patterns.
    Synth {
        /// Spec file (key=value); defaults apply for absent keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_events: PathBuf,
        #[arg(long)]
        out_kg: PathBuf,
    },
    /// Train the full pipeline and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        kg: PathBuf,
        /// Optional item surface-name table (item_id \t name).
        #[arg(long)]
        names: Option<PathBuf>,
        /// Config file (key=value); defaults apply for absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Prompt template file overriding the built-in templates.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Write the similarity matrix and hypergraph incidence as TSV
        /// to <path>.pi.tsv and <path>.m.tsv.
        #[arg(long)]
        dump_similarity: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        kg: PathBuf,
        /// Cutoffs, comma-separated (defaults to the checkpoint config).
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Also write the report JSON to this path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Only evaluate users whose final basket is entirely unseen.
        #[arg(long)]
        cold_only: bool,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Rank the next basket for one user from their full history.
    Recommend {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        n: usize,
        /// Drop already-purchased items before ranking.
        #[arg(long)]
        exclude_seen: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Data => ExitCode::from(2),
                ErrorClass::Runtime => ExitCode::from(3),
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_dataset(
    events_path: &Path,
    names_path: Option<&Path>,
    cfg: &Config,
) -> Result<BasketDataset, Error> {
    let events = load_interactions(events_path)?;
    let mut ds = preprocess(&events, &cfg.rules())?;
    if let Some(p) = names_path {
        let table = load_names(p)?;
        ds.apply_names(&table);
    }
    Ok(ds)
}

fn matrix_tsv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.shape()[0] {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Synth {
            spec,
            out_events,
            out_kg,
        } => {
            let spec = match spec {
                Some(p) => SyntheticSpec::load(&p)?,
                None => SyntheticSpec::default(),
            };
            let (events, kg) = gen_synthetic(&spec)?;
            write_file(&out_events, &events_to_tsv(&events))?;
            write_file(&out_kg, &kg_to_tsv(&kg))?;
            eprintln!(
                "wrote {} events for {} users and {} triples",
                events.len(),
                spec.n_users,
                kg.n_triples()
            );
            Ok(())
        }
        Cmd::Train {
            events,
            kg,
            names,
            config,
            out,
            templates,
            dump_similarity,
        } => {
            let cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::default(),
            };
            let templates = match templates {
                Some(p) => TemplateSet::load(&p)?,
                None => TemplateSet::builtin(),
            };
            let kg = load_kg(&kg)?;
            let ds = load_dataset(&events, names.as_deref(), &cfg)?;
            let (train_set, val_set, _test) = split(&ds, cfg.ratios(), cfg.seed)?;

            println!("{}", start_header(&cfg, &train_set));
            let mut on_epoch = |log: &hekp4nbr_core::head::EpochLog| {
                println!("{}", serde_json::to_string(log).expect("serializable log"));
            };
            let outcome = train(&train_set, &val_set, &kg, &cfg, &templates, &mut on_epoch)?;
            outcome.checkpoint.save(&out)?;
            eprintln!(
                "saved best checkpoint (epoch {}) to {}",
                outcome.best_epoch,
                out.display()
            );
            if let Some(prefix) = dump_similarity {
                let base = prefix.display().to_string();
                if let Some(pi) = &outcome.pi {
                    write_file(Path::new(&format!("{base}.pi.tsv")), &matrix_tsv(pi))?;
                }
                if let Some(m) = &outcome.m {
                    write_file(Path::new(&format!("{base}.m.tsv")), &matrix_tsv(m))?;
                }
            }
            Ok(())
        }
        Cmd::Evaluate {
            ckpt,
            events,
            kg,
            k,
            report,
            cold_only,
            workers,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = ckpt.config.clone();
            let kg = load_kg(&kg)?;
            let ds = load_dataset(&events, None, &cfg)?;
            let (_train, _val, test) = split(&ds, cfg.ratios(), cfg.seed)?;
            let ks = k.unwrap_or_else(|| cfg.eval_ks.clone());
            let rep = evaluate_checkpoint(&ckpt, &test, &kg, &ks, cold_only, workers)?;
            let json = serde_json::to_string(&rep).expect("serializable report");
            println!("{json}");
            if let Some(p) = report {
                write_file(&p, &json)?;
            }
            Ok(())
        }
        Cmd::Recommend {
            ckpt,
            user,
            events,
            kg,
            n,
            exclude_seen,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = ckpt.config.clone();
            let kg = load_kg(&kg)?;
            let ds = load_dataset(&events, None, &cfg)?;
            let seq = ds
                .find_user(&user)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown user {user:?}")))?;
            let ranked = recommend_for_user(&ckpt, seq, &ds, &kg, n, exclude_seen)?;
            for (rank, (item, score)) in ranked.iter().enumerate() {
                println!("{}\t{}\t{}", rank + 1, item, score);
            }
            Ok(())
        }
    }
}

fn start_header(cfg: &Config, train_set: &BasketDataset) -> String {
    let mut obj = BTreeMap::new();
    obj.insert("event", "start".to_string());
    obj.insert(
        "ktp_mode",
        if cfg.ablate_no_ktp {
            "empty-KTP".to_string()
        } else {
            "knowledge-tree".to_string()
        },
    );
    obj.insert("no_gcn", cfg.ablate_no_gcn.to_string());
    obj.insert("no_hypergcn", cfg.ablate_no_hypergcn.to_string());
    obj.insert("no_fbg", cfg.ablate_no_fbg.to_string());
    obj.insert("no_ktp", cfg.ablate_no_ktp.to_string());
    obj.insert("train_users", train_set.n_users().to_string());
    obj.insert("items", train_set.n_items().to_string());
    obj.insert("seed", cfg.seed.to_string());
    serde_json::to_string(&obj).expect("serializable header")
}
