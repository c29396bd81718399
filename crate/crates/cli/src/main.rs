use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dkap_core::corpus::{augment_pairs, build_lexicon_from_docs, read_jsonl, write_jsonl, DocRecord, ExcerptMode, Pair};
use dkap_core::generation::{format_training_data, Strategy};
use dkap_core::grammar::{generate_dataset, Grammar};
use dkap_core::harness::{run_episode, EpisodeConfig};
use dkap_core::lexicon::{read_entries, write_entries};
use dkap_core::metrics::{cost_table, reduction, EffortCost};
use dkap_core::retrieval::export_contrastive_pairs;
use dkap_core::{Domain, EpisodeReport, Instance, ParseRecord};

#[derive(Parser)]
#[command(name = "dkap", version, about = "Knowledge-augmented parsing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Ltl,
    Code,
    Cmd,
    Other,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Ltl => Domain::Ltl,
            DomainArg::Code => Domain::Code,
            DomainArg::Cmd => Domain::Cmd,
            DomainArg::Other => Domain::Other,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "first_chars", alias = "first-chars")]
    FirstChars,
    #[value(name = "first_line", alias = "first-line")]
    FirstLine,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Basic,
    #[value(name = "extra_sup", alias = "extra-sup")]
    ExtraSup,
    Multitask,
    Transfer,
}

#[derive(Subcommand)]
enum Command {
    /// Sample (x, y, k_gold) triples from a grammar.
    GenData {
        /// Grammar file; the shipped NFS/LTL grammar when omitted.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        /// Override a rule weight, as `ID=WEIGHT`. Repeatable.
        #[arg(long = "weight", value_parser = parse_weight)]
        weights: Vec<(u32, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build lexicon entries from documentation records.
    BuildLexicon {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Domain for every entry, overriding the records.
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach matching lexicon entries to (x, y) pairs.
    Augment {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Matcher domain; taken from the lexicon when omitted.
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode over an instance stream.
    Simulate {
        #[arg(long)]
        stream: PathBuf,
        /// Episode config (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarize a records file, optionally against a baseline.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ltl")]
        domain: DomainArg,
        /// Report file; next to the records when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost reduction from (reading, error) counts.
    Cost {
        #[arg(long)]
        base_reading: u64,
        #[arg(long)]
        base_error: u64,
        #[arg(long)]
        reading: u64,
        #[arg(long)]
        error: u64,
    },
    /// Write (query, positive) rows for retriever training.
    ExportPairs {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write generator training rows; each instance's full k_gold, including
    /// distractors, serves as its retrieved set.
    ExportTraining {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        assets: Option<PathBuf>,
    },
}

fn parse_weight(s: &str) -> Result<(u32, f64), String> {
    let (id, w) = s.split_once('=').ok_or("expected ID=WEIGHT")?;
    Ok((id.trim().parse().map_err(|e| format!("rule id: {e}"))?, w.trim().parse().map_err(|e| format!("weight: {e}"))?))
}

fn load_config(path: Option<&Path>) -> Result<EpisodeConfig> {
    match path {
        Some(p) => EpisodeConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(EpisodeConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn report_cost(path: &Path, domain: Domain) -> Result<EpisodeReport> {
    let records: Vec<ParseRecord> = read_jsonl(path)?;
    Ok(EpisodeReport::from_records(&records, domain))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { grammar, n, seed, distractors, weights, out } => {
            let mut g = match grammar {
                Some(p) => Grammar::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => Grammar::builtin(),
            };
            for (id, w) in weights {
                g.set_weight(id, w)?;
            }
            let data = generate_dataset(&g, n, seed, distractors)?;
            write_jsonl(&out, &data)?;
            eprintln!("wrote {} instances to {}", data.len(), out.display());
        }
        Command::BuildLexicon { docs, mode, n, domain, out } => {
            let mut records: Vec<DocRecord> = read_jsonl(&docs)?;
            if let Some(d) = domain {
                records.iter_mut().for_each(|r| r.domain = d.into());
            }
            let mode = match mode {
                ModeArg::FirstChars => ExcerptMode::FirstChars,
                ModeArg::FirstLine => ExcerptMode::FirstLine,
            };
            let (entries, warnings) = build_lexicon_from_docs(&records, mode, n)?;
            for w in &warnings {
                eprintln!("warning: record {} ({}): {}", w.index + 1, w.construct_id, w.reason);
            }
            write_entries(&out, &entries)?;
            eprintln!("wrote {} entries to {}", entries.len(), out.display());
        }
        Command::Augment { pairs, lexicon, domain, out } => {
            let pairs: Vec<Pair> = read_jsonl(&pairs)?;
            let lexicon = read_entries(&lexicon)?;
            let domain = domain.map(Domain::from).or_else(|| lexicon.first().map(|e| e.domain)).unwrap_or_default();
            let instances = augment_pairs(&pairs, &lexicon, domain);
            let with_gold = instances.iter().filter(|i| !i.k_gold.is_empty()).count();
            write_jsonl(&out, &instances)?;
            eprintln!("wrote {} instances ({with_gold} with gold entries) to {}", instances.len(), out.display());
        }
        Command::Simulate { stream, config, out_dir } => {
            let stream: Vec<Instance> = read_jsonl(&stream)?;
            let config = load_config(config.as_deref())?;
            fs::create_dir_all(&out_dir)?;
            let records_path = out_dir.join("records.jsonl");
            match run_episode(&stream, &config) {
                Ok(outcome) => {
                    write_jsonl(&records_path, &outcome.records)?;
                    write_json(&out_dir.join("report.json"), &outcome.report)?;
                    outcome.kb.persist(out_dir.join("kb.jsonl"))?;
                    print!("{}", cost_table(None, ("run", outcome.report.cost())));
                }
                Err(abort) => {
                    write_jsonl(&records_path, &abort.records)?;
                    abort.kb.persist(out_dir.join("kb.jsonl"))?;
                    eprintln!("error: {abort}; partial records in {}", records_path.display());
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Report { records, baseline, domain, out } => {
            let domain = Domain::from(domain);
            let report = report_cost(&records, domain)?;
            let out = out.unwrap_or_else(|| records.with_file_name("report.json"));
            write_json(&out, &report)?;
            let base = baseline.map(|b| report_cost(&b, domain)).transpose()?;
            print!("{}", cost_table(base.as_ref().map(|b| ("baseline", b.cost())), ("run", report.cost())));
            println!(
                "BLEU {:.2}  OVC P/R/F1 {:.1}/{:.1}/{:.1}",
                report.corpus_bleu,
                100.0 * report.ovc_precision,
                100.0 * report.ovc_recall,
                100.0 * report.ovc_f1
            );
        }
        Command::Cost { base_reading, base_error, reading, error } => {
            let base = EffortCost::new(base_reading, base_error);
            let run = EffortCost::new(reading, error);
            print!("{}", cost_table(Some(("baseline", base)), ("augmented", run)));
            println!("reduction {}", reduction(base.total, run.total)?);
        }
        Command::ExportPairs { stream, out } => {
            let stream: Vec<Instance> = read_jsonl(&stream)?;
            let rows = export_contrastive_pairs(&stream);
            write_jsonl(&out, &rows)?;
            eprintln!("wrote {} pairs to {}", rows.len(), out.display());
        }
        Command::ExportTraining { stream, strategy, out } => {
            let stream: Vec<Instance> = read_jsonl(&stream)?;
            let retrieved: Vec<_> = stream.iter().map(|i| i.k_gold.clone()).collect();
            let strategy = match strategy {
                StrategyArg::Basic => Strategy::Basic,
                StrategyArg::ExtraSup => Strategy::ExtraSup,
                StrategyArg::Multitask => Strategy::Multitask,
                StrategyArg::Transfer => Strategy::Transfer,
            };
            let rows = format_training_data(&stream, &retrieved, strategy)?;
            write_jsonl(&out, &rows)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Serve { stream, config, port, host, data_dir, assets } => {
            let default_stream = stream.map(|p| read_jsonl::<Instance>(&p)).transpose()?;
            if default_stream.as_ref().is_some_and(Vec::is_empty) {
                bail!("stream file is empty");
            }
            let server = dkap_server::ServerConfig {
                default_stream,
                default_config: load_config(config.as_deref())?,
                data_dir,
                assets_dir: assets,
            };
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            tokio::runtime::Runtime::new()?.block_on(dkap_server::serve(addr, server))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
