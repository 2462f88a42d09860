use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use regioncrop::harness::analysis::{behavior_csv, margin_scatter_csv};
use regioncrop::harness::report::{from_jsonl, to_jsonl};
use regioncrop::harness::{
    ablation_csv, emit_report, export_area_distribution, margin_scatter, run_ablation, run_baselines, Experiment,
    ExperimentConfig, OutputLock, PoolRecord, ReportFormat, ReportRow,
};
use regioncrop::parser::parse_batch;
use regioncrop::policy::PolicyParams;
use regioncrop::trainer::QueryRecord;
use regioncrop::{env::generate_instance, rng};

#[derive(Parser)]
#[command(name = "regioncrop", version, about = "Query-side region cropping for multi-modal re-ranking")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the environment and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format: csv, md or jsonl.
    #[arg(long, global = true, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Export synthetic evaluation instances as pool records.
    Gen {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a policy; writes policy.txt and curve.csv.
    Train,
    /// Greedy evaluation of a trained policy.
    Eval {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Full-image, center-crop and random-crop baselines.
    Baselines,
    /// One training run per reward mask.
    Ablate,
    /// Behavior split and margin scatter from evaluation records.
    Analyze {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Parse newline-delimited `{text, width, height}` policy outputs.
    Parse {
        #[arg(long)]
        input: PathBuf,
    },
    /// Results table over baselines and the evaluated policy.
    Report,
}

const POLICY_FILE: &str = "policy.txt";
const EVAL_METRICS: &str = "eval_metrics.json";
const EVAL_RECORDS: &str = "eval_records.jsonl";
const BASELINES: &str = "baselines.jsonl";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_records(path: &Path) -> Result<Vec<QueryRecord>> {
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} row {}", path.display(), i + 1)))
        .collect()
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("serialisable") + "\n").collect()
}

fn baseline_rows(exp: &Experiment) -> Result<Vec<ReportRow>> {
    let queries = exp.eval_queries()?;
    let reports = run_baselines(&exp.cfg, &queries)?;
    Ok(reports.into_iter().map(|(method, report)| ReportRow { method, report }).collect())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.common.out {
        cfg.output_dir = o.clone();
    }
    let exp = Experiment::new(cfg)?;
    let out = exp.cfg.output_dir.clone();
    let _lock = OutputLock::acquire(&out)?;

    match cli.cmd {
        Command::Gen { count } => {
            let n = count.unwrap_or(exp.cfg.n_eval);
            let env = &exp.cfg.env;
            let records = (0..n as u64)
                .map(|i| {
                    let x = generate_instance(env, rng::derive_seed(env.seed, rng::NS_EVAL, i))?;
                    Ok(PoolRecord::from_instance(&format!("eval-{i}"), &x, &exp.anchors)?)
                })
                .collect::<Result<Vec<_>>>()?;
            regioncrop::harness::data::write_pools(&out.join("dataset.jsonl"), &records)?;
            log::info!("wrote {n} pool records");
        }
        Command::Train => {
            let eval = exp.eval_queries()?;
            let (params, curve) = exp.train(Some(&eval))?;
            params.save(&out.join(POLICY_FILE))?;
            write(&out.join("curve.csv"), curve.to_csv())?;
            log::info!("theta = {:?}", params.theta);
        }
        Command::Eval { policy } => {
            let params = PolicyParams::load(&policy.unwrap_or_else(|| out.join(POLICY_FILE)))?;
            let queries = exp.eval_queries()?;
            let (report, records) = exp.evaluate(&params, &queries)?;
            let row = ReportRow { method: "policy".into(), report };
            write(&out.join(EVAL_METRICS), serde_json::to_string_pretty(&row)? + "\n")?;
            write(&out.join(EVAL_RECORDS), jsonl(&records))?;
            margin_scatter(&records, &out.join("margin_scatter.csv"))?;
            write(&out.join("behavior.csv"), behavior_csv(&records))?;
            export_area_distribution(&params, &queries, &out.join("area_distribution.txt"))?;
            println!("mrr {:.4}", row.report.mrr);
        }
        Command::Baselines => {
            let rows = baseline_rows(&exp)?;
            write(&out.join(BASELINES), to_jsonl(&rows))?;
            emit_report(&rows, cli.common.format, &out, "baselines")?;
        }
        Command::Ablate => {
            let queries = exp.eval_queries()?;
            let rows = run_ablation(&exp, &queries)?;
            write(&out.join("ablation.csv"), ablation_csv(&rows))?;
            for r in &rows {
                write(&out.join(format!("margin_scatter_{}.csv", r.mask)), margin_scatter_csv(&r.records))?;
            }
        }
        Command::Analyze { records } => {
            let records = read_records(&records.unwrap_or_else(|| out.join(EVAL_RECORDS)))?;
            write(&out.join("behavior.csv"), behavior_csv(&records))?;
            margin_scatter(&records, &out.join("margin_scatter.csv"))?;
        }
        Command::Parse { input } => {
            let file = fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let results = parse_batch(BufReader::new(file))?;
            write(&out.join("parsed.jsonl"), jsonl(&results))?;
            let failed = results.iter().filter(|r| r.error.is_some()).count();
            println!("{} parsed, {failed} errors", results.len());
        }
        Command::Report => {
            let mut rows = match out.join(BASELINES) {
                p if p.exists() => from_jsonl(&read(&p)?)?,
                _ => baseline_rows(&exp)?,
            };
            let metrics = out.join(EVAL_METRICS);
            if metrics.exists() {
                rows.push(serde_json::from_str(&read(&metrics)?)?);
            }
            if rows.is_empty() {
                bail!("nothing to report");
            }
            let path = emit_report(&rows, cli.common.format, &out, "report")?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
