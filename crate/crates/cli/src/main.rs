//! Batch front end for the P-learner.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use plearner::cate::CateFamily;
use plearner::data::{load_dataset, Dataset, Schema};
use plearner::inference::{ate, best_linear_projection, InferenceReport};
use plearner::pipeline::{fit_plearner, fit_scores, Estimand, PipelineConfig};
use plearner::rate::{evaluate_plearner, Direction};
use plearner::scores::ScoreVector;
use plearner::simulate::{self, benchmark_mse, BenchmarkConfig, DgpConfig};

#[derive(Parser)]
#[command(name = "plearner", version, about = "Proximal CATE estimation with the P-learner")]
struct Cli {
    /// Worker threads for the parallel stages.
    #[arg(long, global = true, env = "PLEARNER_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the simulated design.
    Simulate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace the heterogeneous effect by this constant.
        #[arg(long)]
        constant_cate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-fit scores, fit the final stage and predict in sample.
    Fit {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Best linear projection of the scores on the covariates.
    Blp {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train/evaluation split, TOC curve and AUTOC with bootstrap error.
    Rate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = DirectionArg::BenefitDesc)]
        direction: DirectionArg,
        /// Bootstrap replicates.
        #[arg(long, default_value_t = 1000)]
        boot: usize,
        /// Share of units used to train the priority model.
        #[arg(long, default_value_t = 0.5)]
        split: f64,
    },
    /// Simulation benchmark against the oracle scores and a naive learner.
    Bench {
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        /// Comma-separated seeds or ranges such as `1-10`.
        #[arg(long, default_value = "1-10")]
        seeds: String,
        #[arg(long)]
        constant_cate: Option<f64>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-fitted scores only.
    Scores {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    input: PathBuf,
    /// Column roles (JSON or TOML). Defaults to the simulator's columns.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Pipeline configuration file (JSON or TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "final", value_enum)]
    final_stage: Option<FinalArg>,
    #[arg(long, value_enum)]
    estimand: Option<EstimandArg>,
    /// Cross-fitting folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Upper clip on q̂ when forming scores.
    #[arg(long, conflicts_with = "no_clip")]
    clip: Option<f64>,
    #[arg(long)]
    no_clip: bool,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FinalArg {
    KernelRidge,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum EstimandArg {
    Cate,
    Catt,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum DirectionArg {
    BenefitDesc,
    HarmAsc,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_path(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(f) = self.final_stage {
            cfg.final_stage = match f {
                FinalArg::KernelRidge => CateFamily::KernelRidge,
                FinalArg::Linear => CateFamily::Linear,
            };
        }
        if let Some(e) = self.estimand {
            cfg.estimand = match e {
                EstimandArg::Cate => Estimand::Cate,
                EstimandArg::Catt => Estimand::Catt,
            };
        }
        if let Some(k) = self.folds {
            cfg.nuisance.n_folds = k;
        }
        if let Some(c) = self.clip {
            cfg.clip = Some(c);
        }
        if self.no_clip {
            cfg.clip = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything needed to rerun a command, written next to its outputs.
#[derive(Serialize)]
struct ResolvedConfig<'a> {
    command: &'a str,
    version: &'a str,
    threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    schema: Option<Schema>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pipeline: Option<PipelineConfig>,
    settings: serde_json::Value,
}

struct Prepared {
    data: Dataset,
    schema: Schema,
    pipeline: PipelineConfig,
}

fn prepare(run: &RunArgs) -> Result<Prepared> {
    let pipeline = run.pipeline.resolve()?;
    let schema = match &run.schema {
        Some(p) => Schema::from_path(p)?,
        None => Schema::simulated(simulate::D_X),
    };
    let data = load_dataset(&run.input, &schema)?;
    Ok(Prepared { data, schema, pipeline })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_resolved(out: &Path, resolved: &ResolvedConfig) -> Result<()> {
    write(&out.join("resolved_config.json"), serde_json::to_string_pretty(resolved)?)
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-').or_else(|| part.split_once("..")) {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().trim_start_matches('=').parse()?);
                if a > b {
                    bail!("empty seed range `{part}`");
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().with_context(|| format!("bad seed `{part}`"))?),
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

/// Units entering the projection: all of them for CATE scores, the treated
/// for CATT scores.
fn projection_rows(data: &Dataset, scores: &ScoreVector) -> Result<(Dataset, ScoreVector)> {
    if scores.weights.iter().all(|&w| w > 0.0) {
        return Ok((data.clone(), scores.clone()));
    }
    let rows: Vec<usize> = (0..scores.len()).filter(|&i| scores.weights[i] > 0.0).collect();
    Ok((data.subset(&rows)?, scores.subset(&rows)))
}

fn write_tau_hat(path: &Path, tau: &[f64]) -> Result<()> {
    let mut s = String::from("unit_id,tau_hat\n");
    for (i, t) in tau.iter().enumerate() {
        s.push_str(&format!("{},{t}\n", i + 1));
    }
    write(path, s)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("building thread pool")?;
    }
    let version = env!("CARGO_PKG_VERSION");
    match cli.command {
        Command::Simulate {
            n,
            seed,
            constant_cate,
            out,
        } => {
            let dgp = constant_cate.map_or_else(DgpConfig::default, DgpConfig::constant);
            if n < 2 {
                bail!("--n must be at least 2");
            }
            create_out(&out)?;
            let draw = simulate::generate(n, seed, &dgp);
            draw.dataset.write_csv(out.join("data.csv"))?;
            let schema = Schema::simulated(simulate::D_X);
            write(&out.join("schema.json"), serde_json::to_string_pretty(&schema)?)?;
            let mut truth = String::from("unit_id,tau,u\n");
            for i in 0..n {
                truth.push_str(&format!("{},{},{}\n", i + 1, draw.tau_true[i], draw.u[i]));
            }
            write(&out.join("truth.csv"), truth)?;
            write_resolved(
                &out,
                &ResolvedConfig {
                    command: "simulate",
                    version,
                    threads: cli.threads,
                    input: None,
                    schema: Some(schema),
                    pipeline: None,
                    settings: serde_json::json!({ "n": n, "seed": seed, "dgp": dgp }),
                },
            )?;
        }
        Command::Fit { run } => {
            let p = prepare(&run)?;
            create_out(&run.out)?;
            let fit = fit_plearner(&p.data, &p.pipeline, run.seed)?;
            write(&run.out.join("model.json"), fit.model.to_json()?)?;
            fit.scores.write_csv(run.out.join("scores.csv"))?;
            write_tau_hat(&run.out.join("tau_hat.csv"), &fit.tau_hat)?;
            write_resolved(&run.out, &resolved("fit", version, cli.threads, &run, p, serde_json::json!({})))?;
        }
        Command::Scores { run } => {
            let p = prepare(&run)?;
            create_out(&run.out)?;
            let (_, scores) = fit_scores(&p.data, &p.pipeline, run.seed)?;
            scores.write_csv(run.out.join("scores.csv"))?;
            write_resolved(&run.out, &resolved("scores", version, cli.threads, &run, p, serde_json::json!({})))?;
        }
        Command::Blp { run } => {
            let p = prepare(&run)?;
            create_out(&run.out)?;
            let (_, scores) = fit_scores(&p.data, &p.pipeline, run.seed)?;
            let (data, scores) = projection_rows(&p.data, &scores)?;
            let blp = best_linear_projection(data.x(), &scores, data.x_names())?;
            let mut report = InferenceReport::new(blp, ate(&scores)?);
            if scores.clip_applied {
                report.notes.push(format!(
                    "q̂ clipped at {} for {} units",
                    scores.clip.unwrap_or(f64::NAN),
                    scores.clipped.iter().filter(|&&c| c).count()
                ));
            }
            let text = report.to_text();
            print!("{text}");
            write(&run.out.join("report.txt"), &text)?;
            write(&run.out.join("blp.csv"), report.to_csv())?;
            write(&run.out.join("blp.json"), serde_json::to_string_pretty(&report)?)?;
            scores.write_csv(run.out.join("scores.csv"))?;
            write_resolved(&run.out, &resolved("blp", version, cli.threads, &run, p, serde_json::json!({})))?;
        }
        Command::Rate {
            run,
            direction,
            boot,
            split,
        } => {
            if boot < 2 {
                bail!("--boot must be at least 2");
            }
            if !(split > 0.0 && split < 1.0) {
                bail!("--split must lie in (0, 1), got {split}");
            }
            let direction = match direction {
                DirectionArg::BenefitDesc => Direction::BenefitDesc,
                DirectionArg::HarmAsc => Direction::HarmAsc,
            };
            let p = prepare(&run)?;
            create_out(&run.out)?;
            let report = evaluate_plearner(&p.data, split, &p.pipeline, direction, boot, run.seed)?;
            let text = report.to_text();
            print!("{text}");
            write(&run.out.join("rate.json"), report.to_json()?)?;
            write(&run.out.join("toc.csv"), report.toc_csv())?;
            write(&run.out.join("rate.txt"), &text)?;
            let settings = serde_json::json!({ "direction": direction, "boot": boot, "split": split });
            write_resolved(&run.out, &resolved("rate", version, cli.threads, &run, p, settings))?;
        }
        Command::Bench {
            n_train,
            n_test,
            seeds,
            constant_cate,
            pipeline,
            out,
        } => {
            let seeds = parse_seeds(&seeds)?;
            let config = BenchmarkConfig {
                pipeline: pipeline.resolve()?,
                dgp: constant_cate.map_or_else(DgpConfig::default, DgpConfig::constant),
                ..BenchmarkConfig::default()
            };
            create_out(&out)?;
            let table = benchmark_mse(n_train, n_test, &seeds, &config)?;
            write(&out.join("bench.csv"), table.to_csv())?;
            write(&out.join("scatter.csv"), table.scatter_csv())?;
            write(
                &out.join("certification.json"),
                serde_json::to_string_pretty(&table.certification)?,
            )?;
            print!("{}", table.to_csv());
            write_resolved(
                &out,
                &ResolvedConfig {
                    command: "bench",
                    version,
                    threads: cli.threads,
                    input: None,
                    schema: None,
                    pipeline: Some(config.pipeline.clone()),
                    settings: serde_json::json!({
                        "n_train": n_train,
                        "n_test": n_test,
                        "seeds": seeds,
                        "dgp": config.dgp,
                        "certification_n": config.certification_n,
                        "certification_tolerance": config.certification_tolerance,
                    }),
                },
            )?;
        }
    }
    Ok(())
}

fn resolved<'a>(
    command: &'a str,
    version: &'a str,
    threads: Option<usize>,
    run: &RunArgs,
    p: Prepared,
    mut settings: serde_json::Value,
) -> ResolvedConfig<'a> {
    settings["seed"] = serde_json::json!(run.seed);
    ResolvedConfig {
        command,
        version,
        threads,
        input: Some(run.input.clone()),
        schema: Some(p.schema),
        pipeline: Some(p.pipeline),
        settings,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source; skip causes whose
            // text is part of the message so far.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
