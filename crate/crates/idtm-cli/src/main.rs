//! Batch front end for the infinite dynamic topic model: scenario
//! generation, fitting, evaluation, and timeline export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use idtm::corpus::{load_corpus, save_corpus, Corpus};
use idtm::eval::{
    build_timeline, heldout_loglik, match_topics, recovered_topics, RecoveryReport, Timeline,
};
use idtm::generator::{build_s51_scenario, generate, GroundTruth, ScenarioSpec};
use idtm::state::SeatingState;
use idtm::{DecayKernel, GibbsSampler, PosteriorSample, SamplerConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "idtm", version, about = "Infinite dynamic topic model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus with known topic lifespans.
    Generate {
        /// Scenario spec JSON; defaults to the built-in benchmark scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output corpus path (JSON lines); `truth.json` is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the collapsed Gibbs sampler and store posterior snapshots.
    Fit {
        #[arg(long)]
        corpus: PathBuf,
        /// Sampler config JSON; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the per-topic chain updates.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Run directory for samples, MAP snapshot, and likelihood trace.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a finished run against ground truth and/or held-out documents.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// `truth.json` from `generate`; enables topic-recovery scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Held-out corpus (JSON lines); enables predictive scoring.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Training corpus override; defaults to the path recorded in the run.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Export topic trends, top words, and top documents from a run.
    Timeline {
        #[arg(long)]
        run: PathBuf,
        /// Number of top words per topic per epoch.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Training corpus override; defaults to the path recorded in the run.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

/// Usage problems exit 1; bad or missing data exits 2.
enum CliError {
    Usage(String),
    Data(String),
}

impl From<idtm::Error> for CliError {
    fn from(e: idtm::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Everything a later subcommand needs to know about a `fit` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    config: SamplerConfig,
    corpus: PathBuf,
    workers: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthFile {
    seed: u64,
    scenario: ScenarioSpec,
    truth: GroundTruth,
}

#[derive(Debug, Serialize, Deserialize)]
struct SamplesFile {
    manifest: RunManifest,
    samples: Vec<PosteriorSample>,
    map_index: usize,
}

#[derive(Debug, Serialize)]
struct EvaluationFile<'a> {
    manifest: &'a RunManifest,
    #[serde(skip_serializing_if = "Option::is_none")]
    recovery: Option<RecoveryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_word_heldout_loglik: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TimelineFile<'a> {
    manifest: &'a RunManifest,
    #[serde(flatten)]
    timeline: &'a Timeline,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Data(format!("cannot parse {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn load_train_corpus(manifest: &RunManifest, overridden: Option<&Path>) -> Result<Corpus, CliError> {
    let path = overridden.unwrap_or(&manifest.corpus);
    let (corpus, _) = load_corpus(path)
        .map_err(|e| CliError::Data(format!("training corpus {}: {e}", path.display())))?;
    Ok(corpus)
}

fn cmd_generate(scenario: Option<&Path>, seed: u64, out: &Path) -> Result<(), CliError> {
    let spec = match scenario {
        Some(path) => {
            let spec: ScenarioSpec = read_json(path)?;
            spec.validate()?;
            spec
        }
        None => build_s51_scenario(),
    };
    let (corpus, truth) = generate(&spec, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_corpus(&corpus, out)?;
    let truth_path = out.with_file_name("truth.json");
    write_json(&truth_path, &TruthFile { seed, scenario: spec, truth })?;
    println!(
        "generated {} docs over {} epochs -> {} and {}",
        corpus.iter_docs().count(),
        corpus.num_epochs(),
        out.display(),
        truth_path.display()
    );
    Ok(())
}

fn cmd_fit(
    corpus_path: &Path,
    config_path: Option<&Path>,
    seed: Option<u64>,
    workers: usize,
    out: &Path,
) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Usage("workers must be >= 1".into()));
    }
    let mut config = match config_path {
        Some(path) => read_json::<SamplerConfig>(path)?,
        None => SamplerConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    let (corpus, report) = load_corpus(corpus_path)
        .map_err(|e| CliError::Data(format!("corpus {}: {e}", corpus_path.display())))?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    std::fs::create_dir_all(out)?;

    let mut sampler = GibbsSampler::new(&corpus, &config)?;
    sampler.set_workers(workers);
    let result = sampler.run()?;

    let manifest =
        RunManifest { config: config.clone(), corpus: corpus_path.to_path_buf(), workers };
    write_json(&out.join("config.json"), &manifest)?;
    write_json(
        &out.join("samples.json"),
        &SamplesFile {
            manifest: manifest.clone(),
            samples: result.samples.clone(),
            map_index: result.map_index,
        },
    )?;
    let map = result.map_sample();
    write_json(&out.join("map.json"), &serde_json::json!({ "manifest": manifest, "sample": map }))?;

    let trace = File::create(out.join("loglik.csv"))?;
    let mut w = BufWriter::new(trace);
    writeln!(w, "# seed={}", config.seed)?;
    writeln!(w, "iteration,log_likelihood")?;
    for (i, ll) in result.loglik_trace.iter().enumerate() {
        writeln!(w, "{},{ll}", i + 1)?;
    }
    drop(w);

    println!(
        "fit: {} iterations, {} samples, chain acceptance {:.3}",
        config.iterations,
        result.samples.len(),
        result.chain_accept_rate
    );
    println!(
        "MAP sample at iteration {} with log-likelihood {:.3} -> {}",
        map.iteration,
        map.log_likelihood,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    run: &Path,
    truth: Option<&Path>,
    test: Option<&Path>,
    corpus_override: Option<&Path>,
) -> Result<(), CliError> {
    if truth.is_none() && test.is_none() {
        return Err(CliError::Usage("evaluate needs --truth and/or --test".into()));
    }
    let manifest: RunManifest = read_json(&run.join("config.json"))?;
    let train = load_train_corpus(&manifest, corpus_override)?;

    let mut recovery = None;
    if let Some(truth_path) = truth {
        let truth_file: TruthFile = read_json(truth_path)?;
        let mut samples: SamplesFile = read_json(&run.join("samples.json"))?;
        let mut map = samples.samples.swap_remove(samples.map_index);
        map.restore_caches();
        let kernel = DecayKernel::new(manifest.config.delta, manifest.config.lambda)?;
        let state = SeatingState::from_checkpoint(&train, kernel, &map.state)?;
        let recovered = recovered_topics(&state, &map.chains);
        let report = match_topics(&recovered, &truth_file.truth)?;
        println!(
            "recovery: {} matched topics ({} true), mean L1 {:.4}",
            report.pairs.len(),
            truth_file.truth.lifespans.len(),
            report.mean_l1()
        );
        for pair in &report.pairs {
            println!(
                "  topic {} ~ truth {}: mean L1 {:.4}, lifespan error ({:+}, {:+})",
                pair.recovered, pair.truth, pair.mean_l1, pair.birth_error, pair.death_error
            );
        }
        recovery = Some(report);
    }

    let mut heldout = None;
    if let Some(test_path) = test {
        let (test_corpus, _) = load_corpus(test_path)
            .map_err(|e| CliError::Data(format!("test corpus {}: {e}", test_path.display())))?;
        let mut samples: SamplesFile = read_json(&run.join("samples.json"))?;
        for sample in &mut samples.samples {
            sample.restore_caches();
        }
        let ll = heldout_loglik(&samples.samples, &train, &test_corpus, &manifest.config)?;
        println!("held-out per-word log-likelihood: {ll:.4}");
        heldout = Some(ll);
    }

    write_json(
        &run.join("evaluation.json"),
        &EvaluationFile { manifest: &manifest, recovery, per_word_heldout_loglik: heldout },
    )?;
    Ok(())
}

fn cmd_timeline(run: &Path, top: usize, corpus_override: Option<&Path>) -> Result<(), CliError> {
    if top == 0 {
        return Err(CliError::Usage("top must be >= 1".into()));
    }
    let manifest: RunManifest = read_json(&run.join("config.json"))?;
    let train = load_train_corpus(&manifest, corpus_override)?;
    let mut samples: SamplesFile = read_json(&run.join("samples.json"))?;
    let map = samples.samples.swap_remove(samples.map_index);
    let timeline = build_timeline(&map, &train, &manifest.config, top)?;

    let json_path = run.join("timeline.json");
    write_json(&json_path, &TimelineFile { manifest: &manifest, timeline: &timeline })?;
    let csv_path = run.join("timeline.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "epoch,topic,trend")?;
    for topic in &timeline.topics {
        for (t, &v) in topic.trend.iter().enumerate() {
            if v > 0.0 {
                writeln!(csv, "{t},{},{v}", topic.id)?;
            }
        }
    }
    drop(csv);
    println!(
        "timeline: {} topics over {} epochs -> {} and {}",
        timeline.topics.len(),
        timeline.num_epochs,
        json_path.display(),
        csv_path.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { scenario, seed, out } => cmd_generate(scenario.as_deref(), seed, &out),
        Command::Fit { corpus, config, seed, workers, out } => {
            cmd_fit(&corpus, config.as_deref(), seed, workers, &out)
        }
        Command::Evaluate { run, truth, test, corpus } => {
            cmd_evaluate(&run, truth.as_deref(), test.as_deref(), corpus.as_deref())
        }
        Command::Timeline { run, top, corpus } => cmd_timeline(&run, top, corpus.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
