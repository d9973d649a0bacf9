//! `neurotune`: synthesize, preprocess, count, train, ablate, report.
//!
//! Exit codes: 0 success, 1 a run failed, 2 bad input or configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neurotune::config::ExperimentConfig;
use neurotune::evalharness::{
    cross_validate, data_fingerprint, report, run_ablation, split_subject_kfold, CvContext, RunCache, RunSetRecord,
};
use neurotune::lora::{AdaptedModel, LoraConfig};
use neurotune::modelzoo::{parse_json, reference, Model, PreparedData, Selector};
use neurotune::signalprep::{process_set, PipelineConfig, Style};
use neurotune::synthdata::{generate, SynthSpec};
use neurotune::{container, seed, Error};

#[derive(Parser)]
#[command(name = "neurotune", version, about = "Fine-tuning and low-rank adaptation harness for EEG models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic data set as an EEGD container.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings as JSON; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a preprocessing pipeline over a container.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        style: Style,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold_mm: Option<f64>,
    },
    /// Per-layer parameter counts.
    CountParams {
        /// Reference model name or config file.
        #[arg(long)]
        model: String,
        /// Adapter config file (or inline JSON).
        #[arg(long)]
        lora: Option<String>,
        #[arg(long)]
        freeze: Option<Selector>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Cross-validate one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank sweep, layer combinations and dropout study; resumable.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Merge run sets into accuracy and t-test tables.
    Report {
        /// Output directories of `train` runs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Outcome of a command that ran to completion.
enum Done {
    Ok,
    RunFailed(String),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Graph(_) | Error::MissingGradient(_) => 1,
        _ => 2,
    }
}

fn master_seed(configured: u64) -> Result<u64, Error> {
    match std::env::var(seed::SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{} must be an unsigned integer, got {v:?}", seed::SEED_ENV))),
        Err(_) => Ok(configured),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Error> {
    report::atomic_write(path, &serde_json::to_vec_pretty(v).expect("serializable"))
}

fn synth(out: &Path, spec: Option<&Path>, subjects: Option<usize>, trials: Option<usize>, seed: Option<u64>) -> Result<Done, Error> {
    let mut s = match spec {
        Some(p) => parse_json::<SynthSpec>(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?, p)?,
        None => SynthSpec::default(),
    };
    s.subjects = subjects.unwrap_or(s.subjects);
    s.trials_per_subject = trials.unwrap_or(s.trials_per_subject);
    s.seed = master_seed(seed.unwrap_or(s.seed))?;
    let set = generate(&s)?;
    container::write(out, &set)?;
    println!("wrote {} trials ({} subjects, {} channels, {} Hz) to {}", set.len(), s.subjects, s.channels, s.fs, out.display());
    Ok(Done::Ok)
}

fn preprocess(input: &Path, style: Style, out: &Path, threshold: Option<f64>) -> Result<Done, Error> {
    let set = container::read(input)?;
    let mut cfg = PipelineConfig::for_style(style);
    if let Some(t) = threshold {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::InvalidArgument(format!("--threshold-mm must be non-negative, got {t}")));
        }
        cfg.threshold_mm = t;
    }
    let (processed, stages, mapping) = process_set(&set, &cfg)?;
    container::write(out, &processed)?;
    let zero = mapping.as_ref().map_or(0, |m| m.zero_count());
    write_json(&out.join("mapping.json"), &serde_json::json!({ "pipeline": cfg, "stages": stages, "mapping": mapping }))?;
    println!("{} trials -> {} at {} Hz, {} channels ({} zero-filled)", processed.len(), out.display(), processed.fs, processed.channels.len(), zero);
    Ok(Done::Ok)
}

fn count_params(model: &str, lora: Option<&str>, freeze: Option<&Selector>, json: Option<&Path>) -> Result<Done, Error> {
    let cfg = reference::resolve(model)?;
    let mut m = Model::build(&cfg)?;
    if let Some(l) = lora {
        let lc: LoraConfig = if l.trim_start().starts_with('{') {
            parse_json(l, Path::new("--lora"))?
        } else {
            let p = Path::new(l);
            parse_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?, p)?
        };
        m = AdaptedModel::inject(m, &lc, cfg.init_seed)?.model().clone();
    }
    if let Some(sel) = freeze {
        m.freeze(sel)?;
    }
    let rep = m.count_params();
    println!("{}\n{rep}", cfg.name);
    match json {
        Some(p) => write_json(p, &rep)?,
        None => println!("{}", serde_json::to_string(&rep).expect("serializable")),
    }
    Ok(Done::Ok)
}

/// Shared setup of `train` and `ablate`.
struct Setup {
    exp: ExperimentConfig,
    model: Model,
    data: PreparedData,
    data_id: String,
    seed: u64,
}

fn setup(path: &Path) -> Result<Setup, Error> {
    let exp = ExperimentConfig::load(path)?;
    let seed = master_seed(exp.seed)?;
    let mut set = container::read(&exp.data)?;
    if let Some(style) = exp.style {
        set = process_set(&set, &PipelineConfig::for_style(style))?.0;
    }
    let mut model = Model::build(&exp.model_config()?)?;
    if let Some(ck) = &exp.checkpoint {
        let (_, entries) = neurotune::diffcore::read_checkpoint(ck)?;
        model.load_entries(&entries)?;
    }
    let data = PreparedData::new(&set, model.input_spec())?;
    let data_id = data_fingerprint(&set);
    std::fs::create_dir_all(&exp.output_dir).map_err(|e| Error::io(&exp.output_dir, e))?;
    Ok(Setup { exp, model, data, data_id, seed })
}

fn train(path: &Path) -> Result<Done, Error> {
    let s = setup(path)?;
    let plan = split_subject_kfold(&s.data.subjects, s.exp.harness.folds, s.seed)?;
    let cache = RunCache::open(&s.exp.output_dir.join("runs"))?;
    let ctx = CvContext { base: &s.model, data: &s.data, data_id: &s.data_id, plan: &plan, train: &s.exp.harness.train, seed: s.seed, cache: Some(&cache) };
    let variant = s.exp.variant();
    let results = cross_validate(&ctx, &variant)?;
    let name = path.file_stem().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
    let record = RunSetRecord { name, model: s.model.config().clone(), total_params: s.model.count_params().total, plan, results };
    write_json(&s.exp.output_dir.join(report::RUN_SET_FILE), &record)?;
    report::main_table(&s.exp.output_dir.join(report::TABLE_MAIN), &[record.as_run_set()])?;
    if let Some(sm) = record.results.summary() {
        println!("{}: accuracy {} ({}) over {} folds, {} trainable", variant.label(), sm.mean, sm.std, sm.n, record.results.trainable_params());
    }
    Ok(match record.results.n_failed() {
        0 => Done::Ok,
        n => Done::RunFailed(format!("{n} fold(s) stopped on a non-finite loss")),
    })
}

fn ablate(path: &Path) -> Result<Done, Error> {
    let s = setup(path)?;
    let plan = split_subject_kfold(&s.data.subjects, s.exp.harness.folds, s.seed)?;
    let cache = RunCache::open(&s.exp.output_dir.join("runs"))?;
    let ctx = CvContext { base: &s.model, data: &s.data, data_id: &s.data_id, plan: &plan, train: &s.exp.harness.train, seed: s.seed, cache: Some(&cache) };
    let rep = run_ablation(&ctx, &s.exp.harness.ablation)?;
    report::ablation_tables(&s.exp.output_dir, &rep)?;
    write_json(&s.exp.output_dir.join("ablation.json"), &rep)?;
    println!("best rank r' = {}; tables in {}", rep.r_prime, s.exp.output_dir.display());
    let failed: usize = rep.runs.iter().map(|r| r.n_failed()).sum();
    Ok(if failed == 0 { Done::Ok } else { Done::RunFailed(format!("{failed} fold run(s) stopped on a non-finite loss")) })
}

fn report_cmd(runs: &[PathBuf], out: &Path) -> Result<Done, Error> {
    let mut records = Vec::new();
    for dir in runs {
        let p = dir.join(report::RUN_SET_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        records.push(parse_json::<RunSetRecord>(&text, &p)?);
    }
    records.sort_by_cached_key(|r| r.config_fingerprint());
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sets: Vec<_> = records.iter().map(|r| r.as_run_set()).collect();
    report::main_table(&out.join(report::TABLE_MAIN), &sets)?;
    if sets.len() >= 2 {
        if let Some(w) = records.windows(2).find(|w| w[0].plan != w[1].plan) {
            return Err(Error::InvalidArgument(format!("{} and {} used different fold plans", w[0].name, w[1].name)));
        }
        report::ttest_table(&out.join(report::TABLE_TTEST), &sets)?;
    }
    println!("merged {} run set(s) into {}", records.len(), out.display());
    Ok(Done::Ok)
}

fn run(cli: Cli) -> Result<Done, Error> {
    match cli.cmd {
        Cmd::Synth { out, spec, subjects, trials, seed } => synth(&out, spec.as_deref(), subjects, trials, seed),
        Cmd::Preprocess { input, style, out, threshold_mm } => preprocess(&input, style, &out, threshold_mm),
        Cmd::CountParams { model, lora, freeze, json } => count_params(&model, lora.as_deref(), freeze.as_ref(), json.as_deref()),
        Cmd::Train { config } => train(&config),
        Cmd::Ablate { config } => ablate(&config),
        Cmd::Report { runs, out } => report_cmd(&runs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::RunFailed(msg)) => {
            eprintln!("neurotune: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("neurotune: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
