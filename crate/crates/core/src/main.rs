use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use semaforge::branches::{
    load_model, save_model, train_fbranch, train_gbranch, DetectorModel, FragmentCache, TrainConfig,
};
use semaforge::config::{Overrides, RunConfig};
use semaforge::dataset::{Manifest, Split};
use semaforge::eval::{evaluate, run_ablation, run_generalization, write_report, REPORT_JSON};
use semaforge::gradcheck::{suite, SUITE_TOLERANCE};
use semaforge::imageio::{load_png, save_bytes, save_png};
use semaforge::mfss::{extract_fragments, load_landmarks, segment, Fragment};
use semaforge::nn::checkpoint::write_atomic;
use semaforge::synthetic::{generate_dataset, FamilyKind, MANIFEST_FILE};
use semaforge::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "semaforge", version, about = "Manipulated-face detection pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Side length S of the square fragment crops (default 64).
    #[arg(long, global = true, value_name = "INT")]
    fragment_size: Option<usize>,
    /// Training epochs per step (default 15).
    #[arg(long, global = true, value_name = "INT")]
    epochs: Option<usize>,
    /// Manipulation family withheld from training.
    #[arg(long, global = true, value_name = "FAMILY")]
    leave_out: Option<FamilyKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic face dataset.
    Generate,
    /// Segment one image into six masks and six fragment crops.
    Segment {
        /// Input PNG.
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Landmark file with 81 `x y` lines.
        #[arg(long, value_name = "PATH")]
        landmarks: PathBuf,
    },
    /// Two-step training.
    Train {
        /// Dataset directory holding manifest.jsonl; generated under the run
        /// directory when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Which training step to run.
        #[arg(long, value_enum, default_value = "both")]
        step: Step,
        /// Existing model directory to continue from (required for `--step 2`).
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
    },
    /// Evaluate a trained model on one split.
    Eval {
        /// Model directory written by `train`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Dataset directory holding manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Split to score: train, val, test or unseen-test.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Leave-one-family-out generalization suite.
    Generalize,
    /// Fragment-removal and attention ablation suites.
    Ablate,
    /// Finite-difference gradient checks of every layer and attention module.
    Gradcheck,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEMAFORGE_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = cli.global;
    let ov = Overrides {
        seed: g.seed,
        out: g.out,
        jobs: g.jobs,
        fragment_size: g.fragment_size,
        epochs: g.epochs,
        leave_out: g.leave_out,
    };
    let cfg = RunConfig::resolve(g.config.as_deref(), &ov)?;
    info!(
        "config: defaults < {} < flags: {}",
        g.config.as_ref().map_or("(no file)".to_string(), |p| p.display().to_string()),
        serde_json::to_string(&cfg)?
    );
    if let Some(n) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Segment { image, landmarks } => cmd_segment(&cfg, &image, &landmarks),
        Command::Train { data, step, model } => cmd_train(&cfg, data.as_deref(), step, model.as_deref()),
        Command::Eval { model, data, split } => cmd_eval(&cfg, &model, &data, split),
        Command::Generalize => cmd_generalize(&cfg),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Gradcheck => cmd_gradcheck(&cfg),
    }
}

fn print_path(p: &Path) {
    println!("{}", p.display());
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Creates the run directory and stores the resolved config in it.
fn prepare_run(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir()?;
    cfg.save(&dir)?;
    info!("run directory {}", dir.display());
    Ok(dir)
}

fn cmd_generate(cfg: &RunConfig) -> Result<ExitCode> {
    let dir = prepare_run(cfg)?.join("data");
    info!("generating {} images", cfg.dataset.total());
    generate_dataset(&cfg.dataset, &dir)?;
    print_path(&dir.join(MANIFEST_FILE));
    Ok(ExitCode::SUCCESS)
}

fn cmd_segment(cfg: &RunConfig, image: &Path, landmarks: &Path) -> Result<ExitCode> {
    let img = load_png(image)?;
    let lm = load_landmarks(landmarks)?;
    let seg = segment(&img, &lm, &cfg.model.mfss)?;
    let id = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let frags = extract_fragments(&img, &seg.masks, cfg.model.mfss.fragment_size, &id)?;
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for f in Fragment::ALL {
        save_bytes(&out.join(format!("mask-{}.pgm", f.key())), &seg.masks.get(f).to_pgm())?;
        save_png(&out.join(format!("crop-{}.png", f.key())), frags.get(f))?;
    }
    write_json(&out.join("polygons.json"), &seg.polygons)?;
    print_path(out);
    Ok(ExitCode::SUCCESS)
}

fn load_or_generate(cfg: &RunConfig, data: Option<&Path>, run: &Path) -> Result<Manifest> {
    match data {
        Some(d) => Manifest::load(&d.join(MANIFEST_FILE)),
        None => {
            let dir = run.join("data");
            if let Ok(m) = Manifest::load(&dir.join(MANIFEST_FILE)) {
                if m.len() == cfg.dataset.total() {
                    info!("reusing dataset {}", dir.display());
                    return Ok(m);
                }
            }
            info!("generating {} images", cfg.dataset.total());
            generate_dataset(&cfg.dataset, &dir)
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    model: PathBuf,
    meta: semaforge::branches::TrainingMeta,
}

fn cmd_train(cfg: &RunConfig, data: Option<&Path>, step: Step, from: Option<&Path>) -> Result<ExitCode> {
    let run = prepare_run(cfg)?;
    let manifest = load_or_generate(cfg, data, &run)?;
    let mut model = match from {
        Some(dir) => load_model(dir)?,
        None if step == Step::Two => {
            return Err(Error::contract("--step 2 needs --model pointing at a step-one model"));
        }
        None => DetectorModel::new(cfg.model.clone(), cfg.seed)?,
    };
    let size = model.fragment_size();
    let mfss = semaforge::mfss::MfssConfig {
        fragment_size: size,
        ..model.config.mfss
    };
    info!("building fragment caches (S={size})");
    let train = FragmentCache::build(&manifest.split(Split::Train), &mfss)?;
    let val = FragmentCache::build(&manifest.split(Split::Val), &mfss)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    if step != Step::Two {
        info!("step 1: F-Branch, {} epochs", tc.epochs);
        train_fbranch(&mut model, &train, &val, &tc)?;
    }
    if step != Step::One {
        info!("step 2: G-Branch, {} epochs", tc.epochs);
        train_gbranch(&mut model, &train, &val, &tc)?;
    }
    let dir = run.join("model");
    save_model(&dir, &model)?;
    write_json(
        &run.join("train_report.json"),
        &TrainSummary {
            model: dir.clone(),
            meta: model.meta.clone(),
        },
    )?;
    print_path(&dir);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cfg: &RunConfig, model: &Path, data: &Path, split: Split) -> Result<ExitCode> {
    let model = load_model(model)?;
    let manifest = Manifest::load(&data.join(MANIFEST_FILE))?;
    let report = evaluate(&model, &manifest, split)?;
    info!(
        "{split}: accuracy {:.4}, auc {}",
        report.accuracy,
        report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    let dir = prepare_run(cfg)?.join(format!("eval-{split}"));
    write_report(&dir, &report)?;
    print_path(&dir.join(REPORT_JSON));
    Ok(ExitCode::SUCCESS)
}

fn cmd_generalize(cfg: &RunConfig) -> Result<ExitCode> {
    let run = prepare_run(cfg)?;
    let report = run_generalization(&cfg.experiment(), &cfg.generalization_variants, &run)?;
    report.write(&run)?;
    print_path(&run.join("generalization.json"));
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<ExitCode> {
    let run = prepare_run(cfg)?;
    let report = run_ablation(&cfg.experiment(), &cfg.ablation, &run)?;
    report.write(&run)?;
    print_path(&run.join("ablation.json"));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<ExitCode> {
    let results = suite(cfg.seed)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:.3e} {status}", r.name, r.max_rel_error);
        ok &= r.passed();
    }
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check above {SUITE_TOLERANCE:e}");
        Ok(ExitCode::from(1))
    }
}
