use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tipsynth::eval::MetricsReport;
use tipsynth::gradsuite::gradient_suite;
use tipsynth::keyboard::KeyboardGeometry;
use tipsynth::pipeline::trajfile::TrajectoryFile;
use tipsynth::pipeline::{
    build_priors, evaluate_output, evaluate_pieces, generate_synthetic_corpus, run_pipeline_partial, train_stage,
    Corpus, CorpusReport, CorpusSpec, Models, PipelineConfig, Split, Stage,
};
use tipsynth::pose::HandPose;
use tipsynth::refine::{Conditioning, Fusion};
use tipsynth::score::{parse_fingering, parse_midi, FingeringGrid, FrameGrid, NoteEvent};
use tipsynth::types::Hand;

#[derive(Parser)]
#[command(name = "tipsynth", version, about = "Piano hand-motion synthesis from MIDI and fingering")]
struct Cli {
    /// Pipeline configuration JSON. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Keyboard geometry JSON, overriding the configured one.
    #[arg(long, global = true)]
    keyboard: Option<PathBuf>,
    /// Model directory, overriding the configured one.
    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,
    #[command(flatten)]
    ablation: Ablation,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Ablation {
    /// Let the refiners and smoother move pressed fingertips in Y and Z.
    #[arg(long, global = true)]
    no_y_mask: bool,
    /// MIDI conditioning of the second refiner.
    #[arg(long, global = true, value_enum)]
    conditioning: Option<CondArg>,
    /// How MIDI features enter the second refiner.
    #[arg(long, global = true, value_enum)]
    fusion: Option<FusionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CondArg {
    Raw,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Film,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground truth.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Corpus spec JSON; fields left out take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pieces: Option<usize>,
        /// Capture jitter, mm.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Build the fingertip position prior and wrist offsets from a corpus.
    BuildPriors {
        /// Corpus directory or its manifest.json.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one learned stage on the corpus train split.
    Train {
        #[arg(long, value_parser = parse_train_stage)]
        stage: Stage,
        #[arg(long)]
        train: PathBuf,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the cascade on one piece and write per-stage trajectory files.
    Synthesize {
        #[arg(long)]
        midi: PathBuf,
        #[arg(long)]
        fingering: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Last stage to run: 1, 2.1, 2.2, 2.3 (or 2), 3, 4.
        #[arg(long, alias = "stage", value_parser = parse_stage, default_value = "4")]
        through_stage: Stage,
        /// Fingertip stage feeding the contact metrics.
        #[arg(long, value_parser = parse_stage)]
        tap: Option<Stage>,
        /// Ground-truth pose files, left then right.
        #[arg(long, num_args = 2, value_names = ["LEFT", "RIGHT"])]
        gt: Option<Vec<PathBuf>>,
        /// Metrics report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score trajectory files, or run and score a corpus split.
    Evaluate {
        /// Predicted trajectory files, one per hand.
        #[arg(long, num_args = 1..=2, required_unless_present = "corpus", conflicts_with = "corpus")]
        pred: Option<Vec<PathBuf>>,
        #[arg(long, required_unless_present = "corpus")]
        midi: Option<PathBuf>,
        /// Checked for frame alignment with the predictions.
        #[arg(long)]
        fingering: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["LEFT", "RIGHT"])]
        gt: Option<Vec<PathBuf>>,
        /// Corpus directory to run the models on.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_parser = parse_stage, default_value = "4")]
        through_stage: Stage,
        #[arg(long, value_parser = parse_stage)]
        tap: Option<Stage>,
        /// Directory for the corpus run's trajectory files.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of every learned block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates perturbed per parameter tensor.
        #[arg(long, default_value_t = 12)]
        coords: usize,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    match s.trim_start_matches(['S', 's']) {
        "2" => Ok(Stage::S2_3),
        _ => Stage::parse(s).map_err(|e| e.to_string()),
    }
}

fn parse_train_stage(s: &str) -> Result<Stage, String> {
    let stage = parse_stage(s)?;
    if stage == Stage::S1 {
        return Err("stage 1 has nothing to train; use build-priors".into());
    }
    Ok(stage)
}

impl Cli {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => {
                let mut c = PipelineConfig::default();
                c.apply_env()?;
                c
            }
        };
        if let Some(k) = &self.keyboard {
            cfg.keyboard = Some(k.clone());
        }
        if let Some(d) = &self.model_dir {
            cfg.model_dir = d.clone();
        }
        let a = &self.ablation;
        if a.no_y_mask {
            cfg.refiner.mask_y = false;
        }
        if let Some(c) = a.conditioning {
            cfg.refiner.conditioning = match c {
                CondArg::Raw => Conditioning::Raw,
                CondArg::None => Conditioning::None,
            };
        }
        if let Some(f) = a.fusion {
            cfg.refiner.fusion = match f {
                FusionArg::Film => Fusion::Film,
                FusionArg::Concat => Fusion::Concat,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn corpus_dir(p: &Path) -> &Path {
    if p.is_file() {
        p.parent().unwrap_or(Path::new("."))
    } else {
        p
    }
}

fn load_corpus(p: &Path) -> Result<Corpus> {
    let dir = corpus_dir(p);
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_notes(path: &Path) -> Result<Vec<NoteEvent>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_midi(&bytes).with_context(|| path.display().to_string())?.events)
}

/// Fingering on a grid long enough for every note, or exactly `frames`.
fn read_fingering(path: &Path, notes: &[NoteEvent], frames: Option<usize>) -> Result<FingeringGrid> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let n = match frames {
        Some(n) => n,
        None => {
            let annotated = parse_fingering(&text, None)?.frames();
            let end = notes.iter().map(|n| n.end()).fold(0.0, f64::max);
            annotated.max(FrameGrid::covering(end).frame_count)
        }
    };
    Ok(parse_fingering(&text, Some(n)).with_context(|| path.display().to_string())?)
}

fn read_gt(paths: &[PathBuf]) -> Result<[HandPose; 2]> {
    let mut poses = Vec::new();
    for (p, hand) in paths.iter().zip(Hand::BOTH) {
        let pose = TrajectoryFile::load(p).and_then(|f| f.to_pose()).with_context(|| p.display().to_string())?;
        if pose.hand != hand {
            bail!("{} holds the {:?} hand, expected {hand:?}", p.display(), pose.hand);
        }
        poses.push(pose);
    }
    let [l, r]: [HandPose; 2] = poses.try_into().map_err(|_| anyhow::anyhow!("need two ground-truth files"))?;
    if l.len() != r.len() {
        bail!("ground-truth files disagree on length: {} vs {}", l.len(), r.len());
    }
    Ok([l, r])
}

#[derive(Serialize)]
struct PieceReportFile<'a> {
    through: Stage,
    tap: Stage,
    metrics: &'a MetricsReport,
    config: &'a PipelineConfig,
}

#[derive(Serialize)]
struct CorpusReportFile<'a> {
    split: &'a str,
    report: &'a CorpusReport,
    config: &'a PipelineConfig,
}

fn gen_corpus(cli: &Cli, out: &Path, spec: &Option<PathBuf>, seed: Option<u64>, pieces: Option<usize>, jitter: Option<f64>, dropout: Option<f64>) -> Result<()> {
    let mut s: CorpusSpec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| p.display().to_string())?,
        None => CorpusSpec::default(),
    };
    if let Some(v) = seed {
        s.seed = v;
    }
    if let Some(v) = pieces {
        s.pieces = v;
    }
    if let Some(v) = jitter {
        s.jitter_mm = v;
    }
    if let Some(v) = dropout {
        s.dropout = v;
    }
    let geom = cli.pipeline_config()?.geometry()?;
    let corpus = generate_synthetic_corpus(&s, &geom)?;
    corpus.save(out)?;
    let [tr, va, te] = s.split_counts();
    println!("wrote {} pieces to {} (train {tr}, val {va}, test {te})", corpus.pieces.len(), out.display());
    Ok(())
}

fn build_priors_cmd(cli: &Cli, train: &Path, out: &Option<PathBuf>) -> Result<()> {
    let cfg = cli.pipeline_config()?;
    let geom = cfg.geometry()?;
    let corpus = load_corpus(train)?;
    let models = build_priors(&cfg, &corpus.split(Split::Train), &geom)?;
    let path = out.clone().unwrap_or_else(|| cfg.model_path(&cfg.models.prior));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    models.prior.save(&path, models.offsets.as_ref())?;
    println!("prior: {} measured slots, {} filled, written to {}", models.prior.measured(), models.prior.populated(), path.display());
    Ok(())
}

fn train_cmd(cli: &Cli, stage: Stage, train: &Path, steps: Option<usize>) -> Result<()> {
    let mut cfg = cli.pipeline_config()?;
    if let Some(n) = steps {
        let t = &mut cfg.train;
        match stage {
            Stage::S2_1 => t.steps_s2_1 = n,
            Stage::S2_2 => t.steps_s2_2 = n,
            Stage::S2_3 => t.steps_s2_3 = n,
            Stage::S3 => t.steps_s3 = n,
            Stage::S4 => {
                t.steps_s4 = n;
                t.steps_s4_refine = n;
            }
            Stage::S1 => unreachable!(),
        }
    }
    let geom = cfg.geometry()?;
    let corpus = load_corpus(train)?;
    let mut models = Models::load(&cfg).context("stage 1 prior missing; run build-priors first")?;
    let reports = train_stage(&cfg, &mut models, stage, &corpus.split(Split::Train), &geom)?;
    models.save(&cfg)?;
    for r in &reports {
        println!("{}: {} steps, loss {:.4} -> {:.4}", r.stage, r.steps, r.initial_loss, r.final_loss);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synthesize_cmd(
    cli: &Cli,
    midi: &Path,
    fingering: &Path,
    out_dir: &Path,
    through: Stage,
    tap: Option<Stage>,
    gt: &Option<Vec<PathBuf>>,
    report: &Option<PathBuf>,
) -> Result<()> {
    let mut cfg = cli.pipeline_config()?;
    if let Some(t) = tap {
        cfg.tap = t;
    }
    cfg.check_models(through)?;
    let geom = cfg.geometry()?;
    let models = Models::load(&cfg)?;
    let notes = read_notes(midi)?;
    let gt = gt.as_deref().map(read_gt).transpose()?;
    let fing = read_fingering(fingering, &notes, gt.as_ref().map(|g| g[0].len()))?;

    let (out, result) = run_pipeline_partial(&cfg, &models, &notes, &fing, &geom, through);
    // whatever finished is written even when a later stage failed
    let written = out.write(out_dir)?;
    for p in &written {
        println!("{}", p.display());
    }
    result?;
    if let Some(path) = report {
        let metrics = evaluate_output(&out, &notes, gt.as_ref(), &geom, &cfg, cfg.tap)?;
        write_json(path, &PieceReportFile { through, tap: cfg.tap, metrics: &metrics, config: &cfg })?;
        println!("F1 {:.4} (P {:.4}, R {:.4}) at {}", metrics.contact.f1, metrics.contact.precision, metrics.contact.recall, cfg.tap);
    }
    Ok(())
}

fn evaluate_files(cli: &Cli, pred: &[PathBuf], midi: &Path, fingering: &Option<PathBuf>, gt: &Option<Vec<PathBuf>>, report: &Path) -> Result<()> {
    let cfg = cli.pipeline_config()?;
    let geom: KeyboardGeometry = cfg.geometry()?;
    let notes = read_notes(midi)?;
    let files: Vec<TrajectoryFile> = pred
        .iter()
        .map(|p| TrajectoryFile::load(p).with_context(|| p.display().to_string()))
        .collect::<Result<_>>()?;
    let tips = files.iter().map(|f| f.to_tips()).collect::<Result<Vec<_>, _>>()?;
    let frames = tips.iter().map(|t| t.len()).max().unwrap_or(0);
    if let Some(f) = fingering {
        read_fingering(f, &notes, Some(frames))?;
    }
    let gt = gt.as_deref().map(read_gt).transpose()?;
    let poses: Option<Vec<HandPose>> = files.iter().map(|f| f.to_pose().ok()).collect();
    let pairs = match (&poses, &gt) {
        (Some(p), Some(g)) if p.len() == 2 => Some((&p[..], &g[..])),
        _ => None,
    };
    let metrics = tipsynth::eval::evaluate(&tips, &notes, pairs, &geom, &cfg.eval)?;
    let stage = files.first().map(|f| f.stage.clone()).unwrap_or_default();
    #[derive(Serialize)]
    struct FileReport<'a> {
        stage: &'a str,
        metrics: &'a MetricsReport,
        config: &'a PipelineConfig,
    }
    write_json(report, &FileReport { stage: &stage, metrics: &metrics, config: &cfg })?;
    println!("F1 {:.4} (P {:.4}, R {:.4})", metrics.contact.f1, metrics.contact.precision, metrics.contact.recall);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_corpus(cli: &Cli, corpus: &Path, split: SplitArg, through: Stage, tap: Option<Stage>, out: &Option<PathBuf>, report: &Path) -> Result<()> {
    let mut cfg = cli.pipeline_config()?;
    if let Some(t) = tap {
        cfg.tap = t;
    }
    cfg.check_models(through)?;
    let geom = cfg.geometry()?;
    let models = Models::load(&cfg)?;
    let corpus = load_corpus(corpus)?;
    let (name, pieces) = match split {
        SplitArg::Train => ("train", corpus.split(Split::Train)),
        SplitArg::Val => ("val", corpus.split(Split::Val)),
        SplitArg::Test => ("test", corpus.split(Split::Test)),
        SplitArg::All => ("all", corpus.pieces.iter().collect()),
    };
    if pieces.is_empty() {
        bail!("the {name} split is empty");
    }
    let (rep, outputs) = evaluate_pieces(&cfg, &models, &pieces, &geom, through, cfg.tap)?;
    if let Some(dir) = out {
        for (p, o) in pieces.iter().zip(&outputs) {
            o.write(dir.join(&p.name))?;
        }
    }
    write_json(report, &CorpusReportFile { split: name, report: &rep, config: &cfg })?;
    let mpjpe = rep.mpjpe_mm.map(|m| format!(", MPJPE {m:.2} mm")).unwrap_or_default();
    println!(
        "{} pieces: F1 {:.4} (P {:.4}, R {:.4}) at {}{mpjpe}",
        pieces.len(),
        rep.contact.f1,
        rep.contact.precision,
        rep.contact.recall,
        rep.tap
    );
    Ok(())
}

fn gradcheck_cmd(seed: u64, coords: usize) -> Result<bool> {
    let checks = gradient_suite(seed, coords)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed();
        println!(
            "{:<22} {:>9.2e} < {:.0e} over {:>4} coords  {}",
            c.block,
            c.max_rel_err,
            c.tolerance,
            c.checked,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenCorpus { out, spec, seed, pieces, jitter, dropout } => gen_corpus(cli, out, spec, *seed, *pieces, *jitter, *dropout)?,
        Command::BuildPriors { train, out } => build_priors_cmd(cli, train, out)?,
        Command::Train { stage, train, steps } => train_cmd(cli, *stage, train, *steps)?,
        Command::Synthesize { midi, fingering, out, through_stage, tap, gt, report } => {
            synthesize_cmd(cli, midi, fingering, out, *through_stage, *tap, gt, report)?
        }
        Command::Evaluate { pred, midi, fingering, gt, corpus, split, through_stage, tap, out, report } => match corpus {
            Some(c) => evaluate_corpus(cli, c, *split, *through_stage, *tap, out, report)?,
            None => evaluate_files(cli, pred.as_deref().unwrap_or_default(), midi.as_deref().unwrap(), fingering, gt, report)?,
        },
        Command::Gradcheck { seed, coords } => return gradcheck_cmd(*seed, *coords),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
