//! `perceptvis` command line. Each subcommand loads what it needs, calls
//! into the library and writes its outputs under `--out` together with a
//! `manifest.json` index of every file and its SHA-256.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use perceptvis::compose::Explainer;
use perceptvis::config::AppConfig;
use perceptvis::data::{load_manifest, Outcome, Split};
use perceptvis::decoder::{build_decoder, DecoderConfig};
use perceptvis::desk::{build_workspace, ClassifierConfig, DeskPlan};
use perceptvis::digest::Digest;
use perceptvis::evaluation::{compare_user_rates, read_responses, score_responses, QuizConfig, QuizExport, Tail};
use perceptvis::losses::{LossWeights, SsimConfig};
use perceptvis::model::{load_classifier, ArchDescriptor};
use perceptvis::render::write_bytes;
use perceptvis::report::{gallery_html, GalleryRow};
use perceptvis::trainer::{TrainConfig, Trainer};
use perceptvis::workbench::{encode_split, load_decoder, AssetKind, SampleQuery, Workbench, MAX_PAGE_SIZE};
use perceptvis::{Error, Result, StageExt};
use serde::Serialize;
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "perceptvis", version, about = "Perception visualization for multi-label image classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config shared by all subcommands.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[arg(long, global = true)]
    pub descriptor: Option<PathBuf>,
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub decoder: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub asset_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes dataset and train a small classifier
    /// and decoder for it.
    Desk(DeskArgs),
    /// Train a decoder against the frozen classifier.
    Train(TrainArgs),
    /// Explain one sample: panel, component images and a JSON record.
    Explain(ExplainArgs),
    /// HTML gallery of explanation panels.
    Report(ReportArgs),
    /// Simulatability quiz with one panel set per explainer.
    Quiz(QuizArgs),
    /// Score quiz responses, optionally against a second quiz.
    Score(ScoreArgs),
    /// Reconstruction metrics and decoder invariance.
    Eval(EvalArgs),
    /// HTTP service for the workbench UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DeskArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 500)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// 0 keeps the freshly initialized classifier.
    #[arg(long, default_value_t = 15)]
    pub classifier_epochs: usize,
    /// 0 keeps the freshly initialized decoder.
    #[arg(long, default_value_t = 30)]
    pub decoder_epochs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with TrainConfig fields; flags below override it.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Decoder architecture; defaults to that of the configured decoder.
    #[arg(long)]
    pub decoder_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Score the Eval split after every epoch and keep the best decoder.
    #[arg(long)]
    pub validate: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sample: String,
    /// Class name or index; the top prediction when omitted.
    #[arg(long)]
    pub class: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OutcomeArg {
    Correct,
    Incorrect,
    Mixed,
}

impl From<OutcomeArg> for Outcome {
    fn from(o: OutcomeArg) -> Self {
        match o {
            OutcomeArg::Correct => Outcome::Correct,
            OutcomeArg::Incorrect => Outcome::Incorrect,
            OutcomeArg::Mixed => Outcome::Mixed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub outcome: Option<OutcomeArg>,
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = 24)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct QuizArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n_correct: usize,
    #[arg(long, default_value_t = 14)]
    pub n_incorrect: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TailArg {
    Less,
    Greater,
    TwoSided,
}

impl From<TailArg> for Tail {
    fn from(t: TailArg) -> Self {
        match t {
            TailArg::Less => Tail::Less,
            TailArg::Greater => Tail::Greater,
            TailArg::TwoSided => Tail::TwoSided,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Quiz export JSON.
    #[arg(long)]
    pub quiz: PathBuf,
    /// CSV with user_id, question_id, chosen_option.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long, requires = "baseline_responses")]
    pub baseline_quiz: Option<PathBuf>,
    #[arg(long, requires = "baseline_quiz")]
    pub baseline_responses: Option<PathBuf>,
    /// Alternative for the per-user comparison, quiz against baseline.
    #[arg(long, value_enum, default_value = "greater")]
    pub tail: TailArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Second decoder checkpoint for the invariance comparison.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long, default_value_t = 99)]
    pub untrained_seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let json_errors = argv.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            if json_errors {
                report_json("usage", None, e.to_string().trim());
            } else {
                let _ = e.print();
            }
            return EXIT_VALIDATION;
        }
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if cli.global.json_errors {
                report_json(e.kind(), e.stage(), &e.to_string());
            } else {
                eprintln!("error: {e}");
            }
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn report_json(kind: &str, stage: Option<&str>, message: &str) {
    let mut body = json!({"kind": kind, "message": message});
    if let Some(s) = stage {
        body["stage"] = json!(s);
    }
    eprintln!("{}", json!({ "error": body }));
}

/// Config file, then `PERCEPTVIS_*` variables, then flags.
pub fn resolve_config(g: &GlobalArgs) -> Result<AppConfig> {
    let cfg = match &g.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    let mut cfg = cfg.with_process_env()?;
    for (flag, slot) in [
        (&g.descriptor, &mut cfg.descriptor),
        (&g.weights, &mut cfg.weights),
        (&g.decoder, &mut cfg.decoder),
        (&g.dataset, &mut cfg.dataset),
        (&g.asset_dir, &mut cfg.asset_dir),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(t) = g.threshold {
        cfg.threshold = t;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: Digest,
}

/// Indexes every file under `out` except the manifest itself.
pub fn write_manifest(out: &Path, command: &str) -> Result<()> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<ManifestEntry>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, acc)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("walked below root");
            if rel == Path::new(MANIFEST) {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            acc.push(ManifestEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: bytes.len() as u64,
                sha256: Digest::of_bytes(&bytes),
            });
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(out, out, &mut files)?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let body = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "files": files,
    });
    write_json(&out.join(MANIFEST), &body)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse_class(wb: &Workbench, class: Option<&str>) -> Result<Option<usize>> {
    class
        .map(|c| {
            wb.parse_class(c)
                .ok_or_else(|| Error::Argument(format!("unknown class {c:?}")))
        })
        .transpose()
}

fn execute(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let cfg = || resolve_config(&cli.global);
    let (out, name) = match &cli.command {
        Command::Desk(a) => (&a.out, "desk"),
        Command::Train(a) => (&a.out, "train"),
        Command::Explain(a) => (&a.out, "explain"),
        Command::Report(a) => (&a.out, "report"),
        Command::Quiz(a) => (&a.out, "quiz"),
        Command::Score(a) => (&a.out, "score"),
        Command::Eval(a) => (&a.out, "eval"),
        Command::Serve(a) => return serve(cfg()?, a),
    };
    match &cli.command {
        Command::Desk(a) => desk(a)?,
        Command::Train(a) => train(&cfg()?, a, argv)?,
        Command::Explain(a) => explain(&Workbench::open(&cfg()?)?, a)?,
        Command::Report(a) => report(&Workbench::open(&cfg()?)?, a)?,
        Command::Quiz(a) => quiz(&Workbench::open(&cfg()?)?, a)?,
        Command::Score(a) => score(a)?,
        Command::Eval(a) => eval(&Workbench::open(&cfg()?)?, a)?,
        Command::Serve(_) => unreachable!("handled above"),
    }
    write_manifest(out, name)?;
    println!("{}", out.join(MANIFEST).display());
    Ok(())
}

fn desk(a: &DeskArgs) -> Result<()> {
    let mut plan = DeskPlan {
        train_samples: a.train_samples,
        eval_samples: a.eval_samples,
        seed: a.seed,
        ..DeskPlan::default()
    };
    plan.classifier = (a.classifier_epochs > 0).then(|| ClassifierConfig {
        epochs: a.classifier_epochs,
        ..Default::default()
    });
    if let Some(d) = plan.decoder.as_mut() {
        d.epochs = a.decoder_epochs;
    }
    if a.decoder_epochs == 0 {
        plan.decoder = None;
    }
    let mut log = Vec::new();
    build_workspace(&a.out, &plan, &mut log)?;
    write_bytes(&a.out.join("desk_log.jsonl"), &log)
}

fn train(cfg: &AppConfig, a: &TrainArgs, argv: Vec<String>) -> Result<()> {
    let desc = ArchDescriptor::from_path(cfg.require("descriptor", &cfg.descriptor)?).stage("load descriptor")?;
    let bundle = load_classifier(cfg.require("weights", &cfg.weights)?, &desc).stage("load classifier")?;
    let manifest = load_manifest(cfg.require("dataset", &cfg.dataset)?).stage("load dataset")?;
    let arch: DecoderConfig = match &a.decoder_config {
        Some(p) => read_json(p)?,
        None => load_decoder(cfg.require("decoder", &cfg.decoder)?)?.config().clone(),
    };
    let mut tc: TrainConfig = match &a.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::new(30, 0),
    };
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if tc.dataset_id.is_empty() {
        tc.dataset_id = manifest.digest().to_hex();
    }
    tc.validate()?;

    let enc = bundle.truncate_encoder();
    let data = encode_split(&enc, &manifest, Split::Train)?;
    let held_out = if a.validate {
        Some(encode_split(&enc, &manifest, Split::Eval)?)
    } else {
        None
    };
    let dec = build_decoder(&arch, a.init_seed)?;
    let mut log = Vec::new();
    let mut trainer = Trainer::new(&enc, tc)?
        .log_to(&mut log)
        .checkpoint_dir(a.out.join("checkpoints"))
        .init_seed(a.init_seed)
        .command(argv);
    if let Some(v) = &held_out {
        trainer = trainer.validation(v);
    }
    let result = trainer.run(dec, &data);
    write_bytes(&a.out.join("train_log.jsonl"), &log)?;
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Diverged {
            epoch,
            step,
            reason,
            checkpoint,
        }) => {
            checkpoint.save(a.out.join("diverged.json"))?;
            return Err(Error::Diverged {
                epoch,
                step,
                reason,
                checkpoint,
            });
        }
        Err(e) => return Err(e),
    };
    outcome.checkpoint().save(a.out.join("decoder.json"))?;
    if let Some(best) = &outcome.best {
        best.to_checkpoint(Some(outcome.record.clone()))
            .save(a.out.join("best.json"))?;
    }
    write_json(&a.out.join("record.json"), &outcome.record)
}

fn explain(wb: &Workbench, a: &ExplainArgs) -> Result<()> {
    let class = parse_class(wb, a.class.as_deref())?;
    let art = wb.explain_sample(&a.sample, class)?;
    let mut digests = serde_json::Map::new();
    for (kind, asset) in &art.assets {
        write_bytes(&a.out.join(format!("{}.png", kind.as_str())), &asset.bytes)?;
        digests.insert(kind.as_str().to_string(), json!(asset.digest));
    }
    write_json(
        &a.out.join("record.json"),
        &json!({
            "summary": art.summary,
            "class_name": wb.class_names()[art.summary.class_index],
            "decoder_digest": wb.decoder().digest(),
            "asset_digests": digests,
        }),
    )
}

fn report(wb: &Workbench, a: &ReportArgs) -> Result<()> {
    if a.limit == 0 || a.limit > MAX_PAGE_SIZE {
        return Err(Error::Argument(format!("--limit must be in 1..={MAX_PAGE_SIZE}")));
    }
    let page = wb.list_samples(&SampleQuery {
        outcome: a.outcome.map(Into::into),
        class_index: parse_class(wb, a.class.as_deref())?,
        page: 1,
        page_size: a.limit,
    })?;
    let mut rows = Vec::with_capacity(page.items.len());
    for item in &page.items {
        let art = wb.explain_sample(&item.sample_id, None)?;
        let panel = &art.assets[&AssetKind::Panel];
        let rel = format!("assets/{}", panel.file_name());
        write_bytes(&a.out.join(&rel), &panel.bytes)?;
        rows.push(GalleryRow {
            sample_id: item.sample_id.clone(),
            outcome: item.outcome,
            class_name: item.top_class.clone(),
            targets: item.targets.clone(),
            prediction_set: item.prediction_set.clone(),
            top_posterior: item.top_posterior,
            panel: rel,
        });
    }
    let title = match a.outcome {
        Some(o) => format!("{} predictions", Outcome::from(o).as_str()),
        None => "all predictions".to_string(),
    };
    write_bytes(&a.out.join("index.html"), gallery_html(&title, &rows).as_bytes())?;
    write_json(&a.out.join("rows.json"), &json!({"total": page.total, "rows": rows}))
}

fn quiz(wb: &Workbench, a: &QuizArgs) -> Result<()> {
    let bundle = wb.quiz(&QuizConfig {
        n_correct: a.n_correct,
        n_incorrect: a.n_incorrect,
        seed: a.seed,
    })?;
    write_json(&a.out.join("questions.json"), &bundle.questions)?;
    for (explainer, export) in &bundle.exports {
        write_json(&a.out.join(quiz_file(*explainer)), export)?;
    }
    for asset in bundle.panels.values() {
        write_bytes(&a.out.join("assets").join(asset.file_name()), &asset.bytes)?;
    }
    Ok(())
}

pub fn quiz_file(explainer: Explainer) -> String {
    format!("quiz_{}.json", explainer.as_str())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let load = |quiz: &Path, responses: &Path| -> Result<_> {
        let export: QuizExport = read_json(quiz)?;
        let responses = read_responses(responses)?;
        Ok((export.explainer.clone(), score_responses(&export.questions, &responses)?))
    };
    let (explainer, main) = load(&a.quiz, &a.responses)?;
    let mut body = json!({"explainer": explainer, "score": main});
    if let (Some(q), Some(r)) = (&a.baseline_quiz, &a.baseline_responses) {
        let (base_explainer, base) = load(q, r)?;
        let tail = Tail::from(a.tail);
        body["baseline"] = json!({"explainer": base_explainer, "score": base});
        body["comparison"] = json!({
            "tail": tail,
            "correct_subset": compare_user_rates(&main, &base, Outcome::Correct, tail)?,
            "incorrect_subset": compare_user_rates(&main, &base, Outcome::Incorrect, tail)?,
        });
    }
    write_json(&a.out.join("score.json"), &body)
}

fn eval(wb: &Workbench, a: &EvalArgs) -> Result<()> {
    let ssim = SsimConfig::default();
    let metrics = wb.reconstruction_metrics(&LossWeights::REFERENCE, &ssim)?;
    write_json(&a.out.join("metrics.json"), &metrics)?;
    if let Some(path) = &a.against {
        let other = load_decoder(path)?;
        let report = wb.invariance(&other, a.untrained_seed, &ssim)?;
        write_json(
            &a.out.join("invariance.json"),
            &json!({
                "decoder_a": wb.decoder().digest(),
                "decoder_b": other.digest(),
                "untrained_seed": a.untrained_seed,
                "report": report,
            }),
        )?;
    }
    Ok(())
}

fn serve(mut cfg: AppConfig, a: &ServeArgs) -> Result<()> {
    if let Some(b) = &a.bind {
        cfg.bind.clone_from(b);
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    let _ = tracing_subscriber::fmt()
        .with_max_level(tracing_subscriber::filter::LevelFilter::INFO)
        .with_writer(std::io::stderr)
        .try_init();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    let _ = std::io::stdout().flush();
    rt.block_on(perceptvis_service::serve(cfg))
}
