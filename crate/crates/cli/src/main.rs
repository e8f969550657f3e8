use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use facekit::cascade::{load_cascade, parse_cascade_xml, save_cascade_json, CascadeModel, DetectParams};
use facekit::eval::{
    eval_detection, eval_recognition, parse_annotations, reference_detection_reports, reference_recognition_reports,
    render_csv, render_table, Annotation, ReportRow,
};
use facekit::facestore::{FaceStore, KeySource, StoreConfig};
use facekit::imaging::{load_pgm, save_pgm, GrayImage, Rect};
use facekit::lbph::LbpParams;
use facekit::pipeline::{PipelineConfig, RemoteRecognizer};
use facekit::synth::{planted_frame, planted_pattern_cascade, synthetic_face};
use facekit_server::remote::HttpRemote;
use facekit_server::ServerConfig;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const DEFAULT_KEY_ENV: &str = "FACEKIT_STORE_KEY";

/// Face detection and recognition toolkit: evaluation, enrolment and serving.
#[derive(Parser)]
#[command(name = "facekit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score detection or recognition against an annotated frame corpus.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the support server and console service.
    Serve(ServeArgs),
    /// Add a person to a face store, local or remote.
    Enroll(EnrollArgs),
    /// Identify a face image against a face store, local or remote.
    Identify(IdentifyArgs),
    /// Convert a cascade XML file to the JSON model format.
    #[command(subcommand)]
    Cascade(CascadeCommand),
    /// Generate deterministic synthetic corpora for demos.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Detection accuracy over annotated frames.
    Detect(EvalDetectArgs),
    /// Per-person recognition accuracy over labelled crops.
    Recognize(EvalRecognizeArgs),
    /// Accuracy tables computed from the reference field-trial counts.
    Tables(TablesArgs),
}

#[derive(Subcommand)]
enum CascadeCommand {
    /// Convert a cascade XML file to the JSON model format.
    Convert {
        input: PathBuf,
        /// Write here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Planted-pattern frames with annotations, a matching cascade, and face images.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        persons: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Emit CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct StoreArgs {
    /// Face store directory.
    #[arg(long, env = "STORE_DIR")]
    store: PathBuf,
    #[arg(long, env = "CAPACITY", default_value_t = 10)]
    capacity: usize,
    /// Name of the environment variable holding the store secret.
    #[arg(long, env = "KEY_ENV", default_value = DEFAULT_KEY_ENV)]
    key_env: String,
}

impl StoreArgs {
    fn config(&self) -> StoreConfig {
        StoreConfig::new(&self.store, self.capacity, KeySource::EnvVar(self.key_env.clone()))
    }

    fn open(&self) -> Result<FaceStore> {
        FaceStore::open(self.config()).with_context(|| format!("opening face store {}", self.store.display()))
    }
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long, default_value_t = 1.1)]
    scale_factor: f64,
    #[arg(long, default_value_t = 3)]
    min_neighbors: u32,
    /// Smallest window, as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    min_size: Option<(u32, u32)>,
}

impl ScanArgs {
    fn params(&self) -> DetectParams {
        DetectParams {
            scale_factor: self.scale_factor,
            min_neighbors: self.min_neighbors,
            min_size: self.min_size,
            ..DetectParams::default()
        }
    }
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.trim().parse().map_err(|_| "bad width")?;
    let h = h.trim().parse().map_err(|_| "bad height")?;
    Ok((w, h))
}

#[derive(Args)]
struct EvalDetectArgs {
    /// Directory of PGM frames.
    #[arg(long)]
    corpus: PathBuf,
    /// Annotation JSON; `annotations.json` inside the corpus by default.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Cascade model, XML or JSON.
    #[arg(long, env = "CASCADE_PATH")]
    cascade: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Row label in the report.
    #[arg(long)]
    id: Option<String>,
    /// Also print per-frame timings.
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    scan: ScanArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct EvalRecognizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Label JSON; `labels.json` inside the corpus by default.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    store: StoreArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct TablesArgs {
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "HOST", default_value = "0.0.0.0")]
    host: IpAddr,
    #[arg(long, env = "PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long = "store-dir", env = "STORE_DIR", default_value = "facekit-store")]
    store_dir: PathBuf,
    #[arg(long, env = "CAPACITY", default_value_t = 10)]
    capacity: usize,
    #[arg(long, env = "KEY_ENV", default_value = DEFAULT_KEY_ENV)]
    key_env: String,
    /// Cascade for the console endpoints; they answer 503 without one.
    #[arg(long, env = "CASCADE_PATH")]
    cascade: Option<PathBuf>,
    /// Send the console pipeline's online recognition to this server.
    #[arg(long, env = "UPSTREAM_URL")]
    upstream: Option<String>,
    /// Where enrolment captures wait for confirmation.
    #[arg(long, env = "TEMP_DIR")]
    temp_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    cooldown_ms: u64,
    #[arg(long, default_value_t = 3000)]
    server_timeout_ms: u64,
    /// Report online failures instead of falling back to the local store.
    #[arg(long)]
    no_fallback: bool,
    #[arg(long, default_value_t = 5000)]
    probe_interval_ms: u64,
}

#[derive(Args)]
struct RemoteOrStore {
    /// Support server origin, e.g. http://localhost:8080. Uses a local store when absent.
    #[arg(long, conflicts_with = "store")]
    server: Option<String>,
    #[arg(long, env = "STORE_DIR")]
    store: Option<PathBuf>,
    #[arg(long, env = "CAPACITY", default_value_t = 10)]
    capacity: usize,
    #[arg(long, env = "KEY_ENV", default_value = DEFAULT_KEY_ENV)]
    key_env: String,
}

impl RemoteOrStore {
    fn remote(&self) -> Option<HttpRemote> {
        self.server.as_ref().map(|s| HttpRemote::new(s.clone(), Duration::from_secs(10)))
    }

    fn store(&self) -> Result<FaceStore> {
        let Some(root) = &self.store else {
            bail!("either --server or --store is required");
        };
        StoreArgs {
            store: root.clone(),
            capacity: self.capacity,
            key_env: self.key_env.clone(),
        }
        .open()
    }
}

#[derive(Args)]
struct EnrollArgs {
    /// Face image (PGM).
    image: PathBuf,
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "")]
    notes: String,
    /// Crop this box out of the image first, as X,Y,W,H.
    #[arg(long, value_parser = parse_rect)]
    crop: Option<Rect>,
    #[command(flatten)]
    target: RemoteOrStore,
}

#[derive(Args)]
struct IdentifyArgs {
    image: PathBuf,
    #[arg(long, value_parser = parse_rect)]
    crop: Option<Rect>,
    #[command(flatten)]
    target: RemoteOrStore,
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad number {p:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, w, h] => Ok(Rect::new(x, y, w, h)),
        _ => Err("expected X,Y,W,H".into()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Eval(EvalCommand::Detect(args)) => eval_detect(args),
        Command::Eval(EvalCommand::Recognize(args)) => eval_recognize(args),
        Command::Eval(EvalCommand::Tables(args)) => {
            print!("{}", render(&reference_detection_reports(), args.output.csv));
            println!();
            print!("{}", render(&reference_recognition_reports(), args.output.csv));
            Ok(())
        }
        Command::Serve(args) => serve(args),
        Command::Enroll(args) => enroll(args),
        Command::Identify(args) => identify(args),
        Command::Cascade(CascadeCommand::Convert { input, output }) => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let model = parse_cascade_xml(&text).with_context(|| format!("parsing {}", input.display()))?;
            let json = save_cascade_json(&model);
            match output {
                Some(path) => fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{}", String::from_utf8_lossy(&json)),
            }
            Ok(())
        }
        Command::Synth(SynthCommand::Corpus { out, frames, persons, seed }) => synth_corpus(&out, frames, persons, seed),
    }
}

fn render<R: ReportRow>(rows: &[R], csv: bool) -> String {
    if csv {
        render_csv(rows)
    } else {
        render_table(rows)
    }
}

fn read_cascade(path: &Path) -> Result<CascadeModel> {
    let bytes = fs::read(path).with_context(|| format!("reading cascade {}", path.display()))?;
    load_cascade(&bytes).with_context(|| format!("loading cascade {}", path.display()))
}

fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_annotations(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_image(path: &Path, crop: Option<Rect>) -> Result<GrayImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let img = load_pgm(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    match crop {
        Some(r) => facekit::imaging::crop(&img, &r).with_context(|| format!("cropping {r:?}")),
        None => Ok(img),
    }
}

fn eval_detect(args: EvalDetectArgs) -> Result<()> {
    let annotations = read_annotations(&args.annotations.unwrap_or_else(|| args.corpus.join("annotations.json")))?;
    let cascade = read_cascade(&args.cascade)?;
    let id = args
        .id
        .unwrap_or_else(|| args.corpus.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    let eval = eval_detection(&id, &args.corpus, &annotations, &cascade, &args.scan.params(), args.iou)?;
    print!("{}", render(std::slice::from_ref(&eval.report), args.output.csv));
    if args.timings {
        println!();
        for f in &eval.frames {
            let flag = if f.over_budget { "  over budget" } else { "" };
            println!("{}  {:.1} ms  {} found  {} correct{flag}", f.frame, f.millis, f.detections, f.correct);
        }
    }
    let slow = eval.frames_over_budget().count();
    if slow > 0 {
        eprintln!("{slow} of {} frames exceeded the 400 ms budget", eval.frames.len());
    }
    Ok(())
}

fn eval_recognize(args: EvalRecognizeArgs) -> Result<()> {
    let labels = read_annotations(&args.labels.unwrap_or_else(|| args.corpus.join("labels.json")))?;
    let store = args.store.open()?;
    let reports = eval_recognition(&args.corpus, &labels, &store, &LbpParams::default())?;
    print!("{}", render(&reports, args.output.csv));
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut pipeline = PipelineConfig {
        cooldown_ms: args.cooldown_ms,
        server_endpoint: args.upstream,
        online_fallback: !args.no_fallback,
        server_timeout_ms: args.server_timeout_ms,
        ..PipelineConfig::default()
    };
    if let Some(dir) = args.temp_dir {
        pipeline.temp_dir = dir;
    }
    let config = ServerConfig {
        addr: SocketAddr::new(args.host, args.port),
        store: StoreConfig::new(args.store_dir, args.capacity, KeySource::EnvVar(args.key_env)),
        cascade_path: args.cascade,
        pipeline,
        probe_interval: Duration::from_millis(args.probe_interval_ms),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(facekit_server::run(config))?;
    Ok(())
}

fn enroll(args: EnrollArgs) -> Result<()> {
    let face = read_image(&args.image, args.crop)?;
    let id = match args.target.remote() {
        Some(remote) => remote.enroll(&args.name, &args.notes, &face)?,
        None => {
            let mut store = args.target.store()?;
            store.enroll(&args.name, &args.notes, &face, facekit::now_millis())?.id
        }
    };
    println!("{id}");
    Ok(())
}

fn identify(args: IdentifyArgs) -> Result<()> {
    let face = read_image(&args.image, args.crop)?;
    let answer = match args.target.remote() {
        Some(remote) => remote.identify(&face)?,
        None => {
            let mut store = args.target.store()?;
            facekit_server::service::identify(&mut store, &face, &LbpParams::default(), facekit::now_millis())?
        }
    };
    println!("{}", serde_json::to_string_pretty(&answer)?);
    Ok(())
}

fn synth_corpus(out: &Path, frames: usize, persons: u64, seed: u64) -> Result<()> {
    let detect_dir = out.join("detect");
    let faces_dir = out.join("faces");
    fs::create_dir_all(&detect_dir)?;
    fs::create_dir_all(&faces_dir)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut annotations = Vec::with_capacity(frames);
    for i in 0..frames {
        let frame = format!("frame-{i:04}.pgm");
        let background = rng.random_range(40..=215);
        let (img, boxes) = if i % 4 == 3 {
            (GrayImage::filled(320, 240, background)?, vec![])
        } else {
            let s = rng.random_range(24..=96);
            let b = Rect::new(rng.random_range(0..=320 - s), rng.random_range(0..=240 - s), s, s);
            (planted_frame(320, 240, background, &b), vec![b])
        };
        fs::write(detect_dir.join(&frame), save_pgm(&img))?;
        annotations.push(Annotation { frame, boxes, label: None });
    }
    fs::write(detect_dir.join("annotations.json"), serde_json::to_vec_pretty(&annotations)?)?;
    fs::write(out.join("cascade.json"), save_cascade_json(&planted_pattern_cascade(24, 1.2)))?;

    let mut labels = Vec::new();
    for p in 0..persons {
        let frame = format!("person-{p}.pgm");
        fs::write(faces_dir.join(&frame), save_pgm(&synthetic_face(p, 100)))?;
        labels.push(Annotation {
            frame,
            boxes: vec![],
            label: Some(format!("Person {p}")),
        });
    }
    fs::write(faces_dir.join("labels.json"), serde_json::to_vec_pretty(&labels)?)?;
    println!("wrote {frames} frames and {persons} faces under {}", out.display());
    Ok(())
}
