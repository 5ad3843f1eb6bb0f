use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use motiongroup::eval::{evaluate, list_frames, TIMING_FILE};
use motiongroup::gradcheck::{run_suite, GradcheckConfig};
use motiongroup::pipeline::write_loss_csv;
use motiongroup::synth::{generate, write_sequence, SceneSpec};
use motiongroup::{read_flo, FlowField, InitStrategy, LossWeights, NetParams, SegmenterConfig, SequenceState};

#[derive(Parser)]
#[command(
    name = "motiongroup",
    version,
    about = "Online motion segmentation of optical-flow sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene file to flows/ and masks/.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment every .flo file of a directory, frame by frame.
    Segment {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: SegmentOptions,
        /// Write per-iteration losses as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Save the network weights after the last frame.
        #[arg(long)]
        save_checkpoint: Option<PathBuf>,
    },
    /// Compare predicted masks with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the embedding grid of one frame after segmenting up to it.
    DumpEmbeddings {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: SegmentOptions,
    },
}

#[derive(Args)]
struct SegmentOptions {
    #[arg(long, default_value_t = 30)]
    k: usize,
    #[arg(long, default_value_t = 0.05)]
    kappa: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda3: f64,
    /// Iterations on the first frame.
    #[arg(long, default_value_t = 100)]
    tmax: usize,
    /// Iterations on every later frame.
    #[arg(long, default_value_t = 10)]
    frame_iters: usize,
    #[arg(long, default_value = "normal", value_parser = parse_init)]
    init: InitStrategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    pretrain_epochs: usize,
    /// Start from saved network weights instead of a random network.
    #[arg(long)]
    init_from: Option<PathBuf>,
}

fn parse_init(s: &str) -> Result<InitStrategy, String> {
    s.parse().map_err(|e: motiongroup::Error| e.to_string())
}

impl SegmentOptions {
    fn state(&self) -> Result<SequenceState> {
        let mut config = SegmenterConfig {
            k: self.k,
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
                kappa: self.kappa,
                delta: self.delta,
                eta: self.eta,
                t_max: self.tmax,
            },
            per_frame_iters: self.frame_iters,
            pretrain_epochs: self.pretrain_epochs,
            init: self.init,
            seed: self.seed,
            ..Default::default()
        };
        let state = match &self.init_from {
            Some(path) => {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let net = NetParams::<f32>::load_checkpoint(BufReader::new(file))
                    .with_context(|| format!("loading {}", path.display()))?;
                config.net = net.config().clone();
                SequenceState::with_network(config, net)?
            }
            None => SequenceState::new(config)?,
        };
        Ok(state)
    }
}

fn load_flow(path: &Path) -> Result<FlowField> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_flo(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn flow_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = list_frames(dir, "flo").with_context(|| format!("listing {}", dir.display()))?;
    if files.is_empty() {
        bail!("no .flo files in {}", dir.display());
    }
    Ok(files)
}

fn synth(spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let scene = SceneSpec::parse(&text)?;
    let seq = generate(&scene)?;
    write_sequence(&seq, out)?;
    println!("wrote {} frames to {}", seq.flows.len(), out.display());
    Ok(())
}

fn segment(
    flows: &Path,
    out: &Path,
    opts: &SegmentOptions,
    log_path: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let files = flow_files(flows)?;
    std::fs::create_dir_all(out)?;
    let mut state = opts.state()?;
    let mut timing = BufWriter::new(File::create(out.join(TIMING_FILE))?);
    writeln!(timing, "frame,seconds")?;
    for (i, path) in files.iter().enumerate() {
        // frames are read one at a time: nothing beyond the current file is touched
        let flow = load_flow(path)?;
        let start = Instant::now();
        if i == 0 {
            state.pretrain(std::slice::from_ref(&flow), opts.pretrain_epochs)?;
        }
        let mask = state.process_frame(&flow)?;
        let seconds = start.elapsed().as_secs_f64();
        let stem = path.file_stem().unwrap().to_string_lossy();
        mask.save_pgm(&out.join(format!("{stem}.pgm")))?;
        writeln!(timing, "{stem},{seconds}")?;
        log::info!("{stem}: {} foreground pixels, {seconds:.3}s", mask.count());
    }
    timing.flush()?;
    if let Some(path) = log_path {
        write_loss_csv(&state.records, BufWriter::new(File::create(path)?))?;
    }
    if let Some(path) = checkpoint {
        state.net().save_checkpoint(BufWriter::new(File::create(path)?))?;
    }
    println!("segmented {} frames into {}", files.len(), out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, csv: Option<&Path>) -> Result<()> {
    let report = evaluate(pred, gt)?;
    print!("{}", report.summary());
    if let Some(path) = csv {
        report.write_csv(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let reports = run_suite(seed, &GradcheckConfig::default())?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{} {:<20} coords {:>3}  max rel err {:.3e}  kinks skipped {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.coords,
            r.max_rel_err,
            r.kinks_skipped
        );
        ok &= r.passed;
    }
    Ok(ok)
}

/// Text header (`MGEMB 1`, width, height, dim, `end`, one per line) followed by
/// little-endian `f32` values, pixel-major.
fn dump_embeddings(flows: &Path, frame: usize, out: &Path, opts: &SegmentOptions) -> Result<()> {
    let files = flow_files(flows)?;
    if frame >= files.len() {
        bail!(
            "frame {frame} requested but {} holds {} frames",
            flows.display(),
            files.len()
        );
    }
    let mut state = opts.state()?;
    let mut last = None;
    for (i, path) in files[..=frame].iter().enumerate() {
        let flow = load_flow(path)?;
        if i == 0 {
            state.pretrain(std::slice::from_ref(&flow), opts.pretrain_epochs)?;
        }
        state.process_frame(&flow)?;
        last = Some(flow);
    }
    let emb = state.embed(&last.expect("at least one frame"))?;
    let mut w = BufWriter::new(File::create(out)?);
    write!(w, "MGEMB 1\n{}\n{}\n{}\nend\n", emb.width, emb.height, emb.dim)?;
    for &v in &emb.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    println!(
        "wrote {}x{}x{} embedding to {}",
        emb.width,
        emb.height,
        emb.dim,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out)?,
        Command::Segment {
            flows,
            out,
            opts,
            log,
            save_checkpoint,
        } => segment(&flows, &out, &opts, log.as_deref(), save_checkpoint.as_deref())?,
        Command::Eval { pred, gt, csv } => eval(&pred, &gt, csv.as_deref())?,
        Command::Gradcheck { seed } => return gradcheck(seed),
        Command::DumpEmbeddings {
            flows,
            frame,
            out,
            opts,
        } => dump_embeddings(&flows, frame, &out, &opts)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
