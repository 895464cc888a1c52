use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hsiman_core::checkpoint::{load_model, Checkpoint};
use hsiman_core::hsidata::{read_hsc, synth_dataset, write_hsc, HsiCube};
use hsiman_core::kv::KvText;
use hsiman_core::metrics::MetricReport;
use hsiman_core::mhrsa::spectral_attention_summary;
use hsiman_core::network::{denoise_cube, gate_maps, GateKind, Man, ManConfig};
use hsiman_core::noise::NoiseSpec;
use hsiman_core::profile::{doubling_ratios, MhrsaWorkload, SCALING_BANDS};
use hsiman_core::suite::{model_gradcheck, op_gradchecks, worst_per_group};
use hsiman_core::trainer::{loss_history_csv, prepare_patches, TrainConfig, Trainer};
use peak_alloc::PeakAlloc;

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

#[derive(Parser, Debug)]
#[command(name = "hsiman", version, about = "Hyperspectral image denoising with mixed attention networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic clean cubes.
    Synth(SynthArgs),
    /// Corrupt a clean cube with simulated noise.
    Simulate(SimulateArgs),
    /// Train a network on clean cubes.
    Train(TrainArgs),
    /// Denoise a cube with a trained network.
    Denoise(DenoiseArgs),
    /// Compare a prediction against ground truth.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(SeedArgs),
    /// Time spectral attention across band counts.
    Bench(SeedArgs),
    /// Dump attention gates of a trained network.
    ExportAttn(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// A `.hsc` file for a single cube, otherwise a directory.
    #[arg(long)]
    output: PathBuf,
    /// Key-value file with `count`, `bands`, `height` and `width`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Blind,
    Stripe,
    Deadline,
    Impulse,
    Mixture,
}

impl NoiseArg {
    fn name(self) -> &'static str {
        match self {
            NoiseArg::Gaussian => "gaussian",
            NoiseArg::Blind => "blind",
            NoiseArg::Stripe => "stripe",
            NoiseArg::Deadline => "deadline",
            NoiseArg::Impulse => "impulse",
            NoiseArg::Mixture => "mixture",
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    /// Noise level on the 0-255 scale; Gaussian noise only.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    #[value(name = "S")]
    S,
    #[value(name = "M")]
    M,
    #[value(name = "L")]
    L,
    #[value(name = "tiny")]
    Tiny,
}

impl VariantArg {
    fn name(self) -> &'static str {
        match self {
            VariantArg::S => "S",
            VariantArg::M => "M",
            VariantArg::L => "L",
            VariantArg::Tiny => "tiny",
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of clean `.hsc` cubes, or a single cube.
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    output: PathBuf,
    /// Training schedule as key-value text.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tiny")]
    variant: VariantArg,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Patch stride, overriding the schedule.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction and ground truth.
    #[arg(long, num_args = 2, value_names = ["PRED", "GT"], required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct SeedArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    /// `all`, `spectral`, `skip`, a block name such as `enc1` or `skip0`, or
    /// an index into the gate list.
    #[arg(long, default_value = "all")]
    layer: String,
}

/// A numeric check that ran to completion but failed.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn read_cube(path: &Path) -> Result<HsiCube> {
    read_hsc(path).with_context(|| format!("reading {}", path.display()))
}

fn write_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    write_hsc(cube, path).with_context(|| format!("writing {}", path.display()))
}

fn read_kv(path: &Path) -> Result<KvText> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    KvText::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let kv = match &args.config {
        Some(p) => read_kv(p)?,
        None => KvText::new(),
    };
    kv.reject_unknown(&["count", "bands", "height", "width"])?;
    let count: usize = kv.get_or("count", 1)?;
    let bands: usize = kv.get_or("bands", 31)?;
    let height: usize = kv.get_or("height", 64)?;
    let width: usize = kv.get_or("width", 64)?;
    let cubes = synth_dataset(count, bands, height, width, args.seed)?;
    if count == 1 && args.output.extension().is_some_and(|e| e == "hsc") {
        write_cube(&cubes[0], &args.output)?;
        println!("wrote {}", args.output.display());
        return Ok(());
    }
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    for (i, c) in cubes.iter().enumerate() {
        write_cube(c, &args.output.join(format!("synth_{i:03}.hsc")))?;
    }
    println!("wrote {count} cubes ({bands}x{height}x{width}) to {}", args.output.display());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let clean = read_cube(&args.input)?;
    if args.sigma.is_some() && !matches!(args.noise, NoiseArg::Gaussian) {
        bail!("--sigma applies to gaussian noise only");
    }
    let spec = NoiseSpec::from_name(args.noise.name(), args.sigma, args.seed)?;
    let noisy = spec.apply(&clean)?;
    write_cube(&noisy, &args.output)?;
    println!("wrote {} ({} noise)", args.output.display(), spec.name());
    Ok(())
}

fn training_cubes(input: &Path) -> Result<Vec<HsiCube>> {
    if input.is_file() {
        return Ok(vec![read_cube(input)?]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hsc"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .hsc files in {}", input.display());
    }
    paths.iter().map(|p| read_cube(p)).collect()
}

fn loss_path(output: &Path) -> PathBuf {
    output.with_extension("loss.csv")
}

fn train(args: TrainArgs) -> Result<()> {
    let cubes = training_cubes(&args.input)?;
    let bands = cubes[0].bands();
    if let Some(c) = cubes.iter().find(|c| c.bands() != bands) {
        bail!("training cubes disagree on band count: {bands} and {}", c.bands());
    }
    let mut trainer = match &args.model {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
            let t = Trainer::<f32>::from_checkpoint(&ck)?;
            if t.man.config.bands != bands {
                bail!("checkpoint model expects {} bands but the training cubes have {bands}", t.man.config.bands);
            }
            t
        }
        None => {
            let mut cfg = match &args.config {
                Some(p) => TrainConfig::from_kv(&read_kv(p)?)?,
                None => TrainConfig::desk_scale(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(stride) = args.stride {
                cfg.stride = stride;
            }
            let man_cfg = ManConfig::variant(args.variant.name(), bands)?;
            let seed = cfg.seed;
            Trainer::new(Man::seeded(man_cfg, seed)?, cfg)?
        }
    };
    let patches = prepare_patches(&cubes, trainer.config.patch, trainer.config.stride)?;
    println!(
        "training {} ({} parameters) on {} patches of {}x{}",
        trainer.man.config.variant,
        trainer.man.param_count(),
        patches.len(),
        trainer.config.patch,
        trainer.config.patch
    );
    let start = Instant::now();
    let output = args.output.clone();
    trainer.run(&patches, None, |t, rec| {
        println!(
            "stage {} epoch {} lr {:.1e} loss {:.4e} ({:.0}s)",
            rec.stage,
            rec.epoch,
            rec.lr,
            rec.mean_loss,
            start.elapsed().as_secs_f64()
        );
        t.save(&output)?;
        fs::write(loss_path(&output), loss_history_csv(&t.history))?;
        Ok(())
    })?;
    trainer.save(&args.output).with_context(|| format!("writing {}", args.output.display()))?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn denoise(args: DenoiseArgs) -> Result<()> {
    let cube = read_cube(&args.input)?;
    let man: Man<f32> = load_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let start = Instant::now();
    let out = denoise_cube(&man, &cube)?;
    let secs = start.elapsed().as_secs_f64();
    write_cube(&out, &args.output)?;
    let [s, h, w] = cube.dims();
    println!("denoised {s}x{h}x{w} in {secs:.3}s -> {}", args.output.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let pred = read_cube(&args.input[0])?;
    let gt = read_cube(&args.input[1])?;
    let report = MetricReport::compute(&pred, &gt)?;
    if args.csv {
        println!("{}", MetricReport::CSV_HEADER);
        println!("{}", report.csv_row());
    } else {
        print!("{report}");
    }
    Ok(())
}

fn gradcheck(args: SeedArgs) -> Result<()> {
    let mut entries = op_gradchecks(args.seed)?;
    entries.extend(model_gradcheck(args.seed)?);
    for (group, worst, tol) in worst_per_group(&entries) {
        let verdict = if worst < tol { "ok" } else { "FAIL" };
        println!("{group:<18} max rel error {worst:.2e} (tolerance {tol:.0e}) {verdict}");
    }
    let failed: Vec<_> = entries.iter().filter(|e| !e.passed()).collect();
    for e in &failed {
        println!("failed: {} {} {:?}", e.group, e.case, e.report);
    }
    if failed.is_empty() {
        println!("{} checks passed", entries.len());
        Ok(())
    } else {
        Err(NumericFailure(format!("{} of {} gradient checks failed", failed.len(), entries.len())).into())
    }
}

const BENCH_CHANNELS: usize = 16;
const BENCH_SIZE: usize = 32;
const BENCH_REPS: usize = 5;

fn bench(args: SeedArgs) -> Result<()> {
    println!("spectral attention, {BENCH_CHANNELS} channels, {BENCH_SIZE}x{BENCH_SIZE} pixels, forward and backward");
    println!("bands,median_ms,peak_mib");
    let (mut times, mut peaks) = (Vec::new(), Vec::new());
    for s in SCALING_BANDS {
        let w = MhrsaWorkload::new(s, BENCH_CHANNELS, BENCH_SIZE, args.seed);
        w.run()?;
        let t = w.median_seconds(BENCH_REPS)?;
        let before = ALLOC.current_usage();
        ALLOC.reset_peak_usage();
        w.run()?;
        let peak = ALLOC.peak_usage().saturating_sub(before) as f64;
        println!("{s},{:.3},{:.2}", t * 1e3, peak / 1048576.0);
        times.push(t);
        peaks.push(peak);
    }
    let fmt = |v: Vec<f64>| v.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ");
    println!("time ratio per doubling: {}", fmt(doubling_ratios(&times)));
    println!("memory ratio per doubling: {}", fmt(doubling_ratios(&peaks)));
    Ok(())
}

fn export_attn(args: ExportArgs) -> Result<()> {
    let cube = read_cube(&args.input)?;
    let man: Man<f32> = load_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let maps = gate_maps(&man, &cube)?;
    if maps.is_empty() {
        bail!("the model has no attention gates");
    }
    let selected: Vec<_> = match args.layer.as_str() {
        "all" => maps.iter().collect(),
        "spectral" => maps.iter().filter(|m| m.kind == GateKind::Spectral).collect(),
        "skip" => maps.iter().filter(|m| m.kind == GateKind::Skip).collect(),
        sel => match sel.parse::<usize>() {
            Ok(i) => match maps.get(i) {
                Some(m) => vec![m],
                None => bail!("layer index {i} out of range, the model has {} gate tensors", maps.len()),
            },
            Err(_) => maps.iter().filter(|m| m.name == sel).collect(),
        },
    };
    if selected.is_empty() {
        let names: Vec<_> = maps.iter().map(|m| m.name.as_str()).collect();
        bail!("no gate tensor matches layer {:?}; available: {}", args.layer, names.join(", "));
    }
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    for m in selected {
        let suffix = match m.kind {
            GateKind::Spectral => "spectral_gate",
            GateKind::Skip => "skip_gate",
        };
        let path = args.output.join(format!("{}.{suffix}.hsc", m.name));
        write_cube(&m.to_cube()?, &path)?;
        let [_, c, s, h, w] = m.values.dims5()?;
        println!("{} {suffix} {c}x{s}x{h}x{w} -> {}", m.name, path.display());
        if m.kind == GateKind::Spectral {
            let summary = spectral_attention_summary(&m.values)?;
            let rows: Vec<String> =
                summary.iter().map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")).collect();
            let csv = args.output.join(format!("{}.band_weights.csv", m.name));
            fs::write(&csv, rows.join("\n") + "\n").with_context(|| format!("writing {}", csv.display()))?;
        }
    }
    Ok(())
}

fn is_numeric(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<hsiman_core::Error>().is_some_and(|e| e.is_numeric()) || e.downcast_ref::<NumericFailure>().is_some()
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::ExportAttn(a) => export_attn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numeric(&e) { 1 } else { 2 })
        }
    }
}
