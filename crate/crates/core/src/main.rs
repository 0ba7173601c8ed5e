use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use segweight::dataset::{generate_dataset, Dataset};
use segweight::error::{Error, Result};
use segweight::experiment::{benchmark_spec, noise_bench, sweep, BENCHMARK_EPOCHS, BENCHMARK_SEED};
use segweight::imagery::{load_mask, save_rgb, save_weight_map};
use segweight::manifest::{write_json, RunManifest};
use segweight::model::MicroSegNet;
use segweight::report::{comparison_panel, upscale};
use segweight::train::{evaluate_report, predict_mask, train, TrainConfig};
use segweight::weighting::{accumulate_class_stats, class_weights, PixelWeighting, UncertaintySigma};

#[derive(Parser)]
#[command(name = "segweight", version, about = "Pixel-weighted segmentation losses: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val/test dataset.
    Synth(SynthArgs),
    /// Compute per-pixel weight maps (PFM) and class statistics for a mask folder.
    Weights(WeightsArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a model on a dataset split.
    Eval(EvalArgs),
    /// Train the baseline and sigma = 1, 2, 3 arms and tabulate them.
    Sweep(SweepArgs),
    /// Train both arms on noisy images; score on noisy and clean test images.
    NoiseBench(NoiseBenchArgs),
    /// Render ground truth and two models' predictions side by side.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// WIDTHxHEIGHT
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    /// Foreground fraction range LO,HI
    #[arg(long, default_value = "0.05,0.10", value_parser = parse_range)]
    coverage: (f64, f64),
    #[arg(long, default_value_t = 0.35)]
    roughness: f64,
    #[arg(long, default_value_t = 0.8)]
    contrast: f64,
    /// Boundary jitter in pixels, applied to training masks.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Gaussian noise sigma on the [0,1] intensity scale, applied to all images.
    #[arg(long, default_value_t = 0.0)]
    image_noise: f64,
    #[arg(long, default_value_t = 1)]
    channels: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args, Serialize)]
struct WeightsArgs {
    /// Folder of 8-bit mask PNGs.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Uncertainty spread, or `none`.
    #[arg(long, value_parser = parse_sigma)]
    sigma: SigmaArg,
    #[arg(long, value_enum, default_value = "on")]
    class_weights: Switch,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Uncertainty spread, or `none`.
    #[arg(long, value_parser = parse_sigma)]
    sigma: SigmaArg,
    #[arg(long, value_enum)]
    class_weights: Switch,
    #[arg(long, default_value_t = BENCHMARK_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    features: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    #[arg(long, default_value_t = BENCHMARK_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct NoiseBenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    #[arg(long, default_value_t = BENCHMARK_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    weighted: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Sigma of the rendered weight map, or `none`.
    #[arg(long, default_value = "2", value_parser = parse_sigma)]
    sigma: SigmaArg,
    /// Number of samples to render.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    Ok((
        w.parse().map_err(|e| format!("width: {e}"))?,
        h.parse().map_err(|e| format!("height: {e}"))?,
    ))
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((
        lo.trim().parse().map_err(|e| format!("{e}"))?,
        hi.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

/// `none` or a positive uncertainty spread.
#[derive(Clone, Copy, Debug, Serialize)]
#[serde(transparent)]
struct SigmaArg(Option<f64>);

impl SigmaArg {
    fn get(self) -> Result<Option<UncertaintySigma>> {
        self.0.map(UncertaintySigma::new).transpose()
    }
}

fn parse_sigma(s: &str) -> std::result::Result<SigmaArg, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(SigmaArg(None));
    }
    let v: f64 = s.parse().map_err(|_| format!("expected `none` or a positive number, got `{s}`"))?;
    UncertaintySigma::new(v).map_err(|e| e.to_string())?;
    Ok(SigmaArg(Some(v)))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

/// Refuse to write into an input location.
fn check_distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_owned());
    let out_c = canon(out);
    for input in inputs {
        if canon(input) == out_c {
            return Err(Error::Validation(format!(
                "output directory {} is also an input",
                out.display()
            )));
        }
    }
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<()> {
    let mut spec = benchmark_spec(a.seed);
    spec.count = a.n;
    spec.scene.width = a.size.0;
    spec.scene.height = a.size.1;
    spec.scene.fg_coverage_target = a.coverage;
    spec.scene.boundary_roughness = a.roughness;
    spec.scene.texture_contrast = a.contrast;
    spec.scene.channels = a.channels;
    spec.label_noise = a.label_noise;
    spec.image_noise = a.image_noise;
    let data = generate_dataset(&spec)?;
    create_dir(&a.out)?;
    m.outputs = data.save(&a.out)?;
    write_json(a.out.join("spec.json"), &spec)?;
    m.outputs.push("spec.json".into());
    Ok(())
}

fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_owned(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Serialize)]
struct WeightStats {
    m: u64,
    #[serde(rename = "C")]
    classes: usize,
    n_c: Vec<u64>,
    omega_c: Vec<f64>,
    sigma: Option<f64>,
}

fn weights(a: &WeightsArgs, m: &mut RunManifest) -> Result<()> {
    check_distinct(&a.out, &[&a.masks])?;
    let files = mask_files(&a.masks)?;
    let masks = files
        .iter()
        .map(|f| load_mask(f, a.classes))
        .collect::<Result<Vec<_>>>()?;
    let stats = accumulate_class_stats(masks.iter())?;
    let omega = class_weights(&stats)?;
    let weighting = PixelWeighting {
        class_weights: a.class_weights.on().then(|| omega.clone()),
        sigma: a.sigma.get()?,
    };
    create_dir(&a.out)?;
    for (file, mask) in files.iter().zip(&masks) {
        let name = format!("{}.pfm", file.file_stem().unwrap_or_default().to_string_lossy());
        save_weight_map(&weighting.weight_map(mask)?, a.out.join(&name))?;
        m.inputs.push(display(file));
        m.outputs.push(name);
    }
    write_json(
        a.out.join("stats.json"),
        &WeightStats {
            m: stats.total_pixels(),
            classes: stats.num_classes(),
            n_c: stats.pixels_per_class().to_vec(),
            omega_c: omega.weights().to_vec(),
            sigma: a.sigma.0,
        },
    )?;
    m.outputs.push("stats.json".into());
    Ok(())
}

fn load_data(dir: &Path, classes: usize, m: &mut RunManifest) -> Result<Dataset> {
    m.inputs.push(display(dir));
    Dataset::load(dir, classes)
}

fn train_cmd(a: &TrainArgs, m: &mut RunManifest) -> Result<()> {
    check_distinct(&a.out, &[&a.data])?;
    let data = load_data(&a.data, a.classes, m)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        sigma: a.sigma.get()?,
        use_class_weights: a.class_weights.on(),
        seed: a.seed,
        features: a.features,
        ..TrainConfig::default()
    };
    let outcome = train(&config, &data)?;
    create_dir(&a.out)?;
    outcome.model.save(a.out.join("model.msgn"))?;
    write_json(a.out.join("history.json"), &outcome.history)?;
    m.outputs = vec!["model.msgn".into(), "history.json".into()];
    Ok(())
}

fn eval_cmd(a: &EvalArgs, m: &mut RunManifest) -> Result<()> {
    check_distinct(&a.out, &[&a.data])?;
    let model = MicroSegNet::load(&a.model)?;
    m.inputs.push(display(&a.model));
    let data = load_data(&a.data, a.classes, m)?;
    let report = evaluate_report(&model, data.split(&a.split)?)?;
    create_dir(&a.out)?;
    write_json(a.out.join("metrics.json"), &report)?;
    m.outputs.push("metrics.json".into());
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn sweep_cmd(a: &SweepArgs, m: &mut RunManifest) -> Result<()> {
    check_distinct(&a.out, &[&a.data])?;
    let data = load_data(&a.data, a.classes, m)?;
    let result = sweep(&data, a.epochs, a.seed)?;
    create_dir(&a.out)?;
    let table = result.to_markdown();
    fs::write(a.out.join("sweep.md"), &table).map_err(|e| Error::Io {
        path: a.out.join("sweep.md"),
        source: e,
    })?;
    write_json(a.out.join("sweep.json"), &result)?;
    m.outputs = vec!["sweep.md".into(), "sweep.json".into()];
    print!("{table}");
    Ok(())
}

fn noise_bench_cmd(a: &NoiseBenchArgs, m: &mut RunManifest) -> Result<()> {
    check_distinct(&a.out, &[&a.data])?;
    let data = load_data(&a.data, a.classes, m)?;
    let result = noise_bench(&data, a.noise, a.epochs, a.seed)?;
    create_dir(&a.out)?;
    let table = result.to_markdown();
    fs::write(a.out.join("noise_bench.md"), &table).map_err(|e| Error::Io {
        path: a.out.join("noise_bench.md"),
        source: e,
    })?;
    write_json(a.out.join("noise_bench.json"), &result)?;
    m.outputs = vec!["noise_bench.md".into(), "noise_bench.json".into()];
    print!("{table}");
    Ok(())
}

fn report_cmd(a: &ReportArgs, m: &mut RunManifest) -> Result<()> {
    check_distinct(&a.out, &[&a.data])?;
    if a.scale == 0 {
        return Err(Error::Validation("scale must be at least 1".into()));
    }
    let baseline = MicroSegNet::load(&a.baseline)?;
    let weighted = MicroSegNet::load(&a.weighted)?;
    m.inputs.extend([display(&a.baseline), display(&a.weighted)]);
    let data = load_data(&a.data, a.classes, m)?;
    let stats = accumulate_class_stats(data.train.masks())?;
    let weighting = PixelWeighting {
        class_weights: Some(class_weights(&stats)?),
        sigma: a.sigma.get()?,
    };
    create_dir(&a.out)?;
    for s in data.split(&a.split)?.samples.iter().take(a.count) {
        let panel = comparison_panel(
            &s.image,
            &s.mask,
            &predict_mask(&baseline, s)?,
            &predict_mask(&weighted, s)?,
            &weighting.weight_map(&s.mask)?,
        )?;
        let panel = upscale(&panel, a.scale);
        let name = format!("{}_{}.png", a.split, s.name);
        save_rgb(a.out.join(&name), panel.width, panel.height, &panel.rgb)?;
        m.outputs.push(name);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let (name, out, mut manifest) = match &cli.command {
        Command::Synth(a) => ("synth", &a.out, RunManifest::new("synth", a, Some(a.seed))?),
        Command::Weights(a) => ("weights", &a.out, RunManifest::new("weights", a, None)?),
        Command::Train(a) => ("train", &a.out, RunManifest::new("train", a, Some(a.seed))?),
        Command::Eval(a) => ("eval", &a.out, RunManifest::new("eval", a, None)?),
        Command::Sweep(a) => ("sweep", &a.out, RunManifest::new("sweep", a, Some(a.seed))?),
        Command::NoiseBench(a) => ("noise-bench", &a.out, RunManifest::new("noise-bench", a, Some(a.seed))?),
        Command::Report(a) => ("report", &a.out, RunManifest::new("report", a, None)?),
    };
    match &cli.command {
        Command::Synth(a) => synth(a, &mut manifest)?,
        Command::Weights(a) => weights(a, &mut manifest)?,
        Command::Train(a) => train_cmd(a, &mut manifest)?,
        Command::Eval(a) => eval_cmd(a, &mut manifest)?,
        Command::Sweep(a) => sweep_cmd(a, &mut manifest)?,
        Command::NoiseBench(a) => noise_bench_cmd(a, &mut manifest)?,
        Command::Report(a) => report_cmd(a, &mut manifest)?,
    }
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    eprintln!("{name}: wrote {}", out.display());
    Ok(())
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("SEGWEIGHT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SEGWEIGHT_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() || matches!(e, Error::Format(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
