use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use audfront::analysis::{export_params, log_probe_grid, modulation_profile, profile_csv};
use audfront::autodiff::{CheckStatus, Tensor};
use audfront::cochlear::CochlearParams;
use audfront::cortical::{init_cortical, CorticalInit, CorticalParams};
use audfront::model::{
    gradient_check, random_example, Ablation, CheckScope, Group, Model, ModelConfig, Task,
};
use audfront::signal::{
    gen_harmonic_complex, gen_moving_ripple, gen_pink_noise, read_wav, write_wav,
};
use audfront::train::{
    evaluate, Checkpoint, EvalOptions, Manifest, Protocol, TrainConfig, TrainData, TrainLog,
    Trainer,
};
use audfront::Error;

/// Differentiable auditory frontend: spectrograms, cortical responses,
/// training, evaluation and gradient checks.
#[derive(Parser)]
#[command(name = "audfront", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Auditory spectrogram of a WAV file as CSV (frames x 129 channels).
    Spectrogram(SpectrogramArgs),
    /// Per-filter cortical response energies of a WAV file.
    Cortical(CorticalArgs),
    /// Train a frontend + backend model.
    Train(TrainArgs),
    /// Evaluate a checkpoint under a protocol.
    Eval(EvalArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Export learned frontend parameters as CSV.
    ExportParams(ExportArgs),
    /// Response energy of every cortical filter to a grid of moving ripples.
    Profile(ProfileArgs),
    /// Generate test stimuli.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SpectrogramArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write an 8-bit PGM image (low channels at the bottom).
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Take cochlear parameters from this checkpoint instead of the defaults.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct CorticalArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "log", value_parser = lib::<CorticalInit>)]
    init: CorticalInit,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take frontend parameters from this checkpoint.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Also write the full [filter, channel, frame] tensor as CSV rows.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// classify | enhance
    #[arg(long, value_parser = lib::<Task>)]
    task: Task,
    /// full | cortical | frozen | cnn
    #[arg(long, default_value = "full", value_parser = lib::<Ablation>)]
    ablation: Ablation,
    /// log | random
    #[arg(long, default_value = "log", value_parser = lib::<CorticalInit>)]
    init: CorticalInit,
    #[arg(long)]
    manifest: PathBuf,
    /// Interferers for enhancement (default: noise/music items of --manifest).
    #[arg(long)]
    noise_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Mixing SNR of enhancement examples.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    snr_db: f64,
    /// Training crop length.
    #[arg(long, default_value_t = 1.0)]
    crop_seconds: f64,
    /// Steps between probe metrics in the log (0 disables).
    #[arg(long, default_value_t = 100)]
    eval_every: u64,
    /// Mix classification crops with pink noise at this SNR.
    #[arg(long, allow_hyphen_values = true)]
    train_noise_snr_db: Option<f64>,
    /// Continue from a checkpoint; its config replaces the flags above.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    noise_manifest: Option<PathBuf>,
    /// clean | pink | pink[-3,0,3] | enhance0db
    #[arg(long, value_parser = lib::<Protocol>)]
    protocol: Protocol,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Segment length (default: the checkpoint's training crop length).
    #[arg(long)]
    crop_seconds: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// frontend | backend | all
    #[arg(long, default_value = "all", value_parser = ["frontend", "backend", "all"])]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value = "random", value_parser = lib::<CorticalInit>)]
    init: CorticalInit,
    #[arg(long, default_value_t = 0.25)]
    seconds: f64,
    /// Also write every row as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Checkpoint to profile (default: a fresh model with --init/--seed).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "log", value_parser = lib::<CorticalInit>)]
    init: CorticalInit,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// pink | harmonic | ripple
    #[arg(long, value_parser = ["pink", "harmonic", "ripple"])]
    kind: String,
    /// WAV (pink, harmonic) or CSV (ripple).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 150.0)]
    f0: f64,
    #[arg(long, default_value_t = 10)]
    harmonics: usize,
    /// Ripple spectral modulation, cycles/octave.
    #[arg(long, default_value_t = 1.0)]
    spectral: f64,
    /// Ripple temporal modulation, Hz (negative for the opposite direction).
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    temporal: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Spectrogram(a) => spectrogram(a),
        Command::Cortical(a) => cortical(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportParams(a) => export(a),
        Command::Profile(a) => profile(a),
        Command::Synth(a) => synth(a),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.to_trainer()?.model)
}

fn lib<T: std::str::FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| e.to_string())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Rows are frames, columns channels.
fn spectrogram_csv(s: &Tensor) -> String {
    let (ch, frames) = (s.shape()[0], s.shape()[1]);
    let header: Vec<String> = (0..ch).map(|k| format!("ch{k}")).collect();
    let mut out = header.join(",") + "\n";
    for t in 0..frames {
        let row: Vec<String> = (0..ch)
            .map(|k| s.data()[k * frames + t].to_string())
            .collect();
        out += &row.join(",");
        out.push('\n');
    }
    out
}

fn pgm(s: &Tensor) -> Vec<u8> {
    let (ch, frames) = (s.shape()[0], s.shape()[1]);
    let max = s.data().iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = format!("P5\n{frames} {ch}\n255\n").into_bytes();
    for k in (0..ch).rev() {
        for t in 0..frames {
            out.push((s.data()[k * frames + t] * scale).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn spectrogram(a: SpectrogramArgs) -> Result<ExitCode> {
    let wave = read_wav(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let params = match &a.params {
        Some(p) => load_model(p)?.cochlear,
        None => CochlearParams::default(),
    };
    let s = params.spectrogram(&wave)?;
    write(&a.out, spectrogram_csv(&s))?;
    if let Some(p) = &a.pgm {
        write(p, pgm(&s))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cortical(a: CorticalArgs) -> Result<ExitCode> {
    let wave = read_wav(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (coch, cort): (CochlearParams, CorticalParams) = match &a.params {
        Some(p) => {
            let m = load_model(p)?;
            let cort = m.cortical.context("checkpoint has no cortical stage")?;
            (m.cochlear, cort)
        }
        None => (CochlearParams::default(), init_cortical(a.init, a.seed)),
    };
    let s = coch.spectrogram(&wave)?;
    let r = cort.respond(&s)?;
    let (nf, ch, frames) = (r.shape()[0], r.shape()[1], r.shape()[2]);
    let per = ch * frames;
    let mut out = String::from("filter,spectral_cpo,temporal_hz,energy,mean_abs\n");
    for i in 0..nf {
        let block = &r.data()[i * per..(i + 1) * per];
        let energy: f64 = block.iter().map(|v| v * v).sum();
        let mean_abs = block.iter().map(|v| v.abs()).sum::<f64>() / per as f64;
        let _ = writeln!(
            out,
            "{i},{},{},{energy},{mean_abs}",
            cort.spectral.data()[i],
            cort.temporal.data()[i]
        );
    }
    write(&a.out, out)?;
    if let Some(p) = &a.dump {
        let mut d = String::from("filter,channel");
        for t in 0..frames {
            let _ = write!(d, ",t{t}");
        }
        d.push('\n');
        for i in 0..nf {
            for k in 0..ch {
                let _ = write!(d, "{i},{k}");
                for v in &r.data()[i * per + k * frames..i * per + (k + 1) * frames] {
                    let _ = write!(d, ",{v}");
                }
                d.push('\n');
            }
        }
        write(p, d)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let main =
        Manifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let noise = a
        .noise_manifest
        .as_ref()
        .map(|p| Manifest::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Checkpoint::load(p)?.to_trainer()?;
            t.config.steps = a.steps;
            t
        }
        None => {
            let task = a.task;
            let mut cfg = TrainConfig::new(
                task,
                a.ablation,
                a.init,
                if task == Task::Classify {
                    main.n_classes()
                } else {
                    0
                },
                a.seed,
            );
            cfg.steps = a.steps;
            cfg.lr = a.lr;
            cfg.batch = a.batch;
            cfg.snr_db = a.snr_db;
            cfg.crop_seconds = a.crop_seconds;
            cfg.eval_every = a.eval_every;
            cfg.train_noise_snr_db = a.train_noise_snr_db;
            Trainer::new(cfg)?
        }
    };
    let data = TrainData::new(&main, noise.as_ref());
    let mut log = TrainLog::default();
    let steps = trainer.config.steps;
    let result = trainer.run(&data, steps, &mut log);
    Checkpoint::from_trainer(&trainer).save(&a.out)?;
    if let Some(p) = &a.log {
        log.write_csv(p, trainer.metric_name())?;
    }
    match result {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(e) => {
            eprintln!(
                "error: {e}; last good state (step {}) saved to {}",
                trainer.step,
                a.out.display()
            );
            Ok(ExitCode::from(2))
        }
    }
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let crop = a.crop_seconds.unwrap_or(ckpt.config.crop_seconds);
    let model = ckpt.to_trainer()?.model;
    let main = Manifest::load(&a.manifest)?;
    let noise = a.noise_manifest.as_ref().map(Manifest::load).transpose()?;
    let opts = EvalOptions {
        n_items: a.n_items,
        seed: a.seed,
        crop_seconds: crop,
    };
    let report = evaluate(
        &model,
        &TrainData::new(&main, noise.as_ref()),
        &a.protocol,
        &opts,
    )?;
    write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let scope = match a.scope.as_str() {
        "frontend" => CheckScope::Frontend,
        "backend" => CheckScope::Backend,
        "all" => CheckScope::All,
        s => bail!("--scope: unknown value `{s}`"),
    };
    let init = a.init;
    // the frontend scope checks one head; backend and all cover both heads
    let tasks: &[Task] = if scope == CheckScope::Frontend {
        &[Task::Classify]
    } else {
        &[Task::Classify, Task::Enhance]
    };
    let mut table = String::from("task,group,param,index,analytic,numeric,rel_err,status\n");
    let mut failed = 0;
    let mut total = 0;
    for &task in tasks {
        let n_classes = 40;
        let model = Model::new(ModelConfig::new(
            task,
            Ablation::Full,
            init,
            n_classes,
            a.seed,
        ))?;
        let ex = random_example(task, n_classes, a.seconds, a.seed)?;
        let report = gradient_check(&model, &ex, scope, a.step, a.tol)?;
        let frontend = report.count(Group::is_frontend);
        for (g, c) in &report.rows {
            let _ = writeln!(
                table,
                "{task},{g:?},{},{},{:e},{:e},{:e},{:?}",
                c.param, c.index, c.analytic, c.numeric, c.rel_err, c.status
            );
        }
        let bad = report
            .rows
            .iter()
            .filter(|(_, c)| c.status != CheckStatus::Pass)
            .count();
        let worst = report
            .rows
            .iter()
            .map(|(_, c)| c.rel_err)
            .fold(0.0, f64::max);
        println!(
            "{task}: {} components ({frontend} frontend), {bad} failing, max rel err {worst:.3e}",
            report.rows.len()
        );
        failed += bad;
        total += report.rows.len();
    }
    if let Some(p) = &a.out {
        write(p, &table)?;
    } else {
        print!("{table}");
    }
    println!(
        "{} of {total} components pass (tol {:e})",
        total - failed,
        a.tol
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn export(a: ExportArgs) -> Result<ExitCode> {
    let model = load_model(&a.ckpt)?;
    let report = export_params(&model);
    if report.filters.is_none() {
        eprintln!("notice: checkpoint has no cortical stage; cortical section omitted");
    }
    write(&a.out, report.to_csv())?;
    Ok(ExitCode::SUCCESS)
}

fn profile(a: ProfileArgs) -> Result<ExitCode> {
    let params = match &a.ckpt {
        Some(p) => load_model(p)?
            .cortical
            .context("checkpoint has no cortical stage")?,
        None => init_cortical(a.init, a.seed),
    };
    let probes = log_probe_grid();
    let e = modulation_profile(&params, &probes, a.frames, 1.0)?;
    write(&a.out, profile_csv(&e, &probes))?;
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    match a.kind.as_str() {
        "pink" => write_wav(&a.out, &gen_pink_noise(a.seconds, a.seed)?)?,
        "harmonic" => write_wav(
            &a.out,
            &gen_harmonic_complex(a.f0, a.harmonics, a.seconds, None)?,
        )?,
        "ripple" => {
            let frames = (a.seconds * 200.0).round() as usize;
            let r = gen_moving_ripple(a.spectral, a.temporal, frames)?;
            write(&a.out, spectrogram_csv(&r))?;
        }
        k => bail!("--kind: unknown value `{k}` (pink, harmonic or ripple)"),
    }
    Ok(ExitCode::SUCCESS)
}
