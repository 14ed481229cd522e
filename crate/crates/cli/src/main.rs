use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ddacdn_core::analysis::{dump_features, robustness_csv, run_robustness};
use ddacdn_core::config::{parse_config, Settings};
use ddacdn_core::data::{Dataset, Domain, LabeledImage};
use ddacdn_core::datasynth::synth_dataset;
use ddacdn_core::detector::{read_checkpoint, write_checkpoint, ModelParams};
use ddacdn_core::eval::{detect, evaluate, iou_sweep, pr_csv, pr_curve, sweep_csv, EvalSettings};
use ddacdn_core::fsio::write_atomic;
use ddacdn_core::imgproc::{apage, read_pgm, write_pgm, ApageConfig, ImageGray};
use ddacdn_core::mkmmd::{gaussian_shift_sweep, shift_csv};
use ddacdn_core::train::{train_baseline, train_ddacdn, ApagePolicy, EpochEval, TrainConfig};
use ddacdn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ddacdn", version, about = "Domain-adaptive crack detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ddacdn,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance a PGM image with patch-wise gamma correction and CLAHE.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        patch: usize,
        #[arg(long, default_value_t = 2.0)]
        clip: f64,
        #[arg(long, default_value = "8x8", value_parser = parse_tiles)]
        tiles: (usize, usize),
    },
    /// Generate the synthetic two-domain benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a detector.
    Train {
        #[arg(long, value_enum, default_value = "ddacdn")]
        mode: Mode,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Score the target test split after every epoch.
        #[arg(long)]
        eval_each_epoch: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target", value_parser = parse_domain)]
        domain: Domain,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        nms: f64,
        /// Enhance images with APAGE before inference.
        #[arg(long)]
        apage: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pr: Option<PathBuf>,
        #[arg(long, default_value_t = 101)]
        pr_points: usize,
        /// Metrics at every match IoU threshold 0.05..0.95.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// MMD² between N(0,1) and shifted N(δ,1) samples.
    MmdDemo {
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,4")]
        shift: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class F1 under random Gaussian pixel corruption.
    Robustness {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target", value_parser = parse_domain)]
        domain: Domain,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
        ratio: Vec<f64>,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        apage: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write stage-2/3/4 feature maps of one image as CSV.
    DumpFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        apage: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_tiles(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected COLSxROWS, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn settings(config: Option<&Path>) -> Result<Settings> {
    match config {
        Some(p) => parse_config(p)?.settings(),
        None => ddacdn_core::config::parse_config_str("", "<defaults>")?.settings(),
    }
}

fn load_split(root: &Path, domain: Domain, split: &str) -> Result<Vec<LabeledImage>> {
    let samples = Dataset::open(root)?.load_split(domain, split)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no {domain}/{split} samples", root.display())));
    }
    Ok(samples)
}

fn enhancement(flag: bool, cfg: &TrainConfig) -> Option<ApageConfig> {
    flag.then(|| cfg.apage.clone())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Enhance { input, out, patch, clip, tiles } => {
            let cfg = ApageConfig { patch_h: patch, patch_w: patch, clahe_clip: clip, clahe_tiles: tiles, ..ApageConfig::default() };
            cfg.validate()?;
            write_pgm(&apage(&read_pgm(&input)?, &cfg)?, &out)
        }
        Command::Synth { out, config, seed } => {
            let spec = ddacdn_core::datasynth::SynthSpec { seed, ..settings(config.as_deref())?.synth };
            let entries = synth_dataset(&spec, &out)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
            Ok(())
        }
        Command::Train { mode, source, target, config, seed, out, eval_each_epoch } => {
            let mut cfg = TrainConfig { seed, ..settings(config.as_deref())?.train };
            cfg.checkpoint_dir = Some(out.join("checkpoints"));
            let src = load_split(&source, Domain::Source, "train")?;
            let holdout = match (&target, eval_each_epoch) {
                (Some(t), true) => Some(load_split(t, Domain::Target, "test")?),
                (None, true) => return Err(Error::InvalidArgument("--eval-each-epoch needs --target".into())),
                _ => None,
            };
            let eval_apage = match mode {
                Mode::Ddacdn => cfg.apage_policy != ApagePolicy::Off,
                Mode::Baseline => cfg.apage_policy == ApagePolicy::All,
            };
            let ev = holdout.as_deref().map(|samples| EpochEval {
                samples,
                settings: EvalSettings { apage: enhancement(eval_apage, &cfg), ..EvalSettings::default() },
            });
            let (params, log) = match mode {
                Mode::Ddacdn => {
                    let t = target.ok_or_else(|| Error::InvalidArgument("ddacdn mode needs --target".into()))?;
                    train_ddacdn(&cfg, &src, &load_split(&t, Domain::Target, "train")?, ev.as_ref())?
                }
                Mode::Baseline => train_baseline(&cfg, &src, ev.as_ref())?,
            };
            write_checkpoint(&out.join("model.ckpt"), &params)?;
            write_atomic(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
            if !log.epoch_f1.is_empty() {
                write_atomic(&out.join("epoch_metrics.csv"), log.epoch_csv().as_bytes())?;
            }
            let last = log.records.last().map_or(f64::NAN, |r| r.total);
            println!("{} iterations, final loss {last:.6}", log.records.len());
            Ok(())
        }
        Command::Eval { model, data, domain, split, iou, conf, nms, apage, config, out, pr, pr_points, sweep } => {
            let cfg = settings(config.as_deref())?.train;
            let params = read_checkpoint(&model)?;
            let samples = load_split(&data, domain, &split)?;
            for (name, v) in [("iou", iou), ("conf", conf), ("nms", nms)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("--{name} {v} outside [0, 1]")));
                }
            }
            let es = EvalSettings { conf_thresh: 0.0, nms_iou: nms, match_iou: iou, apage: enhancement(apage, &cfg), ..EvalSettings::default() };
            let images: Vec<&ImageGray> = samples.iter().map(|s| &s.image).collect();
            let all = detect(&params, &images, &es)?;
            let kept: Vec<_> = all.iter().map(|d| d.iter().filter(|x| x.confidence >= conf).copied().collect()).collect();
            let gts: Vec<&[_]> = samples.iter().map(|s| s.labels.as_slice()).collect();
            let classes = params.geometry.c;
            let report = evaluate(&kept, &gts, iou, classes);
            write_atomic(&out, report.to_csv().as_bytes())?;
            if let Some(p) = pr {
                write_atomic(&p, pr_csv(&pr_curve(&all, &gts, iou, pr_points, classes)).as_bytes())?;
            }
            if let Some(p) = sweep {
                let (rows, best) = iou_sweep(&kept, &gts, classes);
                write_atomic(&p, sweep_csv(&rows, best).as_bytes())?;
            }
            println!("macro F1 {:.4} on {} images", report.macro_f1(), samples.len());
            Ok(())
        }
        Command::MmdDemo { shift, n, seed, out } => {
            write_atomic(&out, shift_csv(&gaussian_shift_sweep(&shift, n, seed)?).as_bytes())
        }
        Command::Robustness { model, data, domain, split, ratio, sigma, seeds, apage, config, out } => {
            let cfg = settings(config.as_deref())?.train;
            let params = read_checkpoint(&model)?;
            let samples = load_split(&data, domain, &split)?;
            let es = EvalSettings { apage: enhancement(apage, &cfg), ..EvalSettings::default() };
            let rows = run_robustness(&params, &samples, &ratio, sigma, &seeds, &es)?;
            write_atomic(&out, robustness_csv(&rows).as_bytes())
        }
        Command::DumpFeatures { model, image, out, apage: enhance, config } => {
            let cfg = settings(config.as_deref())?.train;
            let params: ModelParams = read_checkpoint(&model)?;
            let mut img = read_pgm(&image)?;
            if enhance {
                img = apage(&img, &cfg.apage)?;
            }
            for p in dump_features(&params, &img, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Config { .. }
        | Error::UnsupportedFormat(_)
        | Error::Size(_)
        | Error::InsufficientLabels { .. } => 2,
        Error::NonFiniteLoss { .. }
        | Error::Domain { .. }
        | Error::ShapeMismatch { .. }
        | Error::NonScalarLoss(_)
        | Error::ForeignVar => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
