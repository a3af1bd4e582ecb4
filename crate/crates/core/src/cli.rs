//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::convert::{
    calibrate_thresholds, convert_ann_to_snn, evaluate_tsweep, tsweep_csv, AnnModel, CalibrationMethod,
    CalibrationPolicy,
};
use crate::entropy::{
    entropy_of_pmf, forward_loss, spike_pmf_analytic, spike_pmf_mc, table1_formats, MembraneDist,
};
use crate::error::{Error, Result};
use crate::model_file::{load_model, save_model};
use crate::network::{count_ops, forward_timesteps, EnergyModel, ForwardOptions, Network, Trace};
use crate::neuron::BitFormat;
use crate::tensor::Tensor;
use crate::train::{evaluate, fit, gen_synthetic_dataset, load_idx, Dataset, EpochLog, SyntheticKind};

#[derive(Parser, Debug)]
#[command(name = "mbsnn", version, about = "Multi-bit spiking neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Entropy of quantized spikes from a Gaussian membrane potential.
    Entropy(EntropyArgs),
    /// Train a network from a configuration file.
    Train(TrainArgs),
    /// Convert a trained ReLU network and sweep time steps.
    Convert(ConvertArgs),
    /// Run a model and export traces and operation counts.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    #[arg(long, default_value_t = 0.6)]
    pub vth: f64,
    #[arg(long, default_value_t = 1)]
    pub int_bits: u32,
    #[arg(long, default_value_t = 0)]
    pub frac_bits: u32,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    /// Monte-Carlo samples; 0 skips the estimate.
    #[arg(long, default_value_t = 1_000_000)]
    pub mc_samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report the formats 1+0, 2+0, 1+1 and 2+1 instead of one format.
    #[arg(long)]
    pub table1: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `gaussian_blobs[:n=..,classes=..,seed=..,test=..]`, `two_spirals[...]`
    /// or `idx:<images>,<labels>`.
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CalibArg {
    Max,
    Percentile,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub ann_model: PathBuf,
    /// Calibration and evaluation data, same syntax as `train --data`.
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 1)]
    pub int_bits: u32,
    #[arg(long, default_value_t = 0)]
    pub frac_bits: u32,
    #[arg(long, value_enum, default_value_t = CalibArg::Percentile)]
    pub calib: CalibArg,
    #[arg(long, default_value_t = 99.9)]
    pub percentile: f64,
    #[arg(long, default_value_t = 10)]
    pub calib_batches: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,16,64,128")]
    pub tsweep: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input samples, same syntax as `train --data`.
    #[arg(long)]
    pub input: String,
    /// Number of leading samples to run.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long)]
    pub time_steps: Option<usize>,
    #[arg(long)]
    pub export_heatmap: Option<PathBuf>,
    #[arg(long)]
    pub export_raster: Option<PathBuf>,
    /// Write per-layer operation counts to this CSV.
    #[arg(long)]
    pub count_ops: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Io(_) | Error::Parse(_) | Error::Json(_) | Error::Shape { .. } => 3,
        Error::Numeric(_) | Error::State(_) => 4,
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Entropy(a) => cmd_entropy(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Parses a dataset argument. Synthetic sets default to
/// `n=2000, classes=4, seed=0, test=0.2`.
pub fn parse_data(arg: &str) -> Result<(Dataset, Option<Dataset>)> {
    if let Some(rest) = arg.strip_prefix("idx:") {
        let (img, lab) = rest
            .split_once(',')
            .ok_or_else(|| Error::invalid("idx data needs `idx:<images>,<labels>`"))?;
        return Ok((load_idx(Path::new(img), Path::new(lab))?, None));
    }
    let (kind, opts) = arg.split_once(':').unwrap_or((arg, ""));
    let kind: SyntheticKind = kind.parse()?;
    let (mut n, mut classes, mut seed, mut test) = (2000usize, 4usize, 0u64, 0.2f64);
    for kv in opts.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value, got {kv:?}")))?;
        let bad = |_| Error::invalid(format!("bad value for {k}: {v:?}"));
        match k {
            "n" => n = v.parse().map_err(bad)?,
            "classes" => classes = v.parse().map_err(bad)?,
            "seed" => seed = v.parse().map_err(bad)?,
            "test" => test = v.parse().map_err(|_| Error::invalid(format!("bad value for test: {v:?}")))?,
            _ => return Err(Error::invalid(format!("unknown data option {k:?}"))),
        }
    }
    let data = gen_synthetic_dataset(kind, n, classes, seed)?;
    if test == 0.0 {
        return Ok((data, None));
    }
    let (tr, te) = data.split(test, seed)?;
    Ok((tr, Some(te)))
}

pub fn cmd_entropy(a: &EntropyArgs) -> Result<()> {
    let dist = MembraneDist::gaussian(a.mean, a.std)?;
    let formats = if a.table1 {
        table1_formats().to_vec()
    } else {
        vec![BitFormat::new(a.int_bits, a.frac_bits)?]
    };
    let mut csv = String::from("format,H_analytic,H_mc,loss\n");
    for fmt in formats {
        let h = entropy_of_pmf(&spike_pmf_analytic(&dist, a.vth, fmt)?);
        let mc = if a.mc_samples > 0 {
            format!("{:.6}", entropy_of_pmf(&spike_pmf_mc(&dist, a.vth, fmt, a.mc_samples, a.seed)?))
        } else {
            String::new()
        };
        let _ = writeln!(csv, "{fmt},{h:.6},{mc},{:.6}", forward_loss(&dist, a.vth, fmt)?);
    }
    emit(a.out.as_deref(), &csv)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    if !a.config.is_file() {
        return Err(Error::Config(format!("config file {} not found", a.config.display())));
    }
    let cfg = RunConfig::load(&a.config)?;
    let (train, test) = parse_data(&a.data)?;
    let mut net = Network::init(cfg.network_spec()?, cfg.train.seed)?;
    let mut log = format!("{}\n", EpochLog::CSV_HEADER);
    fit(&mut net, &train, test.as_ref(), &cfg.train, &cfg.surrogate, |l| {
        let _ = writeln!(log, "{}", l.csv_row());
    })?;
    // evaluate what the model file will hold
    net.round_to_f32();
    save_model(&net, &a.out_model)?;
    if let Some(p) = &a.log {
        write(p, &log)?;
    }
    let train_acc = evaluate(&net, &train)?;
    match &test {
        Some(t) => println!("train_acc={train_acc:.6} test_acc={:.6}", evaluate(&net, t)?),
        None => println!("train_acc={train_acc:.6}"),
    }
    Ok(())
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let fmt = BitFormat::new(a.int_bits, a.frac_bits)?;
    let ann = AnnModel::new(load_model(&a.ann_model)?)?;
    let (train, test) = parse_data(&a.data)?;
    let policy = CalibrationPolicy {
        method: match a.calib {
            CalibArg::Max => CalibrationMethod::Max,
            CalibArg::Percentile => CalibrationMethod::Percentile,
        },
        percentile: a.percentile,
        calib_batches: a.calib_batches,
        ..CalibrationPolicy::default()
    };
    let thresholds = calibrate_thresholds(&ann, &policy, &train)?;
    let snn = convert_ann_to_snn(&ann, &thresholds, fmt, a.tsweep.first().copied().unwrap_or(1))?;
    let eval = test.as_ref().unwrap_or(&train);
    let rows = evaluate_tsweep(&snn, eval, &a.tsweep)?;
    let calib = match policy.method {
        CalibrationMethod::Max => "max".to_string(),
        CalibrationMethod::Percentile => format!("percentile({})", policy.percentile),
    };
    let mut out = format!(
        "# ann_model={} format={fmt} calib={calib} calib_batches={} thresholds={} ann_accuracy={:.6}\n",
        a.ann_model.display(),
        policy.calib_batches,
        thresholds.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
        evaluate(ann.network(), eval)?,
    );
    out.push_str(&tsweep_csv(&rows));
    emit(a.out.as_deref(), &out)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let (data, _) = parse_data(&a.input)?;
    let n = a.samples.min(data.len());
    if n == 0 {
        return Err(Error::invalid("--samples must be >= 1"));
    }
    let x = data.inputs.slice_outer(0, n)?;
    let opts = ForwardOptions {
        record_trace: true,
        time_steps: a.time_steps,
        ..Default::default()
    };
    let out = forward_timesteps(&net, &x, &opts)?;
    let trace = out.trace.expect("trace requested");
    if let Some(dir) = &a.export_heatmap {
        export_heatmaps(&trace, dir)?;
    }
    if let Some(p) = &a.export_raster {
        write(p, raster_csv(&trace))?;
    }
    if let Some(p) = &a.count_ops {
        let report = count_ops(&net, &trace)?;
        write(p, report.to_csv())?;
        let e = EnergyModel::default();
        println!(
            "ac_ops={} mac_ops={} energy_pj={:.3} (assumed e_ac={} pJ, e_mac={} pJ)",
            report.total_ac(),
            report.total_mac(),
            report.energy_pj(&e),
            e.e_ac_pj,
            e.e_mac_pj
        );
    }
    let pred: Vec<String> = out
        .logits
        .data()
        .chunks(net.num_classes().max(1))
        .map(|row| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best.to_string()
        })
        .collect();
    println!("predictions={}", pred.join(","));
    Ok(())
}

/// One row per nonzero spike: `t,layer,neuron_index,spike_value`, where
/// the index runs over the whole step tensor (batch included).
pub fn raster_csv(trace: &Trace) -> String {
    let mut s = String::from("t,layer,neuron_index,spike_value\n");
    for t in 0..trace.time_steps {
        for site in &trace.sites {
            let spikes = &site.spikes[t];
            for (i, &c) in spikes.codes().iter().enumerate() {
                if c > 0 {
                    let _ = writeln!(s, "{t},{},{i},{}", site.name, spikes.format().value(c));
                }
            }
        }
    }
    s
}

/// Lays a `[N, C, H, W]` or `[N, F]` membrane out as a 2-D image of the
/// first sample: channels side by side.
fn image_of(u: &Tensor) -> (usize, usize, Vec<f64>) {
    let shape = u.shape();
    let per: usize = shape[1..].iter().product();
    let first = &u.data()[..per];
    match shape[1..] {
        [c, h, w] => {
            let mut img = vec![0.0; h * c * w];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        img[y * c * w + ci * w + x] = first[(ci * h + y) * w + x];
                    }
                }
            }
            (c * w, h, img)
        }
        _ => (per, 1, first.to_vec()),
    }
}

/// Binary PGM heatmaps of the membrane potential, one per site and step,
/// min-max scaled per site; the scale goes to `scale.csv`.
pub fn export_heatmaps(trace: &Trace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut scale = String::from("site,min,max\n");
    for site in &trace.sites {
        let lo = site.membrane.iter().flat_map(|u| u.data()).cloned().fold(f64::INFINITY, f64::min);
        let hi = site.membrane.iter().flat_map(|u| u.data()).cloned().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(scale, "{},{lo},{hi}", site.name);
        for (t, u) in site.membrane.iter().enumerate() {
            let (w, h, img) = image_of(u);
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend(img.iter().map(|&v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            }));
            write(&dir.join(format!("{}_t{t}.pgm", site.name)), bytes)?;
        }
    }
    write(&dir.join("scale.csv"), scale)?;
    Ok(())
}
