//! `streid`: train, check, evaluate and inspect spatiotemporal attention models.
//!
//! Failures print one line `error[<code>]: <message>` to stderr and exit with
//! 2 (usage), 3 (data, format or config) or 4 (numeric failure).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spatiotemporal_reid::checkpoint;
use spatiotemporal_reid::config::{self, RunConfig};
use spatiotemporal_reid::eval;
use spatiotemporal_reid::gradcheck::{self, Dims, DEFAULT_EPS, PASS_THRESHOLD};
use spatiotemporal_reid::gridfile::{self, LabeledVideo};
use spatiotemporal_reid::model::Hyperparams;
use spatiotemporal_reid::pipeline;
use spatiotemporal_reid::rng::Rng;
use spatiotemporal_reid::sampling;
use spatiotemporal_reid::synth;
use spatiotemporal_reid::train::{self, TrainData};
use spatiotemporal_reid::Error;

const CHECKPOINT_FILE: &str = "model.ckpt";
const METRICS_FILE: &str = "metrics.csv";
const HEATMAP_FILE: &str = "heatmaps.csv";
const TEMPORAL_FILE: &str = "temporal_weights.csv";
const GRADCHECK_STREAM: u64 = 0x6772_6164;

#[derive(Parser)]
#[command(name = "streid", version, about = "Diversity-regularized spatiotemporal attention for video re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file; writes model.ckpt and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences on a random instance.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// Comma-separated overrides, e.g. `frames=4,heads=3,grid_height=2`.
        #[arg(long)]
        dims: Option<String>,
        /// Config file for the objective (penalty, modes, λ); sizes come from --dims.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// CMC curve and mAP of a checkpoint on a gallery and a probe split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Receptive-field heatmaps and temporal weights of one video.
    Attend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset: train/, gallery/ and probe/ splits.
    Synth {
        /// `key = value` file with synthetic-data keys (no `synth.` prefix); omit for defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restricted random sampling: one frame index per chunk.
    Sample {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        chunks: usize,
        #[arg(long)]
        seed: u64,
    },
}

struct Failure {
    exit: u8,
    code: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            exit: 2,
            code: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match e {
            Error::NonFinite { .. } | Error::DegenerateVector { .. } | Error::Divergence { .. } => 4,
            _ => 3,
        };
        Failure {
            exit,
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments");
            report(&Failure::usage(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Train { config, out } => run_train(&config, &out),
        Command::Gradcheck { seed, dims, config, eps } => run_gradcheck(seed, dims.as_deref(), config.as_deref(), eps),
        Command::Eval {
            checkpoint,
            gallery,
            probes,
            out,
        } => run_eval(&checkpoint, &gallery, &probes, out.as_deref()),
        Command::Attend { checkpoint, video, out } => run_attend(&checkpoint, &video, &out),
        Command::Synth { spec, out } => run_synth(spec.as_deref(), &out),
        Command::Sample { frames, chunks, seed } => run_sample(frames, chunks, seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.exit)
        }
    }
}

fn report(f: &Failure) {
    eprintln!("error[{}]: {}", f.code, f.message.replace('\n', " "));
}

fn run_train(config_path: &Path, out: &Path) -> Outcome {
    let cfg = config::load_config(config_path)?;
    let data = TrainData::from_config(&cfg)?;
    let run = train::train(&cfg.hyper, &data, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  oim {:.5}  penalty {:.4}  bc {:.4}  rank1 {:.3}  mAP {:.3}",
            m.epoch, m.loss, m.oim_loss, m.penalty, m.mean_bhattacharyya, m.rank1, m.map
        )
    })?;
    fs::create_dir_all(out)?;
    let effective = RunConfig {
        hyper: run.params.hyper.clone(),
        ..cfg
    };
    let header = config::render_header(&config::echo(&effective));
    fs::write(out.join(METRICS_FILE), train::metrics_csv(&header, &run.metrics))?;
    checkpoint::write(&out.join(CHECKPOINT_FILE), &run.params, &run.state)?;
    match run.divergence {
        Some(d) => Err(Error::Divergence { epoch: d.epoch + 1 }.into()),
        None => Ok(()),
    }
}

fn parse_dims(spec: &str) -> Result<Dims, Failure> {
    let mut dims = Dims::TINY;
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--dims entry {item:?} is not key=value")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("--dims {key}: expected an unsigned integer")))?;
        let slot = match key.trim() {
            "frames" => &mut dims.frames,
            "heads" => &mut dims.heads,
            "grid_height" => &mut dims.grid_height,
            "grid_width" => &mut dims.grid_width,
            "feature_dim" => &mut dims.feature_dim,
            "hidden_dim" => &mut dims.hidden_dim,
            "embed_dim" => &mut dims.embed_dim,
            "classes" => &mut dims.classes,
            other => return Err(Failure::usage(format!("--dims: unknown key {other:?}"))),
        };
        *slot = value;
    }
    Ok(dims)
}

fn run_gradcheck(seed: u64, dims: Option<&str>, config_path: Option<&Path>, eps: f64) -> Outcome {
    let dims = match dims {
        Some(s) => parse_dims(s)?,
        None => Dims::TINY,
    };
    let base = match config_path {
        Some(p) => config::load_config(p)?.hyper,
        None => Hyperparams::default(),
    };
    let (params, instance) = gradcheck::random_instance(&base, dims, seed)?;
    let report = gradcheck::grad_check(&params, &instance, eps, &mut Rng::new(seed).fork(GRADCHECK_STREAM))?;
    println!("{:<16} {:>7} {:>13}  worst coordinate (analytic, numeric)", "group", "checked", "max_rel_err");
    for g in &report.groups {
        let (name, idx, analytic, numeric) = &g.worst;
        println!(
            "{:<16} {:>7} {:>13.3e}  {name}[{idx}] ({analytic:.6e}, {numeric:.6e})",
            g.group, g.checked, g.max_rel_error
        );
    }
    let max = report.max_error();
    println!("max {max:.3e}, threshold {PASS_THRESHOLD:e}");
    if report.passes(PASS_THRESHOLD) {
        Ok(())
    } else {
        Err(Failure {
            exit: 4,
            code: "gradcheck",
            message: format!("max relative error {max:.3e} exceeds {PASS_THRESHOLD:e}"),
        })
    }
}

fn run_eval(checkpoint_path: &Path, gallery: &Path, probes: &Path, out: Option<&Path>) -> Outcome {
    let (params, _) = checkpoint::read(checkpoint_path)?;
    let g = train::summarize_split(&params, &gridfile::read_split(gallery)?)?;
    let p = train::summarize_split(&params, &gridfile::read_split(probes)?)?;
    let metrics = eval::evaluate(&p.gallery, &g.gallery)?;
    let mut csv = String::from("metric,value\n");
    for (k, v) in metrics.cmc.iter().enumerate() {
        let _ = writeln!(csv, "cmc@{},{v}", k + 1);
    }
    let _ = writeln!(csv, "mAP,{}", metrics.map);
    match out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_attend(checkpoint_path: &Path, video: &Path, out: &Path) -> Outcome {
    let (params, _) = checkpoint::read(checkpoint_path)?;
    let video = LabeledVideo {
        frames: gridfile::read(video)?,
        label: 0,
        camera: 0,
    };
    let sample = train::eval_sample(&video, params.hyper.frames)?;
    let (descriptor, fields) = pipeline::describe(&sample, &params)?;
    let (h, w) = (params.hyper.grid_height, params.hyper.grid_width);
    fs::create_dir_all(out)?;

    let mut heatmaps = String::new();
    for (n, frame) in fields.iter().enumerate() {
        for k in 0..frame.heads() {
            let field = frame.field(k);
            let row: Vec<String> = field.iter().map(|s| s.to_string()).collect();
            heatmaps.push_str(&row.join(","));
            heatmaps.push('\n');

            let mut pgm = format!("P2\n{w} {h}\n255\n");
            for r in 0..h {
                let line: Vec<String> = field[r * w..(r + 1) * w]
                    .iter()
                    .map(|s| ((s * 255.0).round() as u32).to_string())
                    .collect();
                pgm.push_str(&line.join(" "));
                pgm.push('\n');
            }
            fs::write(out.join(format!("heat_n{n}_k{k}.pgm")), pgm)?;
        }
    }
    fs::write(out.join(HEATMAP_FILE), heatmaps)?;

    let t = &descriptor.temporal_weights;
    let mut weights = String::new();
    for n in 0..t.rows() {
        let row: Vec<String> = t.row(n).iter().map(|v| v.to_string()).collect();
        weights.push_str(&row.join(","));
        weights.push('\n');
    }
    fs::write(out.join(TEMPORAL_FILE), weights)?;
    let frames: Vec<String> = sample.chosen_indices.iter().map(|i| i.to_string()).collect();
    println!("frames {}", frames.join(" "));
    Ok(())
}

fn run_synth(spec_path: Option<&Path>, out: &Path) -> Outcome {
    let text = match spec_path {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let (spec, seed) = config::parse_synth_spec(&text)?;
    let data = synth::make_synthetic(&spec, seed)?;
    gridfile::write_split(&out.join("train"), &data.train)?;
    gridfile::write_split(&out.join("gallery"), &data.gallery)?;
    gridfile::write_split(&out.join("probe"), &data.probe)?;
    println!(
        "train {} gallery {} probe {} videos",
        data.train.len(),
        data.gallery.len(),
        data.probe.len()
    );
    Ok(())
}

fn run_sample(frames: usize, chunks: usize, seed: u64) -> Outcome {
    let idx = sampling::restricted_random_sample(frames, chunks, &mut Rng::new(seed))?;
    let text: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
    println!("{}", text.join(" "));
    Ok(())
}
