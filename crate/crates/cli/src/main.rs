use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ecnet::config::RunConfig;
use ecnet::engine::{self, Mode, MetricsLog, METRICS_HEADER};
use ecnet::eval::evaluate_run;
use ecnet::keypoint::{load_detector, save_detector, train_detector, DETECTOR_FILE};
use ecnet::world::{generate_dataset, read_dataset, write_dataset, CANVAS};

/// File holding the resolved configuration in every output directory.
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "ecnet", version, about = "Train and evaluate desk-scale controllable diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    SynthData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Fit the keypoint detector on clean images.
    TrainDetector {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Train a denoiser (resumes an existing checkpoint in --out).
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Detector directory or file.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Generate one image for a dataset record's condition.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset supplying the condition.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Sample the validation set and write report.json and report.csv.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Draw loss curves from a metrics log as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: ecnet::Error| e.to_string())
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn resolve_ckpt(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join(engine::CHECKPOINT_FILE)
    } else {
        p
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { seed, n, out, cfg } => {
            let mut c = load_config(&cfg)?;
            c.data.seed = seed.unwrap_or(c.data.seed);
            c.data.n = n.unwrap_or(c.data.n);
            write_resolved(&c, &out)?;
            let records = generate_dataset(c.data.seed, c.data.n, &c.generation)?;
            let m = write_dataset(&records, &out)?;
            println!("wrote {} records to {}", m.count, out.display());
        }
        Command::TrainDetector { data, out, steps, cfg } => {
            let mut c = load_config(&cfg)?;
            c.paths.data = data.unwrap_or(c.paths.data);
            c.detector.steps = steps.unwrap_or(c.detector.steps);
            write_resolved(&c, &out)?;
            let records = read_dataset(&c.paths.data)?;
            let every = (c.detector.steps / 20).max(1);
            let trained = train_detector(&records, &c.detector, |s, l| {
                if s % every == 0 {
                    eprintln!("detector step {s}: mse {l:.6}");
                }
            })?;
            let path = out.join(DETECTOR_FILE);
            save_detector(&trained.params, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Train { data, detector, mode, steps, seed, out, cfg } => {
            let mut c = load_config(&cfg)?;
            c.paths.data = data.unwrap_or(c.paths.data);
            c.paths.detector = detector.unwrap_or(c.paths.detector);
            c.train.mode = mode.unwrap_or(c.train.mode);
            c.train.steps = steps.unwrap_or(c.train.steps);
            c.train.seed = seed.unwrap_or(c.train.seed);
            write_resolved(&c, &out)?;
            let det = load_detector(&c.paths.detector)?;
            let log_every = c.train.log_every;
            let state = engine::train(&c.paths.data, &det, &c.train, &out, |r| {
                if r.step % log_every == 0 {
                    let b = &r.breakdown;
                    eprintln!(
                        "step {}: l_total {:.5} l_h {:.5} l_dc {:.5}",
                        r.step, b.l_total, b.l_h, b.l_dc
                    );
                }
            })?;
            println!("trained {} steps ({}); checkpoint in {}", state.step, c.train.mode.name(), out.display());
        }
        Command::Sample { ckpt, data, index, seed, guidance, out, cfg } => {
            let mut c = load_config(&cfg)?;
            c.paths.checkpoint = ckpt.unwrap_or(c.paths.checkpoint);
            c.paths.data = data.unwrap_or(c.paths.data);
            c.sample.index = index.unwrap_or(c.sample.index);
            c.sample.seed = seed.unwrap_or(c.sample.seed);
            c.sample.guidance = guidance.unwrap_or(c.sample.guidance);
            write_resolved(&c, &out)?;
            let state = engine::load_checkpoint(&resolve_ckpt(c.paths.checkpoint.clone()))?;
            let records = read_dataset(&c.paths.data)?;
            let Some(rec) = records.get(c.sample.index) else {
                bail!("index {} outside dataset of {} records", c.sample.index, records.len());
            };
            let g = (c.sample.guidance > 0.0).then_some(c.sample.guidance);
            let req = engine::SampleRequest {
                cond: &rec.cond_image,
                caption: &rec.caption,
                scene: &rec.scene,
                seed: c.sample.seed,
            };
            let img = engine::sample_batch(&state, &[req], g)?.remove(0);
            let dcl = engine::heatmap_consistency(&state, std::slice::from_ref(&img), &[&rec.scene])?[0];
            let pixels: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let mut pgm = format!("P5\n{CANVAS} {CANVAS}\n255\n").into_bytes();
            pgm.extend_from_slice(&pixels);
            let path = out.join("sample.pgm");
            fs::write(&path, pgm).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} (heatmap consistency {dcl:.6})", path.display());
        }
        Command::Eval { ckpt, data, n, seed, out, cfg } => {
            let mut c = load_config(&cfg)?;
            c.paths.checkpoint = ckpt.unwrap_or(c.paths.checkpoint);
            c.paths.val = data.unwrap_or(c.paths.val);
            c.eval.n = n.unwrap_or(c.eval.n);
            c.eval.seed = seed.unwrap_or(c.eval.seed);
            let state = engine::load_checkpoint(&resolve_ckpt(c.paths.checkpoint.clone()))?;
            let report = evaluate_run(&state, &c.paths.val, c.eval.n, c.eval.seed, Some(&out))?;
            write_resolved(&c, &out)?;
            let pck: Vec<String> = report.pck_at.iter().map(|(r, v)| format!("pck@{r}={v:.4}")).collect();
            println!(
                "{} nme={:.4} count_error={:.4} n={}",
                pck.join(" "),
                report.nme,
                report.count_error,
                report.n_samples
            );
        }
        Command::Plot { metrics, out } => {
            let rows = MetricsLog::read(&metrics)?;
            if rows.is_empty() {
                bail!("{} has no rows", metrics.display());
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::copy(&metrics, out.join("metrics.csv")).context("copying metrics")?;
            type Term = fn(&engine::MetricsRow) -> f64;
            let terms: [(&str, Term); 4] = [
                ("l_base", |r| r.l_base),
                ("l_h", |r| r.l_h),
                ("l_dc", |r| r.l_dc),
                ("l_total", |r| r.l_total),
            ];
            for (name, f) in terms {
                let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, f(r))).collect();
                let path = out.join(format!("{name}.svg"));
                fs::write(&path, svg_chart(name, &pts)).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("wrote {} charts to {} ({METRICS_HEADER})", terms.len(), out.display());
        }
    }
    Ok(())
}

fn svg_chart(title: &str, pts: &[(f64, f64)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let line: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="100%" height="100%" fill="white"/>
<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{title}</text>
<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>
<text x="4" y="{b}" font-family="sans-serif" font-size="10">{y0:.4}</text>
<text x="4" y="{pad}" font-family="sans-serif" font-size="10">{y1:.4}</text>
<text x="{pad}" y="{bl}" font-family="sans-serif" font-size="10">{x0}</text>
<text x="{r}" y="{bl}" font-family="sans-serif" font-size="10" text-anchor="end">{x1}</text>
<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>
</svg>
"##,
        b = h - pad,
        r = w - pad,
        bl = h - pad + 16.0,
        pts = line.join(" "),
    )
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ECNET_THREADS") {
        let n: usize = v.parse().with_context(|| format!("ECNET_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
