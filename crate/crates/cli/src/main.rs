use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use semloc_core::detect::{DEFAULT_MIN_SCORE, DEFAULT_NMS_RADIUS};
use semloc_core::eval::{category_fractions, extract, match_eval, ExtractOptions, MatchOptions};
use semloc_core::gradcheck::{self, GradCheckConfig};
use semloc_core::io;
use semloc_core::semantics::{Category, LabelTaxonomy};
use semloc_core::train::{train, TrainConfig};

/// Semantic-aware local features on synthetic street scenes.
#[derive(Parser)]
#[command(name = "semloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with one perturbed test pair per scene.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1.0)]
        volatility: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset and write a checkpoint.
    Train {
        /// `key = value` file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Detect and describe keypoints in a PGM image.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label mask for the category breakdown; not used for detection.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        topk: usize,
        #[arg(long, default_value_t = DEFAULT_NMS_RADIUS)]
        nms_radius: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_SCORE)]
        min_score: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match two feature files and report inliers.
    Match {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Ground-truth homography (three rows of three numbers) instead of RANSAC.
        #[arg(long)]
        gt_h: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        ransac_iters: usize,
        #[arg(long, default_value_t = 3.0)]
        thresh_px: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Also write the match list.
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Finite-difference check of all differentiable ops and losses.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SEMLOC_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SEMLOC_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { seed, count, size, volatility, out } => {
            let m = io::write_dataset(&out, seed, count, size, volatility)?;
            println!("wrote {} scenes of {size}x{size} to {}", m.entries.len(), out.display());
        }
        Command::Train { config, data, out, log } => {
            let cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| p.display().to_string())?;
                    TrainConfig::from_config_text(&text)?
                }
                None => TrainConfig::default(),
            };
            let mut lines = String::new();
            let outcome = train(&cfg, &data, |l| {
                println!("{l}");
                lines.push_str(&format!("{l}\n"));
            })?;
            io::write_checkpoint(&out, &outcome.weights)?;
            if let Some(p) = log {
                fs::write(p, lines)?;
            }
        }
        Command::Extract { ckpt, image, mask, topk, nms_radius, min_score, out } => {
            let weights = io::read_checkpoint(&ckpt).with_context(|| ckpt.display().to_string())?;
            let img = io::read_pgm(&image).with_context(|| image.display().to_string())?;
            let opts = ExtractOptions { top_k: topk, nms_radius, min_score };
            let set = extract(&weights, &img, &opts)?;
            io::write_features(&out, &set)?;
            println!("keypoints {}", set.len());
            if let Some(p) = mask {
                let m = io::read_mask(&p)?;
                if let Some(fr) = category_fractions(&set.keypoints, &m, &LabelTaxonomy::synthetic())? {
                    for (c, v) in Category::ALL.iter().zip(fr) {
                        println!("fraction_{c} {v:.6}");
                    }
                }
            }
        }
        Command::Match { a, b, gt_h, ransac_iters, thresh_px, seed, report, matches } => {
            let fa = io::read_features(&a).with_context(|| a.display().to_string())?;
            let fb = io::read_features(&b).with_context(|| b.display().to_string())?;
            let gt = gt_h.map(|p| io::read_homography(&p)).transpose()?;
            let opts = MatchOptions { ransac_iters, threshold_px: thresh_px, seed, max_ratio: None };
            let (m, h, r) = match_eval(&fa, &fb, gt.as_ref(), &opts)?;
            fs::write(&report, r.to_string())?;
            if let Some(p) = matches {
                fs::write(p, io::encode_matches(&m, h.as_ref()))?;
            }
            print!("{r}");
        }
        Command::GradCheck { trials, tol, seed } => {
            let cfg = GradCheckConfig { trials, rel_tol: tol, seed, ..GradCheckConfig::default() };
            let report = gradcheck::run(&cfg)?;
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
