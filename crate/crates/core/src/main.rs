use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use tactile_synth::fields::{interpolate_to_grid, load_field};
use tactile_synth::flow::{bin_forces, FeatureImage, FlowSynthesizer, NodalForces};
use tactile_synth::geometry::Vec3;
use tactile_synth::pipeline::{
    elastic_deform, generate_dataset, load_records, validate_manifest, IndentationRecord,
    PipelineConfig, SampleContext,
};
use tactile_synth::remap::{
    build_remap_table, refine_translation, remap_image, FisheyeCalibration, GrayImage, RemapTable,
    Sampling,
};
use tactile_synth::visibility::VisibilityGrid;
use tactile_synth::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tactile-synth",
    version,
    about = "Synthetic tactile-sensor dataset generator"
)]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration (JSON). Missing keys take default values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the particle visibility grid.
    GenVisibility {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate features and labels for a list of indentation records.
    GenDataset {
        /// CSV or JSON list of records.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optical-flow features of one displacement field (CSV).
    ExtractFeatures {
        #[arg(long)]
        field: PathBuf,
        /// Precomputed visibility grid; estimated when absent.
        #[arg(long)]
        visibility: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Force-distribution labels of one nodal-force file (CSV).
    BinForces {
        #[arg(long)]
        forces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the pinhole-to-fisheye lookup table.
    BuildRemap {
        /// Fisheye calibration (JSON).
        #[arg(long)]
        fisheye: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remap a grayscale PGM image with a lookup table.
    Remap {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Nearest-neighbour instead of bilinear sampling.
        #[arg(long)]
        nearest: bool,
    },
    /// Refine the pinhole translation against a real feature image of the
    /// configured reference indentation.
    RefineExtrinsics {
        /// Real features (f32 tensor with JSON sidecar).
        #[arg(long)]
        real: PathBuf,
        /// Fisheye calibration; its translation is corrected as well.
        #[arg(long)]
        fisheye: Option<PathBuf>,
        /// Result JSON; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every sample listed in a dataset manifest.
    Validate { manifest: PathBuf },
    /// Write elastic-deformation copies of a feature image.
    Augment {
        #[arg(long)]
        input: PathBuf,
        /// Output prefix; copy k goes to `<prefix>.aug<k>.f32`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        copies: usize,
    },
    /// Print the effective configuration.
    ShowConfig,
}

enum Outcome {
    Ok,
    Partial,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let jobs = cli.jobs.unwrap_or_else(rayon::current_num_threads);
    if cli.jobs.is_some() {
        // Ignore failure: the global pool may already be initialised.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    match &cli.command {
        Command::ShowConfig => println!("{}", cfg.to_json()?),
        Command::GenVisibility { out } => {
            let mut c = cfg.clone();
            c.visibility.grid_path = None;
            SampleContext::visibility_for(&c)?.save(out)?;
        }
        Command::GenDataset { records, out } => {
            let records = load_records(records)?;
            let manifest = generate_dataset(&records, &cfg, out, jobs)?;
            log::info!(
                "{} samples written, {} failed",
                manifest.samples.len(),
                manifest.failures.len()
            );
            for f in &manifest.failures {
                eprintln!("failed: {}", f.error);
            }
            if !manifest.failures.is_empty() {
                return Ok(Outcome::Partial);
            }
        }
        Command::ExtractFeatures {
            field,
            visibility,
            out,
        } => {
            let vis = match visibility {
                Some(p) => VisibilityGrid::load(p)?,
                None => SampleContext::visibility_for(&cfg)?,
            };
            let ctx = SampleContext::new(cfg, vis)?;
            let grid = ctx.grid_field(&load_field(field)?)?;
            ctx.features(&grid)?.save(out)?;
        }
        Command::BinForces { forces, out } => {
            bin_forces(&NodalForces::load(forces)?, cfg.labels_n, &cfg.surface)?.save(out)?;
        }
        Command::BuildRemap { fisheye, out } => {
            let calib = FisheyeCalibration::load(fisheye)?;
            let gel_to_pinhole = cfg.camera.transform()?;
            let z_plane = cfg
                .remap
                .z_plane_mm
                .unwrap_or(gel_to_pinhole.translation().z);
            let table = build_remap_table(
                &calib.model()?,
                &calib.transform()?,
                &cfg.camera.camera()?,
                &gel_to_pinhole,
                z_plane,
            )?;
            log::info!("{} of {} pixels mapped", table.mapped_count(), {
                let (w, h) = table.dst_size();
                w as usize * h as usize
            });
            table.save(out)?;
        }
        Command::Remap {
            table,
            input,
            output,
            nearest,
        } => {
            let sampling = if *nearest || cfg.remap.nearest {
                Sampling::Nearest
            } else {
                Sampling::Bilinear
            };
            let table = RemapTable::load(table)?;
            remap_image(&table, &GrayImage::read_pgm(input)?, sampling)?.write_pgm(output)?;
        }
        Command::RefineExtrinsics { real, fisheye, out } => {
            let real = FeatureImage::load(real)?;
            let r = &cfg.refinement;
            let ctx = SampleContext::from_config(cfg.clone())?;
            let rec = IndentationRecord::analytic("reference", r.x_mm, r.y_mm, r.depth_mm);
            let (field, _) = ctx.record_sources(&rec)?;
            let grid = interpolate_to_grid(&field, ctx.lattice, cfg.idw)?;
            let synth = FlowSynthesizer::new(&grid, ctx.gel_to_pinhole.rotation(), &ctx.visibility);
            let m = real.m();
            let t_init = *ctx.gel_to_pinhole.translation();
            let best = refine_translation(
                |t| synth.features(&ctx.camera, t, m),
                &real,
                t_init,
                r.radius_mm,
                r.step_mm,
            )?;
            let t = best.translation;
            let offset = t - t_init;
            let mut result = json!({
                "translation_mm": [t.x, t.y, t.z],
                "offset_mm": [offset.x, offset.y, offset.z],
                "mse": best.mse,
                "candidates": best.candidates,
            });
            if let Some(p) = fisheye {
                let calib = FisheyeCalibration::load(p)?;
                let gel_to_cam = calib.transform()?;
                // Same gel-frame shift expressed in the real camera frame.
                let gel_shift: Vec3 = ctx.gel_to_pinhole.rotation().transpose() * offset;
                let t_cam = gel_to_cam.translation() + gel_to_cam.rotation() * gel_shift;
                result["fisheye_translation_mm"] = json!([t_cam.x, t_cam.y, t_cam.z]);
            }
            write_json(&result, out.as_deref())?;
        }
        Command::Validate { manifest } => {
            let report = validate_manifest(manifest)?;
            for s in report.failed() {
                for p in &s.problems {
                    eprintln!("{}: {p}", s.id);
                }
            }
            println!(
                "{} samples checked, {} invalid",
                report.samples.len(),
                report.failed().count()
            );
            if !report.all_ok() {
                return Ok(Outcome::Partial);
            }
        }
        Command::Augment { input, out, copies } => {
            let img = FeatureImage::load(input)?;
            let a = &cfg.augmentation;
            for k in 0..*copies {
                let seed = tactile_synth::pipeline::derive_seed(cfg.seed, &format!("augment-{k}"));
                let path = PathBuf::from(format!("{}.aug{k}.f32", out.display()));
                elastic_deform(&img, a.alpha, a.sigma, seed)?.save(&path)?;
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            report_source(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_source(e: &Error) {
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
}
