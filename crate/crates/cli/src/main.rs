use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cloudmask_core::data::{self, pnm, synth_dataset};
use cloudmask_core::gradcheck::{self, FdOptions};
use cloudmask_core::metrics::{csv_row, CSV_HEADER};
use cloudmask_core::train::{self, RunConfig, TrainConfig};
use cloudmask_core::{checkpoint, profile, Error, Model, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "cloudmask", version, about = "Lightweight CNN-Transformer cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parameter and MAC counts per layer, or the four-way ablation table.
    Profile {
        #[arg(long)]
        config: PathBuf,
        /// CxHxW or BxCxHxW
        #[arg(long, default_value = "4x384x384")]
        input: String,
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        json: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a directory of scene manifests and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's validation fraction.
        #[arg(long)]
        val_fraction: Option<f64>,
        /// Overrides the config's step cap.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a directory of labelled scenes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "CD-CTFM")]
        method: String,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Predict a scene: binary mask PGM, plus overlay and metrics if the scene is labelled.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Finite-difference gradient checks of every primitive and composite block.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Elements sampled per tensor in composite checks.
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write seeded synthetic scenes with manifests.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        bands: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => train::write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// 384 when the scene allows it, else the scene extent rounded up to the model's stride.
fn default_patch(cfg: &ModelConfig, h: usize, w: usize) -> usize {
    // strides are powers of two, so the larger of the two is their lcm
    let step = cfg.output_stride().max(16);
    (h.max(w).div_ceil(step).max(1) * step).min(384usize.div_ceil(step) * step)
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Profile { config, input, ablation, json, out } => {
            let (cfg, _) = read_config(&config)?;
            let shape = profile::parse_shape(&input)?;
            let text = if ablation {
                let rows = profile::ablation(&cfg, &shape)?;
                if json {
                    serde_json::to_string_pretty(&rows)? + "\n"
                } else {
                    profile::ablation_csv(&rows)
                }
            } else {
                let r = profile::report(&cfg, &shape)?;
                if json {
                    r.to_json() + "\n"
                } else {
                    r.to_csv()
                }
            };
            emit(out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { config, data: dir, out, val_fraction, max_steps } => {
            let (mcfg, mut tcfg) = read_config(&config)?;
            if let Some(v) = val_fraction {
                tcfg.val_fraction = v;
            }
            if max_steps.is_some() {
                tcfg.max_steps = max_steps;
            }
            tcfg.validate()?;
            let scenes = data::load_dir(&dir)?;
            let (tr, va) = train::split_scenes(scenes, tcfg.val_fraction, tcfg.seed);
            let (tr, va) = (train::samples(&tr, tcfg.patch_size)?, train::samples(&va, tcfg.patch_size)?);
            let (model, mut store) = Model::new::<f32>(&mcfg)?;
            let total = train::total_steps(tr.len(), &tcfg);
            eprintln!("training on {} patches ({} held out), {total} steps", tr.len(), va.len());
            let report = train::train(&model, &mut store, &tr, &va, &tcfg, |s| {
                if s.step % 50 == 0 || s.step + 1 == total {
                    eprintln!("step {:>5} epoch {:>3} lr {:.3e} loss {:.5}", s.step, s.epoch, s.lr, s.loss);
                }
            })?;
            checkpoint::save(&out, &mcfg, &store)?;
            let stem = out.with_extension("");
            train::write_text(&stem.with_extension("loss.csv"), &report.loss_csv())?;
            train::write_text(&stem.with_extension("epochs.csv"), &report.epochs_csv())?;
            let last = report.epochs.last();
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": out,
                    "steps": report.steps.len(),
                    "final_loss": report.steps.last().map(|s| s.loss),
                    "val_miou": last.and_then(|e| e.val).and_then(|c| c.metrics().miou),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { ckpt, data: dir, report, method, patch, threshold } => {
            let (model, store) = checkpoint::load_model::<f32>(&ckpt)?;
            let thr = threshold.unwrap_or(model.config.threshold);
            let scenes = data::load_dir(&dir)?;
            let mut counts = cloudmask_core::ConfusionCounts::default();
            for s in &scenes {
                if s.mask.is_none() {
                    return Err(Error::Data(format!("{}: scene has no mask", s.id)));
                }
                let p = patch.unwrap_or_else(|| default_patch(&model.config, s.height(), s.width()));
                counts += train::predict(&model, &store, s, p, thr)?.counts.expect("labelled");
            }
            let shape = [1, model.config.bands, 384, 384];
            let cost = model.cost(&store, &shape)?;
            let row = csv_row(&method, &counts.metrics(), cost.total_params as usize, cost.gmacs);
            train::write_text(&report, &format!("{CSV_HEADER}\n{row}\n"))?;
            println!("{}", serde_json::json!({ "counts": counts, "metrics": counts.metrics() }));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Predict { ckpt, manifest, out, patch, threshold } => {
            let (model, store) = checkpoint::load_model::<f32>(&ckpt)?;
            let thr = threshold.unwrap_or(model.config.threshold);
            let scene = data::load_scene(&manifest)?;
            let p = patch.unwrap_or_else(|| default_patch(&model.config, scene.height(), scene.width()));
            let pred = train::predict(&model, &store, &scene, p, thr)?;
            std::fs::create_dir_all(&out)?;
            let (h, w) = (scene.height(), scene.width());
            pnm::write_pgm(&out.join(format!("{}_pred.pgm", scene.id)), h, w, pred.mask.data())?;
            if let (Some(t), Some(c)) = (&scene.mask, pred.counts) {
                std::fs::write(out.join(format!("{}_overlay.ppm", scene.id)), pnm::encode_overlay(h, w, pred.mask.data(), t.data()))?;
                let j = serde_json::json!({ "id": scene.id, "counts": c, "metrics": c.metrics() });
                train::write_text(&out.join(format!("{}_metrics.json", scene.id)), &format!("{j:#}\n"))?;
                println!("{j}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { config, per_tensor, report } => {
            let (cfg, _) = read_config(&config)?;
            let mut results = gradcheck::primitive_suite(&FdOptions::default())?;
            results.extend(gradcheck::composite_suite(&cfg, &FdOptions::composite(Some(per_tensor)))?);
            for r in &results {
                println!(
                    "{} {:<22} max_rel_err {:.3e} (tol {:.0e}) worst {} checked {} refined {} straddled {}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    r.worst,
                    r.checked,
                    r.refined,
                    r.straddled
                );
            }
            if let Some(p) = report {
                train::write_text(&p, &(serde_json::to_string_pretty(&results)? + "\n"))?;
            }
            match results.iter().filter(|r| !r.passed()).count() {
                0 => Ok(ExitCode::SUCCESS),
                n => {
                    let msg = format!("{n} gradient checks exceeded tolerance");
                    eprintln!("{}", serde_json::json!({ "error": "gradcheck_failed", "message": msg }));
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Cmd::Synth { seed, scenes, size, bands, out } => {
            std::fs::create_dir_all(&out)?;
            for s in synth_dataset(seed, scenes, size, bands)? {
                data::write_scene(&out, &s)?;
            }
            println!("{}", serde_json::json!({ "scenes": scenes, "size": size, "bands": bands, "out": out }));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
