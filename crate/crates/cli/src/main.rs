mod config;
mod failure;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use xdomain_core::data::{self, Dataset};
use xdomain_core::eval::{self, EvalSettings};
use xdomain_core::gradsuite::{self, SuiteOptions, TOLERANCE};
use xdomain_core::nets::checkpoint::Checkpoint;
use xdomain_core::nets::{Domain, Networks};
use xdomain_core::tensor::Tensor;
use xdomain_core::trainer::{self, named_stream, standard_normal};

use config::RunConfig;
use failure::{Failure, EXIT_GRAD_CHECK};

#[derive(Parser)]
#[command(name = "xdomain", version, about = "One-to-many image translation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired-free synthetic dataset of outlines (X) and filled colored shapes (Y).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate one image with K random domain-specific codes, or with the
    /// code of a reference image.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute diversity, fid-lite and the shape/hue probe for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Run config supplying eval settings and the expected architecture.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare every analytic gradient against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { out, count, seed } => gen_data(&out, count, seed),
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Translate {
            ckpt,
            input,
            samples,
            reference,
            out,
            seed,
        } => translate(&ckpt, &input, samples, reference.as_deref(), &out, seed),
        Command::Eval { ckpt, data, out, config } => evaluate(&ckpt, &data, &out, config.as_deref()),
        Command::GradCheck { seed, corrupt } => grad_check(seed, corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}

fn gen_data(out: &Path, count: usize, seed: u64) -> Result<(), Failure> {
    data::generate_dataset(out, count, seed)?;
    println!("wrote {count} images per domain to {}", out.display());
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let run = RunConfig::load(config)?;
    let data = data::load_dataset(&run.data_dir)?;
    if data.index.x.canvas != run.train.arch.image_size {
        return Err(Failure::config(format!(
            "dataset canvas {} does not match image_size {}",
            data.index.x.canvas, run.train.arch.image_size
        )));
    }
    create_dir(&run.out_dir)?;
    write_file(&run.out_dir.join("config_resolved.json"), &run.resolved_json())?;
    let steps = run.train.steps;
    let every = (steps / 100).max(1);
    trainer::train(&run.train, &data, &run.out_dir, resume, |m| {
        if m.step % every == 0 || m.step == steps {
            eprintln!(
                "step {:>6}/{steps}  loss_d {:.4}  loss_g {:.4}  recon {:.4} {:.4}",
                m.step, m.loss_d, m.loss_g, m.recon[0], m.recon[1]
            );
        }
    })?;
    Ok(())
}

fn image_extension(image: &Tensor) -> &'static str {
    if image.shape()[0] == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Domain of `image` under the checkpoint architecture, judged by its channel count.
fn input_domain(nets: &Networks, image: &Tensor) -> Result<Domain, Failure> {
    let arch = &nets.arch;
    let shape = image.shape();
    let size = arch.image_size;
    if shape[1] != size || shape[2] != size {
        return Err(Failure::config(format!(
            "image is {}x{}, checkpoint expects {size}x{size}",
            shape[1], shape[2]
        )));
    }
    if shape[0] == arch.x_channels {
        Ok(Domain::X)
    } else if shape[0] == arch.y_channels {
        Ok(Domain::Y)
    } else {
        Err(Failure::config(format!("image has {} channels, checkpoint expects {} or {}", shape[0], arch.x_channels, arch.y_channels)))
    }
}

fn translate(ckpt: &Path, input: &Path, samples: usize, reference: Option<&Path>, out: &Path, seed: u64) -> Result<(), Failure> {
    let nets = Checkpoint::load(ckpt)?.networks_unchecked()?;
    let image = data::read_image(input)?;
    let from = input_domain(&nets, &image)?;
    create_dir(out)?;
    if let Some(reference) = reference {
        let style = data::read_image(reference)?;
        if from != Domain::X || input_domain(&nets, &style)? != Domain::Y {
            return Err(Failure::config("--reference needs an X input and a Y reference"));
        }
        let y = eval::style_transfer(&nets, &image, &style)?;
        let path = out.join(format!("style_transfer.{}", image_extension(&y)));
        data::write_image(&path, &y)?;
        println!("{}", path.display());
        return Ok(());
    }
    if samples == 0 {
        return Err(Failure::config("--samples must be at least 1"));
    }
    let mut rng = named_stream(seed, 0);
    let v = standard_normal(&[samples, nets.arch.code_dim], &mut rng);
    let batch = Tensor::stack(&vec![&image; samples])?;
    for (k, y) in nets.translate(from, &batch, &v)?.unstack().iter().enumerate() {
        let path = out.join(format!("translation_{k:03}.{}", image_extension(y)));
        data::write_image(&path, y)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(ckpt: &Path, data_dir: &Path, out: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let (nets, settings) = match config {
        Some(path) => {
            let run = RunConfig::load(path)?;
            (ck.networks(&run.train.arch)?, run.eval)
        }
        None => (ck.networks_unchecked()?, EvalSettings::default()),
    };
    let data = data::load_dataset(data_dir)?;
    if data.index.x.canvas != nets.arch.image_size {
        return Err(Failure::config(format!(
            "dataset canvas {} does not match image_size {}",
            data.index.x.canvas, nets.arch.image_size
        )));
    }
    let report = eval::evaluate(&nets, &data, &settings)?;
    create_dir(out)?;
    let doc = json!({
        "checkpoint": {
            "file": ckpt.file_name().map(|f| f.to_string_lossy().into_owned()),
            "step": ck.step,
            "seed": ck.seed,
            "fingerprint": nets.arch.fingerprint(),
        },
        "arch": nets.arch,
        "dataset": { "count": data.x.len(), "seed": data.index.x.seed },
        "report": report,
    });
    let text = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
    write_file(&out.join("eval_report.json"), &text)?;
    write_sheets(&nets, &data, &settings, &report.probe.hue_rho_per_coord, out)?;
    println!("{text}");
    Ok(())
}

fn write_sheets(nets: &Networks, data: &Dataset, settings: &EvalSettings, rho: &[f64], out: &Path) -> Result<(), Failure> {
    let picks = eval::pick_indices(data.x.len(), 8, settings.seed);
    let xs: Vec<Tensor> = picks.iter().map(|&i| data.x[i].clone()).collect();
    if xs.is_empty() {
        return Ok(());
    }
    let sheet = eval::contact_sheet(nets, &xs, 8, settings.seed)?;
    data::write_image(&out.join("contact_sheet.ppm"), &sheet)?;
    let coord = (0..rho.len())
        .max_by(|&a, &b| rho[a].abs().total_cmp(&rho[b].abs()))
        .unwrap_or(0);
    let sweep = eval::sweep_sheet(nets, &xs, coord)?;
    data::write_image(&out.join("hue_sweep.ppm"), &sweep)?;
    Ok(())
}

fn grad_check(seed: u64, corrupt: Option<String>) -> Result<(), Failure> {
    let results = gradsuite::run_suite(&SuiteOptions { seed, corrupt });
    println!("{:<11} {:<26} {:>12} {:>8} {:>8}  status", "group", "op", "max_rel_err", "checked", "skipped");
    for r in &results {
        println!(
            "{:<11} {:<26} {:>12.3e} {:>8} {:>8}  {}",
            r.group,
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (max relative error {:.3e})", r.name, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        println!("all {} checks within {TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(Failure::new(EXIT_GRAD_CHECK, format!("gradient check failed: {}", failed.join(", "))))
    }
}
