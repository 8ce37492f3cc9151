use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use hbmcn::data::{Split, SynthSpec};
use hbmcn_cli::*;

#[derive(Parser)]
#[command(name = "hbmcn", version, about = "Heterogeneous-branch multi-level re-ID network: data, training, retrieval")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic identity dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48, value_parser = clap::value_parser!(u64).range(2..))]
        ids: u64,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
        per_id: u64,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(2..))]
        cams: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "128x64", value_parser = parse_hw)]
        size: [usize; 2],
    },
    /// Train a model and write checkpoint, loss trace and resolved config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, value_enum)]
        mode: Option<AblationMode>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract retrieval features for one split.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// L2-normalize each head's feature slice before concatenation.
        #[arg(long)]
        per_level_norm: bool,
    },
    /// Evaluate query features against gallery features.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train, extract and evaluate one ablation topology.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: AblationMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Finite-difference gradient checks over every op, block and the nano model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = hbmcn::gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, hide = true)]
        inject_conv_fault: bool,
    },
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { out, ids, per_id, cams, seed, size } => {
            let spec = SynthSpec { n_ids: ids as usize, per_id: per_id as usize, n_cams: cams as usize, image_hw: size, seed };
            let n = gen_data(&spec, &out)?;
            println!("wrote {n} images to {}", out.display());
        }
        Cmd::Train { data, config, preset, mode, out, seed } => {
            let rc = run_config(config.as_deref(), preset, mode, seed)?;
            let data = data.or_else(|| rc.data.clone()).ok_or_else(|| anyhow::anyhow!("--data is required"))?;
            let out = out.or_else(|| rc.out.clone()).ok_or_else(|| anyhow::anyhow!("--out is required"))?;
            let (cfg, _) = resolve_for(&rc, &data)?;
            let run = train_cmd(&cfg, &data, &out, log)?;
            let last = run.trace.last().map_or(f64::NAN, |s| s.mean_loss);
            println!("trained {} epochs, final loss {last:.6}, checkpoint {}", run.trace.len(), out.join(CHECKPOINT_FILE).display());
        }
        Cmd::Extract { ckpt, data, split, out, per_level_norm } => {
            let f = extract_cmd(&ckpt, &data, split, &out, per_level_norm)?;
            println!("wrote {}x{} features to {}", f.len(), f.dim(), out.display());
        }
        Cmd::Eval { query, gallery, report } => {
            let rep = eval_cmd(&query, &gallery, &report)?;
            if rep.skipped > 0 {
                println!("skipped {} queries without a valid match", rep.skipped);
            }
            println!("{}", rep.summary_line());
        }
        Cmd::Ablate { data, mode, seed, out, config, preset } => {
            let rc = run_config(config.as_deref(), preset, Some(mode), Some(seed))?;
            let rep = ablate_cmd(&rc, &data, &out, log)?;
            println!("{mode},{seed},{:.6},{:.6}", rep.map, rep.cmc_at(1));
        }
        Cmd::Gradcheck { seed, tol, inject_conv_fault } => {
            let results = gradcheck_cmd(seed, inject_conv_fault)?;
            print!("{}", gradcheck_table(&results, tol));
            let failed = results.iter().filter(|r| !r.passed(tol)).count();
            if failed > 0 {
                return Err(CheckFailed(format!("{failed} of {} gradient checks exceed tolerance {tol:e}", results.len())).into());
            }
            println!("all {} gradient checks within {tol:e}", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
