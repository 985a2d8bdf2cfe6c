use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use semrecon::io::{read_obj, read_json, write_checkpoint, write_json, write_png, write_tnsr, RunConfig, Tensor};
use semrecon::run::{self, RenderParams, GRADCHECK_TOLERANCE};
use semrecon::train::{pseudo_labels, update_canonical, update_template, CategoryState};
use semrecon::{Error, Result};

#[derive(Parser)]
#[command(name = "semrecon", version, about = "Mesh reconstruction from silhouettes and part maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, or output file for `render`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of synthetic scenes.
    #[arg(long, global = true)]
    instances: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic scene bundles.
    Synth,
    /// Run the EM fit and write one checkpoint per round.
    Fit,
    /// Recompute the template from a checkpoint.
    TemplateUpdate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recompute the canonical part map from a checkpoint.
    CanonicalUv {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render the silhouette of a camera and deformation (truth.json layout)
    /// at the scene image size.
    Render {
        #[arg(long)]
        params: PathBuf,
        /// Template OBJ; the configured icosphere when omitted.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Compare every loss gradient against finite differences.
    Gradcheck,
    /// Keypoint transfer PCK over all instance pairs of a checkpoint.
    EvalKt {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Mask IoU of every instance of a checkpoint.
    EvalIou {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Part label maps for instances with low semantic loss.
    PseudoLabels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(if matches!(e, Error::Numerical(_)) { 3 } else { 2 })
        }
    }
}

fn require_out(cli: &Cli) -> Result<PathBuf> {
    cli.out.clone().ok_or_else(|| Error::Param("--out is required".into()))
}

/// The configuration file, falling back to the run directory that holds
/// `checkpoint`, then to the defaults. Command-line flags override it.
fn resolve_config(cli: &Cli, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let beside = checkpoint.and_then(|c| c.parent()).map(|p| p.join("config.json")).filter(|p| p.exists());
    let mut cfg = match cli.config.as_ref().or(beside.as_ref()) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = cli.instances {
        cfg.instances = n;
    }
    if let Some(r) = cli.rounds {
        cfg.train.rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Param("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Param(format!("thread pool: {e}")))?;
    }
    match &cli.cmd {
        Cmd::Synth => {
            let cfg = resolve_config(&cli, None)?;
            let out = require_out(&cli)?;
            let scenes = semrecon::synth::synth(cfg.instances, cfg.train.seed, &cfg.synth)?;
            let bundles: Vec<_> = scenes.into_iter().map(semrecon::io::SceneBundle::from).collect();
            run::write_scenes(&out, &bundles)?;
            write_json(out.join("config.json"), &cfg)?;
            print_json(&json!({"scenes": bundles.len(), "out": out}));
        }
        Cmd::Fit => {
            let cfg = resolve_config(&cli, None)?;
            let out = require_out(&cli)?;
            let t = std::time::Instant::now();
            let res = run::fit_run(&cfg, &out)?;
            let ious = run::instance_ious(&res.state, &res.instances, &cfg.train.raster)?;
            let failed: Vec<&str> = res.instances.iter().filter(|i| i.failed()).map(|i| i.name.as_str()).collect();
            print_json(&json!({
                "rounds": cfg.train.rounds,
                "instances": res.instances.len(),
                "failed": failed,
                "mean_iou": run::mean(ious.iter().flatten().copied()),
                "seconds": t.elapsed().as_secs_f64(),
            }));
        }
        Cmd::TemplateUpdate { checkpoint } => {
            let cfg = resolve_config(&cli, Some(checkpoint))?;
            let out = require_out(&cli)?;
            let (state, mut insts, _) = run::open_checkpoint(&cfg, checkpoint)?;
            let (template, subset) = update_template(&mut insts, &state, &cfg.train)?;
            let next = CategoryState { template, ..state };
            write_checkpoint(&out, &next, &insts, &[])?;
            write_json(out.join("config.json"), &cfg)?;
            let names: Vec<&str> = subset.iter().map(|&i| insts[i].name.as_str()).collect();
            print_json(&json!({"shape_subset": names}));
        }
        Cmd::CanonicalUv { checkpoint } => {
            let cfg = resolve_config(&cli, Some(checkpoint))?;
            let out = require_out(&cli)?;
            let (state, insts, _) = run::open_checkpoint(&cfg, checkpoint)?;
            let (canonical, subset) =
                update_canonical(&insts, &cfg.train)?.ok_or_else(|| Error::Param("no usable instance".into()))?;
            let (h, w) = (canonical.probs.height, canonical.probs.width);
            let argmax = run::canonical_argmax(&canonical);
            let next = CategoryState::with_canonical(state.template.clone(), state.mapping.clone(), canonical, state.round)?;
            write_checkpoint(&out, &next, &insts, &[])?;
            write_png(out.join("canonical.png"), &run::label_preview(&argmax, h, w, usize::MAX)?)?;
            write_json(out.join("config.json"), &cfg)?;
            let names: Vec<&str> = subset.iter().map(|&i| insts[i].name.as_str()).collect();
            print_json(&json!({"uv_subset": names}));
        }
        Cmd::Render { params, template } => {
            let cfg = resolve_config(&cli, None)?;
            let out = require_out(&cli)?;
            let p: RenderParams = read_json(params)?;
            let mesh = match template {
                Some(t) => read_obj(t)?,
                None => run::default_template(&cfg)?,
            };
            let sil = run::render_params(&mesh, &p, &semrecon::synth::scene_raster(cfg.synth.image_size))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_png(&out, &sil)?;
            let mut echo = out.clone().into_os_string();
            echo.push(".config.json");
            write_json(PathBuf::from(echo), &cfg)?;
        }
        Cmd::Gradcheck => {
            let cfg = resolve_config(&cli, None)?;
            let checks = run::gradcheck(cfg.train.seed)?;
            println!("{:<6} {:>12} {:>12} {:>12}", "term", "deform", "camera", "flow");
            for c in &checks {
                println!("{:<6} {:>12.3e} {:>12.3e} {:>12.3e}", c.term, c.deform, c.camera, c.flow);
            }
            let worst = checks.iter().map(|c| c.worst()).fold(0.0, f64::max);
            println!("worst relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                write_json(out.join("gradcheck.json"), &checks)?;
                write_json(out.join("config.json"), &cfg)?;
            }
            if !(worst < GRADCHECK_TOLERANCE) {
                return Ok(ExitCode::from(3));
            }
        }
        Cmd::EvalKt { checkpoint } => {
            let cfg = resolve_config(&cli, Some(checkpoint))?;
            let (state, insts, _) = run::open_checkpoint(&cfg, checkpoint)?;
            let mut summary = run::keypoint_transfer(&state, &insts, cfg.alpha)?;
            summary.mean_iou = run::mean(run::instance_ious(&state, &insts, &cfg.train.raster)?.into_iter().flatten());
            emit_summary(&cli, &cfg, &summary)?;
        }
        Cmd::EvalIou { checkpoint } => {
            let cfg = resolve_config(&cli, Some(checkpoint))?;
            let (state, insts, _) = run::open_checkpoint(&cfg, checkpoint)?;
            let ious = run::instance_ious(&state, &insts, &cfg.train.raster)?;
            let summary = run::EvalSummary { mean_iou: run::mean(ious.iter().flatten().copied()), ..Default::default() };
            emit_summary(&cli, &cfg, &summary)?;
        }
        Cmd::PseudoLabels { checkpoint, threshold } => {
            let cfg = resolve_config(&cli, Some(checkpoint))?;
            let out = require_out(&cli)?;
            let (state, insts, _) = run::open_checkpoint(&cfg, checkpoint)?;
            let threshold = threshold.unwrap_or(cfg.pseudo_label_threshold);
            let pl = pseudo_labels(&insts, &state, &cfg.train.raster, threshold)?;
            fs::create_dir_all(&out)?;
            let background = state.canonical.as_ref().map_or(0, |c| c.parts());
            let mut selected = Vec::new();
            for (inst, labels) in insts.iter().zip(&pl.labels) {
                let Some(l) = labels else { continue };
                let (h, w) = (inst.obs.image.height, inst.obs.image.width);
                write_png(out.join(format!("{}.png", inst.name)), &run::label_preview(l, h, w, background)?)?;
                let t = Tensor::new(vec![h, w], l.iter().map(|&x| x as f32).collect())?;
                write_tnsr(out.join(format!("{}.tnsr", inst.name)), &t)?;
                selected.push(inst.name.clone());
            }
            let scores: Vec<_> = insts.iter().zip(&pl.scores).map(|(i, s)| json!({"name": i.name, "score": s})).collect();
            let summary = json!({"threshold": threshold, "selected": selected, "scores": scores});
            write_json(out.join("summary.json"), &summary)?;
            write_json(out.join("config.json"), &cfg)?;
            print_json(&summary);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn emit_summary(cli: &Cli, cfg: &RunConfig, summary: &run::EvalSummary) -> Result<()> {
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        write_json(out.join("summary.json"), summary)?;
        write_json(out.join("config.json"), cfg)?;
    }
    print_json(&serde_json::to_value(summary)?);
    Ok(())
}
