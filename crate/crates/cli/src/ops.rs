//! Command bodies for the CLI.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use cyclevos::analysis::{cycle_erf, emit_contour_plot, freq_response, high_band_energy, save_grid};
use cyclevos::config::Config;
use cyclevos::correct::{
    evaluate, run_inference, CorrectionConfig, EvalOutcome, InferOptions,
};
use cyclevos::dataio::{
    fnv1a, gen_synthetic, load_split, save_checkpoint, save_dataset, save_predictions,
    load_checkpoint, CheckpointMeta,
};
use cyclevos::mask::VideoClip;
use cyclevos::net::{Hyper, SegModel};
use cyclevos::robustness::{run_attack_protocol, AttackMode, NoiseKind};

use crate::manifest::RunManifest;

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_videos(cfg: &Config, data: &Path, split: &str) -> anyhow::Result<Vec<VideoClip>> {
    let videos = load_split(data, split, Some(cfg.resolution))?;
    anyhow::ensure!(!videos.is_empty(), "split {split} of {} is empty", data.display());
    Ok(videos)
}

fn infer_options(cfg: &Config, gc: bool) -> InferOptions {
    InferOptions {
        strategy: cfg.train.strategy,
        mem_stride: cfg.train.mem_stride,
        correction: gc.then_some(cfg.correction),
        gc_on_append: None,
        loss_cfg: cfg.loss,
    }
}

fn eval_csv(outcome: &EvalOutcome) -> String {
    let mut csv = String::from("video,J,F,JF\n");
    for row in &outcome.rows {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.6}",
            row.video, row.report.mean_j, row.report.mean_f, row.report.jf
        );
    }
    let _ = writeln!(
        csv,
        "overall,{:.6},{:.6},{:.6}",
        outcome.overall.mean_j, outcome.overall.mean_f, outcome.overall.jf
    );
    csv
}

pub fn synth(cfg: &Config, out: &Path, split: &str) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let videos = gen_synthetic(&cfg.synth)?;
    save_dataset(&videos, out, split)?;
    manifest.record_output(out.join("JPEGImages"));
    manifest.record_output(out.join("Annotations"));
    manifest.record_output(out.join("ImageSets").join(format!("{split}.txt")));
    manifest.finalize()?;
    println!(
        "wrote {} videos x {} frames at {}x{} to {}",
        cfg.synth.n_videos,
        cfg.synth.frames_per_video,
        cfg.synth.resolution.0,
        cfg.synth.resolution.1,
        out.display()
    );
    Ok(())
}

pub fn train(
    cfg: &Config,
    data: &Path,
    out: &Path,
    split: &str,
    base_width: usize,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let videos = load_videos(cfg, data, split)?;
    let mut model = SegModel::init(Hyper { base_width }, cfg.train.seed);
    let config_hash = fnv1a(&cfg.snapshot());

    let ckpt_root = out.to_path_buf();
    let seed = cfg.train.seed;
    let mut saved: Vec<String> = Vec::new();
    let history = cyclevos::train::train(
        &mut model,
        &videos,
        &cfg.train,
        &cfg.loss,
        |epoch, model| {
            let dir = ckpt_root.join(format!("epoch_{:04}", epoch + 1));
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                seed,
                config_hash,
            };
            if let Err(e) = save_checkpoint(model, &meta, &dir) {
                eprintln!("warning: checkpoint at epoch {epoch} failed: {e}");
            } else {
                saved.push(dir.display().to_string());
            }
        },
    )?;

    let final_dir = out.join("final");
    save_checkpoint(
        &model,
        &CheckpointMeta {
            epoch: cfg.train.epochs,
            seed,
            config_hash,
        },
        &final_dir,
    )?;

    let mut csv = String::from("epoch,total,direct,cyclic\n");
    for e in &history {
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6}", e.epoch, e.total, e.direct, e.cyclic);
    }
    write_file(&out.join("history.csv"), &csv)?;

    for s in saved {
        manifest.record_output(s);
    }
    manifest.record_output(final_dir);
    manifest.record_output(out.join("history.csv"));
    manifest.finalize()?;
    let last = history.last().unwrap();
    println!(
        "trained {} epochs, final loss {:.4} (direct {:.4}, cyclic {:.4})",
        history.len(),
        last.total,
        last.direct,
        last.cyclic
    );
    Ok(())
}

pub fn infer(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    split: &str,
    gc: bool,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let videos = load_videos(cfg, data, split)?;
    let opts = infer_options(cfg, gc);
    for video in &videos {
        let initial = video.gt[0]
            .as_ref()
            .with_context(|| format!("video {} lacks a first-frame annotation", video.name))?;
        let outcome = run_inference(&model, video, initial, &opts, None)?;
        let labels: Vec<_> = outcome.outputs.iter().map(|m| m.argmax_labels()).collect();
        save_predictions(video, &labels, out)?;
        manifest.record_output(out.join("Annotations").join(&video.name));
    }
    manifest.finalize()?;
    println!("wrote predictions for {} videos to {}", videos.len(), out.display());
    Ok(())
}

pub fn eval(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    split: &str,
    gc: bool,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let videos = load_videos(cfg, data, split)?;
    let outcome = evaluate(&model, &videos, &infer_options(cfg, gc))?;
    let csv = eval_csv(&outcome);
    let report_path = out.join("report.csv");
    write_file(&report_path, &csv)?;
    manifest.record_output(&report_path);
    manifest.finalize()?;
    print!("{csv}");
    println!("overall {}", outcome.overall);
    Ok(())
}

pub fn correct_ablate(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    split: &str,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let videos = load_videos(cfg, data, split)?;

    let n_grid = [0usize, 1, 2, 5, 10, 20];
    let alpha_grid = [1.0, 30.0, 90.0, 180.0, 270.0];

    let mut metrics = String::from("n_iters,alpha,J,F,JF\n");
    let mut timing = String::from("n_iters,alpha,seconds\n");
    for &n in &n_grid {
        for &alpha in &alpha_grid {
            let opts = InferOptions {
                correction: Some(CorrectionConfig {
                    n_iters: n,
                    alpha,
                    ..cfg.correction
                }),
                ..infer_options(cfg, false)
            };
            let t0 = std::time::Instant::now();
            let outcome = evaluate(&model, &videos, &opts)?;
            let dt = t0.elapsed().as_secs_f64();
            let _ = writeln!(
                metrics,
                "{n},{alpha},{:.6},{:.6},{:.6}",
                outcome.overall.mean_j, outcome.overall.mean_f, outcome.overall.jf
            );
            let _ = writeln!(timing, "{n},{alpha},{dt:.3}");
            println!("n={n} alpha={alpha}: {} ({dt:.1}s)", outcome.overall);
            if n == 0 {
                // step count zero ignores alpha
                break;
            }
        }
    }
    let metrics_path = out.join("ablation.csv");
    let timing_path = out.join("timing.csv");
    write_file(&metrics_path, &metrics)?;
    write_file(&timing_path, &timing)?;
    manifest.record_output(&metrics_path);
    manifest.record_output(&timing_path);
    manifest.finalize()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn attack(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    split: &str,
    noise: &str,
    gc: bool,
    mode: &str,
    surrogate: Option<&Path>,
    weak: Option<&Path>,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let (victim, _) = load_checkpoint(ckpt)?;
    let noise: NoiseKind = noise.parse()?;
    let mode = match mode {
        "white" => AttackMode::WhiteBox,
        "black" => AttackMode::BlackBox,
        other => anyhow::bail!("mode must be white|black, got {other:?}"),
    };
    let surrogate_model = match (mode, surrogate) {
        (AttackMode::WhiteBox, _) => None,
        (AttackMode::BlackBox, Some(path)) => Some(load_checkpoint(path)?.0),
        (AttackMode::BlackBox, None) => {
            anyhow::bail!("black-box attacks require --surrogate")
        }
    };
    let weak_model = match weak {
        Some(path) => Some(load_checkpoint(path)?.0),
        None => None,
    };
    if noise == NoiseKind::LowQuality && weak_model.is_none() {
        anyhow::bail!("--noise lowq requires --weak <early checkpoint>");
    }

    let videos = load_videos(cfg, data, split)?;
    let attack_cfg = cyclevos::robustness::AttackConfig {
        mode,
        ..cfg.attack
    };
    let attack_model = surrogate_model.as_ref().unwrap_or(&victim);
    let outcome = run_attack_protocol(
        &victim,
        attack_model,
        weak_model.as_ref(),
        noise,
        &attack_cfg,
        &videos,
        gc,
        cfg.train.mem_stride,
        &cfg.correction,
        &cfg.loss,
    )?;

    let gc_tag = if gc { "on" } else { "off" };
    let mut csv = String::from("video,noise,gc,condition,J,F,JF\n");
    for row in &outcome.rows {
        for (cond, rep) in [("clean", &row.clean), ("attacked", &row.attacked)] {
            let _ = writeln!(
                csv,
                "{},{noise:?},{gc_tag},{cond},{:.6},{:.6},{:.6}",
                row.video, rep.mean_j, rep.mean_f, rep.jf
            );
        }
    }
    for (cond, rep) in [("clean", &outcome.clean), ("attacked", &outcome.attacked)] {
        let _ = writeln!(
            csv,
            "overall,{noise:?},{gc_tag},{cond},{:.6},{:.6},{:.6}",
            rep.mean_j, rep.mean_f, rep.jf
        );
    }
    let path = out.join("attack.csv");
    write_file(&path, &csv)?;
    manifest.record_output(&path);
    manifest.finalize()?;
    println!(
        "noise {noise:?} gc {gc_tag}: clean {} | attacked {}",
        outcome.clean, outcome.attacked
    );
    Ok(())
}

pub fn erf(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    split: &str,
    ref_frame: &str,
    target: usize,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let videos = load_videos(cfg, data, split)?;
    anyhow::ensure!(target >= 1, "target frame index is 1-based");

    let mut stats = String::from("video,object,mean_inside,mean_outside\n");
    for video in &videos {
        let ref_idx = match ref_frame {
            "mid" => video.len() / 2,
            s => {
                let t: usize = s.parse().context("ref-frame must be `mid` or an index")?;
                anyhow::ensure!(
                    (1..=video.len()).contains(&t),
                    "ref-frame {t} out of range for {}",
                    video.name
                );
                t - 1
            }
        };
        let target_idx = target - 1;
        anyhow::ensure!(target_idx < video.len(), "target frame out of range");
        let gt = video.gt[target_idx]
            .as_ref()
            .with_context(|| format!("no annotation at target frame in {}", video.name))?;

        for gt_mask in &gt.per_object {
            let field = cycle_erf(
                &model,
                &video.frames[ref_idx],
                &video.frames[target_idx],
                gt_mask,
                &cfg.erf,
                &cfg.loss,
            )?;
            let tag = format!("{}_obj{}", video.name, gt_mask.object_id);
            let grid_path = out.join(format!("erf_{tag}.txt"));
            let png_path = out.join(format!("erf_{tag}.png"));
            save_grid(&field.values, &grid_path)?;
            emit_contour_plot(&field.values, &png_path)?;
            manifest.record_output(&grid_path);
            manifest.record_output(&png_path);

            // responses inside vs outside the reference-frame object support
            let inside_bin = video
                .gt[ref_idx]
                .as_ref()
                .map(|g| g.object_binary(gt_mask.object_id));
            if let Some(inside_bin) = inside_bin {
                let (mut ins, mut outs) = (Vec::new(), Vec::new());
                for (idx, &v) in field.values.indexed_iter() {
                    if inside_bin[idx] {
                        ins.push(v);
                    } else {
                        outs.push(v);
                    }
                }
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                let _ = writeln!(
                    stats,
                    "{},{},{:.6e},{:.6e}",
                    video.name,
                    gt_mask.object_id,
                    mean(&ins),
                    mean(&outs)
                );
            }
        }
    }
    let stats_path = out.join("erf_stats.csv");
    write_file(&stats_path, &stats)?;
    manifest.record_output(&stats_path);
    manifest.finalize()?;
    print!("{stats}");
    Ok(())
}

pub fn freq(
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    split: &str,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(out, cfg)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let videos = load_videos(cfg, data, split)?;

    let opts = InferOptions {
        correction: Some(cfg.correction),
        ..infer_options(cfg, true)
    };
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut band = String::from("video,frame,object,high_band_before,high_band_after\n");
    for video in &videos {
        let initial = video.gt[0]
            .as_ref()
            .with_context(|| format!("video {} lacks a first-frame annotation", video.name))?;
        let outcome = run_inference(&model, video, initial, &opts, None)?;
        for rec in &outcome.corrections {
            let before = high_band_energy(&rec.before, 0.25);
            let after = high_band_energy(&rec.after, 0.25);
            let _ = writeln!(
                band,
                "{},{},{},{:.6e},{:.6e}",
                video.name, rec.frame_idx, rec.object_id, before, after
            );
            inputs.push(rec.before.clone());
            outputs.push(rec.after.clone());
        }
    }
    anyhow::ensure!(
        !inputs.is_empty(),
        "no correction events: check every_k against the video length"
    );
    let response = freq_response(&inputs, &outputs)?;
    let grid_path = out.join("freq_response.txt");
    let png_path = out.join("freq_response.png");
    let band_path = out.join("band_energy.csv");
    save_grid(&response, &grid_path)?;
    emit_contour_plot(&response, &png_path)?;
    write_file(&band_path, &band)?;
    manifest.record_output(&grid_path);
    manifest.record_output(&png_path);
    manifest.record_output(&band_path);
    manifest.finalize()?;
    println!("frequency response over {} correction events", inputs.len());
    Ok(())
}
