//! Subcommand implementations.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ldct_core::dataset::{load_dataset, save_dataset, synthesize};
use ldct_core::imaging::{
    export_png16, hu_window_denormalize, hu_window_normalize, load_slice, save_slice,
};
use ldct_core::interpret::{kmeans_cluster, render_label_map};
use ldct_core::metrics::{evaluate, Roi};
use ldct_core::trainer::{load_denoiser, train, TrainOutputs};
use ldct_core::{Checkpoint, Error, Result, TrainConfig, TrainState};

use crate::{ClusterArgs, Command, DenoiseArgs, EvalArgs, SynthArgs, TrainArgs, TrainOverrides};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Cluster(a) => cluster(a),
    }
}

pub fn parse_roi(s: &str) -> std::result::Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [y0, x0, h, w] => Ok(Roi { y0, x0, h, w }),
        _ => Err("expected row,col,height,width".into()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let pairs = synthesize(a.count, a.size, a.seed)?;
    save_dataset(&a.out, &pairs)?;
    eprintln!(
        "wrote {} pairs of {}x{} to {}",
        pairs.len(),
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

/// Applies every set override, returning `field=value` notes in flag order.
pub fn apply_overrides(config: &mut TrainConfig, o: &TrainOverrides) -> Vec<String> {
    let mut notes = Vec::new();
    macro_rules! apply {
        ($($field:ident),*) => {$(
            if let Some(v) = o.$field {
                config.$field = v;
                notes.push(format!("{}={}", stringify!($field), v));
            }
        )*};
    }
    apply!(
        epochs,
        batch_size,
        lr_max,
        lr_min,
        weight_decay,
        beta1,
        beta2,
        lambda,
        tau,
        global_weight,
        local_weight,
        ema_momentum,
        pixel_queries,
        patch_queries,
        negatives,
        negative_radius,
        negative_pool,
        window_lo,
        window_hi,
        foreground_hu,
        checkpoint_every,
        seed
    );
    if let Some(v) = o.max_steps {
        config.max_steps = Some(v);
        notes.push(format!("max_steps={v}"));
    }
    if let Some(v) = o.grad_clip {
        config.grad_clip = Some(v);
        notes.push(format!("grad_clip={v}"));
    }
    notes
}

fn any_override(o: &TrainOverrides) -> bool {
    let mut probe = TrainConfig::default();
    !apply_overrides(&mut probe, o).is_empty()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let log_path = a.out.join("metrics.ndjson");
    let mut state = if let Some(resume) = &a.resume {
        if any_override(&a.overrides) {
            return Err(Error::Config(
                "overrides cannot be combined with --resume".into(),
            ));
        }
        let state = TrainState::from_checkpoint(&Checkpoint::load(resume)?)?;
        eprintln!("resuming at step {} of {}", state.step, state.total_steps);
        state
    } else {
        let mut config = match &a.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                TrainConfig::from_json(&text)?
            }
            None => TrainConfig::default(),
        };
        let notes = apply_overrides(&mut config, &a.overrides);
        config.validate()?;
        let mut run_log = String::new();
        for n in &notes {
            eprintln!("override {n}");
            run_log.push_str(&format!("override {n}\n"));
        }
        write_file(&a.out.join("overrides.log"), &run_log)?;
        write_file(&a.out.join("config.json"), &config.to_json())?;
        // A fresh run starts a fresh log.
        File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        TrainState::new(config, dataset.len())?
    };
    let file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let reports = train(
        &mut state,
        &dataset,
        TrainOutputs {
            dir: Some(&a.out),
            log: &mut log,
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(last) = reports.last() {
        eprintln!(
            "finished step {}: l_total {:.6} (pixel {:.6}, global {:.6}, local {:.6})",
            state.step, last.l_total, last.l_pixel, last.l_global, last.l_local
        );
    }
    Ok(())
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    let (net, (lo, hi)) = load_denoiser(&Checkpoint::load(&a.ckpt)?)?;
    let slice = load_slice(&a.input)?;
    let out = net.denoise(&hu_window_normalize(&slice, lo, hi)?)?;
    save_slice(&hu_window_denormalize(&out, lo, hi)?, &a.out)?;
    if let Some(png) = &a.png {
        export_png16(&out, png)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (net, window) = load_denoiser(&Checkpoint::load(&a.ckpt)?)?;
    let dataset = load_dataset(&a.data)?;
    let rois = a.lesion.zip(a.background);
    let report = evaluate(&net, &dataset, window, rois)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_file(&a.report, &json)?;
    if let Some(csv) = &a.csv {
        write_file(csv, &report.to_csv(&a.method))?;
    }
    eprintln!(
        "psnr {:.4} dB, rmse {:.6}, ssim {:.6} over {} slices",
        report.psnr.mean, report.rmse.mean, report.ssim.mean, report.count
    );
    Ok(())
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let (net, (lo, hi)) = load_denoiser(&Checkpoint::load(&a.ckpt)?)?;
    let slice = load_slice(&a.input)?;
    let features = net.extract_features(&hu_window_normalize(&slice, lo, hi)?)?;
    let clustering = kmeans_cluster(&features, a.k, a.seed, a.max_iters)?;
    render_label_map(&clustering.labels, &a.out)?;
    let sidecar = a.sidecar.unwrap_or_else(|| sidecar_path(&a.out));
    let json = serde_json::to_string_pretty(&clustering.sidecar()).expect("sidecar serialises");
    write_file(&sidecar, &json)
}
