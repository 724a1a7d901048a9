//! Command-line interface: dataset generation, training, evaluation,
//! segmentation dumps, and the ablation sweep.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::augment::{crop_resize, CropRect, ViewGeometry};
use crate::config::{RunConfig, DEFAULT_COPY_PERIOD_EPOCHS};
use crate::data::{
    load_scene_dataset, load_video_dataset, manifest_digest, write_image, write_labelmap,
    write_scene_dataset, write_video_dataset, LoadedScene,
};
use crate::discovery::kmeans;
use crate::error::{Error, Result};
use crate::evaluation::{
    discovery_metrics, evaluate_discovery_dataset, evaluate_video_dataset, DiscoveryReport,
    FeatureBackend,
};
use crate::model::ModelParamsOf;
use crate::tensor::{LabelMap, TensorOf};
use crate::trainer::{
    checkpoint_load, checkpoint_save, feature_grid, train_loop, DiscoverySchedule, ParamSelector,
    Trainer, TrainerState,
};

#[derive(Parser)]
#[command(
    name = "odin",
    version,
    about = "Self-supervised object discovery and representation learning on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (or video) dataset with ground truth.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes or video sequences.
        #[arg(long)]
        n: usize,
        /// Dataset seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Generate videos instead of still scenes.
        #[arg(long)]
        video: bool,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set data.height=96.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train on a scene dataset, writing checkpoints and metrics.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score object-discovery proposals against dataset ground truth.
    EvalDiscovery {
        /// Checkpoint path, or the baselines `random` / `oracle-color`.
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: PathBuf,
        /// Parameter set to evaluate: online, target, or teacher.
        #[arg(long, default_value = "online")]
        params: String,
        /// Proposal pyramid K list, e.g. --ks 1,2,4,8.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Report path (JSON); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit CSV (one row per image) instead of JSON.
        #[arg(long)]
        csv: bool,
        /// Score the ground truth against itself (harness check).
        #[arg(long)]
        self_test: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Propagate first-frame labels through videos and score J/F.
    EvalVideo {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "online")]
        params: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write discovered label maps and image|truth|discovered panels.
    DumpSegments {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: PathBuf,
        /// Number of segments.
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "online")]
        params: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train and evaluate over the K x update-schedule ablation grid.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Discovery dataset scored per cell; defaults to --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// K values swept under the discrete schedule.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        ks: Vec<usize>,
        /// Continuous discovery rates swept at the base K.
        #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-3,1e-4")]
        taus: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// Entry point used by the binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parse and execute; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let command = Cli::command().after_help(RunConfig::help_table());
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { out, n, seed, video, force, config, set } => {
            let cfg = load_config(&config, &set)?;
            cmd_generate(&cfg, &out, n, seed.unwrap_or(cfg.seed), video, force)
        }
        Command::Train { config, data, out, resume, set } => {
            let cfg = load_config(&config, &set)?;
            cmd_train(&cfg, &data, &out, resume.as_deref())
        }
        Command::EvalDiscovery { ckpt, data, params, ks, out, csv, self_test, config, set } => {
            let cfg = load_config(&config, &set)?;
            cmd_eval_discovery(
                &cfg,
                &ckpt,
                &data,
                &params,
                ks.as_deref(),
                out.as_deref(),
                csv,
                self_test,
            )
        }
        Command::EvalVideo { ckpt, data, params, out, csv, config, set } => {
            let cfg = load_config(&config, &set)?;
            cmd_eval_video(&cfg, &ckpt, &data, &params, out.as_deref(), csv)
        }
        Command::DumpSegments { ckpt, data, k, out, params, config, set } => {
            let cfg = load_config(&config, &set)?;
            cmd_dump_segments(&cfg, &ckpt, &data, k, &out, &params)
        }
        Command::Sweep { data, eval_data, out, ks, taus, config, set } => {
            let cfg = load_config(&config, &set)?;
            cmd_sweep(&cfg, &data, eval_data.as_deref(), &out, &ks, &taus)
        }
    }
}

fn ensure_output_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) && !force {
        return Err(Error::data(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn cmd_generate(
    cfg: &RunConfig,
    out: &Path,
    n: usize,
    seed: u64,
    video: bool,
    force: bool,
) -> Result<()> {
    if n == 0 {
        return Err(Error::config("--n must be >= 1"));
    }
    ensure_output_dir(out, force)?;
    if video {
        write_video_dataset::<f64>(out, seed, n, &cfg.video_config())?;
    } else {
        write_scene_dataset::<f64>(out, seed, n, &cfg.scene_config())?;
    }
    let digest = manifest_digest(out)?;
    println!(
        "wrote {n} {} to {} (seed {seed})\nmanifest sha256 {digest}",
        if video { "videos" } else { "scenes" },
        out.display()
    );
    Ok(())
}

fn build_trainer(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer<f64>> {
    match resume {
        None => Trainer::new(
            cfg.model.clone(),
            cfg.augment.clone(),
            cfg.train.clone(),
            cfg.discovery.clone(),
            cfg.seed,
        ),
        Some(path) => {
            let (state, _config) = checkpoint_load(path)?;
            if state.online.shape != cfg.model {
                return Err(Error::checkpoint(
                    "checkpoint model shape does not match the configured model",
                ));
            }
            Ok(Trainer::from_state(
                state,
                cfg.augment.clone(),
                cfg.train.clone(),
                cfg.discovery.clone(),
            ))
        }
    }
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let scenes = load_scene_dataset::<f64>(data)?;
    fs::create_dir_all(out)?;
    let mut trainer = build_trainer(cfg, resume)?;
    let flat = cfg.to_flat_json();

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)?;
    let every = cfg.train.checkpoint_every;
    train_loop(&mut trainer, &scenes, |t, m| {
        writeln!(metrics, "{}", serde_json::to_string(m)?)?;
        if every > 0 && t.state.step % every == 0 && t.state.step < t.train.total_steps {
            checkpoint_save(&t.state, &flat, &out.join(format!("ckpt_{:06}.odin", t.state.step)))?;
        }
        Ok(())
    })?;
    let final_path = out.join("final.odin");
    checkpoint_save(&trainer.state, &flat, &final_path)?;
    println!(
        "trained {} steps on {} scenes; final checkpoint {}",
        trainer.state.step,
        scenes.len(),
        final_path.display()
    );
    Ok(())
}

/// Resolve `--ckpt` into evaluation parameters. `random` initializes fresh
/// parameters from the config seed; `oracle-color` clusters raw pixels.
enum ResolvedBackend {
    Model(Box<ModelParamsOf<f64>>),
    OracleColor,
}

fn resolve_backend(cfg: &RunConfig, ckpt: &str, params: &str) -> Result<ResolvedBackend> {
    match ckpt {
        "random" => Ok(ResolvedBackend::Model(Box::new(ModelParamsOf::init(
            &cfg.model, cfg.seed,
        )?))),
        "oracle-color" => Ok(ResolvedBackend::OracleColor),
        path => {
            let (state, _) = checkpoint_load(Path::new(path))?;
            let selector: ParamSelector = params.parse()?;
            Ok(ResolvedBackend::Model(Box::new(state.params_of(selector).clone())))
        }
    }
}

fn backend_of<'a>(
    resolved: &'a ResolvedBackend,
    cfg: &RunConfig,
    image_side: usize,
) -> FeatureBackend<'a, f64> {
    match resolved {
        ResolvedBackend::Model(params) => FeatureBackend::Model {
            params,
            source: cfg.discovery.source,
        },
        ResolvedBackend::OracleColor => FeatureBackend::OracleColor {
            grid: feature_grid(&cfg.model, image_side),
        },
    }
}

fn write_report<R: Serialize>(
    report: &R,
    csv: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let body = match csv {
        Some(csv_text) => csv_text,
        None => serde_json::to_string_pretty(report)?,
    };
    match out {
        Some(path) => fs::write(path, body)?,
        None => println!("{body}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval_discovery(
    cfg: &RunConfig,
    ckpt: &str,
    data: &Path,
    params: &str,
    ks: Option<&[usize]>,
    out: Option<&Path>,
    csv: bool,
    self_test: bool,
) -> Result<()> {
    let scenes = load_scene_dataset::<f64>(data)?;
    let ks = ks.map(|k| k.to_vec()).unwrap_or_else(|| cfg.eval.ks.clone());
    let filter = cfg.eval.filter_enabled.then_some(cfg.eval.filter);

    let report = if self_test {
        // Ground truth scored against itself: ABO = OR = 1 by construction.
        let mut images = Vec::new();
        let mut skipped = 0;
        for scene in &scenes {
            let gt = scene.instance_masks();
            match discovery_metrics(&gt, &scene.classes, &gt, filter)? {
                Some((abo_i, abo_c, or)) => images.push(crate::evaluation::ImageDiscoveryScores {
                    id: scene.id.clone(),
                    abo_i,
                    abo_c,
                    or,
                }),
                None => skipped += 1,
            }
        }
        let n = images.len().max(1) as f64;
        DiscoveryReport {
            mean_abo_i: images.iter().map(|s| s.abo_i).sum::<f64>() / n,
            mean_abo_c: images.iter().map(|s| s.abo_c).sum::<f64>() / n,
            mean_or: images.iter().map(|s| s.or).sum::<f64>() / n,
            images,
            ks: ks.clone(),
            filter,
            skipped,
        }
    } else {
        let resolved = resolve_backend(cfg, ckpt, params)?;
        let side = scenes
            .first()
            .map(|s| s.image.shape()[0])
            .ok_or_else(|| Error::data("empty dataset"))?;
        let backend = backend_of(&resolved, cfg, side);
        evaluate_discovery_dataset(&scenes, &backend, &ks, &cfg.discovery.kmeans, filter, cfg.seed)?
    };

    eprintln!(
        "discovery: ABO_i {:.4} ABO_c {:.4} OR {:.4} over {} images ({} skipped)",
        report.mean_abo_i,
        report.mean_abo_c,
        report.mean_or,
        report.images.len(),
        report.skipped
    );
    write_report(&report, csv.then(|| report.to_csv()), out)
}

fn cmd_eval_video(
    cfg: &RunConfig,
    ckpt: &str,
    data: &Path,
    params: &str,
    out: Option<&Path>,
    csv: bool,
) -> Result<()> {
    let videos = load_video_dataset::<f64>(data)?;
    let resolved = resolve_backend(cfg, ckpt, params)?;
    let side = videos
        .first()
        .map(|v| v.frames[0].shape()[0])
        .ok_or_else(|| Error::data("empty video dataset"))?;
    let backend = backend_of(&resolved, cfg, side);
    let report = evaluate_video_dataset(
        &videos,
        &backend,
        &cfg.eval.propagation,
        cfg.eval.boundary_tol,
    )?;
    eprintln!(
        "video: J {:.4} F {:.4} (J&F)/2 {:.4} over {} sequences",
        report.mean_j,
        report.mean_f,
        report.mean_jf,
        report.sequences.len()
    );
    write_report(&report, csv.then(|| report.to_csv()), out)
}

/// Distinct color per label for composite panels (label 0 = dark gray).
fn label_color(label: u8) -> [f64; 3] {
    if label == 0 {
        return [0.15, 0.15, 0.15];
    }
    let hue = (label as f64 * 0.618_033_988_749_895) % 1.0;
    let h = hue * 6.0;
    let f = h - h.floor();
    let (v, p) = (0.95, 0.25);
    let q = v - (v - p) * f;
    let t = p + (v - p) * f;
    match h.floor() as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn colorize(labels: &LabelMap) -> TensorOf<f64> {
    let (h, w) = (labels.height(), labels.width());
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let c = label_color(labels.get(y, x));
            data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    TensorOf::new(vec![h, w, 3], data).expect("consistent extents")
}

/// Side-by-side [image | truth | discovered] panel.
fn composite_panel(scene: &LoadedScene<f64>, discovered: &LabelMap) -> TensorOf<f64> {
    let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
    let gt = colorize(&scene.labels);
    let dv = colorize(discovered);
    let mut data = vec![0.0; h * 3 * w * 3];
    for y in 0..h {
        for (panel, src) in [&scene.image, &gt, &dv].iter().enumerate() {
            for x in 0..w {
                let dst = (y * 3 * w + panel * w + x) * 3;
                let s = (y * w + x) * 3;
                data[dst..dst + 3].copy_from_slice(&src.data()[s..s + 3]);
            }
        }
    }
    TensorOf::new(vec![h, 3 * w, 3], data).expect("consistent extents")
}

fn cmd_dump_segments(
    cfg: &RunConfig,
    ckpt: &str,
    data: &Path,
    k: usize,
    out: &Path,
    params: &str,
) -> Result<()> {
    if k == 0 {
        return Err(Error::config("--k must be >= 1"));
    }
    let scenes = load_scene_dataset::<f64>(data)?;
    let resolved = resolve_backend(cfg, ckpt, params)?;
    fs::create_dir_all(out)?;
    for (i, scene) in scenes.iter().enumerate() {
        let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
        let backend = backend_of(&resolved, cfg, h);
        let features = backend.features(&scene.image)?;
        let seed: u64 = {
            use rand::Rng;
            crate::util::substream(cfg.seed, 0xd09, i as u64).random()
        };
        let labels = kmeans(&features, k, seed, &cfg.discovery.kmeans)?.labels;
        let full = labels.resize_nearest(h, w);
        write_labelmap(&out.join(format!("{}_segments.pgm", scene.id)), &full)?;
        write_image(&out.join(format!("{}_panel.ppm", scene.id)), &composite_panel(scene, &full))?;
    }
    println!("wrote {} segment dumps to {}", scenes.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    schedule: String,
    abo_i: f64,
    or: f64,
}

fn cmd_sweep(
    cfg: &RunConfig,
    data: &Path,
    eval_data: Option<&Path>,
    out: &Path,
    ks: &[usize],
    taus: &[f64],
) -> Result<()> {
    let train_scenes = load_scene_dataset::<f64>(data)?;
    let eval_scenes = match eval_data {
        Some(p) => load_scene_dataset::<f64>(p)?,
        None => train_scenes.clone(),
    };
    fs::create_dir_all(out)?;

    let period = match cfg.discovery.schedule {
        DiscoverySchedule::Discrete { period_epochs } => period_epochs,
        _ => DEFAULT_COPY_PERIOD_EPOCHS,
    };
    let mut cells: Vec<(usize, DiscoverySchedule, String)> = Vec::new();
    for &k in ks {
        cells.push((
            k,
            DiscoverySchedule::Discrete { period_epochs: period },
            format!("discrete/{period}ep"),
        ));
    }
    for &tau in taus {
        cells.push((
            cfg.discovery.k,
            DiscoverySchedule::Continuous { lambda_tau: tau },
            format!("lambda_tau={tau}"),
        ));
    }

    let mut rows = Vec::new();
    for (k, schedule, label) in cells {
        let mut row_cfg = cfg.clone();
        row_cfg.discovery.k = k;
        row_cfg.discovery.schedule = schedule;
        let mut trainer = build_trainer(&row_cfg, None)?;
        train_loop(&mut trainer, &train_scenes, |_, _| Ok(()))?;
        let filter = row_cfg.eval.filter_enabled.then_some(row_cfg.eval.filter);
        let backend = FeatureBackend::Model {
            params: &trainer.state.online,
            source: row_cfg.discovery.source,
        };
        let report = evaluate_discovery_dataset(
            &eval_scenes,
            &backend,
            &row_cfg.eval.ks,
            &row_cfg.discovery.kmeans,
            filter,
            row_cfg.seed,
        )?;
        println!(
            "K={k:<4} {label:<18} ABO_i {:.4}  OR {:.4}",
            report.mean_abo_i, report.mean_or
        );
        rows.push(SweepRow { k, schedule: label, abo_i: report.mean_abo_i, or: report.mean_or });
    }

    let table_path = out.join("sweep.json");
    fs::write(&table_path, serde_json::to_string_pretty(&rows)?)?;
    println!("wrote {}", table_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_colors_are_distinct_for_small_labels() {
        let mut seen = Vec::new();
        for l in 0..12u8 {
            let c = label_color(l);
            assert!(!seen.contains(&c), "label {l} repeats a color");
            seen.push(c);
        }
    }

    #[test]
    fn backend_resolution_rejects_bad_params_name() {
        let cfg = RunConfig::default();
        assert!(resolve_backend(&cfg, "random", "online").is_ok());
        let err = resolve_backend(&cfg, "nonexistent.odin", "online");
        assert!(err.is_err());
    }

    #[test]
    fn composite_panel_is_three_images_wide() {
        let scenes = crate::data::generate_scenes_in_memory::<f64>(
            1,
            1,
            &crate::data::SceneConfig::default(),
        )
        .unwrap();
        let labels = scenes[0].labels.clone();
        let panel = composite_panel(&scenes[0], &labels);
        assert_eq!(panel.shape(), &[64, 192, 3]);
    }
}
