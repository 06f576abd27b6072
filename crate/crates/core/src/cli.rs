//! Command-line pipeline: generate, train, eval, infer, rectify, bench,
//! gradcheck, study.
//!
//! Every run writes a `manifest.json` into its output directory before
//! doing work and finalizes it afterwards: command, resolved config echo,
//! tool version, seed, output paths, timestamps and a SHA-256 over the
//! resolved inputs, which is enough to replay the run. No subcommand
//! writes outside its output directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench;
use crate::data::{self, SceneConfig};
use crate::error::{Error, Result};
use crate::fisheye::{build_rectify_map, DistortionModel};
use crate::gradcheck;
use crate::loss::GtBox;
use crate::metrics::GtDet;
use crate::model::{self, ModelSpec};
use crate::postproc::{self, BoxPx};
use crate::tensor::ops::Mode;
use crate::tensor::{DType, Elem};
use crate::train::{self, ExperimentConfig, StudyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mtlnet",
    version,
    about = "Joint object detection + semantic segmentation on a shared encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: all cores). MTLNET_THREADS is the fallback.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Element type for tensor math.
    #[arg(long, global = true, value_parser = parse_dtype, default_value = "f32")]
    pub dtype: String,
}

fn parse_dtype(s: &str) -> std::result::Result<String, String> {
    match s {
        "f32" | "f64" => Ok(s.to_string()),
        other => Err(format!("unknown dtype {other}, expected f32 or f64")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train one experiment from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run inference and write detections, masks and overlays.
    Infer(InferArgs),
    /// Rectify a fisheye image with a polynomial distortion model.
    Rectify(RectifyArgs),
    /// Analytic MACs/params plus measured throughput.
    Bench(BenchArgs),
    /// Finite-difference validation of all gradients.
    Gradcheck(GradcheckArgs),
    /// The five-column single-task vs multi-task comparison protocol.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scene config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the optimizer seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Experiment config JSON (model, thresholds, dataset paths).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to the config's eval_dir.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (`images/*.ppm`) or a single PPM file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask segmentation above this row.
    #[arg(long)]
    pub horizon_row: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RectifyArgs {
    /// Distortion model JSON.
    #[arg(long)]
    pub model: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model spec JSON; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Input size HxW (e.g. 384x1280); overrides the spec.
    #[arg(long)]
    pub size: Option<String>,
    /// Width multiplier override.
    #[arg(long)]
    pub width_mult: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random seeds for the per-op suite.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Resolved configuration echo; replaying the run needs nothing else.
    pub config: serde_json::Value,
    /// SHA-256 over the serialized resolved config.
    pub input_hash: String,
    pub output_paths: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub success: Option<bool>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn begin(
        command: &str,
        seed: Option<u64>,
        config: serde_json::Value,
        output_paths: Vec<String>,
    ) -> Self {
        let config_bytes = serde_json::to_vec(&config).unwrap_or_default();
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            input_hash: sha256_hex(&config_bytes),
            output_paths,
            started_unix: now_unix(),
            finished_unix: None,
            success: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn finalize(mut self, dir: &Path, success: bool) -> Result<()> {
        self.finished_unix = Some(now_unix());
        self.success = Some(success);
        self.write(dir)
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Parses argv and runs the subcommand, mapping usage errors to exit 1 and
/// runtime failures to exit 2.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("MTLNET_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let dtype = if cli.dtype == "f64" { DType::F64 } else { DType::F32 };
    let result = match dtype {
        DType::F32 => run_command::<f32>(&cli.command),
        DType::F64 => run_command::<f64>(&cli.command),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn read_json_config<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_command<T: Elem>(command: &Command) -> Result<()> {
    match command {
        Command::Generate(args) => run_generate(args),
        Command::Train(args) => run_train::<T>(args),
        Command::Eval(args) => run_eval::<T>(args),
        Command::Infer(args) => run_infer::<T>(args),
        Command::Rectify(args) => run_rectify(args),
        Command::Bench(args) => run_bench(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Study(args) => run_study_cmd::<T>(args),
    }
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg: SceneConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => SceneConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = RunManifest::begin(
        "generate",
        Some(cfg.seed),
        serde_json::json!({"scene": cfg, "count": args.count}),
        vec!["images/".into(), "seg/".into(), "boxes/".into(), "meta.json".into()],
    );
    manifest.write(&args.out)?;
    let meta = data::write_dataset(&cfg, args.count, &args.out)?;
    println!(
        "generated {} samples into {} (total checksum {})",
        args.count,
        args.out.display(),
        meta.total_checksum
    );
    manifest.finalize(&args.out, true)
}

fn run_train<T: Elem>(args: &TrainArgs) -> Result<()> {
    let mut exp: ExperimentConfig = read_json_config(&args.config)?;
    if let Some(seed) = args.seed {
        exp.optimizer.seed = seed;
    }
    exp.validate()?;
    let manifest = RunManifest::begin(
        "train",
        Some(exp.optimizer.seed),
        serde_json::to_value(&exp)?,
        vec![
            "loss.csv".into(),
            "eval.csv".into(),
            "model.json".into(),
            "final.mtlw".into(),
        ],
    );
    manifest.write(&args.out)?;
    let outcome = train::train::<T>(&exp, Some(&args.out))?;
    if outcome.diverged {
        println!("training diverged; last good checkpoint retained");
    }
    if let Some(row) = outcome.loss_log.last() {
        println!("final step {} L_total {}", row.step, row.l_total);
    }
    if let Some((step, result)) = outcome.eval_history.last() {
        println!(
            "eval @ step {step}: mIoU {:?} mAP {:?}",
            result.seg.as_ref().and_then(|s| s.mean),
            result.det.as_ref().and_then(|d| d.mean)
        );
    }
    manifest.finalize(&args.out, !outcome.diverged)
}

fn run_eval<T: Elem>(args: &EvalArgs) -> Result<()> {
    let exp: ExperimentConfig = read_json_config(&args.config)?;
    exp.validate()?;
    let data_dir = args
        .data
        .clone()
        .or_else(|| exp.eval_dir.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set eval_dir".into()))?;
    let manifest = RunManifest::begin(
        "eval",
        None,
        serde_json::json!({"experiment": exp, "checkpoint": args.checkpoint, "data": data_dir}),
        vec!["metrics.json".into()],
    );
    manifest.write(&args.out)?;
    let params = model::load_checkpoint_file::<T>(&exp.model, &args.checkpoint)?;
    let (_, samples) = data::load_dataset(&data_dir)?;
    let result = train::evaluate::<T>(&params, &exp, &samples)?;
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    println!(
        "mIoU {:?} mAP {:?}",
        result.seg.as_ref().and_then(|s| s.mean),
        result.det.as_ref().and_then(|d| d.mean)
    );
    manifest.finalize(&args.out, true)
}

fn run_infer<T: Elem>(args: &InferArgs) -> Result<()> {
    let exp: ExperimentConfig = read_json_config(&args.config)?;
    exp.model.validate()?;
    let manifest = RunManifest::begin(
        "infer",
        None,
        serde_json::json!({"experiment": exp, "checkpoint": args.checkpoint, "data": args.data}),
        vec!["<id>.jsonl / <id>_mask.pgm / <id>_overlay.ppm per image".into()],
    );
    manifest.write(&args.out)?;
    let params = model::load_checkpoint_file::<T>(&exp.model, &args.checkpoint)?;

    let images: Vec<(String, Vec<u8>, usize, usize)> = if args.data.is_dir() {
        let (_, samples) = data::load_dataset(&args.data)?;
        samples
            .into_iter()
            .map(|s| (s.id, s.rgb, s.width, s.height))
            .collect()
    } else {
        let (rgb, w, h) = data::read_ppm_file(&args.data)?;
        let id = args
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        vec![(id, rgb, w, h)]
    };

    let has_seg = exp.model.heads.contains(&model::Head::Seg);
    let has_det = exp.model.heads.contains(&model::Head::Det);
    for (id, rgb, w, h) in images {
        let mut planar = vec![T::zero(); 3 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                planar[c * w * h + p] = T::from_f64(rgb[p * 3 + c] as f64 / 255.0);
            }
        }
        let image = crate::tensor::Tensor::from_vec(planar, &[1, 3, h, w])?;
        let feats = model::forward_encoder(&params, &exp.model, &image, Mode::Eval)?;
        let mut mask = None;
        let mut dets = Vec::new();
        if has_seg {
            let logits = model::forward_seg(&params, &exp.model, &feats)?;
            let masks = postproc::seg_argmax(&logits, args.horizon_row)?;
            let m = masks.into_iter().next().expect("one image");
            data::write_pgm_file(&args.out.join(format!("{id}_mask.pgm")), &m.classes, w, h)?;
            mask = Some(m);
        }
        if has_det {
            let raw = model::forward_det(&params, &exp.model, &feats, Mode::Eval)?;
            let decoded =
                postproc::decode_boxes(&raw, &exp.model.anchors, exp.model.det_classes.len(), (w, h))?;
            dets = postproc::nms(&decoded[0], exp.nms_iou, exp.score_thresh);
            let jsonl = postproc::detections_to_jsonl(&id, &dets, &exp.model.det_classes)?;
            std::fs::write(args.out.join(format!("{id}.jsonl")), jsonl)?;
        }
        let overlay = postproc::render_overlay(&rgb, w, h, mask.as_ref(), &dets)?;
        data::write_ppm_file(&args.out.join(format!("{id}_overlay.ppm")), &overlay, w, h)?;
    }
    manifest.finalize(&args.out, true)
}

fn run_rectify(args: &RectifyArgs) -> Result<()> {
    let model = DistortionModel::from_json(&std::fs::read_to_string(&args.model)?)?;
    let out_dir = args
        .output
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let manifest = RunManifest::begin(
        "rectify",
        None,
        serde_json::json!({"model": model, "input": args.input, "output": args.output}),
        vec![args.output.display().to_string()],
    );
    manifest.write(&out_dir)?;
    let (rgb, w, h) = data::read_ppm_file(&args.input)?;
    let map = build_rectify_map(&model, (w, h));
    let (out, _mask) = map.apply_u8(&rgb, w, h, 3)?;
    data::write_ppm_file(&args.output, &out, w, h)?;
    println!("rectified {} -> {}", args.input.display(), args.output.display());
    manifest.finalize(&out_dir, true)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("size {s} must be HxW")));
    }
    let h = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("bad height in {s}")))?;
    let w = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("bad width in {s}")))?;
    Ok((h, w))
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let mut spec: ModelSpec = match &args.spec {
        Some(path) => read_json_config(path)?,
        None => ModelSpec::default(),
    };
    if let Some(size) = &args.size {
        spec.input_size = parse_size(size)?;
    }
    if let Some(wm) = args.width_mult {
        spec.width_mult = wm;
    }
    spec.validate()?;
    let manifest = RunManifest::begin(
        "bench",
        Some(args.seed),
        serde_json::json!({"spec": spec, "runs": args.runs, "warmup": args.warmup}),
        vec!["cost.json".into()],
    );
    manifest.write(&args.out)?;
    let report = bench::measure_fps(&spec, args.runs, args.warmup, args.seed)?;
    std::fs::write(args.out.join("cost.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.render_table());
    manifest.finalize(&args.out, true)
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let mut all_ok = true;
    let mut lines = Vec::new();
    for outcome in gradcheck::run_op_suite(&seeds, gradcheck::DEFAULT_TOLERANCE) {
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        all_ok &= outcome.passed;
        lines.push(format!("{status} {} rel_err={:.3e}", outcome.name, outcome.rel_err));
    }
    for (ws, wd) in [(1.0, 1.0), (10.0, 1.0)] {
        let (err, params) = gradcheck::mtl_micro_net_check(1, ws, wd)?;
        let ok = err < gradcheck::DEFAULT_TOLERANCE;
        all_ok &= ok;
        lines.push(format!(
            "{} mtl_micro_net[w=({ws},{wd}), {params} params] rel_err={err:.3e}",
            if ok { "PASS" } else { "FAIL" }
        ));
    }
    let report = lines.join("\n") + "\n";
    print!("{report}");
    if let Some(dir) = &args.out {
        let manifest = RunManifest::begin(
            "gradcheck",
            None,
            serde_json::json!({"seeds": args.seeds}),
            vec!["gradcheck.txt".into()],
        );
        manifest.write(dir)?;
        std::fs::write(dir.join("gradcheck.txt"), &report)?;
        manifest.finalize(dir, all_ok)?;
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::InvalidArg("gradient checks failed".into()))
    }
}

fn run_study_cmd<T: Elem>(args: &StudyArgs) -> Result<()> {
    let mut study: StudyConfig = read_json_config(&args.config)?;
    if let Some(seed) = args.seed {
        study.scene.seed = seed;
    }
    let manifest = RunManifest::begin(
        "study",
        Some(study.scene.seed),
        serde_json::to_value(&study)?,
        vec!["results.csv".into(), "results.json".into()],
    );
    manifest.write(&args.out)?;
    let outcome = train::run_study::<T>(&study, &args.out)?;
    print!("{}", outcome.table.to_csv());
    if let Some(ratio) = outcome.seg_det_loss_ratio {
        println!("observed L_seg/L_det ratio (MTL): {ratio:.3}");
    }
    for (run, err) in &outcome.failures {
        eprintln!("column failure {run}: {err}");
    }
    manifest.finalize(&args.out, outcome.failures.is_empty())
}

// Keep GtBox/GtDet/BoxPx linked into the public CLI surface for config docs.
#[doc(hidden)]
pub fn _schema_types() -> (Option<GtBox>, Option<GtDet>, Option<BoxPx>) {
    (None, None, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1_and_help_exits_0() {
        assert_eq!(dispatch(["mtlnet", "no-such-command"]), EXIT_USAGE);
        assert_eq!(dispatch(["mtlnet", "--help"]), EXIT_OK);
        assert_eq!(dispatch(["mtlnet", "train"]), EXIT_USAGE); // missing args
    }

    #[test]
    fn runtime_errors_exit_2() {
        let code = dispatch([
            "mtlnet",
            "train",
            "--config",
            "/nonexistent/config.json",
            "--out",
            "/tmp/mtlnet-test-never-created",
        ]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn generate_writes_manifest_and_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let cfg = dir.path().join("scene.json");
        std::fs::write(
            &cfg,
            "{\"seed\": 3, \"size\": [32, 64], \"cars\": [1, 1]}",
        )
        .unwrap();
        let code = dispatch([
            "mtlnet",
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--count",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.command, "generate");
        assert_eq!(manifest.success, Some(true));
        assert!(out.join("images/000000.ppm").exists());
        assert!(out.join("meta.json").exists());
    }

    #[test]
    fn size_parser() {
        assert_eq!(parse_size("384x1280").unwrap(), (384, 1280));
        assert!(parse_size("384").is_err());
        assert!(parse_size("ax1280").is_err());
    }
}
