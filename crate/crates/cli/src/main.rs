use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrflow_core::io::{
    compute_metrics, read_flo, read_mask, write_flo, write_mask, write_pgm, write_scalar_map, BitDepth,
};
use mrflow_core::pipeline::{
    load_inputs, run_pipeline, write_outputs, Diagnostics, InputPaths, PipelineConfig, PipelineError, Preset,
    DIAGNOSTICS_FILE,
};
use mrflow_core::synth::{render_scene, FlowNoise, SceneSpec, SyntheticInputs};
use mrflow_core::{Error, Image};

const EXIT_INPUT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "mrflow",
    version,
    about = "Plane+Parallax refinement of optical flow for mostly rigid scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine the initial flow of one triplet, or of every triplet in a batch list.
    Run(RunArgs),
    /// Render a synthetic scene with ground truth and pipeline inputs.
    Synth(SynthArgs),
    /// Compare a flow field against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Sintel,
    Kitti,
}

#[derive(Clone, Copy, ValueEnum)]
enum BInit {
    Robust,
    Median,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    img_prev: Option<PathBuf>,
    #[arg(long)]
    img_ref: Option<PathBuf>,
    #[arg(long)]
    img_next: Option<PathBuf>,
    #[arg(long)]
    flow_fwd: Option<PathBuf>,
    #[arg(long)]
    flow_bwd: Option<PathBuf>,
    #[arg(long)]
    flow_fwd_rev: Option<PathBuf>,
    #[arg(long)]
    flow_bwd_rev: Option<PathBuf>,
    #[arg(long)]
    semantic: Option<PathBuf>,
    /// Directory holding inputs under the names `synth` writes; explicit
    /// paths take precedence.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "kitti")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_occlusion_reasoning: bool,
    #[arg(long)]
    no_coplanarity: bool,
    #[arg(long)]
    no_nonlinear_binit: bool,
    #[arg(long)]
    no_spatial_priors: bool,
    #[arg(long = "no-1st")]
    no_first: bool,
    #[arg(long = "no-2nd")]
    no_second: bool,
    #[arg(long)]
    no_opt: bool,
    #[arg(long, value_enum)]
    b_init: Option<BInit>,
    #[arg(long)]
    assume_unknown_semantic: bool,
    /// Also write color renderings of the initial and final flow.
    #[arg(long)]
    visualize: bool,
    /// `key = value` options applied after the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// File with one `INPUT_DIR OUTPUT_DIR` pair per line.
    #[arg(long, conflicts_with = "out")]
    batch: Option<PathBuf>,
    /// Triplets processed concurrently in batch mode.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Standard deviation of the Gaussian noise on the input flows.
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    outlier_fraction: f64,
    /// Blur applied to the ground-truth rigidity to form the semantic map.
    #[arg(long, default_value_t = 3.0)]
    semantic_blur: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, requires = "est_rigidity")]
    gt_rigidity: Option<PathBuf>,
    #[arg(long, requires = "gt_rigidity")]
    est_rigidity: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
}

/// File names shared by `synth` output and `run --input-dir`.
mod names {
    pub const PREV: &str = "prev.pgm";
    pub const REF: &str = "ref.pgm";
    pub const NEXT: &str = "next.pgm";
    pub const FLOW_FWD: &str = "flow_fwd.flo";
    pub const FLOW_BWD: &str = "flow_bwd.flo";
    pub const FLOW_FWD_REV: &str = "flow_fwd_rev.flo";
    pub const FLOW_BWD_REV: &str = "flow_bwd_rev.flo";
    pub const SEMANTIC: &str = "semantic.pgm";
    pub const GT_FLOW_FWD: &str = "gt_flow_fwd.flo";
    pub const GT_FLOW_BWD: &str = "gt_flow_bwd.flo";
    pub const GT_RIGIDITY: &str = "gt_rigidity.pgm";
    pub const GT_STRUCTURE: &str = "gt_structure.rgd";
    pub const GT_VISIBLE: &str = "gt_visible_fwd.pgm";
    pub const SCENE: &str = "scene.toml";
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: if e.is_input_error() { EXIT_INPUT } else { EXIT_INTERNAL },
            message: e.to_string(),
        }
    }
}

fn input_failure(e: Error) -> Failure {
    PipelineError {
        stage: "input",
        source: e,
    }
    .into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(&a),
        Command::Synth(a) => synth(&a),
        Command::Eval(a) => eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn config_for(a: &RunArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::for_preset(match a.preset {
        PresetArg::Sintel => Preset::Sintel,
        PresetArg::Kitti => Preset::Kitti,
    });
    cfg.seed = a.seed;
    let s = &mut cfg.switches;
    s.occlusion_reasoning &= !a.no_occlusion_reasoning;
    s.coplanarity_refinement &= !a.no_coplanarity;
    s.nonlinear_b_init &= !a.no_nonlinear_binit;
    s.spatial_priors &= !a.no_spatial_priors;
    s.first_order &= !a.no_first;
    s.second_order &= !a.no_second;
    s.variational_opt &= !a.no_opt;
    if let Some(b) = a.b_init {
        s.nonlinear_b_init = matches!(b, BInit::Robust);
    }
    cfg.assume_unknown_semantic = a.assume_unknown_semantic;
    cfg.visualize = a.visualize;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| input_failure(e.into()))?;
        cfg.apply_text(&text).map_err(input_failure)?;
    }
    cfg.validate().map_err(input_failure)?;
    Ok(cfg)
}

fn input_paths(a: &RunArgs, dir: Option<&Path>) -> Result<InputPaths, Failure> {
    let pick = |explicit: &Option<PathBuf>, name: &str, flag: &str| -> Result<PathBuf, Failure> {
        explicit
            .clone()
            .or_else(|| dir.map(|d| d.join(name)))
            .ok_or_else(|| input_failure(Error::InvalidConfig(format!("missing --{flag}"))))
    };
    Ok(InputPaths {
        img_prev: pick(&a.img_prev, names::PREV, "img-prev")?,
        img_ref: pick(&a.img_ref, names::REF, "img-ref")?,
        img_next: pick(&a.img_next, names::NEXT, "img-next")?,
        flow_fwd: pick(&a.flow_fwd, names::FLOW_FWD, "flow-fwd")?,
        flow_bwd: pick(&a.flow_bwd, names::FLOW_BWD, "flow-bwd")?,
        flow_fwd_rev: pick(&a.flow_fwd_rev, names::FLOW_FWD_REV, "flow-fwd-rev")?,
        flow_bwd_rev: pick(&a.flow_bwd_rev, names::FLOW_BWD_REV, "flow-bwd-rev")?,
        semantic: a.semantic.clone().or_else(|| dir.map(|d| d.join(names::SEMANTIC))),
    })
}

/// Process one triplet, leaving a diagnostics file in `out` on failure.
fn run_one(paths: &InputPaths, cfg: &PipelineConfig, out: &Path) -> Result<(), Failure> {
    let result = (|| {
        let inputs = load_inputs(paths, cfg.assume_unknown_semantic).map_err(|e| PipelineError {
            stage: "input",
            source: e,
        })?;
        let output = run_pipeline(&inputs, cfg)?;
        if output.fallback {
            log::warn!("alignment failed, returning the initial flow");
        }
        write_outputs(out, &output, Some(&inputs.flow_fwd), cfg.visualize).map_err(|e| PipelineError {
            stage: "output",
            source: e,
        })
    })();
    if let Err(e) = &result {
        write_failure(out, &e.diagnostics());
    }
    result.map_err(Failure::from)
}

fn write_failure(out: &Path, diag: &Diagnostics) {
    let written = std::fs::create_dir_all(out).and_then(|_| std::fs::write(out.join(DIAGNOSTICS_FILE), diag.to_text()));
    if let Err(e) = written {
        log::error!("could not write diagnostics to {}: {e}", out.display());
    }
}

fn run(a: &RunArgs) -> Result<(), Failure> {
    let cfg = config_for(a)?;
    if let Some(list) = &a.batch {
        return run_batch(a, &cfg, list);
    }
    let out = a
        .out
        .as_deref()
        .ok_or_else(|| input_failure(Error::InvalidConfig("missing --out".into())))?;
    let paths = match input_paths(a, a.input_dir.as_deref()) {
        Ok(p) => p,
        Err(f) => {
            let mut d = Diagnostics::default();
            d.push("status", "error");
            d.push("stage", "input");
            d.push("error", &f.message);
            write_failure(out, &d);
            return Err(f);
        }
    };
    run_one(&paths, &cfg, out)
}

fn parse_batch(list: &Path) -> Result<Vec<(PathBuf, PathBuf)>, Failure> {
    let text = std::fs::read_to_string(list).map_err(|e| input_failure(e.into()))?;
    let base = list.parent().unwrap_or(Path::new(""));
    let mut jobs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(i), Some(o), None) => jobs.push((base.join(i), base.join(o))),
            _ => {
                return Err(input_failure(Error::Parse(format!(
                    "{}:{}: expected INPUT_DIR OUTPUT_DIR",
                    list.display(),
                    n + 1
                ))))
            }
        }
    }
    Ok(jobs)
}

fn run_batch(a: &RunArgs, cfg: &PipelineConfig, list: &Path) -> Result<(), Failure> {
    let jobs = parse_batch(list)?;
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some((input, out)) = jobs.get(k) else {
                    break;
                };
                let r = input_paths(a, Some(input)).and_then(|p| run_one(&p, cfg, out));
                match r {
                    Ok(()) => log::info!("{}: done", input.display()),
                    Err(f) => {
                        eprintln!("{}: {}", input.display(), f.message);
                        failures.lock().unwrap().push(f.code);
                    }
                }
            });
        }
    });
    let failures = failures.into_inner().unwrap();
    match failures.iter().max() {
        None => Ok(()),
        Some(&code) => Err(Failure {
            code,
            message: format!("{} of {} triplets failed", failures.len(), jobs.len()),
        }),
    }
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let spec = SceneSpec::load(&a.spec).map_err(input_failure)?;
    let internal = |e: Error| Failure {
        code: EXIT_INTERNAL,
        message: e.to_string(),
    };
    let scene = render_scene(&spec).map_err(internal)?;
    let noise = FlowNoise {
        sigma: a.noise_sigma,
        outlier_fraction: a.outlier_fraction,
        ..FlowNoise::default()
    };
    let inputs = SyntheticInputs::noisy(&scene, &noise, a.semantic_blur, spec.seed).map_err(input_failure)?;
    let dir = &a.out;
    let write = || -> mrflow_core::Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = &scene.frames;
        for (name, img) in [
            (names::PREV, &f.prev),
            (names::REF, &f.reference),
            (names::NEXT, &f.next),
        ] {
            write_pgm(dir.join(name), img, BitDepth::Sixteen)?;
        }
        for (name, flow) in [
            (names::FLOW_FWD, &inputs.fwd),
            (names::FLOW_BWD, &inputs.bwd),
            (names::FLOW_FWD_REV, &inputs.fwd_rev),
            (names::FLOW_BWD_REV, &inputs.bwd_rev),
            (names::GT_FLOW_FWD, &scene.gt.flow_fwd),
            (names::GT_FLOW_BWD, &scene.gt.flow_bwd),
        ] {
            write_flo(dir.join(name), flow)?;
        }
        let semantic = Image::from_vec(spec.width, spec.height, 1, inputs.semantic.data().to_vec())?;
        write_pgm(dir.join(names::SEMANTIC), &semantic, BitDepth::Sixteen)?;
        write_mask(dir.join(names::GT_RIGIDITY), &scene.gt.rigidity)?;
        write_mask(dir.join(names::GT_VISIBLE), &scene.gt.visible_fwd)?;
        write_scalar_map(dir.join(names::GT_STRUCTURE), &scene.gt.structure)?;
        std::fs::write(dir.join(names::SCENE), spec.to_toml()?)?;
        Ok(())
    };
    write().map_err(internal)
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let flow = read_flo(&a.flow).map_err(input_failure)?;
    let gt = read_flo(&a.gt).map_err(input_failure)?;
    let mask = |p: &Option<PathBuf>| p.as_ref().map(read_mask).transpose().map_err(input_failure);
    let (gt_r, est_r, valid) = (mask(&a.gt_rigidity)?, mask(&a.est_rigidity)?, mask(&a.valid)?);
    let m = compute_metrics(&flow, &gt, gt_r.as_ref(), est_r.as_ref(), valid.as_ref()).map_err(input_failure)?;
    println!("epe = {}", m.epe_mean);
    println!("bad = {}", m.pct_bad);
    println!("valid_pixels = {}", m.valid_pixels);
    for (key, v) in [
        ("epe_rigid", m.epe_rigid),
        ("epe_moving", m.epe_moving),
        ("rigidity_accuracy", m.rigidity_accuracy),
        ("rigidity_tpr_rigid", m.rigidity_tpr_rigid),
        ("rigidity_tpr_moving", m.rigidity_tpr_moving),
    ] {
        if let Some(v) = v {
            println!("{key} = {v}");
        }
    }
    Ok(())
}
