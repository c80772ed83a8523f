//! End-to-end driver: alignment, rigidity, refinement and composition for
//! one frame triplet.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::alignment::{initialize, AlignmentConfig, BInitMode, FlowQuad, InitStructure};
use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, fill_from_nearest, BinaryMask, FlowField, Image, ScalarField};
use crate::geometry::{residual_flow, Homography, PppParams};
use crate::io::{flow_to_color, read_flo, read_pnm, write_flo, write_mask, write_ppm, write_scalar_map, BitDepth};
use crate::optim::LbfgsConfig;
use crate::refinement::{compose_flow, induced_flow, refine, EnergyConfig, RefinementInputs, RefinementResult};
use crate::rigidity::{
    direction_field, fuse_direction, load_semantic_rigidity, motion_rigidity, potts_weights, rigidity_unary,
    solve_rigidity_mrf, structure_consistency, SEMANTIC_THRESHOLD,
};
use crate::synth::{SyntheticInputs, SyntheticScene};

/// Smallest accepted frame side.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Sintel,
    Kitti,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sintel" => Ok(Preset::Sintel),
            "kitti" => Ok(Preset::Kitti),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Sintel => "sintel",
            Preset::Kitti => "kitti",
            Preset::Custom => "custom",
        })
    }
}

/// The seven model weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub sigma_d: f64,
    pub sigma_s: f64,
    pub lambda_rc: f64,
    pub lambda_rp: f64,
    pub lambda_c: f64,
    pub lambda_1st: f64,
    pub lambda_2nd: f64,
}

impl ModelParams {
    pub const SINTEL: Self = Self {
        sigma_d: 0.75,
        sigma_s: 2.5,
        lambda_rc: 0.1,
        lambda_rp: 1.1,
        lambda_c: 0.0,
        lambda_1st: 0.1,
        lambda_2nd: 5e3,
    };
    pub const KITTI: Self = Self {
        sigma_d: 1.0,
        sigma_s: 0.25,
        lambda_rc: 0.5,
        lambda_rp: 1.1,
        lambda_c: 0.01,
        lambda_1st: 1.0,
        lambda_2nd: 5e4,
    };

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Kitti => Self::KITTI,
            Preset::Sintel | Preset::Custom => Self::SINTEL,
        }
    }
}

/// Stage switches; all on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub occlusion_reasoning: bool,
    pub coplanarity_refinement: bool,
    pub nonlinear_b_init: bool,
    /// Both smoothness terms.
    pub spatial_priors: bool,
    pub first_order: bool,
    pub second_order: bool,
    pub variational_opt: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            occlusion_reasoning: true,
            coplanarity_refinement: true,
            nonlinear_b_init: true,
            spatial_priors: true,
            first_order: true,
            second_order: true,
            variational_opt: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub params: ModelParams,
    pub switches: Ablation,
    pub seed: u64,
    pub semantic_threshold: f64,
    pub assume_unknown_semantic: bool,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub theta_alternations: usize,
    /// Also write color-coded flow images.
    pub visualize: bool,
    /// Homographies used instead of the robust fit.
    pub initial_homographies: Option<(Homography, Homography)>,
}

/// Defaults to the KITTI weights. The Sintel weights lean almost entirely
/// on motion cues, which carry no evidence on the reference plane.
impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Kitti)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{v}'")))
}

impl PipelineConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let d = EnergyConfig::default();
        Self {
            preset,
            params: ModelParams::for_preset(preset),
            switches: Ablation::default(),
            seed: 0,
            semantic_threshold: SEMANTIC_THRESHOLD,
            assume_unknown_semantic: false,
            outer_iters: d.outer_iters,
            inner_iters: d.inner_iters,
            theta_alternations: d.theta_alternations,
            visualize: false,
            initial_homographies: None,
        }
    }

    /// Set one option by name. Setting `preset` resets the model weights;
    /// setting a weight marks the preset as custom.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let p = &mut self.params;
        let s = &mut self.switches;
        match key.as_str() {
            "preset" => {
                self.preset = value.parse()?;
                self.params = ModelParams::for_preset(self.preset);
                return Ok(());
            }
            "sigma_d" => p.sigma_d = parse_num(&key, value)?,
            "sigma_s" => p.sigma_s = parse_num(&key, value)?,
            "lambda_rc" => p.lambda_rc = parse_num(&key, value)?,
            "lambda_rp" => p.lambda_rp = parse_num(&key, value)?,
            "lambda_c" => p.lambda_c = parse_num(&key, value)?,
            "lambda_1st" => p.lambda_1st = parse_num(&key, value)?,
            "lambda_2nd" => p.lambda_2nd = parse_num(&key, value)?,
            "occlusion_reasoning" => s.occlusion_reasoning = parse_bool(&key, value)?,
            "coplanarity_refinement" | "coplanarity" => s.coplanarity_refinement = parse_bool(&key, value)?,
            "nonlinear_b_init" | "nonlinear_binit" => s.nonlinear_b_init = parse_bool(&key, value)?,
            "b_init" => {
                s.nonlinear_b_init = match value.trim() {
                    "robust" => true,
                    "median" => false,
                    v => {
                        return Err(Error::InvalidConfig(format!(
                            "b_init: expected robust or median, got '{v}'"
                        )))
                    }
                }
            }
            "spatial_priors" => s.spatial_priors = parse_bool(&key, value)?,
            "first_order" => s.first_order = parse_bool(&key, value)?,
            "second_order" => s.second_order = parse_bool(&key, value)?,
            "variational_opt" => s.variational_opt = parse_bool(&key, value)?,
            "seed" => self.seed = parse_num(&key, value)?,
            "semantic_threshold" => self.semantic_threshold = parse_num(&key, value)?,
            "assume_unknown_semantic" => self.assume_unknown_semantic = parse_bool(&key, value)?,
            "outer_iters" => self.outer_iters = parse_num(&key, value)?,
            "inner_iters" => self.inner_iters = parse_num(&key, value)?,
            "theta_alternations" => self.theta_alternations = parse_num(&key, value)?,
            "visualize" => self.visualize = parse_bool(&key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown option '{key}'"))),
        }
        if key.starts_with("sigma_") || key.starts_with("lambda_") {
            self.preset = Preset::Custom;
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        for (name, v) in [("sigma_d", p.sigma_d), ("sigma_s", p.sigma_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&p.lambda_rc) {
            return Err(Error::InvalidConfig(format!(
                "lambda_rc must lie in [0, 1], got {}",
                p.lambda_rc
            )));
        }
        for (name, v) in [
            ("lambda_rp", p.lambda_rp),
            ("lambda_c", p.lambda_c),
            ("lambda_1st", p.lambda_1st),
            ("lambda_2nd", p.lambda_2nd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.semantic_threshold) {
            return Err(Error::InvalidConfig("semantic_threshold must lie in [0, 1]".into()));
        }
        self.energy_config().validate()
    }

    pub fn alignment_config(&self) -> AlignmentConfig {
        AlignmentConfig {
            occlusion_reasoning: self.switches.occlusion_reasoning,
            coplanarity_refinement: self.switches.coplanarity_refinement,
            b_init: if self.switches.nonlinear_b_init {
                BInitMode::Robust
            } else {
                BInitMode::Median
            },
            initial_homographies: self.initial_homographies,
            ..AlignmentConfig::default()
        }
    }

    pub fn energy_config(&self) -> EnergyConfig {
        let s = &self.switches;
        EnergyConfig {
            lambda_c: self.params.lambda_c,
            lambda_1st: if s.spatial_priors && s.first_order {
                self.params.lambda_1st
            } else {
                0.0
            },
            lambda_2nd: if s.spatial_priors && s.second_order {
                self.params.lambda_2nd
            } else {
                0.0
            },
            outer_iters: self.outer_iters,
            inner_iters: self.inner_iters,
            theta_alternations: self.theta_alternations,
            ..EnergyConfig::default()
        }
    }
}

/// In-memory inputs for one triplet.
#[derive(Clone, Debug)]
pub struct PipelineInputs {
    pub prev: Image,
    pub reference: Image,
    pub next: Image,
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    pub flow_fwd_rev: FlowField,
    pub flow_bwd_rev: FlowField,
    /// Per-pixel probability of belonging to a rigid class.
    pub semantic: ScalarField,
}

impl PipelineInputs {
    /// Frames of a rendered scene with derived flows and semantic map.
    pub fn from_synthetic(scene: &SyntheticScene, derived: &SyntheticInputs) -> Self {
        let f = &scene.frames;
        Self {
            prev: f.prev.clone(),
            reference: f.reference.clone(),
            next: f.next.clone(),
            flow_fwd: derived.fwd.clone(),
            flow_bwd: derived.bwd.clone(),
            flow_fwd_rev: derived.fwd_rev.clone(),
            flow_bwd_rev: derived.bwd_rev.clone(),
            semantic: derived.semantic.clone(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.reference.dims()
    }

    pub fn flows(&self) -> FlowQuad<'_> {
        FlowQuad {
            fwd: &self.flow_fwd,
            bwd: &self.flow_bwd,
            fwd_rev: &self.flow_fwd_rev,
            bwd_rev: &self.flow_bwd_rev,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d.0 < MIN_SIDE || d.1 < MIN_SIDE {
            return Err(Error::InvalidConfig(format!(
                "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                d.0, d.1
            )));
        }
        for img in [&self.prev, &self.next] {
            ensure_same_dims(d, img.dims())?;
            if img.channels() != self.reference.channels() {
                return Err(Error::InvalidConfig("frames differ in channel count".into()));
            }
        }
        for f in [&self.flow_fwd, &self.flow_bwd, &self.flow_fwd_rev, &self.flow_bwd_rev] {
            ensure_same_dims(d, f.dims())?;
            if f.data().iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        ensure_same_dims(d, self.semantic.dims())?;
        if self.semantic.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }
}

/// Input file locations for [`load_inputs`].
#[derive(Clone, Debug, Default)]
pub struct InputPaths {
    pub img_prev: PathBuf,
    pub img_ref: PathBuf,
    pub img_next: PathBuf,
    pub flow_fwd: PathBuf,
    pub flow_bwd: PathBuf,
    pub flow_fwd_rev: PathBuf,
    pub flow_bwd_rev: PathBuf,
    pub semantic: Option<PathBuf>,
}

pub fn load_inputs(paths: &InputPaths, assume_unknown_semantic: bool) -> Result<PipelineInputs> {
    let reference = read_pnm(&paths.img_ref)?;
    let semantic = load_semantic_rigidity(paths.semantic.as_deref(), reference.dims(), assume_unknown_semantic)?;
    Ok(PipelineInputs {
        prev: read_pnm(&paths.img_prev)?,
        next: read_pnm(&paths.img_next)?,
        reference,
        flow_fwd: read_flo(&paths.flow_fwd)?,
        flow_bwd: read_flo(&paths.flow_bwd)?,
        flow_fwd_rev: read_flo(&paths.flow_fwd_rev)?,
        flow_bwd_rev: read_flo(&paths.flow_bwd_rev)?,
        semantic,
    })
}

/// 64-bit FNV-1a over the bit patterns of the fed values.
#[derive(Clone, Copy, Debug)]
pub struct Fingerprint(u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fingerprint {
    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
        self
    }

    pub fn f64s(self, v: &[f64]) -> Self {
        v.iter().fold(self, |h, x| h.bytes(&x.to_bits().to_le_bytes()))
    }

    pub fn mask(self, m: &BinaryMask) -> Self {
        m.data().iter().fold(self, |h, &b| h.bytes(&[b as u8]))
    }

    pub fn scalar(self, f: &ScalarField) -> Self {
        self.f64s(f.data())
    }

    pub fn flow(self, f: &FlowField) -> Self {
        f.data().iter().fold(self, |h, v| h.f64s(v))
    }

    pub fn params(self, t: &PppParams) -> Self {
        self.f64s(t.h.matrix().as_slice()).f64s(&[t.b, t.e.x, t.e.y])
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

/// Pipeline stages in execution order, as named in the diagnostics.
pub const STAGES: [&str; 10] = [
    "semantic",
    "ransac",
    "occlusion",
    "coplanarity",
    "b_plus",
    "b_minus",
    "structure",
    "rigidity",
    "refinement",
    "flow",
];

/// Ordered `key=value` records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    entries: Vec<(String, String)>,
}

impl Diagnostics {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn fingerprint(&self, stage: &str) -> Option<&str> {
        self.get(&format!("fingerprint.{stage}"))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { entries }
    }

    fn params(&mut self, prefix: &str, t: &PppParams) {
        let m = t.h.matrix();
        let h: Vec<String> = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:e}", m[(r, c)]))
            .collect();
        self.push(format!("{prefix}.h"), h.join(","));
        self.push(format!("{prefix}.b"), format!("{:e}", t.b));
        self.push(format!("{prefix}.e"), format!("{:e},{:e}", t.e.x, t.e.y));
    }

    fn stage(&mut self, stage: &str, fp: Fingerprint) {
        self.push(format!("fingerprint.{stage}"), format!("{:016x}", fp.value()));
    }
}

/// A stage error, tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

impl PipelineError {
    /// Invalid or inconsistent input, as opposed to an internal failure.
    pub fn is_input_error(&self) -> bool {
        self.stage == "input"
            || matches!(
                self.source,
                Error::DimensionMismatch { .. }
                    | Error::Parse(_)
                    | Error::BadMagic
                    | Error::TruncatedFile
                    | Error::UnsupportedMaxval(_)
                    | Error::InvalidConfig(_)
                    | Error::InvalidSpec(_)
                    | Error::Io(_)
            )
    }

    /// Diagnostics describing the failure.
    pub fn diagnostics(&self) -> Diagnostics {
        let mut d = Diagnostics::default();
        d.push("status", "error");
        d.push("stage", self.stage);
        d.push("error", self.source.to_string().replace('\n', " "));
        d
    }
}

fn at(stage: &'static str) -> impl FnOnce(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

/// Intermediate rigidity maps.
#[derive(Clone, Debug)]
pub struct RigidityMaps {
    pub direction: ScalarField,
    pub structure: ScalarField,
    pub motion: ScalarField,
    pub probability: ScalarField,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub flow: FlowField,
    /// Pixels explained by the rigid model.
    pub rigidity: BinaryMask,
    pub structure: ScalarField,
    pub fallback: bool,
    pub theta_plus: Option<PppParams>,
    pub theta_minus: Option<PppParams>,
    pub init: Option<InitStructure>,
    pub maps: Option<RigidityMaps>,
    pub refinement: Option<RefinementResult>,
    pub diagnostics: Diagnostics,
}

fn fallback_output(inputs: &PipelineInputs, mut diag: Diagnostics) -> PipelineOutput {
    let (w, h) = inputs.dims();
    diag.push("fallback", true);
    PipelineOutput {
        flow: inputs.flow_fwd.clone(),
        rigidity: BinaryMask::filled(w, h, false),
        structure: ScalarField::zeros(w, h),
        fallback: true,
        theta_plus: None,
        theta_minus: None,
        init: None,
        maps: None,
        refinement: None,
        diagnostics: diag,
    }
}

/// Run the full pipeline on one triplet. An alignment that cannot be
/// trusted gives the fallback output (the initial forward flow) rather
/// than an error.
pub fn run_pipeline(
    inputs: &PipelineInputs,
    cfg: &PipelineConfig,
) -> std::result::Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(at("input"))?;
    inputs.validate().map_err(at("input"))?;
    let (w, h) = inputs.dims();
    let mut diag = Diagnostics::default();
    diag.push("status", "ok");
    diag.push("width", w);
    diag.push("height", h);
    diag.push("preset", cfg.preset);
    diag.push("seed", cfg.seed);

    let hint = BinaryMask::threshold(&inputs.semantic, cfg.semantic_threshold);
    diag.push("semantic.hinted", hint.count());
    diag.stage("semantic", Fingerprint::default().mask(&hint));

    let clock = std::time::Instant::now();
    let init = initialize(inputs.flows(), &hint, cfg.seed, &cfg.alignment_config()).map_err(at("alignment"))?;
    log::info!("alignment took {:?}", clock.elapsed());
    let ad = &init.alignment.diagnostics;
    diag.push("alignment.correspondences", ad.correspondences);
    diag.push("alignment.inlier_ratio", format!("{:.6}", ad.inlier_ratio));
    diag.push("alignment.ransac_iterations", ad.ransac_iterations);
    diag.stage("ransac", Fingerprint::default().mask(&init.alignment.inlier_mask));
    if let Some(f) = &ad.failure {
        diag.push("alignment.failure", f.replace('\n', " "));
    }
    let structure = match (&init.structure, init.alignment.valid) {
        (Some(s), true) => s.clone(),
        _ => return Ok(fallback_output(inputs, diag)),
    };
    let (theta_plus, theta_minus) = (init.alignment.theta_plus, init.alignment.theta_minus);
    diag.push("fallback", false);
    diag.push("occlusion.hidden_plus", structure.v_plus.not().count());
    diag.push("occlusion.hidden_minus", structure.v_minus.not().count());
    diag.stage(
        "occlusion",
        Fingerprint::default().mask(&structure.v_plus).mask(&structure.v_minus),
    );
    if let (Some(b), Some(a)) = (ad.objective_before, ad.objective_after) {
        diag.push("coplanarity.objective_before", format!("{b:e}"));
        diag.push("coplanarity.objective_after", format!("{a:e}"));
        diag.push("coplanarity.diverged", ad.coplanar_diverged);
    }
    diag.params("init.plus", &theta_plus);
    diag.params("init.minus", &theta_minus);
    diag.stage(
        "coplanarity",
        Fingerprint::default()
            .f64s(theta_plus.h.matrix().as_slice())
            .f64s(theta_minus.h.matrix().as_slice())
            .f64s(&[theta_plus.e.x, theta_plus.e.y, theta_minus.e.x, theta_minus.e.y]),
    );
    diag.push("b_plus.degenerate", ad.b_plus_degenerate);
    diag.stage(
        "b_plus",
        Fingerprint::default().f64s(&[theta_plus.b]).scalar(&structure.a_plus),
    );
    diag.push("b_minus.fallback", ad.b_minus_fallback);
    diag.stage(
        "b_minus",
        Fingerprint::default().f64s(&[theta_minus.b]).scalar(&structure.a_minus),
    );

    let vis_plus = structure.v_plus.and(&structure.a_plus_ok);
    let vis_minus = structure.v_minus.and(&structure.a_minus_ok);
    let mut a_init = structure.a_fused.clone();
    let seen: Vec<bool> = vis_plus
        .data()
        .iter()
        .zip(vis_minus.data())
        .map(|(&p, &m)| p || m)
        .collect();
    fill_from_nearest(a_init.data_mut(), &seen, w);
    diag.push("structure.singular", structure.singular.count());
    diag.stage("structure", Fingerprint::default().scalar(&a_init));

    // rigidity
    let p = &cfg.params;
    let rig = (|| -> Result<(BinaryMask, RigidityMaps, crate::rigidity::PottsWeights)> {
        let (ur_plus, ok_plus) = residual_flow(&theta_plus.h, &inputs.flow_fwd);
        let (ur_minus, ok_minus) = residual_flow(&theta_minus.h, &inputs.flow_bwd);
        let vp = structure.v_plus.and(&ok_plus);
        let vm = structure.v_minus.and(&ok_minus);
        let d_plus = direction_field(&ur_plus, &vp, theta_plus.e, p.sigma_d)?;
        let d_minus = direction_field(&ur_minus, &vm, theta_minus.e, p.sigma_d)?;
        let direction = fuse_direction(&d_plus, &d_minus, &vp, &vm)?;
        let p_struct = structure_consistency(&structure.a_plus, &structure.a_minus, &vis_plus, &vis_minus, p.sigma_s)?;
        let motion = motion_rigidity(&direction, &p_struct, &vp, &vm)?;
        let (probability, unary) = rigidity_unary(&inputs.semantic, &motion, p.lambda_rc)?;
        let weights = potts_weights(&inputs.reference);
        let labels = solve_rigidity_mrf(&unary, &weights, p.lambda_rp)?;
        Ok((
            labels,
            RigidityMaps {
                direction,
                structure: p_struct,
                motion,
                probability,
            },
            weights,
        ))
    })();
    let (rigid, maps, weights) = rig.map_err(at("rigidity"))?;
    log::info!("rigidity done at {:?}", clock.elapsed());
    diag.push("rigidity.rigid_pixels", rigid.count());
    diag.stage("rigidity", Fingerprint::default().mask(&rigid));

    let mut refinement = None;
    let (a_final, tp, tm) = if cfg.switches.variational_opt {
        let rin = RefinementInputs::new(
            [&inputs.prev, &inputs.reference, &inputs.next],
            &inputs.flow_fwd,
            &inputs.flow_bwd,
            &structure.v_plus,
            &structure.v_minus,
            &weights,
        )
        .and_then(|r| {
            r.with_consistency(
                &structure.a_plus,
                &structure.a_plus_ok,
                &structure.a_minus,
                &structure.a_minus_ok,
            )
        })
        .map_err(at("refinement"))?;
        let res = refine(
            &a_init,
            &theta_plus,
            &theta_minus,
            &rin,
            &rigid,
            &cfg.energy_config(),
            &LbfgsConfig::default(),
        )
        .map_err(at("refinement"))?;
        for (i, t) in res.trace.iter().enumerate() {
            let e = &t.energy;
            diag.push(
                format!("energy.{i}"),
                format!(
                    "{} total={:e} data={:e} consistency={:e} first={:e} second={:e} singular={}",
                    t.stage, e.total, e.data, e.consistency, e.first_order, e.second_order, e.singular
                ),
            );
        }
        diag.push("refinement.monotone", res.is_monotone(1e-6));
        diag.push("refinement.solve_failures", res.solve_failures);
        diag.push("refinement.rejected_steps", res.rejected_steps);
        let out = (res.a.clone(), res.theta_plus, res.theta_minus);
        refinement = Some(res);
        out
    } else {
        diag.push("refinement.skipped", true);
        (a_init.clone(), theta_plus, theta_minus)
    };
    log::info!("refinement done at {:?}", clock.elapsed());
    diag.params("final.plus", &tp);
    diag.params("final.minus", &tm);
    diag.stage(
        "refinement",
        Fingerprint::default().scalar(&a_final).params(&tp).params(&tm),
    );

    let u_s = induced_flow(&a_final, &tp).map_err(at("composition"))?;
    let flow = compose_flow(&u_s, &inputs.flow_fwd, &rigid).map_err(at("composition"))?;
    diag.stage("flow", Fingerprint::default().flow(&flow));

    Ok(PipelineOutput {
        flow,
        rigidity: rigid,
        structure: a_final,
        fallback: false,
        theta_plus: Some(tp),
        theta_minus: Some(tm),
        init: Some(structure),
        maps: Some(maps),
        refinement,
        diagnostics: diag,
    })
}

/// Output file names inside the output directory.
pub const FLOW_FILE: &str = "flow.flo";
pub const RIGIDITY_FILE: &str = "rigidity.pgm";
pub const STRUCTURE_FILE: &str = "structure.rgd";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const FLOW_COLOR_FILE: &str = "flow.ppm";
pub const INITIAL_COLOR_FILE: &str = "flow_initial.ppm";

/// Write the flow, rigidity, structure and diagnostics, and with
/// `visualize` color renderings of the final and initial flows.
pub fn write_outputs(dir: &Path, out: &PipelineOutput, initial: Option<&FlowField>, visualize: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_flo(dir.join(FLOW_FILE), &out.flow)?;
    write_mask(dir.join(RIGIDITY_FILE), &out.rigidity)?;
    write_scalar_map(dir.join(STRUCTURE_FILE), &out.structure)?;
    std::fs::write(dir.join(DIAGNOSTICS_FILE), out.diagnostics.to_text())?;
    if visualize {
        write_ppm(
            dir.join(FLOW_COLOR_FILE),
            &flow_to_color(&out.flow, None),
            BitDepth::Eight,
        )?;
        if let Some(u0) = initial {
            write_ppm(dir.join(INITIAL_COLOR_FILE), &flow_to_color(u0, None), BitDepth::Eight)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_hold_their_values() {
        let s = PipelineConfig::for_preset(Preset::Sintel).params;
        assert_eq!(
            [
                s.sigma_d,
                s.sigma_s,
                s.lambda_rc,
                s.lambda_rp,
                s.lambda_c,
                s.lambda_1st,
                s.lambda_2nd
            ],
            [0.75, 2.5, 0.1, 1.1, 0.0, 0.1, 5e3]
        );
        let k = PipelineConfig::for_preset(Preset::Kitti).params;
        assert_eq!(
            [
                k.sigma_d,
                k.sigma_s,
                k.lambda_rc,
                k.lambda_rp,
                k.lambda_c,
                k.lambda_1st,
                k.lambda_2nd
            ],
            [1.0, 0.25, 0.5, 1.1, 0.01, 1.0, 5e4]
        );
        assert_eq!(Ablation::default(), {
            let d = Ablation::default();
            assert!(d.occlusion_reasoning && d.coplanarity_refinement && d.nonlinear_b_init);
            assert!(d.spatial_priors && d.first_order && d.second_order && d.variational_opt);
            d
        });
    }

    #[test]
    fn key_value_text() {
        let mut c = PipelineConfig::default();
        c.apply_text("preset = kitti\n# comment\nseed=7\nb_init=median\nno_such=1\n")
            .unwrap_err();
        let mut c2 = PipelineConfig::default();
        c2.apply_text("preset = kitti\nseed=7 # trailing\nb-init=median\nsecond_order=off\n")
            .unwrap();
        assert_eq!(c2.preset, Preset::Kitti);
        assert_eq!(c2.seed, 7);
        assert!(!c2.switches.nonlinear_b_init);
        assert_eq!(c2.energy_config().lambda_2nd, 0.0);
        assert_eq!(c2.energy_config().lambda_1st, 1.0);
        c2.set("lambda_1st", "0.5").unwrap();
        assert_eq!(c2.preset, Preset::Custom);
        assert!(c2.set("sigma_d", "abc").is_err());
        assert!(c2.apply_text("seed 3").is_err());
        c.set("sigma_d", "-1").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn spatial_priors_disable_both_terms() {
        let mut c = PipelineConfig::default();
        c.switches.spatial_priors = false;
        let e = c.energy_config();
        assert_eq!((e.lambda_1st, e.lambda_2nd), (0.0, 0.0));
    }

    #[test]
    fn diagnostics_round_trip() {
        let mut d = Diagnostics::default();
        d.push("a", 1);
        d.push("b.c", "x=y");
        let p = Diagnostics::parse(&d.to_text());
        assert_eq!(p.get("a"), Some("1"));
        assert_eq!(p.get("b.c"), Some("x=y"));
    }

    #[test]
    fn fingerprint_is_order_sensitive() {
        let a = Fingerprint::default().f64s(&[1.0, 2.0]).value();
        let b = Fingerprint::default().f64s(&[2.0, 1.0]).value();
        assert_ne!(a, b);
        assert_eq!(a, Fingerprint::default().f64s(&[1.0, 2.0]).value());
    }
}
