use mrflow_core::pipeline::{run_pipeline, write_outputs, PipelineConfig, PipelineInputs, STAGES};
use mrflow_core::synth::{presets, render_scene, FlowNoise, SyntheticInputs};
use mrflow_core::{FlowField, Image, ScalarField};

fn compact_inputs(seed: u64) -> PipelineInputs {
    let scene = render_scene(&presets::compact_scene(seed)).unwrap();
    let derived = SyntheticInputs::noisy(&scene, &FlowNoise::default(), 3.0, seed).unwrap();
    PipelineInputs::from_synthetic(&scene, &derived)
}

/// Every pixel's flow points at the same target, so no homography fits.
fn collapsed_inputs() -> PipelineInputs {
    let (w, h) = (32, 32);
    let img = Image::from_fn(w, h, |x, y| {
        0.5 + 0.3 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos())
    });
    let collapse = FlowField::from_fn(w, h, |x, y| [16.0 - x as f64, 16.0 - y as f64]);
    PipelineInputs {
        prev: img.clone(),
        reference: img.clone(),
        next: img,
        flow_fwd: collapse.clone(),
        flow_bwd: collapse.clone(),
        flow_fwd_rev: collapse.clone(),
        flow_bwd_rev: collapse,
        semantic: ScalarField::constant(w, h, 1.0),
    }
}

#[test]
fn degenerate_correspondences_fall_back_to_initial_flow() {
    let inputs = collapsed_inputs();
    let out = run_pipeline(&inputs, &PipelineConfig::default()).unwrap();
    assert!(out.fallback);
    assert_eq!(out.diagnostics.get("fallback"), Some("true"));
    let same = out
        .flow
        .data()
        .iter()
        .zip(inputs.flow_fwd.data())
        .all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits());
    assert!(same);
    assert_eq!(out.rigidity.count(), 0);

    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &out, Some(&inputs.flow_fwd), true).unwrap();
    for f in [
        "flow.flo",
        "rigidity.pgm",
        "structure.rgd",
        "diagnostics.txt",
        "flow.ppm",
        "flow_initial.ppm",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn identical_runs_write_identical_files() {
    let inputs = compact_inputs(3);
    let cfg = PipelineConfig::default();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = run_pipeline(&inputs, &cfg).unwrap();
        assert!(!out.fallback);
        write_outputs(d.path(), &out, Some(&inputs.flow_fwd), true).unwrap();
    }
    for f in [
        "flow.flo",
        "rigidity.pgm",
        "structure.rgd",
        "diagnostics.txt",
        "flow.ppm",
    ] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn each_switch_first_changes_its_own_stage() {
    let inputs = compact_inputs(5);
    let full = run_pipeline(&inputs, &PipelineConfig::default()).unwrap();
    for (key, stage) in [
        ("occlusion_reasoning", "occlusion"),
        ("coplanarity_refinement", "coplanarity"),
        ("nonlinear_b_init", "b_minus"),
        ("spatial_priors", "refinement"),
        ("first_order", "refinement"),
        ("second_order", "refinement"),
        ("variational_opt", "refinement"),
    ] {
        let mut cfg = PipelineConfig::default();
        cfg.set(key, "false").unwrap();
        let run = run_pipeline(&inputs, &cfg).unwrap();
        let own = STAGES.iter().position(|s| *s == stage).unwrap();
        for s in &STAGES[..own] {
            assert_eq!(
                full.diagnostics.fingerprint(s),
                run.diagnostics.fingerprint(s),
                "{key} changed upstream stage {s}"
            );
        }
        assert_ne!(
            full.diagnostics.fingerprint(stage),
            run.diagnostics.fingerprint(stage),
            "{key} left {stage} unchanged"
        );
        if let Some(r) = &run.refinement {
            assert!(r.is_monotone(1e-6), "{key}");
        }
    }
}

#[test]
fn refinement_improves_the_compact_scene() {
    let scene = render_scene(&presets::compact_scene(2)).unwrap();
    let derived = SyntheticInputs::noisy(&scene, &FlowNoise::default(), 3.0, 2).unwrap();
    let inputs = PipelineInputs::from_synthetic(&scene, &derived);
    let out = run_pipeline(&inputs, &PipelineConfig::default()).unwrap();
    let before = mrflow_core::io::epe(&inputs.flow_fwd, &scene.gt.flow_fwd, None).unwrap();
    let after = mrflow_core::io::epe(&out.flow, &scene.gt.flow_fwd, None).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn mismatched_inputs_are_input_errors() {
    let mut inputs = collapsed_inputs();
    inputs.semantic = ScalarField::zeros(8, 8);
    let err = run_pipeline(&inputs, &PipelineConfig::default()).unwrap_err();
    assert!(err.is_input_error());
    assert_eq!(err.diagnostics().get("status"), Some("error"));
    let mut inputs = collapsed_inputs();
    inputs.flow_bwd.set(3, 3, [f64::NAN, 0.0]);
    assert!(run_pipeline(&inputs, &PipelineConfig::default())
        .unwrap_err()
        .is_input_error());
}
