use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrflow_core::io::{read_flo, write_flo, write_pgm, BitDepth};
use mrflow_core::pipeline::Diagnostics;
use mrflow_core::synth::presets;
use mrflow_core::{FlowField, Image};

fn mrflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrflow")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn diagnostics(dir: &Path) -> Diagnostics {
    Diagnostics::parse(&std::fs::read_to_string(dir.join("diagnostics.txt")).unwrap())
}

/// Render the compact scene into `root/scene` and return that directory.
fn synth_compact(root: &Path) -> PathBuf {
    let spec = root.join("scene.toml");
    std::fs::write(&spec, presets::compact_scene(2).to_toml().unwrap()).unwrap();
    let out = root.join("scene");
    let o = mrflow(&["synth", "--spec", s(&spec), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn metric(stdout: &[u8], key: &str) -> f64 {
    String::from_utf8_lossy(stdout)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in output"))
}

#[test]
fn synth_run_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_compact(tmp.path());
    let out = tmp.path().join("out");
    let o = mrflow(&[
        "run",
        "--input-dir",
        s(&scene),
        "--out",
        s(&out),
        "--seed",
        "4",
        "--visualize",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "flow.flo",
        "rigidity.pgm",
        "structure.rgd",
        "diagnostics.txt",
        "flow.ppm",
        "flow_initial.ppm",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(diagnostics(&out).get("fallback"), Some("false"));

    let gt = scene.join("gt_flow_fwd.flo");
    let refined = mrflow(&[
        "eval",
        "--flow",
        s(&out.join("flow.flo")),
        "--gt",
        s(&gt),
        "--gt-rigidity",
        s(&scene.join("gt_rigidity.pgm")),
        "--est-rigidity",
        s(&out.join("rigidity.pgm")),
    ]);
    assert!(refined.status.success());
    let initial = mrflow(&["eval", "--flow", s(&scene.join("flow_fwd.flo")), "--gt", s(&gt)]);
    assert!(initial.status.success());
    assert!(metric(&refined.stdout, "epe") < metric(&initial.stdout, "epe"));
    assert!(metric(&refined.stdout, "rigidity_accuracy") > 0.9);
}

#[test]
fn eval_of_flow_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("f.flo");
    write_flo(&f, &FlowField::from_fn(8, 6, |x, y| [x as f64 * 0.5, -(y as f64)])).unwrap();
    let o = mrflow(&["eval", "--flow", s(&f), "--gt", s(&f)]);
    assert!(o.status.success());
    assert_eq!(metric(&o.stdout, "epe"), 0.0);
    assert_eq!(metric(&o.stdout, "valid_pixels"), 48.0);
}

#[test]
fn eval_of_known_perturbation() {
    let tmp = tempfile::tempdir().unwrap();
    let (gt, flow, valid) = (
        tmp.path().join("gt.flo"),
        tmp.path().join("f.flo"),
        tmp.path().join("v.pgm"),
    );
    let base = FlowField::from_fn(10, 10, |x, y| [x as f64, y as f64]);
    // (3, 4) offset on the left half, exact on the right
    write_flo(&gt, &base).unwrap();
    write_flo(
        &flow,
        &FlowField::from_fn(10, 10, |x, y| {
            [
                x as f64 + if x < 5 { 3.0 } else { 0.0 },
                y as f64 + if x < 5 { 4.0 } else { 0.0 },
            ]
        }),
    )
    .unwrap();
    let o = mrflow(&["eval", "--flow", s(&flow), "--gt", s(&gt)]);
    assert_eq!(metric(&o.stdout, "epe"), 2.5);
    write_pgm(
        &valid,
        &Image::from_fn(10, 10, |x, _| (x < 5) as u8 as f64),
        BitDepth::Eight,
    )
    .unwrap();
    let o = mrflow(&["eval", "--flow", s(&flow), "--gt", s(&gt), "--valid", s(&valid)]);
    assert_eq!(metric(&o.stdout, "epe"), 5.0);
    assert_eq!(metric(&o.stdout, "valid_pixels"), 50.0);
}

#[test]
fn degenerate_inputs_exit_zero_with_the_initial_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("in");
    std::fs::create_dir_all(&dir).unwrap();
    let (w, h) = (32, 32);
    let img = Image::from_fn(w, h, |x, y| {
        0.5 + 0.3 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos())
    });
    for f in ["prev.pgm", "ref.pgm", "next.pgm"] {
        write_pgm(dir.join(f), &img, BitDepth::Sixteen).unwrap();
    }
    let collapse = FlowField::from_fn(w, h, |x, y| [16.0 - x as f64, 16.0 - y as f64]);
    for f in ["flow_fwd.flo", "flow_bwd.flo", "flow_fwd_rev.flo", "flow_bwd_rev.flo"] {
        write_flo(dir.join(f), &collapse).unwrap();
    }
    write_pgm(
        dir.join("semantic.pgm"),
        &Image::from_fn(w, h, |_, _| 1.0),
        BitDepth::Eight,
    )
    .unwrap();

    let out = tmp.path().join("out");
    let o = mrflow(&["run", "--input-dir", s(&dir), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(diagnostics(&out).get("fallback"), Some("true"));
    assert_eq!(
        read_flo(out.join("flow.flo")).unwrap(),
        read_flo(dir.join("flow_fwd.flo")).unwrap()
    );
    for f in ["rigidity.pgm", "structure.rgd"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn input_errors_exit_two_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = mrflow(&["run", "--input-dir", s(&tmp.path().join("missing")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let d = diagnostics(&out);
    assert_eq!(d.get("status"), Some("error"));
    assert_eq!(d.get("stage"), Some("input"));
    assert!(d.get("error").unwrap().contains("ref.pgm"));

    // mismatched sizes
    let scene = synth_compact(tmp.path());
    let small = tmp.path().join("small.flo");
    write_flo(&small, &FlowField::zeros(16, 16)).unwrap();
    let out = tmp.path().join("out2");
    let o = mrflow(&[
        "run",
        "--input-dir",
        s(&scene),
        "--flow-bwd",
        s(&small),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(diagnostics(&out).get("status"), Some("error"));

    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "lambda_1st = lots\n").unwrap();
    let o = mrflow(&["run", "--input-dir", s(&scene), "--out", s(&out), "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let o = mrflow(&["synth", "--spec", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_compact(tmp.path());
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# overrides\nseed = 9\npreset = sintel\n").unwrap();
    let out = tmp.path().join("out");
    let o = mrflow(&[
        "run",
        "--input-dir",
        s(&scene),
        "--out",
        s(&out),
        "--seed",
        "3",
        "--preset",
        "kitti",
        "--no-opt",
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let d = diagnostics(&out);
    assert_eq!(d.get("seed"), Some("9"));
    assert_eq!(d.get("preset"), Some("sintel"));
    // flags the file leaves alone still apply
    assert_eq!(d.get("refinement.skipped"), Some("true"));
}

#[test]
fn batch_jobs_match_single_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_compact(tmp.path());
    let single = tmp.path().join("single");
    let o = mrflow(&["run", "--input-dir", s(&scene), "--out", s(&single), "--no-opt"]);
    assert!(o.status.success());

    std::fs::write(
        tmp.path().join("list.txt"),
        "scene a\n# skipped\nscene b\n\nmissing c\n",
    )
    .unwrap();
    let o = mrflow(&[
        "run",
        "--batch",
        s(&tmp.path().join("list.txt")),
        "--jobs",
        "2",
        "--no-opt",
    ]);
    assert_eq!(o.status.code(), Some(2), "the missing triplet is an input error");
    for d in ["a", "b"] {
        for f in ["flow.flo", "rigidity.pgm", "structure.rgd", "diagnostics.txt"] {
            let got = std::fs::read(tmp.path().join(d).join(f)).unwrap();
            assert!(got == std::fs::read(single.join(f)).unwrap(), "{d}/{f} differs");
        }
    }
    assert_eq!(diagnostics(&tmp.path().join("c")).get("status"), Some("error"));
}

#[test]
fn missing_output_is_an_input_error() {
    let o = mrflow(&["run", "--img-ref", "x.pgm"]);
    assert_eq!(o.status.code(), Some(2));
}
