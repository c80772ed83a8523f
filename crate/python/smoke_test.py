"""Smoke test for the mrflow extension module.

Build and install it first, for example:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/mrflow-*.whl

then run `python python/smoke_test.py`.
"""

import os
import sys
import tempfile

import numpy as np

import mrflow


def epe(a, b, mask=None):
    e = np.linalg.norm(a - b, axis=-1)
    return float(e[mask].mean() if mask is not None else e.mean())


def main():
    cfg = mrflow.Config("kitti", seed=1)
    assert cfg.params["lambda_2nd"] == 5e4
    assert all(cfg.switches.values())
    cfg.set("second_order", False)
    assert not cfg.switches["second_order"]
    cfg = mrflow.Config("kitti", seed=1)

    scene = mrflow.Scene.preset("compact", seed=2)
    prev, ref, nxt = scene.frames
    assert ref.shape == (64, 64) and scene.gt_flow_fwd.shape == (64, 64, 2)

    # ground-truth structure and motion reproduce the rigid visible flow
    rv = scene.gt_rigidity & scene.visible_fwd
    induced = mrflow.induced_flow(scene.gt_structure, scene.theta_plus)
    assert epe(induced, scene.gt_flow_fwd, rv) < 1e-4

    w = mrflow.parallax_magnitude(0.7, 0.05, 12.0)
    assert abs(mrflow.structure_from_parallax(w, 0.05, 12.0) - 0.7) < 1e-9

    inputs = scene.inputs(seed=2)
    out = mrflow.run_pipeline(**inputs, config=cfg)
    assert not out.fallback
    trace = out.energy_trace
    assert all(b <= a * (1 + 1e-6) for a, b in zip(trace, trace[1:]))

    before = epe(inputs["flow_fwd"], scene.gt_flow_fwd)
    after = epe(out.flow, scene.gt_flow_fwd)
    m = mrflow.compute_metrics(out.flow, scene.gt_flow_fwd, scene.gt_rigidity, out.rigidity)
    assert abs(m["epe"] - after) < 1e-9
    print(f"EPE {before:.3f} -> {after:.3f}, rigidity accuracy {m['rigidity_accuracy']:.3f}")
    assert after < before
    assert m["rigidity_accuracy"] > 0.9

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "f.flo")
        flow = out.flow.astype(np.float32).astype(np.float64)
        mrflow.write_flo(path, flow)
        assert np.array_equal(mrflow.read_flo(path), flow)
        out.write(d, visualize=True)
        assert {"flow.flo", "rigidity.pgm", "structure.rgd", "diagnostics.txt", "flow.ppm"} <= set(os.listdir(d))

    try:
        mrflow.run_pipeline(**dict(inputs, flow_bwd=np.zeros((10, 10, 2))), config=cfg)
    except ValueError as e:
        print(f"mismatched input rejected: {e}")
    else:
        raise AssertionError("mismatched input was accepted")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
