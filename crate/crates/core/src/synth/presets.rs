//! Ready-made scenes used by the tests and the `synth` command.

use super::scene::{MotionSpec, PatchSpec, PlaneSpec, SceneSpec};

const FULL: [f64; 4] = [-1e4, -1e4, 1e4, 1e4];

fn patch(normal: [f64; 3], distance: f64, rect: [f64; 4], intensity: f64) -> PatchSpec {
    PatchSpec {
        plane: PlaneSpec { normal, distance },
        rect,
        intensity,
        contrast: 0.35,
        motion: [0.0; 3],
    }
}

fn camera(translation: [f64; 3], rotation: [f64; 3]) -> MotionSpec {
    MotionSpec { translation, rotation }
}

/// 128x128 scene: a slanted background, two nearer rigid planes and one
/// independently moving patch, seen by a camera moving forward and sideways.
pub fn three_plane_scene(seed: u64) -> SceneSpec {
    let background = [0.0, -0.1, 1.0];
    let mut mover = patch([0.0, 0.0, 1.0], 12.0, [17.5, 83.5, 48.5, 114.5], 0.45);
    mover.motion = [0.6, -0.3, 0.0];
    SceneSpec {
        width: 128,
        height: 128,
        seed,
        focal: 120.0,
        principal_point: None,
        plane: PlaneSpec {
            normal: background,
            distance: 40.0,
        },
        next: camera([-0.8, -0.2, -0.8], [0.0, 0.004, 0.002]),
        prev: camera([0.8, 0.2, 0.8], [0.0, -0.004, -0.002]),
        patches: vec![
            patch(background, 40.0, FULL, 0.5),
            patch([0.3, 0.0, 1.0], 10.0, [-0.5, -0.5, 56.5, 70.5], 0.55),
            patch([0.0, 0.2, 1.0], 8.0, [69.5, 59.5, 118.5, 112.5], 0.5),
            mover,
        ],
    }
}

/// Half-size version of [`three_plane_scene`] for quick runs.
pub fn compact_scene(seed: u64) -> SceneSpec {
    let mut s = three_plane_scene(seed);
    s.width = 64;
    s.height = 64;
    s.focal = 60.0;
    for p in s.patches.iter_mut().skip(1) {
        p.rect = p.rect.map(|v| (v + 0.5) / 2.0 - 0.5);
    }
    s
}

/// Strong lateral motion past a near occluder so that a large share of
/// the background is disoccluded between frames.
pub fn occlusion_scene(seed: u64) -> SceneSpec {
    let background = [0.0, 0.0, 1.0];
    SceneSpec {
        width: 128,
        height: 128,
        seed,
        focal: 120.0,
        principal_point: None,
        plane: PlaneSpec {
            normal: background,
            distance: 30.0,
        },
        next: camera([-0.8, 0.0, -0.4], [0.0; 3]),
        prev: camera([0.8, 0.0, 0.4], [0.0; 3]),
        patches: vec![
            patch(background, 30.0, FULL, 0.5),
            patch([0.0, 0.0, 1.0], 6.0, [19.5, 9.5, 50.5, 118.5], 0.6),
            patch([0.0, 0.0, 1.0], 6.0, [77.5, 9.5, 108.5, 118.5], 0.4),
        ],
    }
}

/// A small plane in front of a large slanted one; the small plane is too
/// small to be the reference plane a robust fit should prefer.
pub fn two_plane_scene(seed: u64) -> SceneSpec {
    let background = [0.2, -0.1, 1.0];
    SceneSpec {
        width: 128,
        height: 128,
        seed,
        focal: 120.0,
        principal_point: None,
        plane: PlaneSpec {
            normal: background,
            distance: 18.0,
        },
        next: camera([-0.3, -0.1, -0.5], [0.0, 0.003, 0.0]),
        prev: camera([0.3, 0.1, 0.5], [0.0, -0.003, 0.0]),
        patches: vec![
            patch(background, 18.0, FULL, 0.5),
            patch([0.0, 0.0, 1.0], 9.0, [39.5, 39.5, 88.5, 88.5], 0.55),
        ],
    }
}
