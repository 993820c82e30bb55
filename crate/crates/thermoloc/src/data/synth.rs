//! Synthetic desk-scale scene generation: a smooth seeded pose trajectory and
//! a deterministic pose-conditioned rendering, so regression experiments run
//! without any recorded data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preproc::ThermalFrame;
use crate::quat::{Pose, UnitQuaternion};

/// Fixed world landmarks rendered as bright blobs; their projected positions
/// tie image content to camera translation.
const LANDMARKS: [[f64; 3]; 4] = [
    [1.5, 0.8, 6.0],
    [-2.0, -0.5, 7.5],
    [0.3, -1.4, 5.0],
    [-0.8, 1.6, 8.5],
];

/// Pinhole focal length in pixels per unit image width.
const FOCAL_FRAC: f64 = 0.9;

#[derive(Debug, Clone, Copy)]
struct Sinusoid {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Sinusoid {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        Self {
            amplitude: rng.gen_range(0.3..1.0) * amplitude,
            omega: rng.gen_range(0.5..2.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
}

/// Smooth random trajectory: per-axis sinusoids for position (about +/- 2 m)
/// and for a small rotation vector mapped through the exponential.
struct Trajectory {
    pos: [Sinusoid; 3],
    rot: [Sinusoid; 3],
}

impl Trajectory {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            pos: std::array::from_fn(|_| Sinusoid::sample(rng, 2.0)),
            rot: std::array::from_fn(|_| Sinusoid::sample(rng, 0.25)),
        }
    }

    fn pose_at(&self, t: f64) -> Pose {
        let position = std::array::from_fn(|i| self.pos[i].at(t));
        let rotvec = std::array::from_fn(|i| self.rot[i].at(t));
        let orientation = UnitQuaternion::exp(rotvec);
        Pose::new(position, orientation).expect("sinusoid positions are finite")
    }
}

/// Renders one frame from a pose: sinusoidal gratings over rotated view rays
/// with translation-coupled phases, plus projected landmark blobs. Pure
/// fixed-order f64 arithmetic, so a given (pose, size) is bitwise stable.
fn render(pose: &Pose, width: usize, height: usize) -> ThermalFrame {
    let f = FOCAL_FRAC * width as f64;
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let cam_from_world = pose.orientation.conjugate();
    let l = pose.position;

    // Grating phases advance with position so translation alone changes the
    // image; directions rotate with orientation.
    let phase = [
        3.1 * l[0] + 1.3 * l[1],
        2.3 * l[1] - 0.7 * l[2],
        1.7 * l[2] + 2.9 * l[0],
    ];

    // Landmark projections.
    let mut blobs = Vec::new();
    for lm in LANDMARKS {
        let rel = [lm[0] - l[0], lm[1] - l[1], lm[2] - l[2]];
        let cam = cam_from_world.rotate(rel);
        if cam[2] > 0.5 {
            blobs.push((
                cx + f * cam[0] / cam[2],
                cy + f * cam[1] / cam[2],
                60.0 * 6.0 / cam[2],
            ));
        }
    }
    let blob_sigma = width as f64 / 14.0;

    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            // World direction of the view ray through this pixel.
            let ray = [
                (x as f64 - cx) / f,
                (y as f64 - cy) / f,
                1.0,
            ];
            let d = pose.orientation.rotate(ray);
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = [d[0] / n, d[1] / n, d[2] / n];

            let mut v = 110.0
                + 35.0 * (7.0 * d[0] + phase[0]).sin()
                + 30.0 * (9.0 * d[1] + phase[1]).sin()
                + 25.0 * (8.0 * d[2] + phase[2]).sin();
            for (bx, by, amp) in &blobs {
                let dx = x as f64 - bx;
                let dy = y as f64 - by;
                v += amp * (-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma)).exp();
            }
            values.push(v.clamp(0.0, 255.0));
        }
    }
    ThermalFrame::new(width, height, values).expect("rendered values are clamped and finite")
}

/// Generates `n_frames` pose-annotated frames along a smooth seeded
/// trajectory. Timestamps are `0.1 * (index + 1)` seconds. The same seed
/// always yields bitwise-identical output.
pub fn synth_scene_generate(
    seed: u64,
    n_frames: usize,
    image_size: (usize, usize),
) -> Result<Vec<(f64, Pose, ThermalFrame)>> {
    if n_frames == 0 {
        return Err(Error::InvalidInput("n_frames must be >= 1".into()));
    }
    let (width, height) = image_size;
    if width < 2 || height < 2 {
        return Err(Error::InvalidInput(format!(
            "image size {width}x{height} too small to render"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = Trajectory::sample(&mut rng);
    let mut out = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t = i as f64 / n_frames as f64 * std::f64::consts::TAU;
        let pose = traj.pose_at(t);
        let frame = render(&pose, width, height);
        out.push((0.1 * (i + 1) as f64, pose, frame));
    }
    Ok(out)
}
