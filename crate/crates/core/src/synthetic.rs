//! Seeded synthetic scenes for tests, examples and sweeps.

use crate::gaussian::{GaussianModel, SH_COEFFS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_vector(rng: &mut impl Rng) -> [f32; 3] {
    loop {
        let v: [f32; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

/// A smooth scalar field on the sphere: `amp * sin(omega . n + phase)`.
#[derive(Debug, Clone, Copy)]
struct Wave {
    omega: [f32; 3],
    phase: f32,
    amp: f32,
}

impl Wave {
    fn random(rng: &mut impl Rng, amp: f32) -> Self {
        let dir = unit_vector(rng);
        let freq = rng.random_range(1.0..2.5);
        Self {
            omega: dir.map(|d| d * freq),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            amp,
        }
    }

    fn eval(&self, n: [f32; 3]) -> f32 {
        let t = self.omega[0] * n[0] + self.omega[1] * n[1] + self.omega[2] * n[2] + self.phase;
        self.amp * t.sin()
    }
}

struct Fields {
    sh: Vec<(Wave, [f32; 3], [Wave; 3])>,
    opacity: Wave,
    scale: [Wave; 3],
}

impl Fields {
    fn random(rng: &mut impl Rng) -> Self {
        // Each coefficient is a shared luminance wave tinted per channel plus a
        // weaker per-channel chroma wave.
        let sh_waves: Vec<(Wave, [f32; 3], [Wave; 3])> = (0..SH_COEFFS)
            .map(|k| {
                let amp = if k == 0 { 1.0 } else { 0.3 / (k as f32).sqrt() };
                let luma = Wave::random(rng, amp);
                let tint = [
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                ];
                let chroma = [
                    Wave::random(rng, 0.15 * amp),
                    Wave::random(rng, 0.15 * amp),
                    Wave::random(rng, 0.15 * amp),
                ];
                (luma, tint, chroma)
            })
            .collect();
        let opacity = Wave::random(rng, 2.0);
        let scale = [
            Wave::random(rng, 0.5),
            Wave::random(rng, 0.5),
            Wave::random(rng, 0.5),
        ];
        Self {
            sh: sh_waves,
            opacity,
            scale,
        }
    }

    fn push(&self, m: &mut GaussianModel, pos: [f32; 3], dir: [f32; 3]) {
        m.positions.push(pos);
        m.scales.push(self.scale.map(|w| -4.0 + w.eval(dir)));
        let q = [1.0, 0.4 * dir[0], 0.4 * dir[1], 0.4 * dir[2]];
        let qn = (q.iter().map(|v| v * v).sum::<f32>()).sqrt();
        m.rotations.push(q.map(|v| v / qn));
        let mut sh = [[0.0f32; 3]; SH_COEFFS];
        for (k, (luma, tint, chroma)) in self.sh.iter().enumerate() {
            let l = luma.eval(dir);
            for c in 0..3 {
                sh[k][c] = tint[c] * l + chroma[c].eval(dir);
            }
        }
        m.sh.push(sh);
        m.opacities.push(1.0 + self.opacity.eval(dir));
    }
}

/// `n` Gaussians scattered on a unit sphere with smooth SH colour, opacity,
/// scale and rotation fields. Several may share a voxel.
pub fn toy_sphere(n: usize, seed: u64) -> GaussianModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields = Fields::random(&mut rng);
    let mut m = GaussianModel::default();
    for _ in 0..n {
        let dir = unit_vector(&mut rng);
        let r = 1.0 + rng.random_range(-0.005..0.005);
        fields.push(&mut m, dir.map(|d| d * r), dir);
    }
    m
}

/// One Gaussian per voxel of a one-voxel-thick spherical shell at `depth`,
/// cut to the cap `z >= -0.35` (about 2000 voxels at depth 5). Positions are
/// lattice points spanning the full grid along x, so voxelizing at `depth`
/// puts every Gaussian in its own voxel.
pub fn voxel_sphere(depth: u32, seed: u64) -> GaussianModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields = Fields::random(&mut rng);
    let n = (1u32 << depth) as f32;
    let c = (n - 1.0) / 2.0;
    let mut m = GaussianModel::default();
    for x in 0..n as u32 {
        for y in 0..n as u32 {
            for z in 0..n as u32 {
                let p = [x as f32 - c, y as f32 - c, z as f32 - c];
                let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if (d - c).abs() > 0.5 || p[2] / c < -0.35 {
                    continue;
                }
                let dir = p.map(|v| v / d);
                fields.push(&mut m, p.map(|v| v / c), dir);
            }
        }
    }
    m
}

/// Same geometry, SH and opacity replaced by i.i.d. uniform noise over the
/// per-channel ranges of `model`.
pub fn with_noise_attributes(model: &GaussianModel, seed: u64) -> GaussianModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    let mut lo = [[f32::INFINITY; 3]; SH_COEFFS];
    let mut hi = [[f32::NEG_INFINITY; 3]; SH_COEFFS];
    for row in &model.sh {
        for k in 0..SH_COEFFS {
            for c in 0..3 {
                lo[k][c] = lo[k][c].min(row[k][c]);
                hi[k][c] = hi[k][c].max(row[k][c]);
            }
        }
    }
    let (olo, ohi) = model
        .opacities
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let draw =
        |rng: &mut ChaCha8Rng, a: f32, b: f32| if b > a { rng.random_range(a..b) } else { a };
    for row in &mut out.sh {
        for k in 0..SH_COEFFS {
            for c in 0..3 {
                row[k][c] = draw(&mut rng, lo[k][c], hi[k][c]);
            }
        }
    }
    for o in &mut out.opacities {
        *o = draw(&mut rng, olo, ohi);
    }
    out
}
