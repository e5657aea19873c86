//! Procedural textures evaluated in object space.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Flat,
    Checker,
    Noise,
    Stripes,
}

/// `params` by kind:
/// - flat: none
/// - checker: `[cell_size, r, g, b]`
/// - noise: `[frequency, amplitude, seed]`
/// - stripes: `[period, r, g, b, axis]`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    pub base_color: [f64; 3],
    pub params: Vec<f64>,
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

impl Texture {
    pub fn flat(base_color: [f64; 3]) -> Self {
        Self {
            kind: TextureKind::Flat,
            base_color,
            params: Vec::new(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let base_color = color(rng);
        let (kind, params) = match rng.random_range(0..4u8) {
            0 => (TextureKind::Flat, Vec::new()),
            1 => {
                let [r, g, b] = color(rng);
                (
                    TextureKind::Checker,
                    vec![rng.random_range(0.01..0.05), r, g, b],
                )
            }
            2 => (
                TextureKind::Noise,
                vec![
                    rng.random_range(10.0..60.0),
                    rng.random_range(0.2..0.6),
                    rng.random_range(0..1u32 << 24) as f64,
                ],
            ),
            _ => {
                let [r, g, b] = color(rng);
                let axis = rng.random_range(0..3u8) as f64;
                (
                    TextureKind::Stripes,
                    vec![rng.random_range(0.01..0.05), r, g, b, axis],
                )
            }
        };
        Self {
            kind,
            base_color,
            params,
        }
    }

    fn param(&self, i: usize) -> f64 {
        self.params.get(i).copied().unwrap_or(0.0)
    }

    fn second_color(&self) -> [f64; 3] {
        [self.param(1), self.param(2), self.param(3)]
    }

    /// Albedo at object-space point `p`.
    pub fn albedo(&self, p: [f64; 3]) -> [f64; 3] {
        match self.kind {
            TextureKind::Flat => self.base_color,
            TextureKind::Checker => {
                let c = self.param(0).max(1e-6);
                let parity: i64 = p.iter().map(|v| (v / c).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    self.base_color
                } else {
                    self.second_color()
                }
            }
            TextureKind::Stripes => {
                let period = self.param(0).max(1e-6);
                let axis = (self.param(4) as usize).min(2);
                if ((p[axis] / period).floor() as i64).rem_euclid(2) == 0 {
                    self.base_color
                } else {
                    self.second_color()
                }
            }
            TextureKind::Noise => {
                let freq = self.param(0);
                let amp = self.param(1).clamp(0.0, 1.0);
                let n = value_noise(
                    [p[0] * freq, p[1] * freq, p[2] * freq],
                    self.param(2) as u64,
                );
                let k = 1.0 - amp + amp * n;
                self.base_color.map(|c| c * k)
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64 ^ splitmix(iz as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in `[0, 1)` with smoothstep weights.
fn value_noise(p: [f64; 3], seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = [0, 1, 2].map(|i| {
        let u = p[i] - f[i];
        u * u * (3.0 - 2.0 * u)
    });
    let i = f.map(|v| v as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [dx, dy, dz]
            .iter()
            .zip(t)
            .map(|(&d, t)| if d == 1 { t } else { 1.0 - t })
            .product::<f64>();
        acc += w * lattice(i[0] + dx as i64, i[1] + dy as i64, i[2] + dz as i64, seed);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn albedo_stays_in_unit_cube() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = Texture::sample(&mut rng);
            for k in 0..50 {
                let p = [k as f64 * 0.013 - 0.3, k as f64 * -0.007, k as f64 * 0.021];
                let a = t.albedo(p);
                assert!(a.iter().all(|v| (0.0..=1.0).contains(v)), "{t:?} {a:?}");
            }
        }
    }

    #[test]
    fn checker_alternates() {
        let t = Texture {
            kind: TextureKind::Checker,
            base_color: [1.0, 1.0, 1.0],
            params: vec![0.1, 0.0, 0.0, 0.0],
        };
        assert_eq!(t.albedo([0.05, 0.05, 0.05]), [1.0; 3]);
        assert_eq!(t.albedo([0.15, 0.05, 0.05]), [0.0; 3]);
        assert_eq!(t.albedo([-0.05, 0.05, 0.05]), [0.0; 3]);
    }
}
