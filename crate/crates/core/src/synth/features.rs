use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::dot;
use crate::mesh::{Face, Point3};
use crate::model::{truncated_normal, CameraParams};

const ORACLE_SEED: u64 = 0x6f72_6163_6c65;

/// Fixed random two-layer tanh embedding of a pose vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMlp {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl OracleMlp {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        let hidden = 2 * output_dim.max(input_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
        let s1 = 2.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        OracleMlp {
            input_dim,
            hidden,
            output_dim,
            w1: truncated_normal(&mut rng, vec![hidden, input_dim], s1).into_data(),
            b1: truncated_normal(&mut rng, vec![hidden], 0.1).into_data(),
            w2: truncated_normal(&mut rng, vec![output_dim, hidden], s2).into_data(),
            b2: truncated_normal(&mut rng, vec![output_dim], 0.1).into_data(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.input_dim, "oracle input width");
        let h: Vec<f64> = (0..self.hidden)
            .map(|i| (dot(&self.w1[i * self.input_dim..(i + 1) * self.input_dim], u) + self.b1[i]).tanh())
            .collect();
        (0..self.output_dim)
            .map(|i| (dot(&self.w2[i * self.hidden..(i + 1) * self.hidden], &h) + self.b2[i]).tanh())
            .collect()
    }
}

/// Filled-triangle silhouette under the weak-perspective camera. The raster
/// covers `[-extent, extent]²` in projected units, y pointing up.
pub fn rasterize_silhouette(
    vertices: &[Point3],
    faces: &[Face],
    cam: &CameraParams,
    size: usize,
    extent: f64,
) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    let px = |p: &Point3| {
        let [u, v] = cam.project(p);
        (
            (u + extent) / (2.0 * extent) * size as f64,
            (extent - v) / (2.0 * extent) * size as f64,
        )
    };
    let proj: Vec<(f64, f64)> = vertices.iter().map(px).collect();
    for f in faces {
        let (a, b, c) = (proj[f[0]], proj[f[1]], proj[f[2]]);
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area == 0.0 {
            continue;
        }
        let lo_x = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let hi_x = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(size);
        let lo_y = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let hi_y = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let e = |s: (f64, f64), t: (f64, f64)| (t.0 - s.0) * (p.1 - s.1) - (t.1 - s.1) * (p.0 - s.0);
                let (e0, e1, e2) = (e(a, b), e(b, c), e(c, a));
                let inside = if area > 0.0 {
                    e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
                } else {
                    e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0
                };
                if inside {
                    img[y * size + x] = 1.0;
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn oracle_is_deterministic() {
        let a = OracleMlp::new(10, 16);
        let b = OracleMlp::new(10, 16);
        let u: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        assert_eq!(a.embed(&u), b.embed(&u));
    }

    #[test]
    fn oracle_separates_random_poses() {
        let o = OracleMlp::new(46, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut min_d = f64::INFINITY;
        for _ in 0..1000 {
            let u: Vec<f64> = (0..46).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let v: Vec<f64> = (0..46).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let (a, b) = (o.embed(&u), o.embed(&v));
            let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            min_d = min_d.min(d);
        }
        assert!(min_d > 0.0);
    }

    #[test]
    fn triangle_covers_its_interior() {
        let v = vec![[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]];
        let cam = CameraParams {
            scale: 1.0,
            translation: [0.0, 0.0],
        };
        let img = rasterize_silhouette(&v, &[[0, 1, 2]], &cam, 8, 1.0);
        assert_eq!(img[7 * 8], 1.0);
        assert_eq!(img[7], 0.0);
        let filled: f64 = img.iter().sum();
        assert!((24.0..=40.0).contains(&filled), "{filled}");
    }
}
