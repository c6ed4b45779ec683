use nalgebra::{Rotation3, Vector3};

use crate::error::{MetroError, Result};
use crate::mesh::Point3;

/// Kinematic tree. `parents[root] == root`; offsets are rest-pose vectors from
/// the parent joint, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub names: Vec<String>,
    pub parents: Vec<usize>,
    pub offsets: Vec<Point3>,
    /// Maximum rotation angle per joint, radians.
    pub limits: Vec<f64>,
}

/// Posed joint positions and cumulative rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Posed {
    pub positions: Vec<Point3>,
    pub rotations: Vec<Rotation3<f64>>,
}

pub fn axis_angle(v: &Point3) -> Rotation3<f64> {
    Rotation3::from_scaled_axis(Vector3::from(*v))
}

impl Skeleton {
    pub fn new(names: Vec<&str>, parents: Vec<usize>, offsets: Vec<Point3>, limits: Vec<f64>) -> Result<Self> {
        let s = Skeleton {
            names: names.into_iter().map(String::from).collect(),
            parents,
            offsets,
            limits,
        };
        s.order()?;
        Ok(s)
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        self.parents
            .iter()
            .enumerate()
            .find(|(i, &p)| *i == p)
            .map_or(0, |(i, _)| i)
    }

    pub fn children(&self, j: usize) -> Vec<usize> {
        (0..self.num_joints())
            .filter(|&c| c != j && self.parents[c] == j)
            .collect()
    }

    /// Joints ordered so every parent precedes its children.
    pub fn order(&self) -> Result<Vec<usize>> {
        let k = self.num_joints();
        if k == 0 || self.offsets.len() != k || self.limits.len() != k || self.names.len() != k {
            return Err(MetroError::Validation("skeleton arrays disagree in length".into()));
        }
        let roots: Vec<usize> = (0..k).filter(|&i| self.parents[i] == i).collect();
        if roots.len() != 1 {
            return Err(MetroError::Validation(format!(
                "skeleton needs exactly one root, found {}",
                roots.len()
            )));
        }
        let mut depth = vec![usize::MAX; k];
        for start in 0..k {
            let mut j = start;
            let mut steps = 0;
            while self.parents[j] != j {
                if self.parents[j] >= k {
                    return Err(MetroError::Validation(format!("joint {j} has an invalid parent")));
                }
                j = self.parents[j];
                steps += 1;
                if steps > k {
                    return Err(MetroError::Validation("parent graph has a cycle".into()));
                }
            }
            depth[start] = steps;
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&j| (depth[j], j));
        Ok(order)
    }

    /// Rest-pose joint positions with the root at `offsets[root]`.
    pub fn rest_positions(&self) -> Vec<Point3> {
        self.pose(&vec![[0.0; 3]; self.num_joints()], 1.0)
            .expect("validated skeleton")
            .positions
    }

    /// Forward kinematics for per-joint axis-angle rotations, with offsets scaled by `scale`.
    pub fn pose(&self, angles: &[Point3], scale: f64) -> Result<Posed> {
        let k = self.num_joints();
        if angles.len() != k {
            return Err(MetroError::dim("forward_kinematics", &[k, 3], &[angles.len(), 3]));
        }
        let mut positions = vec![[0.0; 3]; k];
        let mut rotations = vec![Rotation3::identity(); k];
        for j in self.order()? {
            let local = axis_angle(&angles[j]);
            let p = self.parents[j];
            let off = Vector3::from(self.offsets[j]) * scale;
            if p == j {
                rotations[j] = local;
                positions[j] = off.into();
            } else {
                let pos = Vector3::from(positions[p]) + rotations[p] * off;
                positions[j] = pos.into();
                rotations[j] = rotations[p] * local;
            }
        }
        Ok(Posed { positions, rotations })
    }

    /// Forward kinematics at unit scale.
    pub fn forward_kinematics(&self, angles: &[Point3]) -> Result<Vec<Point3>> {
        Ok(self.pose(angles, 1.0)?.positions)
    }

    /// K=14 body: pelvis root, legs, arms from the pelvis (torso folded into the
    /// shoulder offsets) and head. y is up.
    pub fn body() -> Self {
        let names = vec![
            "Pelvis",
            "R-Hip",
            "R-Knee",
            "R-Ankle",
            "L-Hip",
            "L-Knee",
            "L-Ankle",
            "R-Shoulder",
            "R-Elbow",
            "R-Wrist",
            "L-Shoulder",
            "L-Elbow",
            "L-Wrist",
            "Head",
        ];
        let parents = vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [-0.1, -0.05, 0.0],
            [0.0, -0.42, 0.0],
            [0.0, -0.40, 0.0],
            [0.1, -0.05, 0.0],
            [0.0, -0.42, 0.0],
            [0.0, -0.40, 0.0],
            [-0.18, 0.48, 0.0],
            [-0.28, 0.0, 0.0],
            [-0.25, 0.0, 0.0],
            [0.18, 0.48, 0.0],
            [0.28, 0.0, 0.0],
            [0.25, 0.0, 0.0],
            [0.0, 0.68, 0.0],
        ];
        let limits = vec![0.0, 0.5, 0.6, 0.3, 0.5, 0.6, 0.3, 0.5, 0.7, 0.3, 0.5, 0.7, 0.3, 0.3];
        Skeleton::new(names, parents, offsets, limits).expect("body skeleton is valid")
    }

    /// K=21 hand: wrist root, then four joints per finger from thumb to little
    /// finger; fingertips are joints 4, 8, 12, 16, 20.
    pub fn hand() -> Self {
        let fingers = ["Thumb", "Index", "Middle", "Ring", "Little"];
        let bases: [Point3; 5] = [
            [-0.025, 0.02, 0.015],
            [-0.02, 0.085, 0.0],
            [0.0, 0.09, 0.0],
            [0.018, 0.085, 0.0],
            [0.035, 0.075, 0.0],
        ];
        let lengths = [
            [0.035, 0.03, 0.025],
            [0.04, 0.025, 0.02],
            [0.045, 0.028, 0.022],
            [0.042, 0.026, 0.02],
            [0.032, 0.02, 0.018],
        ];
        let mut names = vec!["Wrist".to_string()];
        let mut parents = vec![0];
        let mut offsets = vec![[0.0; 3]];
        let mut limits = vec![0.0];
        for (f, name) in fingers.iter().enumerate() {
            let dir = {
                let b = Vector3::from(bases[f]);
                b / b.norm()
            };
            for (s, seg) in ["MCP", "PIP", "DIP", "Tip"].iter().enumerate() {
                names.push(format!("{name}-{seg}"));
                parents.push(if s == 0 { 0 } else { names.len() - 2 });
                let off: Point3 = if s == 0 {
                    bases[f]
                } else {
                    (dir * lengths[f][s - 1]).into()
                };
                offsets.push(off);
                limits.push(if s == 3 { 0.0 } else { 0.5 });
            }
        }
        Skeleton {
            names,
            parents,
            offsets,
            limits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &Point3, b: &Point3) -> f64 {
        crate::mesh::dist2(a, b).sqrt()
    }

    #[test]
    fn zero_angles_give_rest_pose() {
        let s = Skeleton::body();
        let rest = s.rest_positions();
        assert_eq!(s.forward_kinematics(&vec![[0.0; 3]; 14]).unwrap(), rest);
        assert_eq!(rest[2], [-0.1, -0.47, 0.0]);
    }

    #[test]
    fn root_quarter_turn_about_z() {
        let s = Skeleton::new(
            vec!["root", "child"],
            vec![0, 0],
            vec![[0.0; 3], [0.0, 1.0, 0.0]],
            vec![0.0, 0.0],
        )
        .unwrap();
        let p = s
            .forward_kinematics(&[[0.0, 0.0, std::f64::consts::FRAC_PI_2], [0.0; 3]])
            .unwrap();
        assert!(dist(&p[1], &[-1.0, 0.0, 0.0]) < 1e-9);
    }

    #[test]
    fn bone_lengths_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in [Skeleton::body(), Skeleton::hand()] {
            for _ in 0..1000 {
                let angles: Vec<Point3> = (0..s.num_joints())
                    .map(|_| {
                        [
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                        ]
                    })
                    .collect();
                let p = s.forward_kinematics(&angles).unwrap();
                for j in 0..s.num_joints() {
                    let par = s.parents[j];
                    if par == j {
                        continue;
                    }
                    let want = Vector3::from(s.offsets[j]).norm();
                    assert!((dist(&p[j], &p[par]) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cycles_are_rejected() {
        let err = Skeleton::new(vec!["a", "b", "c"], vec![0, 2, 1], vec![[0.0; 3]; 3], vec![0.0; 3]);
        assert!(matches!(err, Err(MetroError::Validation(_))));
    }

    #[test]
    fn hand_has_fingertips_at_expected_indices() {
        let h = Skeleton::hand();
        assert_eq!(h.num_joints(), 21);
        for tip in [4, 8, 12, 16, 20] {
            assert!(h.children(tip).is_empty());
            assert!(h.names[tip].ends_with("Tip"));
        }
        h.order().unwrap();
    }
}
