use super::features::{agent, light, road};
use super::{ModalityTensor, Scene};
use crate::numerics::Array;

/// Position and heading (radians) of an agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Rigid 2-D motion `q -> R(-theta) (q - p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene2dTransform {
    origin: [f64; 2],
    cos: f64,
    sin: f64,
}

impl Scene2dTransform {
    /// Transform that maps `pose` to the origin with zero heading.
    pub fn into_frame(pose: Pose) -> Self {
        let (sin, cos) = pose.heading.sin_cos();
        Self {
            origin: [pose.x, pose.y],
            cos,
            sin,
        }
    }

    /// Rotates a free vector (velocity, direction) by `-theta`.
    pub fn vector(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] + self.sin * v[1], -self.sin * v[0] + self.cos * v[1]]
    }

    pub fn point(&self, p: [f64; 2]) -> [f64; 2] {
        self.vector([p[0] - self.origin[0], p[1] - self.origin[1]])
    }

    fn point_at(&self, f: &mut [f64], x: usize, y: usize) {
        let [a, b] = self.point([f[x], f[y]]);
        f[x] = a;
        f[y] = b;
    }

    fn vector_at(&self, f: &mut [f64], x: usize, y: usize) {
        let [a, b] = self.vector([f[x], f[y]]);
        f[x] = a;
        f[y] = b;
    }
}

fn for_valid_cells(m: &mut ModalityTensor, mut f: impl FnMut(&mut [f64])) {
    let d = m.features();
    let ModalityTensor { values, mask } = m;
    for (cell, row) in values.data_mut().chunks_mut(d).enumerate() {
        if mask[cell] {
            f(row);
        }
    }
}

fn transform_agents(m: &mut ModalityTensor, tf: &Scene2dTransform) {
    for_valid_cells(m, |f| {
        tf.point_at(f, agent::X, agent::Y);
        tf.vector_at(f, agent::VX, agent::VY);
        tf.vector_at(f, agent::AX, agent::AY);
        // heading is the unit vector (cos, sin)
        tf.vector_at(f, agent::COS, agent::SIN);
    });
}

fn transform_points(a: &mut Array, tf: &Scene2dTransform) {
    for p in a.data_mut().chunks_mut(2) {
        tf.point_at(p, 0, 1);
    }
}

pub(super) fn transform_scene(scene: &Scene, tf: &Scene2dTransform) -> Scene {
    let mut out = scene.clone();
    transform_agents(&mut out.history, tf);
    transform_agents(&mut out.interactions, tf);
    for_valid_cells(&mut out.roadgraph, |f| {
        tf.point_at(f, road::X0, road::Y0);
        tf.point_at(f, road::X1, road::Y1);
        tf.vector_at(f, road::DX, road::DY);
    });
    for_valid_cells(&mut out.traffic_lights, |f| tf.point_at(f, light::X, light::Y));
    transform_points(&mut out.future, tf);
    if let Some(e) = out.branch_endpoints.as_mut() {
        transform_points(e, tf);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::testutil::toy_scene;
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rotation_oracle() {
        let tf = Scene2dTransform::into_frame(Pose {
            x: 1.0,
            y: 0.0,
            heading: FRAC_PI_2,
        });
        let p = tf.point([1.0, 1.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn identity_pose_leaves_scene_unchanged() {
        let s = toy_scene();
        let tf = Scene2dTransform::into_frame(Pose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        });
        assert_eq!(transform_scene(&s, &tf), s);
    }

    #[test]
    fn ego_lands_on_origin_facing_x() {
        let s = toy_scene().to_ego_frame(1).unwrap();
        let f = s.history.features_at(1, 2, 0);
        assert!(f[agent::X].abs() < 1e-12 && f[agent::Y].abs() < 1e-12);
        assert!(f[agent::SIN].abs() < 1e-12 && (f[agent::COS] - 1.0).abs() < 1e-12);
        s.validate().unwrap();
    }

    #[test]
    fn transform_is_idempotent() {
        let once = toy_scene().to_ego_frame(1).unwrap();
        let twice = once.to_ego_frame(1).unwrap();
        assert!(once.history.values.max_abs_diff(&twice.history.values) < 1e-12);
        assert!(once.roadgraph.values.max_abs_diff(&twice.roadgraph.values) < 1e-12);
        assert!(once.future.max_abs_diff(&twice.future) < 1e-12);
    }

    #[test]
    fn speeds_and_extent_are_scalars() {
        let s = toy_scene();
        let e = s.to_ego_frame(1).unwrap();
        for t in 0..3 {
            let (a, b) = (s.history.features_at(0, t, 0), e.history.features_at(0, t, 0));
            assert!((a[agent::VX].hypot(a[agent::VY]) - b[agent::VX].hypot(b[agent::VY])).abs() < 1e-12);
            assert_eq!(a[agent::BOX_LENGTH], b[agent::BOX_LENGTH]);
        }
    }

    #[test]
    fn padding_cells_stay_zero() {
        let e = toy_scene().to_ego_frame(1).unwrap();
        assert!(!e.interactions.valid(0, 0, 1));
        assert!(e.interactions.features_at(0, 0, 1).iter().all(|&v| v == 0.0));
    }
}
