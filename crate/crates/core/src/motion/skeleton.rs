//! Proxy forward-kinematics skeleton standing in for a body mesh: 52 joints
//! (9 lower, 13 upper, 30 hand) with fixed neutral-shape bone offsets and a
//! small set of surface markers rigidly attached to every joint.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::rotation::rot6d_to_matrix_f32;
use super::Part;
use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 52;
pub const DEFAULT_MARKERS: usize = 3;
const MARKER_SPACING: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySkeleton {
    parents: Vec<i32>,
    offsets: Vec<[f64; 3]>,
    parts: Vec<Part>,
    marker_count: usize,
}

impl ProxySkeleton {
    pub fn new(
        parents: Vec<i32>,
        offsets: Vec<[f64; 3]>,
        parts: Vec<Part>,
        marker_count: usize,
    ) -> Result<Self> {
        let n = parents.len();
        if offsets.len() != n || parts.len() != n {
            return Err(Error::shape(
                format!("{n} offsets and part labels"),
                format!("{} offsets, {} labels", offsets.len(), parts.len()),
            ));
        }
        let roots = parents.iter().filter(|&&p| p < 0).count();
        if roots != 1 || parents.first() != Some(&-1) {
            return Err(Error::InvalidConfig(
                "skeleton needs exactly one root at index 0".into(),
            ));
        }
        if parents
            .iter()
            .enumerate()
            .skip(1)
            .any(|(j, &p)| p < 0 || p as usize >= j)
        {
            return Err(Error::InvalidConfig(
                "skeleton joints must be topologically sorted".into(),
            ));
        }
        if marker_count == 0 {
            return Err(Error::InvalidConfig("marker_count must be positive".into()));
        }
        Ok(Self {
            parents,
            offsets,
            parts,
            marker_count,
        })
    }

    /// The neutral-shape 52-joint proxy body. Joint order is lower (0..9),
    /// upper (9..22), hands (22..52); each range follows the joint order of
    /// the corresponding pose stream.
    pub fn neutral() -> Self {
        let mut parents = Vec::with_capacity(JOINT_COUNT);
        let mut offsets = Vec::with_capacity(JOINT_COUNT);
        let mut parts = Vec::with_capacity(JOINT_COUNT);
        let mut push = |parent: i32, off: [f64; 3], part: Part| {
            parents.push(parent);
            offsets.push(off);
            parts.push(part);
        };
        // lower: pelvis, then hip/knee/ankle/foot per side
        push(-1, [0.0, 0.93, 0.0], Part::Lower);
        for side in [1.0, -1.0] {
            let base = 1 + if side > 0.0 { 0 } else { 4 };
            push(0, [0.09 * side, -0.07, 0.0], Part::Lower);
            push(base as i32, [0.0, -0.40, 0.0], Part::Lower);
            push(base as i32 + 1, [0.0, -0.42, 0.0], Part::Lower);
            push(base as i32 + 2, [0.0, -0.06, 0.12], Part::Lower);
        }
        // upper: spine chain, neck, head, then collar/shoulder/elbow/wrist per side
        push(0, [0.0, 0.10, 0.0], Part::Upper); // 9
        push(9, [0.0, 0.12, 0.0], Part::Upper); // 10
        push(10, [0.0, 0.12, 0.0], Part::Upper); // 11
        push(11, [0.0, 0.14, 0.0], Part::Upper); // 12 neck
        push(12, [0.0, 0.10, 0.0], Part::Upper); // 13 head
        for side in [1.0, -1.0] {
            let collar = if side > 0.0 { 14 } else { 18 };
            push(11, [0.04 * side, 0.10, 0.0], Part::Upper);
            push(collar, [0.12 * side, 0.0, 0.0], Part::Upper);
            push(collar + 1, [0.26 * side, 0.0, 0.0], Part::Upper);
            push(collar + 2, [0.25 * side, 0.0, 0.0], Part::Upper);
        }
        // hands: five three-joint fingers per side, attached to the wrists
        for (side, wrist) in [(1.0, 17), (-1.0, 21)] {
            for finger in 0..5 {
                let start = 22 + if side > 0.0 { 0 } else { 15 } + finger * 3;
                let spread = -0.04 + 0.02 * finger as f64;
                push(wrist, [0.08 * side, 0.0, spread], Part::Hands);
                push(start as i32, [0.035 * side, 0.0, 0.0], Part::Hands);
                push(start as i32 + 1, [0.025 * side, 0.0, 0.0], Part::Hands);
            }
        }
        Self::new(parents, offsets, parts, DEFAULT_MARKERS).expect("neutral skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[i32] {
        &self.parents
    }

    pub fn offsets(&self) -> &[[f64; 3]] {
        &self.offsets
    }

    pub fn part_of(&self, joint: usize) -> Part {
        self.parts[joint]
    }

    pub fn marker_count(&self) -> usize {
        self.marker_count
    }

    pub fn total_markers(&self) -> usize {
        self.joint_count() * self.marker_count
    }

    /// Joints of `part`, in stream order.
    pub fn joints_of(&self, part: Part) -> Vec<usize> {
        (0..self.joint_count())
            .filter(|&j| self.parts[j] == part)
            .collect()
    }

    /// Marker offsets in a joint's local frame.
    pub fn marker_offsets(&self) -> Vec<Vector3<f64>> {
        (0..self.marker_count)
            .map(|m| {
                let mut v = Vector3::zeros();
                v[m % 3] = MARKER_SPACING * (1 + m / 3) as f64;
                v
            })
            .collect()
    }

    /// Marker positions for local joint rotations, `(joints·markers)` rows
    /// ordered joint-major.
    pub fn marker_positions(
        &self,
        local: &[Matrix3<f64>],
        translation: [f64; 3],
    ) -> Result<Vec<[f64; 3]>> {
        let n = self.joint_count();
        if local.len() != n {
            return Err(Error::shape(format!("{n} rotations"), local.len()));
        }
        let (globals, positions) = self.chain(local, translation);
        let markers = self.marker_offsets();
        let mut out = Vec::with_capacity(n * self.marker_count);
        for j in 0..n {
            for m in &markers {
                let p = positions[j] + globals[j] * m;
                out.push([p.x, p.y, p.z]);
            }
        }
        Ok(out)
    }

    /// Global joint positions (no markers).
    pub fn joint_positions(
        &self,
        local: &[Matrix3<f64>],
        translation: [f64; 3],
    ) -> Result<Vec<[f64; 3]>> {
        if local.len() != self.joint_count() {
            return Err(Error::shape(
                format!("{} rotations", self.joint_count()),
                local.len(),
            ));
        }
        let (_, positions) = self.chain(local, translation);
        Ok(positions.iter().map(|p| [p.x, p.y, p.z]).collect())
    }

    fn chain(
        &self,
        local: &[Matrix3<f64>],
        translation: [f64; 3],
    ) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
        let n = self.joint_count();
        let mut globals: Vec<Matrix3<f64>> = Vec::with_capacity(n);
        let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(n);
        for j in 0..n {
            let off = Vector3::from(self.offsets[j]);
            match self.parents[j] {
                p if p < 0 => {
                    globals.push(local[j]);
                    positions.push(Vector3::from(translation) + off);
                }
                p => {
                    let p = p as usize;
                    let g = globals[p] * local[j];
                    positions.push(positions[p] + globals[p] * off);
                    globals.push(g);
                }
            }
        }
        (globals, positions)
    }
}

/// One frame of pose streams (6D per joint) for the three skeletal parts.
#[derive(Debug, Clone, Copy)]
pub struct BodyPose<'a> {
    pub hands: &'a [f32],
    pub upper: &'a [f32],
    pub lower: &'a [f32],
}

impl BodyPose<'_> {
    /// Local rotations in neutral-skeleton joint order (lower, upper, hands).
    pub fn local_rotations(&self) -> Result<Vec<Matrix3<f64>>> {
        let mut out = Vec::with_capacity(JOINT_COUNT);
        for (part, stream) in [
            (Part::Lower, self.lower),
            (Part::Upper, self.upper),
            (Part::Hands, self.hands),
        ] {
            if stream.len() != part.width() {
                return Err(Error::shape(
                    format!("{} values for {}", part.width(), part.name()),
                    stream.len(),
                ));
            }
            for r6 in stream.chunks_exact(6) {
                out.push(rot6d_to_matrix_f32(r6)?);
            }
        }
        Ok(out)
    }
}

/// Surface proxy-marker positions for one frame of the neutral skeleton:
/// kinematic chain composition plus global translation.
pub fn fk_positions(
    pose: &BodyPose<'_>,
    skeleton: &ProxySkeleton,
    translation: [f64; 3],
) -> Result<Vec<[f64; 3]>> {
    let local = pose.local_rotations()?;
    skeleton.marker_positions(&local, translation)
}
