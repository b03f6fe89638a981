//! Body-motion representation: per-part pose streams in 6D rotation form,
//! finite differences and the proxy skeleton.

pub mod rotation;
pub mod skeleton;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use rotation::{geodesic_distance, rot6d_from_axis_angle, rot6d_to_matrix};
pub use skeleton::{fk_positions, BodyPose, ProxySkeleton};

pub const DEFAULT_FPS: u32 = 30;
pub const FACE_WIDTH: usize = 106;
pub const HANDS_WIDTH: usize = 180;
pub const UPPER_WIDTH: usize = 78;
pub const LOWER_WIDTH: usize = 54;
pub const POSE_WIDTH: usize = FACE_WIDTH + HANDS_WIDTH + UPPER_WIDTH + LOWER_WIDTH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Face,
    Hands,
    Upper,
    Lower,
}

impl Part {
    /// Canonical order: face, hands, upper, lower.
    pub const ALL: [Part; 4] = [Part::Face, Part::Hands, Part::Upper, Part::Lower];

    pub fn width(self) -> usize {
        match self {
            Part::Face => FACE_WIDTH,
            Part::Hands => HANDS_WIDTH,
            Part::Upper => UPPER_WIDTH,
            Part::Lower => LOWER_WIDTH,
        }
    }

    /// Rotation joints carried by the stream. The face stream carries one
    /// jaw rotation followed by 100 expression coefficients.
    pub fn joints(self) -> usize {
        match self {
            Part::Face => 1,
            Part::Hands => 30,
            Part::Upper => 13,
            Part::Lower => 9,
        }
    }

    pub fn is_skeletal(self) -> bool {
        self != Part::Face
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Face => "face",
            Part::Hands => "hands",
            Part::Upper => "upper",
            Part::Lower => "lower",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column offset of the part inside a full 418-wide pose row.
    pub fn column_offset(self) -> usize {
        Part::ALL[..self.index()].iter().map(|p| p.width()).sum()
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(Part::Face),
            "hands" | "hand" => Ok(Part::Hands),
            "upper" => Ok(Part::Upper),
            "lower" => Ok(Part::Lower),
            other => Err(Error::Config(format!("unknown body part {other:?}"))),
        }
    }
}

/// The four part streams of a pose sequence, rows are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParts {
    pub face: Array2<f32>,
    pub hands: Array2<f32>,
    pub upper: Array2<f32>,
    pub lower: Array2<f32>,
}

impl PoseParts {
    pub fn get(&self, part: Part) -> &Array2<f32> {
        match part {
            Part::Face => &self.face,
            Part::Hands => &self.hands,
            Part::Upper => &self.upper,
            Part::Lower => &self.lower,
        }
    }

    pub fn get_mut(&mut self, part: Part) -> &mut Array2<f32> {
        match part {
            Part::Face => &mut self.face,
            Part::Hands => &mut self.hands,
            Part::Upper => &mut self.upper,
            Part::Lower => &mut self.lower,
        }
    }

    pub fn frames(&self) -> usize {
        self.face.nrows()
    }
}

pub fn split_pose(full: ArrayView2<'_, f32>) -> Result<PoseParts> {
    if full.ncols() != POSE_WIDTH {
        return Err(Error::shape(format!("{POSE_WIDTH} columns"), full.ncols()));
    }
    let take = |p: Part| {
        let o = p.column_offset();
        full.slice(s![.., o..o + p.width()]).to_owned()
    };
    Ok(PoseParts {
        face: take(Part::Face),
        hands: take(Part::Hands),
        upper: take(Part::Upper),
        lower: take(Part::Lower),
    })
}

pub fn merge_parts(parts: &PoseParts) -> Result<Array2<f32>> {
    let frames = parts.frames();
    for p in Part::ALL {
        let a = parts.get(p);
        if a.nrows() != frames || a.ncols() != p.width() {
            return Err(Error::shape(
                format!("{frames}x{} for {p}", p.width()),
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
    }
    let views: Vec<_> = Part::ALL.iter().map(|&p| parts.get(p).view()).collect();
    Ok(ndarray::concatenate(Axis(1), &views).expect("row counts checked"))
}

/// Forward differences along time. Order 1 is velocity (Δ·fps); order 2 is
/// the forward difference of that velocity (Δ²·fps²).
pub fn finite_difference(seq: ArrayView2<'_, f32>, order: usize, fps: f32) -> Result<Array2<f32>> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidConfig(format!(
            "difference order {order} not in 1..=2"
        )));
    }
    if seq.nrows() <= order {
        return Err(Error::TooShort {
            frames: seq.nrows(),
            needed: order + 1,
        });
    }
    let mut cur = seq.to_owned();
    for _ in 0..order {
        let n = cur.nrows();
        cur = (&cur.slice(s![1..n, ..]) - &cur.slice(s![0..n - 1, ..])) * fps;
    }
    Ok(cur)
}

/// A motion clip: four pose streams, global translation (meters) and frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: u32,
    pub parts: PoseParts,
    pub translation: Array2<f32>,
}

impl MotionSequence {
    pub fn new(fps: u32, parts: PoseParts, translation: Array2<f32>) -> Result<Self> {
        let seq = Self {
            fps,
            parts,
            translation,
        };
        seq.validate_shapes()?;
        Ok(seq)
    }

    /// Rest pose (identity rotations, zero expression) at the origin.
    pub fn rest(frames: usize, fps: u32) -> Self {
        let mut parts = PoseParts {
            face: Array2::zeros((frames, FACE_WIDTH)),
            hands: Array2::zeros((frames, HANDS_WIDTH)),
            upper: Array2::zeros((frames, UPPER_WIDTH)),
            lower: Array2::zeros((frames, LOWER_WIDTH)),
        };
        for p in Part::ALL {
            let a = parts.get_mut(p);
            for j in 0..p.joints() {
                a.column_mut(6 * j).fill(1.0);
                a.column_mut(6 * j + 4).fill(1.0);
            }
        }
        Self {
            fps,
            parts,
            translation: Array2::zeros((frames, 3)),
        }
    }

    pub fn frames(&self) -> usize {
        self.parts.frames()
    }

    pub fn part(&self, part: Part) -> &Array2<f32> {
        self.parts.get(part)
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.fps as f64
    }

    fn validate_shapes(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        let frames = self.frames();
        if frames == 0 {
            return Err(Error::TooShort {
                frames: 0,
                needed: 1,
            });
        }
        merge_parts(&self.parts)?;
        if self.translation.dim() != (frames, 3) {
            return Err(Error::shape(
                format!("{frames}x3 translation"),
                format!("{:?}", self.translation.dim()),
            ));
        }
        Ok(())
    }

    /// Full invariant check, including that every 6D block decodes to a
    /// rotation.
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        for p in Part::ALL {
            for row in self.part(p).rows() {
                for j in 0..p.joints() {
                    let r6 = row.slice(s![6 * j..6 * j + 6]).to_vec();
                    rotation::rot6d_to_matrix_f32(&r6)?;
                }
            }
        }
        if self
            .parts
            .face
            .iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig("non-finite motion values".into()));
        }
        Ok(())
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let r = s![start..start + len, ..];
        Self {
            fps: self.fps,
            parts: PoseParts {
                face: self.parts.face.slice(r).to_owned(),
                hands: self.parts.hands.slice(r).to_owned(),
                upper: self.parts.upper.slice(r).to_owned(),
                lower: self.parts.lower.slice(r).to_owned(),
            },
            translation: self.translation.slice(r).to_owned(),
        }
    }

    pub fn to_json(&self) -> MotionJson {
        let rows = |a: &Array2<f32>| a.rows().into_iter().map(|r| r.to_vec()).collect();
        MotionJson {
            fps: self.fps,
            face: rows(&self.parts.face),
            hands: rows(&self.parts.hands),
            upper: rows(&self.parts.upper),
            lower: rows(&self.parts.lower),
            translation: rows(&self.translation),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_json())?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let raw: MotionJson = serde_json::from_slice(&std::fs::read(path)?)?;
        raw.into_sequence().map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// On-disk "motion-json" layout: one row per frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionJson {
    pub fps: u32,
    pub face: Vec<Vec<f32>>,
    pub hands: Vec<Vec<f32>>,
    pub upper: Vec<Vec<f32>>,
    pub lower: Vec<Vec<f32>>,
    pub translation: Vec<Vec<f32>>,
}

impl MotionJson {
    pub fn into_sequence(self) -> Result<MotionSequence> {
        fn matrix(rows: Vec<Vec<f32>>, width: usize, key: &str) -> Result<Array2<f32>> {
            let n = rows.len();
            let mut flat = Vec::with_capacity(n * width);
            for (i, r) in rows.into_iter().enumerate() {
                if r.len() != width {
                    return Err(Error::shape(
                        format!("{width} values in {key} row {i}"),
                        r.len(),
                    ));
                }
                flat.extend(r);
            }
            Ok(Array2::from_shape_vec((n, width), flat).expect("row widths checked"))
        }
        let parts = PoseParts {
            face: matrix(self.face, FACE_WIDTH, "face")?,
            hands: matrix(self.hands, HANDS_WIDTH, "hands")?,
            upper: matrix(self.upper, UPPER_WIDTH, "upper")?,
            lower: matrix(self.lower, LOWER_WIDTH, "lower")?,
        };
        let translation = matrix(self.translation, 3, "translation")?;
        MotionSequence::new(self.fps, parts, translation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use proptest::prelude::*;

    #[test]
    fn split_zero_matrix_widths() {
        let parts = split_pose(Array2::zeros((5, 418)).view()).unwrap();
        assert_eq!(parts.face.dim(), (5, 106));
        assert_eq!(parts.hands.dim(), (5, 180));
        assert_eq!(parts.upper.dim(), (5, 78));
        assert_eq!(parts.lower.dim(), (5, 54));
        assert!(parts.upper.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_rejects_wrong_width() {
        assert!(matches!(
            split_pose(Array2::zeros((2, 417)).view()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn split_merge_is_identity(frames in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array::from_shape_fn((frames, POSE_WIDTH), |_| rng.gen_range(-1.0f32..1.0));
            prop_assert_eq!(merge_parts(&split_pose(x.view()).unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn finite_difference_examples() {
        let constant = Array2::from_elem((4, 3), 2.5f32);
        assert!(finite_difference(constant.view(), 1, 30.0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let c = [0.1f32, -0.2, 0.05];
        let ramp = Array2::from_shape_fn((6, 3), |(t, d)| t as f32 * c[d]);
        let vel = finite_difference(ramp.view(), 1, 30.0).unwrap();
        assert_eq!(vel.nrows(), 5);
        for row in vel.rows() {
            for d in 0..3 {
                assert_abs_diff_eq!(row[d], 30.0 * c[d], epsilon = 1e-4);
            }
        }
        let acc = finite_difference(ramp.view(), 2, 30.0).unwrap();
        assert_eq!(acc.nrows(), 4);
        assert!(acc.iter().all(|v| v.abs() < 1e-3));

        let two = Array2::<f32>::zeros((2, 3));
        assert!(matches!(
            finite_difference(two.view(), 2, 30.0),
            Err(Error::TooShort {
                frames: 2,
                needed: 3
            })
        ));
    }

    #[test]
    fn rest_sequence_is_valid_and_round_trips_json() {
        let seq = MotionSequence::rest(3, DEFAULT_FPS);
        seq.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        seq.write_json(&path).unwrap();
        assert_eq!(MotionSequence::read_json(&path).unwrap(), seq);
    }

    #[test]
    fn reader_rejects_missing_keys_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = serde_json::to_value(MotionSequence::rest(2, 30).to_json()).unwrap();
        j.as_object_mut().unwrap().remove("lower");
        let p = dir.path().join("missing.json");
        std::fs::write(&p, j.to_string()).unwrap();
        assert!(MotionSequence::read_json(&p).is_err());

        let mut j = serde_json::to_value(MotionSequence::rest(2, 30).to_json()).unwrap();
        j["upper"][1].as_array_mut().unwrap().pop();
        let p = dir.path().join("ragged.json");
        std::fs::write(&p, j.to_string()).unwrap();
        assert!(MotionSequence::read_json(&p).is_err());
    }

    #[test]
    fn degenerate_block_fails_validation() {
        let mut seq = MotionSequence::rest(2, 30);
        seq.parts.upper.row_mut(1).slice_mut(s![0..6]).fill(0.0);
        assert!(matches!(seq.validate(), Err(Error::DegenerateRotation)));
    }
}
