//! Rotation representations: axis-angle, the continuous 6D form (first two
//! columns of a rotation matrix) and the geodesic distance on SO(3).

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

/// Parallel / zero-length tolerance for Gram–Schmidt on 6D input.
pub const DEGENERACY_TOL: f64 = 1e-8;

pub type Rot6d = [f64; 6];

pub fn axis_angle_to_matrix(aa: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(aa);
    let angle = v.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    let axis = Unit::new_unchecked(v / angle);
    Rotation3::from_axis_angle(&axis, angle).into_inner()
}

pub fn matrix_to_axis_angle(r: &Matrix3<f64>) -> [f64; 3] {
    let v = Rotation3::from_matrix_unchecked(*r).scaled_axis();
    [v.x, v.y, v.z]
}

/// First two columns of a rotation matrix, column-major.
pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> Rot6d {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

pub fn rot6d_from_axis_angle(aa: [f64; 3]) -> Rot6d {
    matrix_to_rot6d(&axis_angle_to_matrix(aa))
}

/// Gram–Schmidt: normalize the first column, orthogonalize and normalize the
/// second, complete with the cross product.
pub fn rot6d_to_matrix(r6: &[f64]) -> Result<Matrix3<f64>> {
    if r6.len() != 6 {
        return Err(Error::shape("6 values", r6.len()));
    }
    let a1 = Vector3::new(r6[0], r6[1], r6[2]);
    let a2 = Vector3::new(r6[3], r6[4], r6[5]);
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1 > DEGENERACY_TOL && n2 > DEGENERACY_TOL) {
        return Err(Error::DegenerateRotation);
    }
    let b1 = a1 / n1;
    // sine of the angle between the columns
    if b1.cross(&(a2 / n2)).norm() < DEGENERACY_TOL {
        return Err(Error::DegenerateRotation);
    }
    let u = a2 - b1 * b1.dot(&a2);
    let b2 = u / u.norm();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn rot6d_to_matrix_f32(r6: &[f32]) -> Result<Matrix3<f64>> {
    let v: Vec<f64> = r6.iter().map(|&x| x as f64).collect();
    rot6d_to_matrix(&v)
}

/// Angle of the relative rotation R1ᵀR2, in [0, π].
pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let c = (((r1.transpose() * r2).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn identity_axis_angle() {
        assert_eq!(
            rot6d_from_axis_angle([0.0; 3]),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn quarter_turn_about_z() {
        let r6 = rot6d_from_axis_angle([0.0, 0.0, FRAC_PI_2]);
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r6.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_identity_and_scale() {
        let id = Matrix3::identity();
        assert_abs_diff_eq!(rot6d_to_matrix(&[1., 0., 0., 0., 1., 0.]).unwrap(), id);
        assert_abs_diff_eq!(rot6d_to_matrix(&[2., 0., 0., 0., 3., 0.]).unwrap(), id);
    }

    #[test]
    fn parallel_columns_are_degenerate() {
        assert!(matches!(
            rot6d_to_matrix(&[1., 0., 0., 1., 0., 0.]),
            Err(Error::DegenerateRotation)
        ));
        assert!(matches!(
            rot6d_to_matrix(&[0., 0., 0., 0., 1., 0.]),
            Err(Error::DegenerateRotation)
        ));
    }

    #[test]
    fn geodesic_examples() {
        let id = Matrix3::identity();
        assert_eq!(geodesic_distance(&id, &id), 0.0);
        let flip = axis_angle_to_matrix([PI, 0.0, 0.0]);
        assert_abs_diff_eq!(geodesic_distance(&id, &flip), PI, epsilon = 1e-7);
        let quarter = axis_angle_to_matrix([0.0, 0.0, FRAC_PI_2]);
        assert_abs_diff_eq!(geodesic_distance(&id, &quarter), FRAC_PI_2, epsilon = 1e-12);
    }

    fn aa() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(-3.0f64..3.0)
    }

    proptest! {
        #[test]
        fn round_trip_preserves_matrix(v in aa()) {
            let r = axis_angle_to_matrix(v);
            let back = rot6d_to_matrix(&rot6d_from_axis_angle(v)).unwrap();
            let r2 = axis_angle_to_matrix(matrix_to_axis_angle(&back));
            prop_assert!((r - r2).amax() < 1e-6);
        }

        #[test]
        fn gram_schmidt_is_orthonormal(v in prop::array::uniform6(-5.0f64..5.0)) {
            if let Ok(r) = rot6d_to_matrix(&v) {
                prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-6);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn geodesic_is_a_metric_like(a in aa(), b in aa()) {
            let (ra, rb) = (axis_angle_to_matrix(a), axis_angle_to_matrix(b));
            let d = geodesic_distance(&ra, &rb);
            prop_assert!((0.0..=PI).contains(&d));
            prop_assert!((d - geodesic_distance(&rb, &ra)).abs() < 1e-9);
            prop_assert!(geodesic_distance(&ra, &ra) < 1e-6);
        }
    }
}
