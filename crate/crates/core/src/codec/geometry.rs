//! Differentiable counterparts of the motion-core geometry, batched over
//! frames: Gram–Schmidt on 6D blocks and forward kinematics of one part's
//! joints on the proxy skeleton.

use candle_core::{DType, Device, Tensor, D};
use nalgebra::Matrix3;

use crate::error::Result;
use crate::motion::{Part, ProxySkeleton};

const NORM_EPS: f64 = 1e-12;

fn normalize(v: &Tensor) -> Result<Tensor> {
    let n = (v.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    Ok(v.broadcast_div(&n)?)
}

fn cross(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (a0, a1, a2) = (c(a, 0)?, c(a, 1)?, c(a, 2)?);
    let (b0, b1, b2) = (c(b, 0)?, c(b, 1)?, c(b, 2)?);
    let x = ((&a1 * &b2)? - (&a2 * &b1)?)?;
    let y = ((&a2 * &b0)? - (&a0 * &b2)?)?;
    let z = ((&a0 * &b1)? - (&a1 * &b0)?)?;
    Ok(Tensor::cat(&[x, y, z], D::Minus1)?)
}

/// `(..., 6)` → `(..., 3, 3)` rotation matrices with the Gram–Schmidt
/// columns.
pub fn rot6d_to_matrix(r6: &Tensor) -> Result<Tensor> {
    let a1 = r6.narrow(D::Minus1, 0, 3)?;
    let a2 = r6.narrow(D::Minus1, 3, 3)?;
    let b1 = normalize(&a1)?;
    let proj = (&b1 * &a2)?.sum_keepdim(D::Minus1)?;
    let b2 = normalize(&(a2 - b1.broadcast_mul(&proj)?)?)?;
    let b3 = cross(&b1, &b2)?;
    Ok(Tensor::stack(&[b1, b2, b3], D::Minus1)?)
}

/// Batched 3×3 product `(N,3,3)·(N,3,3)`.
fn matmul3(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.unsqueeze(3)?.broadcast_mul(&b.unsqueeze(1)?)?.sum(2)?)
}

/// Batched `(N,3,3)·v` for a constant vector.
fn matvec_const(a: &Tensor, v: &[f64; 3]) -> Result<Tensor> {
    let v = Tensor::new(v, a.device())?
        .to_dtype(a.dtype())?
        .reshape((1, 1, 3))?;
    Ok(a.broadcast_mul(&v)?.sum(D::Minus1)?)
}

/// Kinematic chain for the joints of one body part. Joints outside the part
/// stay at their rest rotation, so a part joint whose parent is outside the
/// part hangs from that parent's rest position.
#[derive(Debug, Clone)]
pub struct PartKinematics {
    part: Part,
    /// Per part joint: parent index within the part, or the parent's rest
    /// position when the parent lies outside the part.
    links: Vec<(Link, [f64; 3])>,
    markers: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
enum Link {
    Inside(usize),
    Anchored([f64; 3]),
}

impl PartKinematics {
    pub fn new(skeleton: &ProxySkeleton, part: Part) -> Result<Option<Self>> {
        if !part.is_skeletal() {
            return Ok(None);
        }
        let joints = skeleton.joints_of(part);
        let rest = skeleton
            .joint_positions(&vec![Matrix3::identity(); skeleton.joint_count()], [0.0; 3])?;
        let links = joints
            .iter()
            .map(|&j| {
                let p = skeleton.parents()[j];
                let link = if p < 0 {
                    Link::Anchored([0.0; 3])
                } else if let Some(local) = joints.iter().position(|&k| k == p as usize) {
                    Link::Inside(local)
                } else {
                    Link::Anchored(rest[p as usize])
                };
                (link, skeleton.offsets()[j])
            })
            .collect();
        let markers = skeleton
            .marker_offsets()
            .iter()
            .map(|m| [m.x, m.y, m.z])
            .collect();
        Ok(Some(Self {
            part,
            links,
            markers,
        }))
    }

    pub fn part(&self) -> Part {
        self.part
    }

    pub fn marker_count(&self) -> usize {
        self.links.len() * self.markers.len()
    }

    /// `(N, J, 3, 3)` local rotations → `(N, J·M, 3)` marker positions.
    pub fn markers(&self, rotations: &Tensor) -> Result<Tensor> {
        let n = rotations.dim(0)?;
        let dtype = rotations.dtype();
        let dev = rotations.device();
        let mut globals: Vec<Tensor> = Vec::with_capacity(self.links.len());
        let mut positions: Vec<Tensor> = Vec::with_capacity(self.links.len());
        let mut out = Vec::with_capacity(self.marker_count());
        for (j, (link, offset)) in self.links.iter().enumerate() {
            let local = rotations.narrow(1, j, 1)?.squeeze(1)?;
            let (g, p) = match link {
                Link::Inside(parent) => {
                    let gp = &globals[*parent];
                    (
                        matmul3(gp, &local)?,
                        (&positions[*parent] + matvec_const(gp, offset)?)?,
                    )
                }
                Link::Anchored(base) => {
                    let pos = [
                        base[0] + offset[0],
                        base[1] + offset[1],
                        base[2] + offset[2],
                    ];
                    let p = const_rows(&pos, n, dtype, dev)?;
                    (local, p)
                }
            };
            for m in &self.markers {
                out.push((&p + matvec_const(&g, m)?)?);
            }
            globals.push(g);
            positions.push(p);
        }
        Ok(Tensor::stack(&out, 1)?)
    }
}

fn const_rows(v: &[f64; 3], n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::new(v, dev)?
        .to_dtype(dtype)?
        .reshape((1, 3))?
        .broadcast_as((n, 3))?
        .contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::{rot6d_from_axis_angle, rot6d_to_matrix as rot6d_plain};
    use crate::motion::{fk_positions, BodyPose, MotionSequence};
    use rand::{Rng, SeedableRng};

    #[test]
    fn gram_schmidt_matches_plain_route() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = Tensor::from_vec(raw.clone(), (10, 6), &Device::Cpu).unwrap();
        let m = rot6d_to_matrix(&t).unwrap().to_vec3::<f64>().unwrap();
        for (i, r6) in raw.chunks(6).enumerate() {
            let r = rot6d_plain(r6).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    assert!((m[i][a][b] - r[(a, b)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn part_markers_match_full_fk() {
        let sk = ProxySkeleton::neutral();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for part in [Part::Lower, Part::Upper, Part::Hands] {
            let rest = MotionSequence::rest(1, 30);
            let stream: Vec<f32> = (0..part.joints())
                .flat_map(|_| {
                    let aa = [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ];
                    rot6d_from_axis_angle(aa).map(|x| x as f32)
                })
                .collect();
            let pick = |p: Part| -> Vec<f32> {
                if p == part {
                    stream.clone()
                } else {
                    rest.part(p).row(0).to_vec()
                }
            };
            let (h, u, l) = (pick(Part::Hands), pick(Part::Upper), pick(Part::Lower));
            let full = fk_positions(
                &BodyPose {
                    hands: &h,
                    upper: &u,
                    lower: &l,
                },
                &sk,
                [0.0; 3],
            )
            .unwrap();

            let kin = PartKinematics::new(&sk, part).unwrap().unwrap();
            let r6: Vec<f64> = stream.iter().map(|&x| x as f64).collect();
            let rot = rot6d_to_matrix(
                &Tensor::from_vec(r6, (1, part.joints(), 6), &Device::Cpu).unwrap(),
            )
            .unwrap();
            let got = kin
                .markers(&rot)
                .unwrap()
                .squeeze(0)
                .unwrap()
                .to_vec2::<f64>()
                .unwrap();
            let joints = sk.joints_of(part);
            let m = sk.marker_count();
            for (local, &j) in joints.iter().enumerate() {
                for k in 0..m {
                    for d in 0..3 {
                        assert!(
                            (got[local * m + k][d] - full[j * m + k][d]).abs() < 1e-5,
                            "{part} joint {j}"
                        );
                    }
                }
            }
        }
    }
}
