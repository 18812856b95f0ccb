use std::fmt;
use std::str::FromStr;

use super::{SkeletonSequence, SkeletonTopology, ACTORS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Joint,
    Motion,
    Bone,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Joint, Modality::Motion, Modality::Bone];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Motion => "motion",
            Modality::Bone => "bone",
        }
    }

    /// Derives this modality from raw joint coordinates.
    pub fn derive(self, seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<SkeletonSequence> {
        match self {
            Modality::Joint => Ok(seq.clone()),
            Modality::Motion => to_motion(seq),
            Modality::Bone => to_bone(seq, topo),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "joint" => Ok(Modality::Joint),
            "motion" => Ok(Modality::Motion),
            "bone" => Ok(Modality::Bone),
            other => Err(Error::Parameter(format!("unknown modality '{other}'"))),
        }
    }
}

/// Forward temporal difference; the last frame is zero.
pub fn to_motion(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let t = seq.frames();
    if t < 2 {
        return Err(Error::DegenerateInput(format!(
            "motion needs at least 2 frames, got {t}"
        )));
    }
    let w = seq.frame_width();
    let src = seq.data();
    let mut out = vec![0.0; src.len()];
    for f in 0..t - 1 {
        for i in 0..w {
            out[f * w + i] = src[(f + 1) * w + i] - src[f * w + i];
        }
    }
    Ok(seq.with_data(t, out))
}

/// Child-minus-parent offsets; roots map to zero.
pub fn to_bone(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<SkeletonSequence> {
    if topo.joint_count() != seq.joints() {
        return Err(Error::Schema(format!(
            "topology has {} joints, sequence has {}",
            topo.joint_count(),
            seq.joints()
        )));
    }
    let mut out = SkeletonSequence::zeros(seq.frames(), seq.joints());
    for t in 0..seq.frames() {
        for a in 0..ACTORS {
            for j in 0..seq.joints() {
                let p = topo.parent(j);
                let c = seq.joint(t, a, j);
                let pv = seq.joint(t, a, p);
                out.set_joint(t, a, j, [c[0] - pv[0], c[1] - pv[1], c[2] - pv[2]]);
            }
        }
    }
    Ok(seq.with_data(seq.frames(), out.data().to_vec()))
}

/// Linear interpolation along time to exactly `target` frames. The first and
/// last frames are reproduced exactly.
pub fn resize_temporal(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    if target < 1 {
        return Err(Error::Parameter("target frame count must be >= 1".into()));
    }
    let t = seq.frames();
    if t == target {
        return Ok(seq.clone());
    }
    let w = seq.frame_width();
    let src = seq.data();
    let mut out = vec![0.0; target * w];
    for i in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            (i * (t - 1)) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t - 1);
        let frac = pos - lo as f64;
        let dst = &mut out[i * w..(i + 1) * w];
        if frac == 0.0 || lo + 1 >= t {
            dst.copy_from_slice(&src[lo * w..(lo + 1) * w]);
        } else {
            let a = &src[lo * w..(lo + 1) * w];
            let b = &src[(lo + 1) * w..(lo + 2) * w];
            for k in 0..w {
                dst[k] = a[k] + frac * (b[k] - a[k]);
            }
        }
    }
    Ok(seq.with_data(target, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, j: usize) -> SkeletonSequence {
        let n = t * ACTORS * j * 3;
        SkeletonSequence::new(t, j, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn motion_of_constant_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_seq(&mut rng, 1, 5);
        let data: Vec<f64> = (0..6).flat_map(|_| frame.data().to_vec()).collect();
        let seq = SkeletonSequence::new(6, 5, data).unwrap();
        assert!(to_motion(&seq).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn motion_of_linear_trajectory_is_constant() {
        let v = [0.5, -1.0, 2.0];
        let mut seq = SkeletonSequence::zeros(5, 2);
        for t in 0..5 {
            for j in 0..2 {
                seq.set_joint(t, 0, j, [t as f64 * v[0], t as f64 * v[1], t as f64 * v[2]]);
            }
        }
        let m = to_motion(&seq).unwrap();
        for t in 0..4 {
            assert_eq!(m.joint(t, 0, 1), v);
            assert_eq!(m.joint(t, 1, 1), [0.0; 3]);
        }
        assert_eq!(m.joint(4, 0, 0), [0.0; 3]);
        assert_eq!(m.frames(), 5);
    }

    #[test]
    fn motion_matches_frame_subtraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = random_seq(&mut rng, 7, 4);
        let m = to_motion(&seq).unwrap();
        for t in 0..6 {
            for a in 0..ACTORS {
                for j in 0..4 {
                    let (x0, x1) = (seq.joint(t, a, j), seq.joint(t + 1, a, j));
                    assert_eq!(m.joint(t, a, j), [x1[0] - x0[0], x1[1] - x0[1], x1[2] - x0[2]]);
                }
            }
        }
        assert!(matches!(
            to_motion(&random_seq(&mut rng, 1, 4)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn bone_examples() {
        let topo = SkeletonTopology::chain(2);
        let d = [0.1, 0.2, -0.3];
        let mut seq = SkeletonSequence::zeros(3, 2);
        for t in 0..3 {
            let base = [t as f64, 1.0, 2.0 * t as f64];
            seq.set_joint(t, 0, 0, base);
            seq.set_joint(t, 0, 1, [base[0] + d[0], base[1] + d[1], base[2] + d[2]]);
        }
        let b = to_bone(&seq, &topo).unwrap();
        for t in 0..3 {
            assert_eq!(b.joint(t, 0, 0), [0.0; 3]);
            let got = b.joint(t, 0, 1);
            for k in 0..3 {
                assert!((got[k] - d[k]).abs() < 1e-12);
            }
        }
        assert!(matches!(
            to_bone(&seq, &SkeletonTopology::chain(3)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn bone_matches_parent_subtraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let topo = SkeletonTopology::ntu25();
        let seq = random_seq(&mut rng, 4, 25);
        let b = to_bone(&seq, &topo).unwrap();
        for t in 0..4 {
            for a in 0..ACTORS {
                for j in 0..25 {
                    let (c, p) = (seq.joint(t, a, j), seq.joint(t, a, topo.parent(j)));
                    assert_eq!(b.joint(t, a, j), [c[0] - p[0], c[1] - p[1], c[2] - p[2]]);
                }
                assert_eq!(b.joint(t, a, 20), [0.0; 3]);
            }
        }
    }

    #[test]
    fn resize_identity_constant_and_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = random_seq(&mut rng, 9, 3);
        assert_eq!(resize_temporal(&seq, 9).unwrap(), seq);
        let up = resize_temporal(&seq, 64).unwrap();
        assert_eq!(up.frames(), 64);
        assert_eq!(up.frame(0), seq.frame(0));
        assert_eq!(up.frame(63), seq.frame(8));
        let down = resize_temporal(&seq, 4).unwrap();
        assert_eq!(down.frame(3), seq.frame(8));

        let c = SkeletonSequence::new(3, 1, vec![0.25; 18]).unwrap();
        let r = resize_temporal(&c, 10).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(resize_temporal(&c, 0), Err(Error::Parameter(_))));
        assert_eq!(resize_temporal(&c, 1).unwrap().frames(), 1);
    }

    #[test]
    fn resize_ramp_round_trip() {
        // joint coordinate = t / (T-1) is a ramp from 0 to 1 at any length
        let ramp = |t_len: usize| {
            let mut s = SkeletonSequence::zeros(t_len, 1);
            for t in 0..t_len {
                let v = t as f64 / (t_len - 1) as f64;
                s.set_joint(t, 0, 0, [v, 2.0 * v, -v]);
            }
            s
        };
        let back = resize_temporal(&resize_temporal(&ramp(10), 64).unwrap(), 10).unwrap();
        let expect = ramp(10);
        for (a, b) in back.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn modality_parse() {
        assert_eq!("motion".parse::<Modality>().unwrap(), Modality::Motion);
        assert!("rgb".parse::<Modality>().is_err());
        assert_eq!(Modality::Bone.to_string(), "bone");
    }
}
