use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{resize_temporal, SkeletonSequence, ACTORS};
use crate::error::{Error, Result};

/// Random temporal crop (always), then rotation, shear and jitter, each
/// applied with its own probability.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Output length after crop-resize.
    pub target_frames: usize,
    /// Cropped fraction of frames is uniform in `[crop_min, crop_max]`.
    pub crop_min: f64,
    pub crop_max: f64,
    pub rotate_prob: f64,
    /// Bound on each Euler angle, in degrees.
    pub max_rotation_deg: f64,
    pub shear_prob: f64,
    pub max_shear: f64,
    pub jitter_prob: f64,
    /// Gaussian coordinate noise, meters.
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_frames: 64,
            crop_min: 0.5,
            crop_max: 1.0,
            rotate_prob: 0.5,
            max_rotation_deg: 17.0,
            shear_prob: 0.5,
            max_shear: 0.3,
            jitter_prob: 0.5,
            jitter_std: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Crop-resize over the full clip and nothing else.
    pub fn identity(target_frames: usize) -> Self {
        Self {
            target_frames,
            crop_min: 1.0,
            crop_max: 1.0,
            rotate_prob: 0.0,
            shear_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(format!("augmentation: {m}")));
        if self.target_frames < 1 {
            return bad("target_frames must be >= 1");
        }
        if !(0.0 < self.crop_min && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return bad("need 0 < crop_min <= crop_max <= 1");
        }
        for (name, p) in [
            ("rotate_prob", self.rotate_prob),
            ("shear_prob", self.shear_prob),
            ("jitter_prob", self.jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_shear >= 0.0 && self.jitter_std >= 0.0) {
            return bad("rotation, shear and jitter magnitudes must be >= 0");
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rotation(ax: f64, ay: f64, az: f64) -> Mat3 {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn apply_linear(seq: &mut SkeletonSequence, m: &Mat3) {
    for p in seq.data_mut().chunks_exact_mut(3) {
        let v = [p[0], p[1], p[2]];
        for i in 0..3 {
            p[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
        }
    }
}

/// Deterministic augmentation of one clip: the output depends only on
/// `(seq, seed, cfg)`. Absent actors stay all-zero.
pub fn augment(seq: &SkeletonSequence, seed: u64, cfg: &AugmentConfig) -> Result<SkeletonSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = seq.frames();

    let frac = if cfg.crop_max > cfg.crop_min {
        rng.random_range(cfg.crop_min..=cfg.crop_max)
    } else {
        cfg.crop_min
    };
    let len = ((t as f64 * frac).round() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - len);
    let w = seq.frame_width();
    let cropped = seq.with_data(len, seq.data()[start * w..(start + len) * w].to_vec());
    let mut out = resize_temporal(&cropped, cfg.target_frames)?;

    let absent: Vec<bool> = (0..ACTORS).map(|a| seq.actor_absent(a)).collect();

    if rng.random_bool(cfg.rotate_prob) {
        let lim = cfg.max_rotation_deg.to_radians();
        let mut angle = || {
            if lim > 0.0 {
                rng.random_range(-lim..=lim)
            } else {
                0.0
            }
        };
        let r = rotation(angle(), angle(), angle());
        apply_linear(&mut out, &r);
    }

    if rng.random_bool(cfg.shear_prob) {
        let lim = cfg.max_shear;
        let mut s = || if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
        let m = [[1.0, s(), s()], [s(), 1.0, s()], [s(), s(), 1.0]];
        apply_linear(&mut out, &m);
    }

    if rng.random_bool(cfg.jitter_prob) && cfg.jitter_std > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_std).expect("jitter std is finite and >= 0");
        let joints = out.joints();
        for f in 0..out.frames() {
            for (a, &skip) in absent.iter().enumerate() {
                if skip {
                    continue;
                }
                for j in 0..joints {
                    let p = out.joint(f, a, j);
                    let n = [
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    ];
                    out.set_joint(f, a, j, [p[0] + n[0], p[1] + n[1], p[2] + n[2]]);
                }
            }
        }
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_seq() -> SkeletonSequence {
        let (t, j) = (20, 5);
        let mut s = SkeletonSequence::zeros(t, j);
        for f in 0..t {
            for k in 0..j {
                let x = f as f64 * 0.1 + k as f64;
                s.set_joint(f, 0, k, [x.sin(), x.cos(), 0.3 * x]);
            }
        }
        s.with_label(Some(2))
    }

    #[test]
    fn identity_config_only_resizes() {
        let s = sample_seq();
        let out = augment(&s, 7, &AugmentConfig::identity(64)).unwrap();
        assert_eq!(out, resize_temporal(&s, 64).unwrap());
        let same = augment(&s, 7, &AugmentConfig::identity(20)).unwrap();
        assert_eq!(same, s);
    }

    #[test]
    fn same_seed_same_output() {
        let s = sample_seq();
        let cfg = AugmentConfig {
            rotate_prob: 1.0,
            shear_prob: 1.0,
            jitter_prob: 1.0,
            ..AugmentConfig::default()
        };
        let a = augment(&s, 42, &cfg).unwrap();
        let b = augment(&s, 42, &cfg).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, augment(&s, 43, &cfg).unwrap());
        assert_eq!(a.frames(), 64);
        assert_eq!(a.label, Some(2));
        assert!(a.actor_absent(1), "absent actor must remain zero");
    }

    #[test]
    fn rotation_preserves_joint_distances() {
        let s = sample_seq();
        let cfg = AugmentConfig {
            target_frames: 20,
            rotate_prob: 1.0,
            ..AugmentConfig::identity(20)
        };
        for seed in 0..5 {
            let r = augment(&s, seed, &cfg).unwrap();
            assert_ne!(r, s);
            for f in 0..20 {
                for a in 0..5 {
                    for b in 0..5 {
                        let d = |q: &SkeletonSequence| {
                            let (p1, p2) = (q.joint(f, 0, a), q.joint(f, 0, b));
                            ((p1[0] - p2[0]).powi(2) + (p1[1] - p2[1]).powi(2) + (p1[2] - p2[2]).powi(2))
                                .sqrt()
                        };
                        assert!((d(&r) - d(&s)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_angles_are_bounded() {
        let r = rotation(0.0, 0.0, 0.0);
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let r = rotation(0.1, -0.2, 0.3);
        // orthonormal: R R^T = I
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let p = mat_mul(&r, &rt);
        for i in 0..3 {
            for j in 0..3 {
                assert!((p[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let s = sample_seq();
        let cfg = AugmentConfig {
            crop_min: 0.9,
            crop_max: 0.5,
            ..AugmentConfig::default()
        };
        assert!(matches!(augment(&s, 0, &cfg), Err(Error::Parameter(_))));
        let cfg = AugmentConfig {
            jitter_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(augment(&s, 0, &cfg).is_err());
    }

    #[test]
    fn crop_keeps_at_least_half() {
        let s = sample_seq();
        let cfg = AugmentConfig {
            target_frames: 20,
            crop_min: 0.5,
            crop_max: 0.5,
            ..AugmentConfig::identity(20)
        };
        let out = augment(&s, 3, &cfg).unwrap();
        // a 10-frame window resized to 20 frames covers less of the clip, so
        // its first and last frames differ from the originals unless start = 0
        assert_eq!(out.frames(), 20);
        let first = out.frame(0);
        assert!((0..=10).any(|st| s.frame(st) == first));
    }
}
