//! Synthetic labelled skeleton clips.
//!
//! Each class owns a static pose offset and, per joint, a sinusoidal
//! trajectory (frequency, phase, amplitude, direction). A sample draws one
//! global phase shift and adds isotropic Gaussian coordinate noise. The
//! second actor slot is left empty.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SkeletonSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub joints: usize,
    /// Std-dev of the coordinate noise, meters.
    pub noise: f64,
    pub seed: u64,
}

/// Standing pose for the 25-joint body tree, meters (x right, y up, z depth).
const NTU_REST: [[f64; 3]; 25] = [
    [0.0, 1.0, 0.0],
    [0.0, 1.3, 0.0],
    [0.0, 1.6, 0.0],
    [0.0, 1.75, 0.0],
    [-0.18, 1.52, 0.0],
    [-0.2, 1.25, 0.0],
    [-0.22, 1.0, 0.0],
    [-0.22, 0.92, 0.0],
    [0.18, 1.52, 0.0],
    [0.2, 1.25, 0.0],
    [0.22, 1.0, 0.0],
    [0.22, 0.92, 0.0],
    [-0.1, 0.98, 0.0],
    [-0.1, 0.55, 0.0],
    [-0.1, 0.15, 0.0],
    [-0.1, 0.1, 0.1],
    [0.1, 0.98, 0.0],
    [0.1, 0.55, 0.0],
    [0.1, 0.15, 0.0],
    [0.1, 0.1, 0.1],
    [0.0, 1.52, 0.0],
    [-0.22, 0.85, 0.0],
    [-0.19, 0.9, 0.03],
    [0.22, 0.85, 0.0],
    [0.19, 0.9, 0.03],
];

fn rest_pose(joints: usize) -> Vec<[f64; 3]> {
    if joints == 25 {
        NTU_REST.to_vec()
    } else {
        // a vertical chain, matching the fallback chain topology
        (0..joints).map(|j| [0.0, 1.0 + 0.1 * j as f64, 0.0]).collect()
    }
}

struct JointPattern {
    cycles: f64,
    phase: f64,
    amplitude: f64,
    direction: [f64; 3],
}

struct ClassPattern {
    offset: Vec<[f64; 3]>,
    joints: Vec<JointPattern>,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn class_pattern(rng: &mut ChaCha8Rng, joints: usize) -> ClassPattern {
    let off = Normal::new(0.0, 0.08).unwrap();
    let offset = (0..joints)
        .map(|_| [off.sample(rng), off.sample(rng), off.sample(rng)])
        .collect();
    let joints = (0..joints)
        .map(|_| JointPattern {
            cycles: rng.random_range(1..=3) as f64,
            phase: rng.random_range(0.0..TAU),
            amplitude: rng.random_range(0.05..0.2),
            direction: unit_vector(rng),
        })
        .collect();
    ClassPattern { offset, joints }
}

/// Generates `classes * per_class` clips, interleaved by class
/// (`label = index % classes`).
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SkeletonSequence>> {
    if cfg.classes < 1 || cfg.per_class < 1 || cfg.frames < 1 || cfg.joints < 1 {
        return Err(Error::Parameter("synthetic counts must all be >= 1".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Parameter(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    let mut class_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patterns: Vec<ClassPattern> = (0..cfg.classes)
        .map(|_| class_pattern(&mut class_rng, cfg.joints))
        .collect();
    let rest = rest_pose(cfg.joints);
    let noise = Normal::new(0.0, cfg.noise).unwrap();

    let total = cfg.classes * cfg.per_class;
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let label = idx % cfg.classes;
        let pat = &patterns[label];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(idx as u64 + 1);
        let shift = rng.random_range(0.0..TAU);
        let mut seq = SkeletonSequence::zeros(cfg.frames, cfg.joints);
        for t in 0..cfg.frames {
            let s = t as f64 / cfg.frames as f64;
            for j in 0..cfg.joints {
                let jp = &pat.joints[j];
                let wave = jp.amplitude * (TAU * jp.cycles * s + jp.phase + shift).sin();
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = rest[j][k] + pat.offset[j][k] + wave * jp.direction[k];
                    if cfg.noise > 0.0 {
                        p[k] += noise.sample(&mut rng);
                    }
                }
                seq.set_joint(t, 0, j, p);
            }
        }
        out.push(
            seq.with_label(Some(label))
                .with_subject(Some((idx / cfg.classes) as i64 % 10)),
        );
    }
    Ok(out)
}

/// Splits labelled clips so that the last `test_per_class` occurrences of
/// every class go to the test side. Order within each side is preserved.
pub fn split_per_class(
    seqs: Vec<SkeletonSequence>,
    test_per_class: usize,
) -> Result<(Vec<SkeletonSequence>, Vec<SkeletonSequence>)> {
    let mut totals = std::collections::BTreeMap::new();
    for s in &seqs {
        let l = s
            .label
            .ok_or_else(|| Error::Usage("split needs labelled sequences".into()))?;
        *totals.entry(l).or_insert(0usize) += 1;
    }
    let mut seen = std::collections::BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in seqs {
        let l = s.label.unwrap();
        let n = seen.entry(l).or_insert(0usize);
        *n += 1;
        if *n + test_per_class > totals[&l] {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, test))
}

/// Accuracy of a nearest-class-mean classifier on raw coordinates. Used to
/// confirm that a generated dataset carries label information.
pub fn nearest_centroid_accuracy(train: &[SkeletonSequence], test: &[SkeletonSequence]) -> Result<f64> {
    let width = train
        .first()
        .map(|s| s.data().len())
        .ok_or_else(|| Error::Usage("empty training set".into()))?;
    let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for s in train {
        let l = s.label.ok_or_else(|| Error::Usage("unlabelled training clip".into()))?;
        if s.data().len() != width {
            return Err(Error::Schema("clips differ in shape".into()));
        }
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; width], 0));
        for (a, &b) in e.0.iter_mut().zip(s.data()) {
            *a += b;
        }
        e.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(l, (v, n))| (l, v.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let mut correct = 0;
    for s in test {
        let best = centroids
            .iter()
            .map(|(l, c)| {
                let d: f64 = c.iter().zip(s.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, *l)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, l)| l);
        if best.is_some() && best == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len().max(1) as f64)
}
