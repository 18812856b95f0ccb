//! Skeleton sequences: two-actor 3D joint trajectories, their topology, the
//! derived modalities, augmentation and a synthetic dataset generator.

mod augment;
mod io;
mod synth;
mod transform;

pub use augment::{augment, AugmentConfig};
pub use io::{load_dataset, save_dataset, DATASET_FORMAT};
pub use synth::{nearest_centroid_accuracy, split_per_class, synth_generate, SynthConfig};
pub use transform::{resize_temporal, to_bone, to_motion, Modality};

use crate::error::{Error, Result};

/// Every sequence carries exactly two actor slots.
pub const ACTORS: usize = 2;

/// A `T x 2 x J x 3` array of joint coordinates in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    frames: usize,
    joints: usize,
    data: Vec<f64>,
    pub label: Option<usize>,
    pub subject: Option<i64>,
}

impl SkeletonSequence {
    pub fn new(frames: usize, joints: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || joints == 0 {
            return Err(Error::Schema(format!(
                "sequence needs at least one frame and joint, got T={frames}, J={joints}"
            )));
        }
        if data.len() != frames * ACTORS * joints * 3 {
            return Err(Error::Schema(format!(
                "expected {} coordinates for T={frames}, J={joints}, got {}",
                frames * ACTORS * joints * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite coordinate at flat index {i}")));
        }
        Ok(Self {
            frames,
            joints,
            data,
            label: None,
            subject: None,
        })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            data: vec![0.0; frames * ACTORS * joints * 3],
            label: None,
            subject: None,
        }
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn with_subject(mut self, subject: Option<i64>) -> Self {
        self.subject = subject;
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flattened per-frame feature width, `2 * J * 3`.
    pub fn frame_width(&self) -> usize {
        ACTORS * self.joints * 3
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.frame_width();
        &self.data[t * w..(t + 1) * w]
    }

    fn offset(&self, t: usize, actor: usize, joint: usize) -> usize {
        ((t * ACTORS + actor) * self.joints + joint) * 3
    }

    pub fn joint(&self, t: usize, actor: usize, joint: usize) -> [f64; 3] {
        let o = self.offset(t, actor, joint);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_joint(&mut self, t: usize, actor: usize, joint: usize, v: [f64; 3]) {
        let o = self.offset(t, actor, joint);
        self.data[o..o + 3].copy_from_slice(&v);
    }

    /// True when the actor slot is all zeros for every frame.
    pub fn actor_absent(&self, actor: usize) -> bool {
        (0..self.frames).all(|t| {
            let o = self.offset(t, actor, 0);
            self.data[o..o + self.joints * 3].iter().all(|&v| v == 0.0)
        })
    }

    /// Same shape and metadata with new coordinates.
    pub(crate) fn with_data(&self, frames: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), frames * self.frame_width());
        Self {
            frames,
            joints: self.joints,
            data,
            label: self.label,
            subject: self.subject,
        }
    }
}

/// Parent table of a joint forest; roots point to themselves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonTopology {
    parent: Vec<usize>,
    names: Option<Vec<String>>,
}

const NTU_PARENTS: [usize; 25] = [
    1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11,
];

const NTU_NAMES: [&str; 25] = [
    "spine_base",
    "spine_mid",
    "neck",
    "head",
    "shoulder_left",
    "elbow_left",
    "wrist_left",
    "hand_left",
    "shoulder_right",
    "elbow_right",
    "wrist_right",
    "hand_right",
    "hip_left",
    "knee_left",
    "ankle_left",
    "foot_left",
    "hip_right",
    "knee_right",
    "ankle_right",
    "foot_right",
    "spine_shoulder",
    "handtip_left",
    "thumb_left",
    "handtip_right",
    "thumb_right",
];

impl SkeletonTopology {
    pub fn new(parent: Vec<usize>) -> Result<Self> {
        let n = parent.len();
        if n == 0 {
            return Err(Error::Schema("topology with zero joints".into()));
        }
        if let Some((j, &p)) = parent.iter().enumerate().find(|(_, &p)| p >= n) {
            return Err(Error::Schema(format!("joint {j} has parent {p} out of range")));
        }
        // every joint must reach a self-rooted joint within n hops
        for start in 0..n {
            let mut j = start;
            let mut hops = 0;
            while parent[j] != j {
                j = parent[j];
                hops += 1;
                if hops > n {
                    return Err(Error::Schema(format!("cycle through joint {start}")));
                }
            }
        }
        Ok(Self {
            parent,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.parent.len() {
            return Err(Error::Schema("joint name count differs from joint count".into()));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// The 25-joint Kinect v2 body tree, rooted at the shoulder-level spine joint.
    pub fn ntu25() -> Self {
        Self::new(NTU_PARENTS.to_vec())
            .and_then(|t| t.with_names(NTU_NAMES.iter().map(|s| s.to_string()).collect()))
            .expect("built-in topology is valid")
    }

    /// A single chain `0 <- 1 <- 2 ...`.
    pub fn chain(joints: usize) -> Self {
        let parent = (0..joints).map(|j| j.saturating_sub(1)).collect();
        Self::new(parent).expect("chain topology is valid")
    }

    /// The body tree for 25 joints, a chain otherwise.
    pub fn default_for(joints: usize) -> Self {
        if joints == 25 {
            Self::ntu25()
        } else {
            Self::chain(joints)
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parent[joint]
    }

    pub fn name(&self, joint: usize) -> Option<&str> {
        self.names.as_ref().map(|n| n[joint].as_str())
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.parent.len()).filter(|&j| self.parent[j] == j).collect()
    }
}
