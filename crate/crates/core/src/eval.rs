//! Frozen-feature evaluation: 1-nearest-neighbor, linear probe, score
//! ensembling and feature files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::CheckpointFile;
use crate::encoder::{time_major_batch, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::{sgd_update, zero_velocity, Sgd};
use crate::skeleton::{resize_temporal, Modality, SkeletonSequence, SkeletonTopology};
use crate::tensor::{argmax, matmul_nt, Tensor};

pub const FEATURE_FORMAT: &str = "cmd-feat";
const FEATURE_VERSION: u32 = 1;

/// Unit-norm embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `M x d`.
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
    /// Where the features came from, e.g. a checkpoint hash.
    pub source: String,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        if self.features.shape().len() == 2 {
            self.features.cols()
        } else {
            0
        }
    }

    fn require_labels(&self, what: &str) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Usage(format!("{what}: sample {i} has no label"))))
            .collect()
    }
}

/// Eval-mode embeddings of every clip: resized to `frames`, converted to
/// `modality`, encoded in fixed-size chunks.
pub fn embed_dataset(
    encoder: &EncoderParams<f64>,
    dataset: &[SkeletonSequence],
    modality: Modality,
    frames: usize,
    source: &str,
) -> Result<FeatureSet> {
    const CHUNK: usize = 128;
    let d = encoder.config().embedding_dim;
    let mut data = Vec::with_capacity(dataset.len() * d);
    let topo = dataset
        .first()
        .map(|s| SkeletonTopology::default_for(s.joints()));
    for chunk in dataset.chunks(CHUNK) {
        let topo = topo.as_ref().expect("non-empty dataset");
        let views = chunk
            .iter()
            .map(|s| modality.derive(&resize_temporal(s, frames)?, topo))
            .collect::<Result<Vec<_>>>()?;
        let (x, steps) = time_major_batch::<f64>(&views.iter().collect::<Vec<_>>())?;
        data.extend_from_slice(encoder.embed(&x, steps)?.data());
    }
    Ok(FeatureSet {
        features: Tensor::new(vec![dataset.len(), d], data)?,
        labels: dataset.iter().map(|s| s.label).collect(),
        source: source.to_string(),
    })
}

/// Embeds `dataset` with the query encoder of `modality` stored in a
/// checkpoint. The checkpoint hash becomes the feature source.
pub fn extract_features(
    ckpt: &CheckpointFile,
    dataset: &[SkeletonSequence],
    modality: Modality,
) -> Result<FeatureSet> {
    let encoder = ckpt.query_encoder(modality)?;
    let joints = ckpt.joints()?;
    if let Some(s) = dataset.iter().find(|s| s.joints() != joints) {
        return Err(Error::Schema(format!(
            "dataset has {} joints, checkpoint expects {joints}",
            s.joints()
        )));
    }
    embed_dataset(&encoder, dataset, modality, ckpt.config.augment.target_frames, &ckpt.hash)
}

fn check_pair(train: &FeatureSet, test: &FeatureSet) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Usage("evaluation needs non-empty train and test sets".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Schema(format!(
            "feature dimensions differ: train {}, test {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok(())
}

/// Label of the most similar training row for every test row; ties go to the
/// smallest training index.
pub fn knn_predict(train: &FeatureSet, test: &FeatureSet) -> Result<Vec<usize>> {
    check_pair(train, test)?;
    let labels = train.require_labels("knn")?;
    let sims = matmul_nt(&test.features, &train.features)?;
    Ok((0..test.len())
        .map(|i| labels[argmax(sims.row(i)).expect("non-empty train set")])
        .collect())
}

/// 1-nearest-neighbor top-1 accuracy in cosine space.
pub fn knn_eval(train: &FeatureSet, test: &FeatureSet) -> Result<f64> {
    let pred = knn_predict(train, test)?;
    let truth = test.require_labels("knn")?;
    Ok(accuracy(&pred, &truth))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 0.1,
            milestones: vec![50, 70],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub top1: f64,
    /// Test logits, `n_test x classes`.
    pub scores: Tensor,
}

/// Softmax-regression classifier trained on frozen training features and
/// scored on the test features.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig) -> Result<ProbeResult> {
    check_pair(train, test)?;
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("probe batch size must be >= 1".into()));
    }
    let y_train = train.require_labels("linear probe")?;
    let y_test = test.require_labels("linear probe")?;
    let classes = y_train.iter().chain(&y_test).max().map_or(1, |&m| m + 1);
    let d = train.dim();
    let mut params = vec![Tensor::zeros(&[d, classes]), Tensor::zeros(&[classes])];
    let mut velocity = zero_velocity(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let opt = Sgd {
            lr: cfg.lr_at(epoch),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        for idx in order.chunks(cfg.batch_size) {
            let rows: Vec<f64> = idx.iter().flat_map(|&i| train.features.row(i).to_vec()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| y_train[i]).collect();
            let mut tape = Tape::new();
            let w = tape.param(params[0].clone());
            let b = tape.param(params[1].clone());
            let x = tape.constant(Tensor::matrix(idx.len(), d, rows));
            let logits = tape.matmul(x, w)?;
            let logits = tape.add_bias(logits, b)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let g = tape.backward(loss)?;
            let grads = [g.wrt(&tape, w), g.wrt(&tape, b)];
            sgd_update(&mut params, &grads, &mut velocity, &opt)?;
        }
    }
    let mut scores = crate::tensor::matmul(&test.features, &params[0])?;
    for r in 0..scores.rows() {
        for (s, &b) in scores.row_mut(r).iter_mut().zip(params[1].data()) {
            *s += b;
        }
    }
    let pred: Vec<usize> = (0..scores.rows())
        .map(|r| argmax(scores.row(r)).expect("at least one class"))
        .collect();
    Ok(ProbeResult {
        top1: accuracy(&pred, &y_test),
        scores,
    })
}

/// Sums per-modality score matrices and takes the row-wise argmax.
pub fn ensemble_scores(scores: &[Tensor]) -> Result<Vec<usize>> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Usage("ensemble needs at least one score matrix".into()))?;
    if let Some(s) = scores.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::Usage(format!(
            "score matrices are not aligned: {:?} vs {:?}",
            first.shape(),
            s.shape()
        )));
    }
    let mut sum = first.clone();
    for s in &scores[1..] {
        for (a, &b) in sum.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
    }
    Ok((0..sum.rows())
        .map(|r| argmax(sum.row(r)).expect("at least one class"))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    format: String,
    version: u32,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    label: Option<usize>,
    vec: Vec<f64>,
}

pub fn save_features(path: impl AsRef<Path>, fs: &FeatureSet) -> Result<()> {
    let path = path.as_ref();
    let err = |e: std::io::Error| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    let header = FeatureHeader {
        format: FEATURE_FORMAT.into(),
        version: FEATURE_VERSION,
        dim: fs.dim(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| err(e.into()))?;
    w.write_all(b"\n").map_err(err)?;
    for (i, label) in fs.labels.iter().enumerate() {
        let rec = FeatureRecord {
            label: *label,
            vec: fs.features.row(i).to_vec(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| err(e.into()))?;
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut dim = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |e: serde_json::Error| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        };
        match dim {
            None => {
                let h: FeatureHeader = serde_json::from_str(&line).map_err(parse)?;
                if h.format != FEATURE_FORMAT || h.version != FEATURE_VERSION {
                    return Err(Error::Schema(format!("unsupported feature file {} v{}", h.format, h.version)));
                }
                dim = Some(h.dim);
            }
            Some(d) => {
                let r: FeatureRecord = serde_json::from_str(&line).map_err(parse)?;
                if r.vec.len() != d {
                    return Err(Error::Schema(format!(
                        "line {}: vector of length {}, header says {d}",
                        i + 1,
                        r.vec.len()
                    )));
                }
                data.extend(r.vec);
                labels.push(r.label);
            }
        }
    }
    let d = dim.unwrap_or(0);
    Ok(FeatureSet {
        features: Tensor::new(vec![labels.len(), d], data)?,
        labels,
        source: path.display().to_string(),
    })
}
