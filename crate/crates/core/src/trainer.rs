//! Pre-training loop.
//!
//! Every random draw is a function of `(seed, epoch, sample index, ...)`, so
//! the only state a resumed run needs is what the checkpoint stores:
//! encoders, banks, optimizer velocities and the epoch/step counters.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::config::TrainConfig;
use crate::distill::{cmd_pair_loss, total_loss, ModalityView};
use crate::encoder::{time_major_batch, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::moco::{info_nce, EncoderPair, MemoryBank};
use crate::optim::{sgd_update, zero_velocity, Sgd};
use crate::skeleton::{augment, Modality, SkeletonSequence, SkeletonTopology};
use crate::tensor::{Real, Tensor};
use crate::Tape;

/// splitmix64 finalizer folded over `parts`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn modality_tag(m: Modality) -> u64 {
    match m {
        Modality::Joint => 1,
        Modality::Motion => 2,
        Modality::Bone => 3,
    }
}

/// Encoders, bank and optimizer state of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityState<F: Real> {
    pub modality: Modality,
    pub pair: EncoderPair<F>,
    pub bank: MemoryBank<F>,
    pub velocity: Vec<Tensor<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F: Real> {
    pub config: TrainConfig,
    pub joints: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches, warm-up included.
    pub step: u64,
    pub modalities: Vec<ModalityState<F>>,
}

impl<F: Real> TrainState<F> {
    pub fn init(config: &TrainConfig, joints: usize) -> Result<Self> {
        config.validate()?;
        if joints == 0 {
            return Err(Error::Parameter("joint count must be >= 1".into()));
        }
        let enc_cfg = config.encoder_config(joints);
        let modalities = config
            .modalities
            .iter()
            .map(|&m| {
                let query = EncoderParams::init(&enc_cfg, mix_seed(&[config.seed, 0x1417, modality_tag(m)]))?;
                let velocity = zero_velocity(query.params());
                let mut bank = MemoryBank::new(config.bank_size, config.embedding_dim)?;
                if config.debug_provenance {
                    bank = bank.with_provenance();
                }
                Ok(ModalityState {
                    modality: m,
                    pair: EncoderPair::new(query, config.alpha)?,
                    bank,
                    velocity,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            joints,
            epoch: 0,
            step: 0,
            modalities,
        })
    }

    pub fn modality(&self, m: Modality) -> Option<&ModalityState<F>> {
        self.modalities.iter().find(|s| s.modality == m)
    }
}

/// Augmented query and key views of one batch in one modality.
#[derive(Clone, Debug)]
pub struct ModalityBatch<F: Real> {
    pub modality: Modality,
    pub x_q: Tensor<F>,
    pub x_k: Tensor<F>,
    pub steps: usize,
    pub sources: Vec<usize>,
}

/// Builds the per-modality views of `indices`. Modalities are derived after
/// augmentation; with `shared_aug_seed` every modality of a sample uses the
/// same augmentation draw.
pub fn prepare_batch<F: Real>(
    dataset: &[SkeletonSequence],
    indices: &[usize],
    epoch: usize,
    config: &TrainConfig,
    topo: &SkeletonTopology,
) -> Result<Vec<ModalityBatch<F>>> {
    config
        .modalities
        .iter()
        .map(|&m| {
            let tag = if config.shared_aug_seed { 0 } else { modality_tag(m) };
            let mut views = [Vec::with_capacity(indices.len()), Vec::with_capacity(indices.len())];
            for &i in indices {
                let seq = dataset
                    .get(i)
                    .ok_or_else(|| Error::Usage(format!("sample index {i} out of range")))?;
                for (v, out) in views.iter_mut().enumerate() {
                    let seed = mix_seed(&[config.seed, epoch as u64, i as u64, v as u64, tag]);
                    let aug = augment(seq, seed, &config.augment)?;
                    out.push(m.derive(&aug, topo)?);
                }
            }
            let [q, k] = views;
            let (x_q, steps) = time_major_batch(&q.iter().collect::<Vec<_>>())?;
            let (x_k, _) = time_major_batch(&k.iter().collect::<Vec<_>>())?;
            Ok(ModalityBatch {
                modality: m,
                x_q,
                x_k,
                steps,
                sources: indices.to_vec(),
            })
        })
        .collect()
}

/// Losses of one step. `None` marks a term that was inactive.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub total: Option<f64>,
    /// One per modality, in config order.
    pub scl: Vec<Option<f64>>,
    /// One per modality pair, in config order.
    pub cmd: Vec<Option<f64>>,
}

/// One optimization step: key embeddings, SCL and (once every bank is full)
/// CMD losses, SGD on the query encoders, momentum update of the key
/// encoders, then enqueue. While the banks are still empty the step only
/// fills them.
pub fn train_step<F: Real>(
    state: &mut TrainState<F>,
    batches: &[ModalityBatch<F>],
    lr: f64,
) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    if batches.len() != state.modalities.len()
        || batches.iter().zip(&state.modalities).any(|(b, s)| b.modality != s.modality)
    {
        return Err(Error::Usage("one batch per configured modality is required".into()));
    }
    if batches.iter().any(|b| b.sources != batches[0].sources) {
        return Err(Error::Usage("modality batches are not built from the same samples".into()));
    }
    let pairs = cfg.cmd_config().pairs;

    let mut z_k = Vec::with_capacity(batches.len());
    for (b, s) in batches.iter().zip(state.modalities.iter_mut()) {
        z_k.push(s.pair.key.encode(&b.x_k, b.steps, Mode::Train)?);
    }

    let scl_active = state.modalities.iter().all(|s| s.bank.filled() > 0);
    let mut metrics = StepMetrics {
        total: None,
        scl: vec![None; batches.len()],
        cmd: vec![None; pairs.len()],
    };

    if scl_active {
        let cmd_active = state.modalities.iter().all(|s| s.bank.is_full()) && !pairs.is_empty();
        let mut tape = Tape::<F>::new();
        let mut vars = Vec::new();
        let mut views = Vec::new();
        let mut scl = Vec::new();
        let mut stats = Vec::new();
        for ((b, s), zk) in batches.iter().zip(&state.modalities).zip(&z_k) {
            let v = s.pair.query.register(&mut tape, true);
            let x = tape.constant(b.x_q.clone());
            let (zq, st) = s.pair.query.forward(&mut tape, &v, x, b.steps, Mode::Train)?;
            let zk = tape.constant(zk.clone());
            scl.push(info_nce(&mut tape, zq, zk, &s.bank, cfg.tau_c)?);
            views.push(ModalityView {
                z_q: zq,
                z_k: zk,
                bank: &s.bank,
            });
            vars.push(v);
            stats.push(st);
        }
        let mut cmd = Vec::new();
        if cmd_active {
            let cmd_cfg = cfg.cmd_config();
            let pos = |m: Modality| cfg.modalities.iter().position(|&x| x == m).expect("pair modality is configured");
            for &(a, b) in &pairs {
                cmd.push(cmd_pair_loss(&mut tape, &views[pos(a)], &views[pos(b)], &cmd_cfg)?);
            }
        }
        let total = total_loss(&mut tape, &scl, &cmd, cfg.cmd_weight)?;
        let grads = tape.backward(total)?;

        metrics.total = Some(tape.value(total).item().as_f64());
        for (m, &v) in metrics.scl.iter_mut().zip(&scl) {
            *m = Some(tape.value(v).item().as_f64());
        }
        for (m, &v) in metrics.cmd.iter_mut().zip(&cmd) {
            *m = Some(tape.value(v).item().as_f64());
        }
        if let Some(bad) = metrics.total.filter(|t| !t.is_finite()) {
            return Err(Error::NumericDomain(format!("training loss became {bad}")));
        }

        let opt = Sgd {
            lr,
            momentum: cfg.sgd_momentum,
            weight_decay: cfg.weight_decay,
        };
        let grad_sets: Vec<Vec<Tensor<F>>> = vars
            .iter()
            .map(|v| v.iter().map(|&p| grads.wrt(&tape, p)).collect())
            .collect();
        drop(views);
        for ((s, g), st) in state.modalities.iter_mut().zip(&grad_sets).zip(&stats) {
            sgd_update(s.pair.query.params_mut(), g, &mut s.velocity, &opt)?;
            if let Some(st) = st {
                s.pair.query.update_running(st);
            }
            s.pair.momentum_update()?;
        }
    }

    for ((b, s), zk) in batches.iter().zip(state.modalities.iter_mut()).zip(&z_k) {
        s.bank.enqueue(zk, Some(&b.sources))?;
    }
    if cfg.debug_provenance {
        check_alignment(state)?;
    }
    state.step += 1;
    Ok(metrics)
}

/// Errors unless every bank holds entries from the same source samples in
/// the same slots.
pub fn check_alignment<F: Real>(state: &TrainState<F>) -> Result<()> {
    let Some(first) = state.modalities.first() else {
        return Ok(());
    };
    for s in &state.modalities[1..] {
        if s.bank.cursor() != first.bank.cursor() || s.bank.filled() != first.bank.filled() {
            return Err(Error::Usage(format!(
                "bank of {} is out of step with bank of {}",
                s.modality, first.modality
            )));
        }
        if s.bank.provenance() != first.bank.provenance() {
            return Err(Error::Usage(format!(
                "bank of {} holds different samples than bank of {}",
                s.modality, first.modality
            )));
        }
    }
    Ok(())
}

/// Sample order for one epoch, cut into batches. Incomplete trailing batches
/// are dropped unless the whole dataset is smaller than one batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5eed, epoch as u64]));
    order.shuffle(&mut rng);
    if n < batch_size {
        return if n == 0 { Vec::new() } else { vec![order] };
    }
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Averages of the active loss terms over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub scl: Vec<f64>,
    pub cmd: Vec<f64>,
}

fn mean_active(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn metrics_header(config: &TrainConfig) -> String {
    let mut cols = vec!["epoch".to_string(), "step".into(), "lr".into(), "loss_total".into()];
    cols.extend(config.modalities.iter().map(|m| format!("loss_scl_{m}")));
    cols.extend(config.cmd_config().pairs.iter().map(|(a, b)| format!("loss_cmd_{a}_{b}")));
    cols.join(",")
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut cells = vec![
            self.epoch.to_string(),
            self.step.to_string(),
            self.lr.to_string(),
            self.total.to_string(),
        ];
        cells.extend(self.scl.iter().map(f64::to_string));
        cells.extend(self.cmd.iter().map(f64::to_string));
        cells.join(",")
    }
}

/// Runs one epoch. `on_step` sees the global step index and its metrics.
pub fn run_epoch<F: Real>(
    state: &mut TrainState<F>,
    dataset: &[SkeletonSequence],
    topo: &SkeletonTopology,
    on_step: &mut dyn FnMut(u64, &StepMetrics),
) -> Result<EpochMetrics> {
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let lr = cfg.lr_at(epoch);
    let mut steps = Vec::new();
    for idx in epoch_batches(dataset.len(), cfg.batch_size, cfg.seed, epoch) {
        let batches = prepare_batch::<F>(dataset, &idx, epoch, &cfg, topo)?;
        let step = state.step;
        let m = train_step(state, &batches, lr)?;
        on_step(step, &m);
        steps.push(m);
    }
    state.epoch += 1;
    let n_scl = cfg.modalities.len();
    let n_cmd = cfg.cmd_config().pairs.len();
    Ok(EpochMetrics {
        epoch,
        step: state.step,
        lr,
        total: mean_active(steps.iter().map(|m| m.total)),
        scl: (0..n_scl).map(|i| mean_active(steps.iter().map(|m| m.scl[i]))).collect(),
        cmd: (0..n_cmd).map(|i| mean_active(steps.iter().map(|m| m.cmd[i]))).collect(),
    })
}

/// Trains from `state.epoch` up to `config.epochs`. With an output
/// directory, appends one row per epoch to `metrics.csv` and saves
/// `checkpoint/` at the configured cadence and at the end.
pub fn fit<F: Real>(
    state: &mut TrainState<F>,
    dataset: &[SkeletonSequence],
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(u64, &StepMetrics),
) -> Result<Vec<EpochMetrics>> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    if let Some(s) = dataset.iter().find(|s| s.joints() != state.joints) {
        return Err(Error::Schema(format!(
            "dataset has {} joints, training state expects {}",
            s.joints(),
            state.joints
        )));
    }
    let topo = SkeletonTopology::default_for(state.joints);
    let cfg = state.config.clone();
    let metrics_path = out_dir.map(|d| d.join("metrics.csv"));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = metrics_path.as_ref().expect("set with out_dir");
        if !path.exists() {
            std::fs::write(path, metrics_header(&cfg) + "\n").map_err(|e| Error::io(path, e))?;
        }
    }
    let mut all = Vec::new();
    while state.epoch < cfg.epochs {
        let m = run_epoch(state, dataset, &topo, on_step)?;
        if let (Some(dir), Some(path)) = (out_dir, &metrics_path) {
            let mut f = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(path, e))?;
            let due = cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every);
            if due && state.epoch < cfg.epochs {
                save_checkpoint(state, &dir.join("checkpoint"))?;
            }
        }
        all.push(m);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, &dir.join("checkpoint"))?;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{synth_generate, SynthConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            k: 4,
            bank_size: 16,
            batch_size: 4,
            epochs: 2,
            lr_drop_epoch: 1,
            hidden_dim: 4,
            embedding_dim: 3,
            layers: 1,
            precision: crate::config::Precision::F64,
            debug_provenance: true,
            augment: crate::skeleton::AugmentConfig {
                target_frames: 6,
                ..Default::default()
            },
            ..TrainConfig::desk()
        }
    }

    fn tiny_data() -> Vec<SkeletonSequence> {
        synth_generate(&SynthConfig {
            classes: 2,
            per_class: 6,
            frames: 8,
            joints: 3,
            noise: 0.01,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn batches_cover_dataset_without_repeats() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 9);
        assert_ne!(epoch_batches(10, 3, 1, 0), epoch_batches(10, 3, 1, 1));
        assert_eq!(epoch_batches(2, 3, 1, 0).len(), 1);
    }

    #[test]
    fn warm_up_then_losses_appear() {
        let cfg = tiny_config();
        let data = tiny_data();
        let topo = SkeletonTopology::default_for(3);
        let mut st = TrainState::<f64>::init(&cfg, 3).unwrap();
        let before = st.modalities[0].pair.query.clone();
        let mut seen = Vec::new();
        for step in 0..5 {
            let idx: Vec<usize> = (step * 2..step * 2 + 4).map(|i| i % data.len()).collect();
            let b = prepare_batch::<f64>(&data, &idx, 0, &cfg, &topo).unwrap();
            seen.push(train_step(&mut st, &b, 0.01).unwrap());
        }
        assert_eq!(seen[0].total, None);
        assert_eq!(st.modalities[0].bank.filled(), 16);
        assert!(seen[1].scl.iter().all(Option::is_some));
        assert!(seen[1].cmd.iter().all(Option::is_none));
        // the bank is full after 4 steps, so step 5 distills
        assert!(seen[4].cmd.iter().all(Option::is_some));
        assert_ne!(st.modalities[0].pair.query, before);
        check_alignment(&st).unwrap();
    }

    #[test]
    fn zero_lr_keeps_params_but_advances_banks() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..tiny_config()
        };
        let data = tiny_data();
        let topo = SkeletonTopology::default_for(3);
        let mut st = TrainState::<f64>::init(&cfg, 3).unwrap();
        let params: Vec<_> = st.modalities.iter().map(|s| s.pair.query.params().to_vec()).collect();
        for step in 0..3 {
            let idx: Vec<usize> = (step..step + 4).collect();
            let b = prepare_batch::<f64>(&data, &idx, 0, &cfg, &topo).unwrap();
            train_step(&mut st, &b, 0.0).unwrap();
        }
        for (s, p) in st.modalities.iter().zip(&params) {
            assert_eq!(s.pair.query.params(), p.as_slice());
            assert_eq!(s.pair.key.params(), p.as_slice());
            assert_eq!(s.bank.filled(), 12);
        }
    }

    #[test]
    fn misaligned_batches_rejected() {
        let cfg = tiny_config();
        let data = tiny_data();
        let topo = SkeletonTopology::default_for(3);
        let mut st = TrainState::<f64>::init(&cfg, 3).unwrap();
        let mut b = prepare_batch::<f64>(&data, &[0, 1, 2, 3], 0, &cfg, &topo).unwrap();
        b[1].sources = vec![0, 1, 2, 4];
        assert!(matches!(train_step(&mut st, &b, 0.01), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_seed_gives_consistent_geometry() {
        let cfg = tiny_config();
        let data = tiny_data();
        let topo = SkeletonTopology::default_for(3);
        let b = prepare_batch::<f64>(&data, &[5], 1, &cfg, &topo).unwrap();
        // motion view equals the frame difference of the joint view
        let (j, m) = (&b[0].x_q, &b[1].x_q);
        let w = j.cols();
        for t in 0..5 {
            for c in 0..w {
                let d = j.data()[(t + 1) * w + c] - j.data()[t * w + c];
                assert!((m.data()[t * w + c] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_modality_has_no_cmd_columns() {
        let cfg = TrainConfig {
            modalities: vec![Modality::Bone],
            ..tiny_config()
        };
        assert_eq!(metrics_header(&cfg), "epoch,step,lr,loss_total,loss_scl_bone");
        assert_eq!(
            metrics_header(&tiny_config()),
            "epoch,step,lr,loss_total,loss_scl_joint,loss_scl_motion,loss_cmd_joint_motion"
        );
    }

    #[test]
    fn fit_writes_one_row_per_epoch() {
        let cfg = tiny_config();
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut st = TrainState::<f64>::init(&cfg, 3).unwrap();
        let rows = fit(&mut st, &data, Some(dir.path()), &mut |_, _| {}).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(rows.iter().all(|r| r.total.is_finite()));
        assert_eq!(rows[0].lr, 0.01);
        assert!((rows[1].lr - 0.001).abs() < 1e-15);
        assert!(dir.path().join("checkpoint").join("manifest.txt").exists());
    }
}
