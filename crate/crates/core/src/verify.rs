//! Self-checks against brute-force oracles, shared by the `verify` command
//! and the acceptance suite.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Precision, TrainConfig};
use crate::distill::{
    cmd_pair_loss, degeneracy_check, student_distribution, teacher_distribution, total_loss, CmdConfig,
    DegeneracyInstance, ModalityView,
};
use crate::encoder::{EncoderConfig, EncoderParams, Mode, Pooling};
use crate::error::Result;
use crate::moco::{info_nce, momentum_update, MemoryBank};
use crate::skeleton::{synth_generate, AugmentConfig, Modality, SkeletonSequence, SkeletonTopology, SynthConfig};
use crate::tensor::{l2_normalize, Tensor};
use crate::trainer::{run_epoch, StepMetrics, TrainState};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

/// `rows x dim` matrix of random unit rows.
pub fn random_unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = l2_normalize(&v) {
                data.extend(u);
                break;
            }
        }
    }
    Tensor::matrix(rows, dim, data)
}

/// A full bank of `n` random unit entries.
pub fn random_bank(rng: &mut impl Rng, n: usize, dim: usize) -> Result<MemoryBank> {
    let mut bank = MemoryBank::new(n, dim)?;
    bank.enqueue(&random_unit_rows(rng, n, dim), None)?;
    Ok(bank)
}

const GRAD_B: usize = 4;
const GRAD_D: usize = 8;
const GRAD_N: usize = 32;
const GRAD_K: usize = 8;
const GRAD_STEPS: usize = 3;

struct GradInstance {
    encoders: [EncoderParams; 2],
    inputs: [Tensor; 2],
    z_k: [Tensor; 2],
    banks: [MemoryBank; 2],
    cmd: CmdConfig,
    tau_c: f64,
}

impl GradInstance {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            input_dim: 6,
            hidden_dim: 3,
            embedding_dim: GRAD_D,
            layers: 1,
            pooling: Pooling::Mean,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        };
        let mut enc = |tag: u64| -> Result<EncoderParams> {
            let mut e = EncoderParams::init(&cfg, seed ^ tag)?;
            for p in e.params_mut() {
                for v in p.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            Ok(e)
        };
        let encoders = [enc(1)?, enc(2)?];
        let mut input = || {
            let n = GRAD_B * GRAD_STEPS * 6;
            Tensor::matrix(GRAD_B * GRAD_STEPS, 6, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let inputs = [input(), input()];
        Ok(Self {
            encoders,
            inputs,
            z_k: [random_unit_rows(&mut rng, GRAD_B, GRAD_D), random_unit_rows(&mut rng, GRAD_B, GRAD_D)],
            banks: [random_bank(&mut rng, GRAD_N, GRAD_D)?, random_bank(&mut rng, GRAD_N, GRAD_D)?],
            cmd: CmdConfig {
                k: GRAD_K,
                tau_t: 0.05,
                tau_s: 0.1,
                pairs: vec![(Modality::Joint, Modality::Motion)],
                weight: 1.0,
            },
            tau_c: 0.07,
        })
    }

    /// SCL of both modalities plus the bidirectional CMD term, as a
    /// function of the two query embeddings.
    fn loss_from_embeddings(&self, tape: &mut Tape, z_q: [Var; 2]) -> Result<Var> {
        let mut views = Vec::new();
        let mut scl = Vec::new();
        for i in 0..2 {
            let z_k = tape.constant(self.z_k[i].clone());
            scl.push(info_nce(tape, z_q[i], z_k, &self.banks[i], self.tau_c)?);
            views.push(ModalityView {
                z_q: z_q[i],
                z_k,
                bank: &self.banks[i],
            });
        }
        let cmd = cmd_pair_loss(tape, &views[0], &views[1], &self.cmd)?;
        total_loss(tape, &scl, &[cmd], self.cmd.weight)
    }

    fn loss_from_params(&self, tape: &mut Tape, trainable: bool) -> Result<(Var, [Vec<Var>; 2])> {
        let mut vars = [Vec::new(), Vec::new()];
        let mut z = Vec::new();
        for i in 0..2 {
            vars[i] = self.encoders[i].register(tape, trainable);
            let x = tape.constant(self.inputs[i].clone());
            z.push(self.encoders[i].forward(tape, &vars[i], x, GRAD_STEPS, Mode::Train)?.0);
        }
        Ok((self.loss_from_embeddings(tape, [z[0], z[1]])?, vars))
    }

    fn value_from_params(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _) = self.loss_from_params(&mut tape, false)?;
        Ok(tape.value(l).item())
    }

    fn value_from_embeddings(&self, z: &[Tensor; 2]) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(z[0].clone());
        let b = tape.constant(z[1].clone());
        let l = self.loss_from_embeddings(&mut tape, [a, b])?;
        Ok(tape.value(l).item())
    }
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` around `x`, one coordinate at a time.
fn numeric_gradient(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x)?;
        x[i] = orig - h;
        let minus = f(x)?;
        x[i] = orig;
        g.push((plus - minus) / (2.0 * h));
    }
    Ok(g)
}

/// Finite-difference check of the SCL + CMD gradients with respect to the
/// query embeddings and every query-encoder parameter, in f64.
pub fn gradient_check(seed: u64, h: f64, tol: f64) -> Result<Check> {
    let mut inst = GradInstance::new(seed)?;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |err: f64, what: String| {
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, what);
        }
    };

    let mut z = [Tensor::zeros(&[0]), Tensor::zeros(&[0])];
    for (i, zi) in z.iter_mut().enumerate() {
        *zi = inst.encoders[i].clone().encode(&inst.inputs[i], GRAD_STEPS, Mode::Train)?;
    }
    let mut tape = Tape::new();
    let a = tape.leaf(z[0].clone(), true);
    let b = tape.leaf(z[1].clone(), true);
    let l = inst.loss_from_embeddings(&mut tape, [a, b])?;
    let grads = tape.backward(l)?;
    for (i, v) in [a, b].into_iter().enumerate() {
        let analytic = grads.wrt(&tape, v).into_data();
        let mut x = z[i].data().to_vec();
        let shape = z[i].shape().to_vec();
        let numeric = numeric_gradient(&mut x, h, |x| {
            let mut zz = z.clone();
            zz[i] = Tensor::new(shape.clone(), x.to_vec())?;
            inst.value_from_embeddings(&zz)
        })?;
        note(relative_error(&analytic, &numeric), format!("z_q[{i}]"));
    }

    let mut tape = Tape::new();
    let (l, vars) = inst.loss_from_params(&mut tape, true)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Vec<Vec<f64>>> = vars
        .iter()
        .map(|vs| vs.iter().map(|&v| grads.wrt(&tape, v).into_data()).collect())
        .collect();
    let mut count = 0;
    for m in 0..2 {
        let names = inst.encoders[m].config().param_names();
        for p in 0..names.len() {
            let mut x = inst.encoders[m].params()[p].data().to_vec();
            let numeric = numeric_gradient(&mut x, h, |x| {
                inst.encoders[m].params_mut()[p].data_mut().copy_from_slice(x);
                inst.value_from_params()
            })?;
            inst.encoders[m].params_mut()[p].data_mut().copy_from_slice(&x);
            count += x.len();
            note(relative_error(&analytic[m][p], &numeric), format!("encoder[{m}].{}", names[p]));
        }
    }
    Ok(Check::new(
        "gradient",
        worst.0 < tol,
        format!(
            "B={GRAD_B} d={GRAD_D} N={GRAD_N} K={GRAD_K}, {count} parameters, worst relative error {:.2e} at {} (tol {tol:e})",
            worst.0, worst.1
        ),
    ))
}

fn degeneracy_instance(rng: &mut ChaCha8Rng, tau_t: f64) -> Result<DegeneracyInstance> {
    let b = rng.random_range(1..=8);
    let d = rng.random_range(2..=16);
    let n = rng.random_range(2..=64);
    Ok(DegeneracyInstance {
        z_k_a: random_unit_rows(rng, b, d),
        bank_a: random_bank(rng, n, d)?,
        z_q_b: random_unit_rows(rng, b, d),
        z_k_b: random_unit_rows(rng, b, d),
        bank_b: random_bank(rng, n, d)?,
        tau_t,
        tau_s: rng.random_range(0.05..0.5),
    })
}

/// One-hot teacher with K equal to the bank size against the closed form
/// and the mined-positive term, plus a soft-teacher negative control.
pub fn degeneracy_suite(seed: u64, instances: usize, tol: f64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut consistent = 0;
    let mut key_matters = 0;
    for _ in 0..instances {
        let r = degeneracy_check(&degeneracy_instance(&mut rng, 0.0)?, tol)?;
        worst = worst.max(r.max_abs_deviation);
        consistent += usize::from(r.consistent);
        key_matters += usize::from(r.mined_term_with_key > r.mined_term);
    }
    let mut control_failed = 0;
    for _ in 0..instances {
        let r = degeneracy_check(&degeneracy_instance(&mut rng, 0.05)?, tol)?;
        control_failed += usize::from(!r.consistent);
    }
    let passed = consistent == instances && key_matters == instances && control_failed == instances;
    Ok(Check::new(
        "degeneracy",
        passed,
        format!(
            "{consistent}/{instances} one-hot instances within {tol:e} (worst {worst:.1e}), \
             key term changes the mined loss on {key_matters}/{instances}, \
             soft-teacher control rejected on {control_failed}/{instances}"
        ),
    ))
}

/// Indices of `sims` sorted by value, descending, ties by index.
fn sort_oracle(sims: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Teacher and student distributions normalize and pick the same anchors as
/// a full sort, across bank sizes up to 1024 and K in {1, 8, N}.
pub fn distribution_suite(seed: u64, rounds: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    let mut worst_sum = 0.0f64;
    let mut mismatches = 0;
    for r in 0..rounds {
        let n = match r % 4 {
            0 => 1024,
            1 => rng.random_range(1..=16),
            _ => rng.random_range(1..=1024),
        };
        let d = rng.random_range(2..=12);
        let mut bank = random_bank(&mut rng, n, d)?;
        if r % 3 == 0 && n > 2 {
            // Duplicate a few entries so ties occur.
            let mut rows = bank.active();
            for _ in 0..n / 3 {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                let src = rows.row(a).to_vec();
                rows.row_mut(b).copy_from_slice(&src);
            }
            bank = MemoryBank::new(n, d)?;
            bank.enqueue(&rows, None)?;
        }
        let z = random_unit_rows(&mut rng, 2, d);
        for k in [1, 8, n] {
            if k > n {
                continue;
            }
            for tau in [0.0, 0.05, rng.random_range(0.01..1.0)] {
                cases += 1;
                let t = teacher_distribution(z.row(0), &bank, k, tau)?;
                let sims: Vec<f64> = (0..n).map(|i| crate::tensor::dot(z.row(0), bank.entry(i))).collect();
                if t.anchor_indices != sort_oracle(&sims, k) {
                    mismatches += 1;
                }
                let s = student_distribution(z.row(1), &bank, &t.anchor_indices, 0.1)?;
                for p in [&t.probs, &s.probs] {
                    worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    Ok(Check::new(
        "distribution",
        mismatches == 0 && worst_sum <= 1e-6,
        format!("{cases} cases, {mismatches} top-K mismatches, worst |sum - 1| {worst_sum:.1e}"),
    ))
}

/// Puts the key encoders on the tape as trainable leaves, detaches their
/// output, and checks that SCL + CMD send exactly zero gradient to them.
pub fn stop_gradient_check(seed: u64) -> Result<Check> {
    let inst = GradInstance::new(seed)?;
    let keys = [inst.encoders[1].clone(), inst.encoders[0].clone()];
    let mut tape = Tape::new();
    let mut q_vars = Vec::new();
    let mut k_vars = Vec::new();
    let mut views_z = Vec::new();
    for i in 0..2 {
        let qv = inst.encoders[i].register(&mut tape, true);
        let x = tape.constant(inst.inputs[i].clone());
        let (zq, _) = inst.encoders[i].forward(&mut tape, &qv, x, GRAD_STEPS, Mode::Train)?;
        let kv = keys[i].register(&mut tape, true);
        let x = tape.constant(inst.inputs[i].clone());
        let (zk, _) = keys[i].forward(&mut tape, &kv, x, GRAD_STEPS, Mode::Train)?;
        let zk = tape.detach(zk);
        views_z.push((zq, zk));
        q_vars.push(qv);
        k_vars.push(kv);
    }
    let mut scl = Vec::new();
    for (i, &(zq, zk)) in views_z.iter().enumerate() {
        scl.push(info_nce(&mut tape, zq, zk, &inst.banks[i], inst.tau_c)?);
    }
    let views: Vec<_> = views_z
        .iter()
        .enumerate()
        .map(|(i, &(z_q, z_k))| ModalityView {
            z_q,
            z_k,
            bank: &inst.banks[i],
        })
        .collect();
    let cmd = cmd_pair_loss(&mut tape, &views[0], &views[1], &inst.cmd)?;
    let total = total_loss(&mut tape, &scl, &[cmd], 1.0)?;
    let grads = tape.backward(total)?;
    let nonzero_key = k_vars
        .iter()
        .flatten()
        .map(|&v| grads.wrt(&tape, v).data().iter().filter(|&&g| g != 0.0).count())
        .sum::<usize>();
    let key_total: usize = k_vars.iter().flatten().map(|&v| tape.value(v).numel()).sum();
    let query_norm: f64 = q_vars
        .iter()
        .flatten()
        .map(|&v| grads.wrt(&tape, v).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    Ok(Check::new(
        "stop-gradient",
        nonzero_key == 0 && query_norm > 0.0,
        format!("{nonzero_key}/{key_total} key-parameter gradients nonzero, query gradient norm {query_norm:.3e}"),
    ))
}

/// Random enqueue sequences against a deque-based FIFO, plus `steps`
/// training steps with provenance tracking across three modalities.
pub fn queue_suite(seed: u64, sequences: usize, steps: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ring_mismatch = 0;
    let mut enqueues = 0;
    for _ in 0..sequences {
        let cap = rng.random_range(1..=40);
        let d = rng.random_range(1..=4);
        let mut bank = MemoryBank::new(cap, d)?.with_provenance();
        let mut oracle: VecDeque<(Vec<f64>, usize)> = VecDeque::new();
        let mut next_id = 0;
        for _ in 0..rng.random_range(1..=30) {
            let b = rng.random_range(1..=cap);
            let z = random_unit_rows(&mut rng, b, d);
            let ids: Vec<usize> = (next_id..next_id + b).collect();
            next_id += b;
            bank.enqueue(&z, Some(&ids))?;
            enqueues += 1;
            for (r, &id) in ids.iter().enumerate() {
                if oracle.len() == cap {
                    oracle.pop_front();
                }
                oracle.push_back((z.row(r).to_vec(), id));
            }
            // Slot of the i-th oldest entry.
            let oldest = if bank.is_full() { bank.cursor() } else { 0 };
            let ok = bank.filled() == oracle.len()
                && oracle.iter().enumerate().all(|(i, (v, id))| {
                    let slot = (oldest + i) % cap;
                    bank.entry(slot) == v.as_slice() && bank.source(slot) == Some(*id)
                });
            if !ok {
                ring_mismatch += 1;
            }
        }
    }

    let config = TrainConfig {
        modalities: Modality::ALL.to_vec(),
        k: 3,
        bank_size: 10,
        batch_size: 4,
        epochs: usize::MAX / 2,
        lr_drop_epoch: 1,
        hidden_dim: 3,
        embedding_dim: 4,
        layers: 1,
        precision: Precision::F64,
        debug_provenance: true,
        augment: AugmentConfig::identity(4),
        seed,
        ..TrainConfig::desk()
    };
    let data = synth_generate(&SynthConfig {
        classes: 3,
        per_class: 3,
        frames: 5,
        joints: 3,
        noise: 0.01,
        seed,
    })?;
    let topo = SkeletonTopology::default_for(3);
    let mut state = TrainState::<f64>::init(&config, 3)?;
    let mut misaligned = 0;
    let mut history: VecDeque<usize> = VecDeque::new();
    let mut provenance_mismatch = 0;
    while state.step < steps {
        if run_epoch(&mut state, &data, &topo, &mut |_, _| {}).is_err() {
            misaligned += 1;
            break;
        }
        let epoch = state.epoch - 1;
        for idx in crate::trainer::epoch_batches(data.len(), config.batch_size, config.seed, epoch) {
            for i in idx {
                if history.len() == config.bank_size {
                    history.pop_front();
                }
                history.push_back(i);
            }
        }
        let bank = &state.modalities[0].bank;
        let oldest = if bank.is_full() { bank.cursor() } else { 0 };
        for (i, &src) in history.iter().enumerate() {
            let slot = (oldest + i) % config.bank_size;
            if state.modalities.iter().any(|m| m.bank.source(slot) != Some(src)) {
                provenance_mismatch += 1;
            }
        }
    }
    let passed = ring_mismatch == 0 && misaligned == 0 && provenance_mismatch == 0;
    Ok(Check::new(
        "queue",
        passed,
        format!(
            "{enqueues} random enqueues with {ring_mismatch} FIFO mismatches; {} training steps over 3 modalities, \
             {misaligned} alignment errors, {provenance_mismatch} slot-source mismatches",
            state.step
        ),
    ))
}

/// Momentum update against `alpha * key + (1 - alpha) * query`, including
/// the two endpoints and a two-step geometric average.
pub fn momentum_suite(seed: u64, tol: f64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        input_dim: 6,
        hidden_dim: 5,
        embedding_dim: 4,
        layers: 2,
        pooling: Pooling::Last,
        bn_momentum: 0.9,
        bn_eps: 1e-5,
    };
    let flat = |e: &EncoderParams| -> Vec<f64> { e.params().iter().flat_map(|p| p.data().to_vec()).collect() };
    let mut worst = 0.0f64;
    let mut endpoint_exact = true;
    for alpha in [0.0, 1.0, 0.999, 0.5, rng.random_range(0.0..1.0)] {
        let key0 = EncoderParams::init(&cfg, rng.random())?;
        let q1 = EncoderParams::init(&cfg, rng.random())?;
        let q2 = EncoderParams::init(&cfg, rng.random())?;
        let mut key = key0.clone();
        momentum_update(&mut key, &q1, alpha)?;
        let one: Vec<f64> = flat(&key0).iter().zip(flat(&q1)).map(|(k, q)| alpha * k + (1.0 - alpha) * q).collect();
        for (a, b) in flat(&key).iter().zip(&one) {
            worst = worst.max((a - b).abs());
        }
        if alpha == 0.0 {
            endpoint_exact &= flat(&key) == flat(&q1);
        }
        if alpha == 1.0 {
            endpoint_exact &= flat(&key) == flat(&key0);
        }
        momentum_update(&mut key, &q2, alpha)?;
        let two: Vec<f64> = flat(&key0)
            .iter()
            .zip(flat(&q1))
            .zip(flat(&q2))
            .map(|((k, a), b)| alpha * alpha * k + alpha * (1.0 - alpha) * a + (1.0 - alpha) * b)
            .collect();
        for (a, b) in flat(&key).iter().zip(&two) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Check::new(
        "momentum",
        worst <= tol && endpoint_exact,
        format!("worst deviation {worst:.1e} (tol {tol:e}), endpoints exact: {endpoint_exact}"),
    ))
}

/// Small f32 configuration whose banks fill after the first step.
pub fn determinism_config(seed: u64) -> TrainConfig {
    TrainConfig {
        k: 4,
        bank_size: 8,
        batch_size: 8,
        epochs: 4,
        lr_drop_epoch: 3,
        hidden_dim: 8,
        embedding_dim: 6,
        layers: 2,
        seed,
        augment: AugmentConfig {
            target_frames: 12,
            ..AugmentConfig::default()
        },
        ..TrainConfig::desk()
    }
}

fn determinism_data(seed: u64) -> Result<Vec<SkeletonSequence>> {
    synth_generate(&SynthConfig {
        classes: 4,
        per_class: 20,
        frames: 16,
        joints: 5,
        noise: 0.02,
        seed,
    })
}

fn collect_losses(state: &mut TrainState<f32>, data: &[SkeletonSequence], steps: usize) -> Result<Vec<StepMetrics>> {
    let topo = SkeletonTopology::default_for(state.joints);
    let mut out = Vec::new();
    while out.len() < steps {
        run_epoch(state, data, &topo, &mut |_, m| out.push(m.clone()))?;
    }
    out.truncate(steps);
    Ok(out)
}

fn bits(m: &[StepMetrics]) -> Vec<Option<u64>> {
    m.iter()
        .flat_map(|s| std::iter::once(s.total).chain(s.scl.iter().copied()).chain(s.cmd.iter().copied()))
        .map(|v| v.map(f64::to_bits))
        .collect()
}

/// Two fresh runs agree bit for bit on the first ten step losses, and a run
/// checkpointed and resumed halfway ends in the same state as an
/// uninterrupted one. `scratch` receives the checkpoint.
pub fn determinism_check(seed: u64, scratch: &Path) -> Result<Check> {
    let config = determinism_config(seed);
    let data = determinism_data(seed)?;
    let joints = data[0].joints();

    let mut a = TrainState::<f32>::init(&config, joints)?;
    let mut b = TrainState::<f32>::init(&config, joints)?;
    let la = collect_losses(&mut a, &data, 10)?;
    let lb = collect_losses(&mut b, &data, 10)?;
    let active = la.iter().filter(|m| m.total.is_some()).count();
    let same_losses = bits(&la) == bits(&lb);

    let half = config.epochs / 2;
    let mut full = TrainState::<f32>::init(&config, joints)?;
    let mut full_losses = Vec::new();
    crate::trainer::fit(&mut full, &data, None, &mut |_, m| full_losses.push(m.clone()))?;

    let mut first = TrainState::<f32>::init(&config, joints)?;
    let topo = SkeletonTopology::default_for(joints);
    while first.epoch < half {
        run_epoch(&mut first, &data, &topo, &mut |_, _| {})?;
    }
    let dir = scratch.join("resume-checkpoint");
    save_checkpoint(&first, &dir)?;
    let mut resumed = load_checkpoint::<f32>(&dir)?;
    let mut resumed_losses = Vec::new();
    crate::trainer::fit(&mut resumed, &data, None, &mut |_, m| resumed_losses.push(m.clone()))?;
    let tail = &full_losses[full_losses.len() - resumed_losses.len()..];
    let same_resume = resumed == full && bits(tail) == bits(&resumed_losses);
    Ok(Check::new(
        "determinism",
        same_losses && active >= 8 && same_resume,
        format!(
            "first 10 steps ({active} with losses) bit-identical: {same_losses}; \
             resume after epoch {half} of {} matches uninterrupted run: {same_resume}",
            config.epochs
        ),
    ))
}

/// Every check at its acceptance tolerance.
pub fn run_all(seed: u64, scratch: &Path) -> Vec<Check> {
    let guard = |name: &str, r: Result<Check>| {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    };
    vec![
        guard("gradient", gradient_check(seed, 1e-5, 1e-4)),
        guard("degeneracy", degeneracy_suite(seed, 100, 1e-10)),
        guard("distribution", distribution_suite(seed, 40)),
        guard("stop-gradient", stop_gradient_check(seed)),
        guard("queue", queue_suite(seed, 200, 1000)),
        guard("momentum", momentum_suite(seed, 1e-12)),
        guard("determinism", determinism_check(seed, scratch)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_edges() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sort_oracle_breaks_ties_by_index() {
        assert_eq!(sort_oracle(&[0.5, 0.9, 0.9, 0.1], 3), vec![1, 2, 0]);
    }

    #[test]
    fn gradient_check_detects_wrong_tolerance() {
        let c = gradient_check(3, 1e-5, 1e-4).unwrap();
        assert!(c.passed, "{}", c.line());
        let strict = gradient_check(3, 1e-5, 0.0).unwrap();
        assert!(!strict.passed);
    }

    #[test]
    fn quick_suites_pass() {
        for c in [
            degeneracy_suite(1, 10, 1e-10).unwrap(),
            distribution_suite(1, 8).unwrap(),
            stop_gradient_check(1).unwrap(),
            queue_suite(1, 20, 50).unwrap(),
            momentum_suite(1, 1e-12).unwrap(),
        ] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn determinism_passes() {
        let dir = tempfile::tempdir().unwrap();
        let c = determinism_check(2, dir.path()).unwrap();
        assert!(c.passed, "{}", c.line());
    }
}
