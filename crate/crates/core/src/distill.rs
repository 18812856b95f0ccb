//! Cross-modal mutual distillation.
//!
//! A key embedding of one modality picks its top-K neighbors in that
//! modality's bank and turns the similarities into a sharp teacher
//! distribution. The query embedding of another modality is compared with the
//! same bank slots of its own bank, giving a softer student distribution over
//! the same anchors. The loss is the KL divergence from teacher to student,
//! in both directions.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moco::{info_nce, MemoryBank};
use crate::skeleton::Modality;
use crate::tensor::{argmax, dot, log_softmax, softmax, topk, Real, Tensor};

/// Anchors and probabilities of one neighbor distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution<F = f64> {
    pub anchor_indices: Vec<usize>,
    pub logits: Vec<F>,
    /// Zero means one-hot at the largest logit.
    pub temperature: f64,
    pub probs: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmdConfig {
    /// Neighbor count.
    pub k: usize,
    pub tau_t: f64,
    pub tau_s: f64,
    /// Each pair adds a bidirectional term.
    pub pairs: Vec<(Modality, Modality)>,
    pub weight: f64,
}

impl CmdConfig {
    /// Every unordered pair of `modalities`, in listing order.
    pub fn all_pairs(modalities: &[Modality]) -> Vec<(Modality, Modality)> {
        let mut out = Vec::new();
        for (i, &a) in modalities.iter().enumerate() {
            for &b in &modalities[i + 1..] {
                out.push((a, b));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Parameter("K must be >= 1".into()));
        }
        if !(self.tau_s > 0.0) || !(self.tau_t >= 0.0) {
            return Err(Error::Parameter(format!(
                "need tau_s > 0 and tau_t >= 0, got {} and {}",
                self.tau_s, self.tau_t
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::Parameter("CMD weight must be >= 0".into()));
        }
        Ok(())
    }
}

fn one_hot<F: Real>(k: usize) -> Vec<F> {
    let mut p = vec![F::zero(); k];
    p[0] = F::one();
    p
}

/// Top-K neighbors of `z_k` among the filled bank entries, with
/// `softmax(logits / tau_t)`, or a one-hot at the best anchor when `tau_t == 0`.
pub fn teacher_distribution<F: Real>(
    z_k: &[F],
    bank: &MemoryBank<F>,
    k: usize,
    tau_t: f64,
) -> Result<SimilarityDistribution<F>> {
    if z_k.len() != bank.dim() {
        return Err(Error::Dimension {
            op: "teacher_distribution",
            left: vec![z_k.len()],
            right: vec![bank.filled(), bank.dim()],
        });
    }
    if k == 0 || k > bank.filled() {
        return Err(Error::Usage(format!(
            "K = {k} neighbors requested from a bank holding {}",
            bank.filled()
        )));
    }
    let sims: Vec<F> = (0..bank.filled()).map(|i| dot(z_k, bank.entry(i))).collect();
    let (logits, anchor_indices) = topk(&sims, k)?;
    let probs = if tau_t == 0.0 {
        one_hot(k)
    } else {
        softmax(&logits, F::from_f64(tau_t))?
    };
    Ok(SimilarityDistribution {
        anchor_indices,
        logits,
        temperature: tau_t,
        probs,
    })
}

/// Similarities of `z_q` to the given slots of its own bank, softened by `tau_s`.
pub fn student_distribution<F: Real>(
    z_q: &[F],
    bank: &MemoryBank<F>,
    anchor_indices: &[usize],
    tau_s: f64,
) -> Result<SimilarityDistribution<F>> {
    if z_q.len() != bank.dim() {
        return Err(Error::Dimension {
            op: "student_distribution",
            left: vec![z_q.len()],
            right: vec![bank.filled(), bank.dim()],
        });
    }
    if let Some(&bad) = anchor_indices.iter().find(|&&i| i >= bank.filled()) {
        return Err(Error::Usage(format!(
            "anchor {bad} out of range for a bank holding {}",
            bank.filled()
        )));
    }
    let logits: Vec<F> = anchor_indices.iter().map(|&i| dot(z_q, bank.entry(i))).collect();
    let probs = softmax(&logits, F::from_f64(tau_s))?;
    Ok(SimilarityDistribution {
        anchor_indices: anchor_indices.to_vec(),
        logits,
        temperature: tau_s,
        probs,
    })
}

/// One modality's embeddings and bank, as seen by the loss builders.
#[derive(Clone, Copy)]
pub struct ModalityView<'a, F: Real> {
    pub z_q: Var,
    pub z_k: Var,
    pub bank: &'a MemoryBank<F>,
}

/// `KL(p(z_k^teacher, tau_t) || p(z_q^student, tau_s))`, batch mean. The
/// teacher side is computed off the tape.
pub fn cmd_direction<F: Real>(
    tape: &mut Tape<F>,
    teacher: &ModalityView<'_, F>,
    student: &ModalityView<'_, F>,
    k: usize,
    tau_t: f64,
    tau_s: f64,
) -> Result<Var> {
    if teacher.bank.filled() != student.bank.filled() {
        return Err(Error::Usage(format!(
            "banks are not aligned: {} vs {} entries",
            teacher.bank.filled(),
            student.bank.filled()
        )));
    }
    let zk = tape.value(teacher.z_k).clone();
    let b = zk.rows();
    if tape.value(student.z_q).rows() != b {
        return Err(Error::Usage("modality batches differ in size".into()));
    }
    let mut idx = Vec::with_capacity(b * k);
    let mut target = Vec::with_capacity(b * k);
    for i in 0..b {
        let t = teacher_distribution(zk.row(i), teacher.bank, k, tau_t)?;
        idx.extend_from_slice(&t.anchor_indices);
        target.extend(t.probs);
    }
    let bank = tape.constant(student.bank.active());
    let sims = tape.matmul_nt(student.z_q, bank)?;
    let gathered = tape.gather_cols(sims, &idx, k)?;
    let log_q = tape.log_softmax_rows(gathered, F::from_f64(tau_s))?;
    tape.kl_div_log(Tensor::matrix(b, k, target), log_q)
}

/// Bidirectional CMD loss between two modalities.
pub fn cmd_pair_loss<F: Real>(
    tape: &mut Tape<F>,
    a: &ModalityView<'_, F>,
    b: &ModalityView<'_, F>,
    cfg: &CmdConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ab = cmd_direction(tape, a, b, cfg.k, cfg.tau_t, cfg.tau_s)?;
    let ba = cmd_direction(tape, b, a, cfg.k, cfg.tau_t, cfg.tau_s)?;
    tape.add(ab, ba)
}

/// `sum(scl) + cmd_weight * sum(cmd)`.
pub fn total_loss<F: Real>(tape: &mut Tape<F>, scl: &[Var], cmd: &[Var], cmd_weight: f64) -> Result<Var> {
    let (&first, rest) = scl
        .split_first()
        .ok_or_else(|| Error::Usage("total loss needs at least one modality".into()))?;
    let mut total = first;
    for &v in rest {
        total = tape.add(total, v)?;
    }
    if let Some((&c0, crest)) = cmd.split_first() {
        let mut c = c0;
        for &v in crest {
            c = tape.add(c, v)?;
        }
        let c = tape.scale(c, F::from_f64(cmd_weight));
        total = tape.add(total, c)?;
    }
    Ok(total)
}

/// Per-row argmax of `z_k` against the filled bank: the most similar
/// negative, ties at the smallest slot.
pub fn mine_positive<F: Real>(z_k: &Tensor<F>, bank: &MemoryBank<F>) -> Result<Vec<usize>> {
    if bank.filled() == 0 {
        return Err(Error::Usage("cannot mine from an empty bank".into()));
    }
    (0..z_k.rows())
        .map(|i| {
            let sims: Vec<F> = (0..bank.filled()).map(|s| dot(z_k.row(i), bank.entry(s))).collect();
            argmax(&sims).ok_or_else(|| Error::Usage("empty similarity row".into()))
        })
        .collect()
}

/// Contrastive loss with a mined extra positive: InfoNCE for modality B plus
/// `-log(exp(z_q . m_u / tau) / (exp(z_q . z_k / tau) + sum_i exp(z_q . m_i / tau)))`,
/// one mined slot `u` per row.
pub fn cpm_loss<F: Real>(
    tape: &mut Tape<F>,
    z_q: Var,
    z_k: Var,
    bank: &MemoryBank<F>,
    u: &[usize],
    tau_c: f64,
) -> Result<Var> {
    let b = tape.value(z_q).rows();
    if u.len() != b {
        return Err(Error::Usage(format!("{} mined indices for a batch of {b}", u.len())));
    }
    if let Some(&bad) = u.iter().find(|&&i| i >= bank.filled()) {
        return Err(Error::Usage(format!(
            "mined index {bad} out of range for a bank holding {}",
            bank.filled()
        )));
    }
    let scl = info_nce(tape, z_q, z_k, bank, tau_c)?;
    let zk = tape.detach(z_k);
    let negatives = tape.constant(bank.active());
    let l_pos = tape.row_dot(z_q, zk)?;
    let l_neg = tape.matmul_nt(z_q, negatives)?;
    let logits = tape.concat_cols(l_pos, l_neg)?;
    let logits = tape.scale(logits, F::from_f64(1.0 / tau_c));
    let targets: Vec<usize> = u.iter().map(|&i| i + 1).collect();
    let mined = tape.cross_entropy(logits, &targets)?;
    tape.add(scl, mined)
}

/// Inputs for comparing one CMD direction with the mined-positive form.
#[derive(Clone, Debug)]
pub struct DegeneracyInstance {
    pub z_k_a: Tensor,
    pub bank_a: MemoryBank,
    pub z_q_b: Tensor,
    pub z_k_b: Tensor,
    pub bank_b: MemoryBank,
    pub tau_t: f64,
    /// Student temperature, also used as the contrastive temperature of the
    /// mined-positive term.
    pub tau_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyReport {
    /// One-directional CMD loss a -> b with K equal to the bank size.
    pub cmd_loss: f64,
    /// Batch mean of `-log softmax_u(student logits / tau_s)`, `u` the teacher argmax.
    pub closed_form: f64,
    /// The mined-positive term with `z_k^b` left out of its denominator.
    pub mined_term: f64,
    /// The mined-positive term as written, `z_k^b` included.
    pub mined_term_with_key: f64,
    pub max_abs_deviation: f64,
    pub consistent: bool,
}

/// Evaluates both sides of the one-hot limit on one instance. The check is
/// `consistent` when the CMD loss, the closed form and the mined term agree
/// within `tol`.
pub fn degeneracy_check(inst: &DegeneracyInstance, tol: f64) -> Result<DegeneracyReport> {
    let n = inst.bank_a.filled();
    if n == 0 || inst.bank_b.filled() != n {
        return Err(Error::Usage("degeneracy check needs two equally filled banks".into()));
    }
    let mut tape = Tape::<f64>::new();
    let view_a = ModalityView {
        z_q: tape.constant(inst.z_k_a.clone()),
        z_k: tape.constant(inst.z_k_a.clone()),
        bank: &inst.bank_a,
    };
    let view_b = ModalityView {
        z_q: tape.constant(inst.z_q_b.clone()),
        z_k: tape.constant(inst.z_k_b.clone()),
        bank: &inst.bank_b,
    };
    let l = cmd_direction(&mut tape, &view_a, &view_b, n, inst.tau_t, inst.tau_s)?;
    let cmd_loss = tape.value(l).item();

    let u = mine_positive(&inst.z_k_a, &inst.bank_a)?;
    let b = inst.z_q_b.rows();
    let mut closed_form = 0.0;
    let mut mined_term = 0.0;
    let mut mined_term_with_key = 0.0;
    for i in 0..b {
        let q = inst.z_q_b.row(i);
        let sims: Vec<f64> = (0..n).map(|s| dot(q, inst.bank_b.entry(s))).collect();
        closed_form -= log_softmax(&sims, inst.tau_s)?[u[i]];

        let num = sims[u[i]] / inst.tau_s;
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max) / inst.tau_s;
        let bank_sum: f64 = sims.iter().map(|&s| (s / inst.tau_s - max).exp()).sum();
        mined_term -= num - max - bank_sum.ln();

        let pos = dot(q, inst.z_k_b.row(i)) / inst.tau_s;
        let with_key = bank_sum + (pos - max).exp();
        mined_term_with_key -= num - max - with_key.ln();
    }
    let bf = b as f64;
    closed_form /= bf;
    mined_term /= bf;
    mined_term_with_key /= bf;
    let max_abs_deviation = (cmd_loss - closed_form)
        .abs()
        .max((cmd_loss - mined_term).abs());
    Ok(DegeneracyReport {
        cmd_loss,
        closed_form,
        mined_term,
        mined_term_with_key,
        max_abs_deviation,
        consistent: max_abs_deviation <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_normalize;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..rows {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            data.extend(l2_normalize(&v).unwrap());
        }
        Tensor::matrix(rows, dim, data)
    }

    fn full_bank(rng: &mut ChaCha8Rng, n: usize, d: usize) -> MemoryBank {
        let mut bank = MemoryBank::new(n, d).unwrap();
        bank.enqueue(&unit_rows(rng, n, d), None).unwrap();
        bank
    }

    fn cfg(k: usize, tau_t: f64, tau_s: f64) -> CmdConfig {
        CmdConfig {
            k,
            tau_t,
            tau_s,
            pairs: vec![(Modality::Joint, Modality::Motion)],
            weight: 1.0,
        }
    }

    #[test]
    fn teacher_k1_and_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = full_bank(&mut rng, 20, 4);
        let z = unit_rows(&mut rng, 1, 4);
        let sims: Vec<f64> = (0..20).map(|i| dot(z.row(0), bank.entry(i))).collect();
        let t = teacher_distribution(z.row(0), &bank, 1, 0.05).unwrap();
        assert_eq!(t.probs, vec![1.0]);
        assert_eq!(t.anchor_indices, vec![argmax(&sims).unwrap()]);
        let t0 = teacher_distribution(z.row(0), &bank, 20, 0.0).unwrap();
        assert_eq!(t0.probs.iter().sum::<f64>(), 1.0);
        assert_eq!(t0.probs[0], 1.0);
        assert!(matches!(
            teacher_distribution(z.row(0), &bank, 21, 0.05),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn identical_bank_entries_give_uniform_teacher() {
        let mut bank = MemoryBank::<f64>::new(6, 2).unwrap();
        bank.enqueue(&Tensor::matrix(6, 2, [0.6, 0.8].repeat(6)), None).unwrap();
        let t = teacher_distribution(&[1.0, 0.0], &bank, 4, 0.05).unwrap();
        assert_eq!(t.anchor_indices, vec![0, 1, 2, 3]);
        for p in t.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
        // one-hot ties resolve to the smallest slot
        let t0 = teacher_distribution(&[1.0, 0.0], &bank, 6, 0.0).unwrap();
        assert_eq!(t0.anchor_indices[0], 0);
    }

    #[test]
    fn teacher_matches_sort_and_formula_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = full_bank(&mut rng, 256, 8);
        let z = unit_rows(&mut rng, 1, 8);
        let t = teacher_distribution(z.row(0), &bank, 32, 0.05).unwrap();
        let mut order: Vec<(f64, usize)> = (0..256).map(|i| (dot(z.row(0), bank.entry(i)), i)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want_idx: Vec<usize> = order[..32].iter().map(|p| p.1).collect();
        assert_eq!(t.anchor_indices, want_idx);
        let denom: f64 = order[..32].iter().map(|p| (p.0 / 0.05).exp()).sum();
        for (p, o) in t.probs.iter().zip(&order[..32]) {
            assert!((p - (o.0 / 0.05).exp() / denom).abs() < 1e-12);
        }
        assert!(t.logits.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn student_identity_and_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = full_bank(&mut rng, 30, 5);
        let z = unit_rows(&mut rng, 1, 5);
        let t = teacher_distribution(z.row(0), &bank, 7, 0.1).unwrap();
        let s = student_distribution(z.row(0), &bank, &t.anchor_indices, 0.1).unwrap();
        for (a, b) in s.probs.iter().zip(&t.probs) {
            assert!((a - b).abs() < 1e-15);
        }
        let idx = [4, 0, 29, 7];
        let s = student_distribution(z.row(0), &bank, &idx, 0.1).unwrap();
        let logits: Vec<f64> = idx.iter().map(|&i| dot(z.row(0), bank.entry(i))).collect();
        let denom: f64 = logits.iter().map(|l| (l / 0.1).exp()).sum();
        for (p, l) in s.probs.iter().zip(&logits) {
            assert!((p - (l / 0.1).exp() / denom).abs() < 1e-12);
        }
        assert!(matches!(
            student_distribution(z.row(0), &bank, &[30], 0.1),
            Err(Error::Usage(_))
        ));
    }

    fn pair_loss(
        zq_a: &Tensor,
        zk_a: &Tensor,
        bank_a: &MemoryBank,
        zq_b: &Tensor,
        zk_b: &Tensor,
        bank_b: &MemoryBank,
        c: &CmdConfig,
    ) -> f64 {
        let mut tape = Tape::new();
        let a = ModalityView {
            z_q: tape.constant(zq_a.clone()),
            z_k: tape.constant(zk_a.clone()),
            bank: bank_a,
        };
        let b = ModalityView {
            z_q: tape.constant(zq_b.clone()),
            z_k: tape.constant(zk_b.clone()),
            bank: bank_b,
        };
        let l = cmd_pair_loss(&mut tape, &a, &b, c).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn identical_modalities_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = full_bank(&mut rng, 32, 8);
        let z = unit_rows(&mut rng, 4, 8);
        let l = pair_loss(&z, &z, &bank, &z, &z, &bank, &cfg(8, 0.1, 0.1));
        assert!(l.abs() < 1e-12);
    }

    /// Step-by-step oracle: sort, gather, softmax, KL, averaged over the batch.
    fn direction_oracle(zk_t: &Tensor, bank_t: &MemoryBank, zq_s: &Tensor, bank_s: &MemoryBank, k: usize, tt: f64, ts: f64) -> f64 {
        let n = bank_t.filled();
        let mut total = 0.0;
        for i in 0..zk_t.rows() {
            let mut order: Vec<(f64, usize)> = (0..n).map(|s| (dot(zk_t.row(i), bank_t.entry(s)), s)).collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let top = &order[..k];
            let tz: f64 = top.iter().map(|p| (p.0 / tt).exp()).sum();
            let sl: Vec<f64> = top.iter().map(|p| dot(zq_s.row(i), bank_s.entry(p.1))).collect();
            let sz: f64 = sl.iter().map(|l| (l / ts).exp()).sum();
            for (p, l) in top.iter().zip(&sl) {
                let pt = (p.0 / tt).exp() / tz;
                let ps = (l / ts).exp() / sz;
                total += pt * (pt / ps).ln();
            }
        }
        total / zk_t.rows() as f64
    }

    #[test]
    fn pair_loss_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, d, n, k) = (4, 8, 32, 8);
        let bank_a = full_bank(&mut rng, n, d);
        let bank_b = full_bank(&mut rng, n, d);
        let (zq_a, zk_a) = (unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d));
        let (zq_b, zk_b) = (unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d));
        let c = cfg(k, 0.05, 0.1);
        let got = pair_loss(&zq_a, &zk_a, &bank_a, &zq_b, &zk_b, &bank_b, &c);
        let want = direction_oracle(&zk_a, &bank_a, &zq_b, &bank_b, k, 0.05, 0.1)
            + direction_oracle(&zk_b, &bank_b, &zq_a, &bank_a, k, 0.05, 0.1);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got >= 0.0);
    }

    #[test]
    fn joint_bank_permutation_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, d, n, k) = (3, 6, 24, 5);
        let bank_a = full_bank(&mut rng, n, d);
        let bank_b = full_bank(&mut rng, n, d);
        let zs: Vec<Tensor> = (0..4).map(|_| unit_rows(&mut rng, b, d)).collect();
        let c = cfg(k, 0.05, 0.1);
        let base = pair_loss(&zs[0], &zs[1], &bank_a, &zs[2], &zs[3], &bank_b, &c);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = |bank: &MemoryBank| {
            let data: Vec<f64> = perm.iter().flat_map(|&i| bank.entry(i).to_vec()).collect();
            let mut p = MemoryBank::new(n, d).unwrap();
            p.enqueue(&Tensor::matrix(n, d, data), None).unwrap();
            p
        };
        let l = pair_loss(&zs[0], &zs[1], &permuted(&bank_a), &zs[2], &zs[3], &permuted(&bank_b), &c);
        assert!((l - base).abs() < 1e-10);
    }

    #[test]
    fn listing_a_pair_twice_doubles_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank_a = full_bank(&mut rng, 16, 4);
        let bank_b = full_bank(&mut rng, 16, 4);
        let zs: Vec<Tensor> = (0..4).map(|_| unit_rows(&mut rng, 2, 4)).collect();
        let c = cfg(4, 0.05, 0.1);
        let ab = pair_loss(&zs[0], &zs[1], &bank_a, &zs[2], &zs[3], &bank_b, &c);
        let ba = pair_loss(&zs[2], &zs[3], &bank_b, &zs[0], &zs[1], &bank_a, &c);
        assert!((ab - ba).abs() < 1e-12);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::scalar(0.5));
        let p1 = tape.constant(Tensor::scalar(ab));
        let p2 = tape.constant(Tensor::scalar(ba));
        let t = total_loss(&mut tape, &[s], &[p1, p2], 1.0).unwrap();
        assert!((tape.value(t).item() - (0.5 + 2.0 * ab)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sums() {
        let mut tape = Tape::<f64>::new();
        let v: Vec<Var> = [1.0, 2.0, 3.0, 0.25, 0.5, 0.75]
            .iter()
            .map(|&x| tape.constant(Tensor::scalar(x)))
            .collect();
        let single = total_loss(&mut tape, &v[..1], &[], 1.0).unwrap();
        assert_eq!(tape.value(single).item(), 1.0);
        let three = total_loss(&mut tape, &v[..3], &v[3..], 1.0).unwrap();
        assert_eq!(tape.value(three).item(), 7.5);
        assert!(total_loss(&mut tape, &[], &v[3..], 1.0).is_err());
        assert_eq!(
            CmdConfig::all_pairs(&Modality::ALL),
            vec![
                (Modality::Joint, Modality::Motion),
                (Modality::Joint, Modality::Bone),
                (Modality::Motion, Modality::Bone)
            ]
        );
    }

    #[test]
    fn cpm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, d, n, tau) = (3, 5, 12, 0.07);
        let bank = full_bank(&mut rng, n, d);
        let zq = unit_rows(&mut rng, b, d);
        let zk = unit_rows(&mut rng, b, d);
        let u = [3, 0, 11];
        let mut tape = Tape::new();
        let q = tape.constant(zq.clone());
        let k = tape.constant(zk.clone());
        let l = cpm_loss(&mut tape, q, k, &bank, &u, tau).unwrap();
        let mut want = 0.0;
        for i in 0..b {
            let pos = (dot(zq.row(i), zk.row(i)) / tau).exp();
            let negs: Vec<f64> = (0..n).map(|s| (dot(zq.row(i), bank.entry(s)) / tau).exp()).collect();
            let denom = pos + negs.iter().sum::<f64>();
            want += -(pos / denom).ln() - (negs[u[i]] / denom).ln();
        }
        want /= b as f64;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        assert!(cpm_loss(&mut tape, q, k, &bank, &[0, 1, 12], tau).is_err());
    }

    #[test]
    fn mined_index_is_teacher_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = full_bank(&mut rng, 40, 6);
        let z = unit_rows(&mut rng, 5, 6);
        let u = mine_positive(&z, &bank).unwrap();
        for i in 0..5 {
            let t = teacher_distribution(z.row(i), &bank, 40, 0.0).unwrap();
            assert_eq!(u[i], t.anchor_indices[0]);
        }
    }

    fn instance(rng: &mut ChaCha8Rng, tau_t: f64) -> DegeneracyInstance {
        let (b, d, n) = (4, 8, 3);
        DegeneracyInstance {
            z_k_a: unit_rows(rng, b, d),
            bank_a: full_bank(rng, n, d),
            z_q_b: unit_rows(rng, b, d),
            z_k_b: unit_rows(rng, b, d),
            bank_b: full_bank(rng, n, d),
            tau_t,
            tau_s: 0.1,
        }
    }

    #[test]
    fn one_hot_limit_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let r = degeneracy_check(&instance(&mut rng, 0.0), 1e-10).unwrap();
            assert!(r.consistent, "{r:?}");
            assert!(r.mined_term_with_key > r.mined_term);
        }
    }

    #[test]
    fn soft_teacher_breaks_the_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = degeneracy_check(&instance(&mut rng, 0.05), 1e-10).unwrap();
        assert!(!r.consistent);
        assert!(r.max_abs_deviation > 1e-6);
    }
}
