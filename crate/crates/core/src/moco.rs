//! Query/key encoder pair, FIFO memory bank and the InfoNCE loss.

use crate::autodiff::{Tape, Var};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Fixed-capacity ring of unit-norm key embeddings.
///
/// Slots are written in order starting at 0, so while the bank is filling the
/// valid entries are exactly rows `0..filled`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<F: Real = f64> {
    capacity: usize,
    dim: usize,
    entries: Vec<F>,
    cursor: usize,
    filled: usize,
    provenance: Option<Vec<Option<usize>>>,
}

fn norm_tolerance<F: Real>() -> f64 {
    (100.0 * F::epsilon().as_f64()).max(1e-6)
}

impl<F: Real> MemoryBank<F> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Parameter(format!(
                "memory bank needs capacity and dim >= 1, got {capacity} x {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            entries: vec![F::zero(); capacity * dim],
            cursor: 0,
            filled: 0,
            provenance: None,
        })
    }

    /// Also records the source sample index of every slot.
    pub fn with_provenance(mut self) -> Self {
        self.provenance = Some(vec![None; self.capacity]);
        self
    }

    /// Restores a bank from saved state.
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        entries: Vec<F>,
        cursor: usize,
        filled: usize,
    ) -> Result<Self> {
        let mut bank = Self::new(capacity, dim)?;
        if entries.len() != capacity * dim || cursor >= capacity || filled > capacity {
            return Err(Error::Schema(format!(
                "bank state inconsistent: {} values, cursor {cursor}, filled {filled} for {capacity} x {dim}",
                entries.len()
            )));
        }
        if filled < capacity && cursor != filled {
            return Err(Error::Schema("a filling bank must have cursor == filled".into()));
        }
        bank.entries = entries;
        bank.cursor = cursor;
        bank.filled = filled;
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity
    }

    /// Every slot, written or not, row-major `capacity x dim`.
    pub fn raw_entries(&self) -> &[F] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[F] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// The valid entries as a `filled x dim` matrix.
    pub fn active(&self) -> Tensor<F> {
        Tensor::matrix(
            self.filled,
            self.dim,
            self.entries[..self.filled * self.dim].to_vec(),
        )
    }

    pub fn source(&self, slot: usize) -> Option<usize> {
        self.provenance.as_ref().and_then(|p| p[slot])
    }

    pub fn provenance(&self) -> Option<&[Option<usize>]> {
        self.provenance.as_deref()
    }

    /// Writes the rows of `z` at the cursor, wrapping around and overwriting
    /// the oldest entries. `sources`, if given, labels each row for the
    /// provenance record.
    pub fn enqueue(&mut self, z: &Tensor<F>, sources: Option<&[usize]>) -> Result<()> {
        let b = z.rows();
        if z.shape().len() != 2 || z.cols() != self.dim {
            return Err(Error::Dimension {
                op: "enqueue",
                left: z.shape().to_vec(),
                right: vec![self.capacity, self.dim],
            });
        }
        if b > self.capacity {
            return Err(Error::Parameter(format!(
                "batch of {b} exceeds bank capacity {}",
                self.capacity
            )));
        }
        if let Some(s) = sources {
            if s.len() != b {
                return Err(Error::Usage("one source index per row is required".into()));
            }
        }
        let tol = norm_tolerance::<F>();
        for i in 0..b {
            let n = z.row(i).iter().map(|&v| v * v).sum::<F>().sqrt().as_f64();
            if (n - 1.0).abs() > tol {
                return Err(Error::Input(format!("bank entry must be unit-norm, row {i} has norm {n}")));
            }
        }
        for i in 0..b {
            let slot = self.cursor;
            self.entries[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(z.row(i));
            if let Some(p) = &mut self.provenance {
                p[slot] = sources.map(|s| s[i]);
            }
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }
}

/// `key <- alpha * key + (1 - alpha) * query` over every trainable tensor.
/// Running statistics are left to each encoder's own forward passes.
pub fn momentum_update<F: Real>(
    key: &mut EncoderParams<F>,
    query: &EncoderParams<F>,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("momentum must lie in [0, 1], got {alpha}")));
    }
    if key.params().len() != query.params().len()
        || key.params().iter().zip(query.params()).any(|(k, q)| k.shape() != q.shape())
    {
        return Err(Error::Schema("key and query encoders differ in shape".into()));
    }
    let a = F::from_f64(alpha);
    let b = F::from_f64(1.0 - alpha);
    for (k, q) in key.params_mut().iter_mut().zip(query.params()) {
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = a * *kv + b * qv;
        }
    }
    Ok(())
}

/// Gradient-trained query encoder with its momentum-averaged key copy.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<F: Real = f64> {
    pub query: EncoderParams<F>,
    pub key: EncoderParams<F>,
    pub alpha: f64,
}

impl<F: Real> EncoderPair<F> {
    /// The key starts as an exact copy of the query.
    pub fn new(query: EncoderParams<F>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1], got {alpha}")));
        }
        let key = query.copy_params();
        Ok(Self { query, key, alpha })
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.alpha)
    }
}

/// Mean over the batch of the InfoNCE loss with positive `z_q . z_k` and the
/// bank entries as negatives. `z_k` and the bank are treated as constants.
pub fn info_nce<F: Real>(
    tape: &mut Tape<F>,
    z_q: Var,
    z_k: Var,
    bank: &MemoryBank<F>,
    tau_c: f64,
) -> Result<Var> {
    if bank.filled() == 0 {
        return Err(Error::Usage("InfoNCE needs at least one bank entry".into()));
    }
    if !(tau_c > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau_c}")));
    }
    let zk = tape.detach(z_k);
    let negatives = tape.constant(bank.active());
    let l_pos = tape.row_dot(z_q, zk)?;
    let l_neg = tape.matmul_nt(z_q, negatives)?;
    let logits = tape.concat_cols(l_pos, l_neg)?;
    let logits = tape.scale(logits, F::from_f64(1.0 / tau_c));
    let b = tape.value(z_q).rows();
    tape.cross_entropy(logits, &vec![0; b])
}
