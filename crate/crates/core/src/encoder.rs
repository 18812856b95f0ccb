//! Skeleton sequence encoder: input batch norm, stacked bidirectional GRU,
//! temporal pooling, linear projection, unit-norm output.
//!
//! Sequences enter as time-major matrices: row `t * B + b` holds the
//! flattened frame `t` of sample `b`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonSequence;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Mean of the last layer's outputs over time.
    Mean,
    /// Final hidden state of each direction.
    Last,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Last => "last",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(Pooling::Mean),
            "last" => Ok(Pooling::Last),
            other => Err(Error::Parameter(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Flattened frame width, `2 * J * 3`.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub layers: usize,
    pub pooling: Pooling,
    /// Weight of the old value in the running-statistics average.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl EncoderConfig {
    /// Small encoder for CPU runs: hidden 64, embedding 32.
    pub fn desk(joints: usize) -> Self {
        Self {
            input_dim: 2 * joints * 3,
            hidden_dim: 64,
            embedding_dim: 32,
            layers: 3,
            pooling: Pooling::Mean,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.hidden_dim < 1 || self.embedding_dim < 1 || self.layers < 1 {
            return Err(Error::Parameter(format!(
                "encoder dimensions must be >= 1: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Parameter(
                "bn_momentum must lie in [0, 1] and bn_eps must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Names of the trainable tensors in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["bn.gamma".to_string(), "bn.beta".to_string()];
        for l in 0..self.layers {
            for dir in ["fwd", "bwd"] {
                for p in ["w_i", "w_h", "b_i", "b_h"] {
                    names.push(format!("gru{l}.{dir}.{p}"));
                }
            }
        }
        names.push("proj.w".into());
        names.push("proj.b".into());
        names
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let h = self.hidden_dim;
        let mut shapes = vec![vec![self.input_dim], vec![self.input_dim]];
        for l in 0..self.layers {
            let input = if l == 0 { self.input_dim } else { 2 * h };
            for _ in 0..2 {
                shapes.extend([vec![input, 3 * h], vec![h, 3 * h], vec![3 * h], vec![3 * h]]);
            }
        }
        shapes.push(vec![2 * h, self.embedding_dim]);
        shapes.push(vec![self.embedding_dim]);
        shapes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the input norm; running stats are refreshed.
    Train,
    /// Running statistics; a pure function of params and input.
    Eval,
}

/// Trainable tensors plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<F: Real = f64> {
    config: EncoderConfig,
    params: Vec<Tensor<F>>,
    running_mean: Vec<F>,
    running_var: Vec<F>,
}

impl<F: Real> EncoderParams<F> {
    /// Weight matrices uniform in `±1/sqrt(hidden_dim)`, biases zero, unit BN scale.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        let names = config.param_names();
        let params = names
            .iter()
            .zip(config.param_shapes())
            .map(|(name, shape)| {
                if name == "bn.gamma" {
                    Tensor::full(&shape, F::one())
                } else if shape.len() == 2 {
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| F::from_f64(rng.random_range(-bound..=bound)))
                        .collect();
                    Tensor::new(shape, data).expect("shape matches data")
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            running_mean: vec![F::zero(); config.input_dim],
            running_var: vec![F::one(); config.input_dim],
        })
    }

    /// Rebuilds params from named tensors, checking every shape.
    pub fn from_parts(
        config: &EncoderConfig,
        params: Vec<Tensor<F>>,
        running_mean: Vec<F>,
        running_var: Vec<F>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((p, s), name) in params.iter().zip(&shapes).zip(config.param_names()) {
            if p.shape() != s.as_slice() {
                return Err(Error::Schema(format!(
                    "{name}: shape {:?}, expected {s:?}",
                    p.shape()
                )));
            }
        }
        if running_mean.len() != config.input_dim || running_var.len() != config.input_dim {
            return Err(Error::Schema("running statistics have the wrong width".into()));
        }
        Ok(Self {
            config: config.clone(),
            params,
            running_mean,
            running_var,
        })
    }

    /// Deep copy; the two sides share nothing afterwards.
    pub fn copy_params(&self) -> Self {
        self.clone()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn running_mean(&self) -> &[F] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[F] {
        &self.running_var
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> EncoderParams<G> {
        EncoderParams {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running_mean: self.running_mean.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    /// SHA-256 over names, shapes, values and running statistics.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(F::DTYPE.as_bytes());
        let mut buf = Vec::new();
        for (name, p) in self.config.param_names().iter().zip(&self.params) {
            h.update(name.as_bytes());
            for &d in p.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            p.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        buf.clear();
        self.running_mean.iter().chain(&self.running_var).for_each(|v| v.write_le(&mut buf));
        h.update(&buf);
        hex::encode(h.finalize())
    }

    /// Puts every tensor on `tape`, trainable or constant.
    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats<F>) {
        let m = F::from_f64(self.config.bn_momentum);
        let one_m = F::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + one_m * b;
        }
    }

    /// Builds the encoder graph for a time-major `(steps * B) x input_dim`
    /// input and returns `B x embedding_dim` unit rows. In train mode the
    /// batch statistics are returned for [`update_running`](Self::update_running).
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        steps: usize,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::Usage("parameter handles do not match the encoder".into()));
        }
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != cfg.input_dim {
            return Err(Error::Schema(format!(
                "encoder input has shape {shape:?}, expected frame width {}",
                cfg.input_dim
            )));
        }
        if steps == 0 || !shape[0].is_multiple_of(steps) || shape[0] == 0 {
            return Err(Error::Schema(format!(
                "{} rows do not split into {steps} time steps",
                shape[0]
            )));
        }
        let batch = shape[0] / steps;
        let eps = F::from_f64(cfg.bn_eps);
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((self.running_mean.as_slice(), self.running_var.as_slice())),
        };
        let (mut h, stats) = tape.batch_norm(x, vars[0], vars[1], running, eps)?;
        let mut pooled = None;
        for l in 0..cfg.layers {
            let base = 2 + l * 8;
            let dir = |tape: &mut Tape<F>, input: Var, off: usize, reverse: bool| {
                let v = &vars[base + off..base + off + 4];
                tape.gru(input, v[0], v[1], v[2], v[3], steps, batch, reverse)
            };
            let fwd = dir(tape, h, 0, false)?;
            let bwd = dir(tape, h, 4, true)?;
            if l + 1 == cfg.layers && cfg.pooling == Pooling::Last {
                let f_last = tape.select_time(fwd, steps - 1, steps, batch)?;
                let b_last = tape.select_time(bwd, 0, steps, batch)?;
                pooled = Some(tape.concat_cols(f_last, b_last)?);
            }
            h = tape.concat_cols(fwd, bwd)?;
        }
        let pooled = match pooled {
            Some(p) => p,
            None => tape.mean_time(h, steps, batch)?,
        };
        let n = vars.len();
        let proj = tape.matmul(pooled, vars[n - 2])?;
        let proj = tape.add_bias(proj, vars[n - 1])?;
        let z = tape.l2_normalize_rows(proj)?;
        Ok((z, stats))
    }

    /// Encodes without recording gradients. Train mode refreshes the running
    /// statistics.
    pub fn encode(&mut self, x: &Tensor<F>, steps: usize, mode: Mode) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (z, stats) = self.forward(&mut tape, &vars, xv, steps, mode)?;
        if let Some(s) = stats {
            self.update_running(&s);
        }
        Ok(tape.value(z).clone())
    }

    /// Eval-mode embedding; a pure function of `(self, x)`.
    pub fn embed(&self, x: &Tensor<F>, steps: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (z, _) = self.forward(&mut tape, &vars, xv, steps, Mode::Eval)?;
        Ok(tape.value(z).clone())
    }
}

/// Packs equal-length clips into a time-major `(T * B) x (2 * J * 3)` matrix.
pub fn time_major_batch<F: Real>(seqs: &[&SkeletonSequence]) -> Result<(Tensor<F>, usize)> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Usage("cannot batch zero sequences".into()))?;
    let (t, w) = (first.frames(), first.frame_width());
    if let Some(s) = seqs.iter().find(|s| s.frames() != t || s.frame_width() != w) {
        return Err(Error::Schema(format!(
            "batch mixes shapes T={t}, width={w} and T={}, width={}",
            s.frames(),
            s.frame_width()
        )));
    }
    let b = seqs.len();
    let mut data = Vec::with_capacity(t * b * w);
    for step in 0..t {
        for s in seqs {
            data.extend(s.frame(step).iter().map(|&v| F::from_f64(v)));
        }
    }
    Ok((Tensor::matrix(t * b, w, data), t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            hidden_dim: 5,
            embedding_dim: 4,
            layers: 2,
            pooling: Pooling::Mean,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    fn input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn outputs_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for pooling in [Pooling::Mean, Pooling::Last] {
            let cfg = EncoderConfig { pooling, ..small_cfg() };
            let mut enc = EncoderParams::<f64>::init(&cfg, 1).unwrap();
            let x = input(&mut rng, 7 * 3, 6);
            for mode in [Mode::Train, Mode::Eval] {
                let z = enc.encode(&x, 7, mode).unwrap();
                assert_eq!(z.shape(), [3, 4]);
                for r in 0..3 {
                    let n: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_moves_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = EncoderParams::<f64>::init(&small_cfg(), 3).unwrap();
        let x = input(&mut rng, 4 * 2, 6);
        let a = enc.embed(&x, 4).unwrap();
        let b = enc.embed(&x, 4).unwrap();
        assert_eq!(a, b);
        let before = enc.running_mean().to_vec();
        enc.encode(&x, 4, Mode::Eval).unwrap();
        assert_eq!(enc.running_mean(), before.as_slice());
        enc.encode(&x, 4, Mode::Train).unwrap();
        assert_ne!(enc.running_mean(), before.as_slice());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = small_cfg();
        let a = EncoderParams::<f64>::init(&cfg, 9).unwrap();
        let b = EncoderParams::<f64>::init(&cfg, 9).unwrap();
        let c = EncoderParams::<f64>::init(&cfg, 10).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a, c);
        let bound = 1.0 / (cfg.hidden_dim as f64).sqrt();
        for (name, p) in cfg.param_names().iter().zip(a.params()) {
            if name == "bn.gamma" {
                assert!(p.data().iter().all(|&v| v == 1.0));
            } else if p.shape().len() == 1 {
                assert!(p.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(p.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn copy_is_independent() {
        let src = EncoderParams::<f64>::init(&small_cfg(), 4).unwrap();
        let mut dst = src.copy_params();
        assert_eq!(dst, src);
        dst.params_mut()[3].data_mut()[0] += 1.0;
        assert_ne!(dst, src);
        assert_ne!(dst.digest(), src.digest());
    }

    #[test]
    fn input_width_mismatch_is_schema_error() {
        let enc = EncoderParams::<f64>::init(&small_cfg(), 0).unwrap();
        let x = Tensor::zeros(&[8, 5]);
        assert!(matches!(enc.embed(&x, 4), Err(Error::Schema(_))));
        let x = Tensor::zeros(&[9, 6]);
        assert!(matches!(enc.embed(&x, 4), Err(Error::Schema(_))));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let cfg = small_cfg();
        let enc = EncoderParams::<f64>::init(&cfg, 0).unwrap();
        let ok = EncoderParams::from_parts(
            &cfg,
            enc.params().to_vec(),
            enc.running_mean().to_vec(),
            enc.running_var().to_vec(),
        )
        .unwrap();
        assert_eq!(ok, enc);
        let mut bad = enc.params().to_vec();
        bad.swap(2, 3);
        assert!(EncoderParams::from_parts(&cfg, bad, vec![0.0; 6], vec![1.0; 6]).is_err());
    }

    #[test]
    fn time_major_layout() {
        let mut a = SkeletonSequence::zeros(2, 1);
        let mut b = SkeletonSequence::zeros(2, 1);
        a.set_joint(1, 0, 0, [1.0, 2.0, 3.0]);
        b.set_joint(0, 1, 0, [4.0, 5.0, 6.0]);
        let (x, t) = time_major_batch::<f64>(&[&a, &b]).unwrap();
        assert_eq!((t, x.shape()), (2, &[4usize, 6][..]));
        assert_eq!(x.row(1), [0.0, 0.0, 0.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.row(2), [1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let c = SkeletonSequence::zeros(3, 1);
        assert!(time_major_batch::<f64>(&[&a, &c]).is_err());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderParams::<f64>::init(&small_cfg(), 6).unwrap();
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape, true);
        let x = tape.constant(input(&mut rng, 3 * 4, 6));
        let (z, _) = enc.forward(&mut tape, &vars, x, 3, Mode::Train).unwrap();
        let w = tape.constant(input(&mut rng, 4, 4));
        let zw = tape.mul(z, w).unwrap();
        let loss = tape.sum(zw);
        let g = tape.backward(loss).unwrap();
        for (name, v) in small_cfg().param_names().iter().zip(&vars) {
            let gv = g.wrt(&tape, *v);
            assert!(gv.all_finite(), "{name}");
            assert!(gv.data().iter().any(|&d| d != 0.0), "{name} has zero gradient");
        }
    }
}
