//! Fused GRU layer kernels.
//!
//! Gate layout is `[reset | update | candidate]` along the `3H` axis:
//!
//! ```text
//! r = sigmoid(x W_r + b_ir + h W_hr + b_hr)
//! z = sigmoid(x W_z + b_iz + h W_hz + b_hz)
//! n = tanh(x W_n + b_in + r * (h W_hn + b_hn))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! Sequences are time-major: row `t * batch + b` holds sample `b` at step `t`.

use crate::tensor::{gemm, Real};

pub(crate) struct GruSaved<F> {
    /// `[r | z | n]` per row, `(T*B) x 3H`.
    pub gates: Vec<F>,
    /// `h_prev W_hn + b_hn` per row, `(T*B) x H`.
    pub hn: Vec<F>,
}

pub(crate) struct GruDims {
    pub steps: usize,
    pub batch: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl GruDims {
    /// Time index visited at iteration `s`.
    fn time(&self, s: usize) -> usize {
        if self.reverse {
            self.steps - 1 - s
        } else {
            s
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp_fast())
}

/// `tanh` through a single exponential, several times cheaper than the libm
/// routine in f32. Absolute error stays within a few ulps.
#[inline]
pub(crate) fn tanh<F: Real>(x: F) -> F {
    let e = (-(x.abs() + x.abs())).exp_fast();
    let t = (F::one() - e) / (F::one() + e);
    if x < F::zero() {
        -t
    } else {
        t
    }
}

/// Runs the layer over the whole sequence, returning `(T*B) x H` outputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<F: Real>(
    dims: &GruDims,
    x: &[F],
    w_i: &[F],
    w_h: &[F],
    b_i: &[F],
    b_h: &[F],
    save: bool,
) -> (Vec<F>, Option<GruSaved<F>>) {
    let GruDims {
        steps,
        batch,
        input,
        hidden,
        ..
    } = *dims;
    let h3 = 3 * hidden;
    let rows = steps * batch;

    let mut xi = vec![F::zero(); rows * h3];
    gemm(false, false, rows, h3, input, x, w_i, F::zero(), &mut xi);
    for row in xi.chunks_exact_mut(h3) {
        for (v, &b) in row.iter_mut().zip(b_i) {
            *v += b;
        }
    }

    let mut out = vec![F::zero(); rows * hidden];
    let mut gates = if save { vec![F::zero(); rows * h3] } else { Vec::new() };
    let mut hn_all = if save { vec![F::zero(); rows * hidden] } else { Vec::new() };
    let mut h_prev = vec![F::zero(); batch * hidden];
    let mut hh = vec![F::zero(); batch * h3];
    let mut gate_buf = vec![F::zero(); h3];

    for s in 0..steps {
        let t = dims.time(s);
        for row in hh.chunks_exact_mut(h3) {
            row.copy_from_slice(b_h);
        }
        gemm(false, false, batch, h3, hidden, &h_prev, w_h, F::one(), &mut hh);
        let block = t * batch;
        let xs = &xi[block * h3..(block + batch) * h3];
        let outs = &mut out[block * hidden..(block + batch) * hidden];
        for (b, ((xrow, hrow), orow)) in xs
            .chunks_exact(h3)
            .zip(hh.chunks_exact(h3))
            .zip(outs.chunks_exact_mut(hidden))
            .enumerate()
        {
            let hp = &h_prev[b * hidden..(b + 1) * hidden];
            let g = &mut gate_buf[..];
            for ((gv, &xv), &hv) in g[..2 * hidden].iter_mut().zip(&xrow[..2 * hidden]).zip(&hrow[..2 * hidden]) {
                *gv = sigmoid(xv + hv);
            }
            let (rz, n) = g.split_at_mut(2 * hidden);
            let (r, z) = rz.split_at(hidden);
            for (((nv, &xv), &hv), &rv) in n.iter_mut().zip(&xrow[2 * hidden..]).zip(&hrow[2 * hidden..]).zip(r) {
                *nv = tanh(xv + rv * hv);
            }
            for (((ov, &nv), &zv), &hv) in orow.iter_mut().zip(&*n).zip(z).zip(hp) {
                *ov = (F::one() - zv) * nv + zv * hv;
            }
            if save {
                let row = block + b;
                gates[row * h3..(row + 1) * h3].copy_from_slice(g);
                hn_all[row * hidden..(row + 1) * hidden].copy_from_slice(&hrow[2 * hidden..]);
            }
        }
        let o_off = t * batch * hidden;
        h_prev.copy_from_slice(&out[o_off..o_off + batch * hidden]);
    }

    let saved = save.then_some(GruSaved { gates, hn: hn_all });
    (out, saved)
}

pub(crate) struct GruGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw_i: Vec<F>,
    pub dw_h: Vec<F>,
    pub db_i: Vec<F>,
    pub db_h: Vec<F>,
}

/// Backpropagation through time given `dout`, the gradient of every output row.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Real>(
    dims: &GruDims,
    x: &[F],
    w_i: &[F],
    w_h: &[F],
    out: &[F],
    saved: &GruSaved<F>,
    dout: &[F],
    need_dx: bool,
) -> GruGrads<F> {
    let GruDims {
        steps,
        batch,
        input,
        hidden,
        ..
    } = *dims;
    let h3 = 3 * hidden;
    let rows = steps * batch;

    // pre-activation gradients w.r.t. x W_i + b_i and h W_h + b_h
    let mut dxi = vec![F::zero(); rows * h3];
    let mut dhh = vec![F::zero(); rows * h3];
    // h_prev for each row, laid out by time index
    let mut h_prev_all = vec![F::zero(); rows * hidden];
    let mut carry = vec![F::zero(); batch * hidden];
    let zeros = vec![F::zero(); batch * hidden];

    for s in (0..steps).rev() {
        let t = dims.time(s);
        let hp: &[F] = if s == 0 {
            &zeros
        } else {
            let tp = dims.time(s - 1);
            &out[tp * batch * hidden..(tp + 1) * batch * hidden]
        };
        h_prev_all[t * batch * hidden..(t + 1) * batch * hidden].copy_from_slice(hp);

        let mut direct = vec![F::zero(); batch * hidden];
        for b in 0..batch {
            let g_off = (t * batch + b) * h3;
            let o_off = (t * batch + b) * hidden;
            for j in 0..hidden {
                let r = saved.gates[g_off + j];
                let z = saved.gates[g_off + hidden + j];
                let n = saved.gates[g_off + 2 * hidden + j];
                let hn = saved.hn[o_off + j];
                let hpj = hp[b * hidden + j];
                let dh = dout[o_off + j] + carry[b * hidden + j];

                let dn = dh * (F::one() - z);
                let dz = dh * (hpj - n);
                direct[b * hidden + j] = dh * z;
                let dn_pre = dn * (F::one() - n * n);
                let dr_pre = dn_pre * hn * r * (F::one() - r);
                let dz_pre = dz * z * (F::one() - z);

                dxi[g_off + j] = dr_pre;
                dxi[g_off + hidden + j] = dz_pre;
                dxi[g_off + 2 * hidden + j] = dn_pre;
                dhh[g_off + j] = dr_pre;
                dhh[g_off + hidden + j] = dz_pre;
                dhh[g_off + 2 * hidden + j] = dn_pre * r;
            }
        }
        // carry = direct + dhh_t W_h^T
        carry.copy_from_slice(&direct);
        let dhh_t = &dhh[t * batch * h3..(t + 1) * batch * h3];
        gemm(false, true, batch, hidden, h3, dhh_t, w_h, F::one(), &mut carry);
    }

    let mut dw_h = vec![F::zero(); hidden * h3];
    gemm(true, false, hidden, h3, rows, &h_prev_all, &dhh, F::zero(), &mut dw_h);
    let mut dw_i = vec![F::zero(); input * h3];
    gemm(true, false, input, h3, rows, x, &dxi, F::zero(), &mut dw_i);

    let mut db_i = vec![F::zero(); h3];
    let mut db_h = vec![F::zero(); h3];
    for (ri, rh) in dxi.chunks_exact(h3).zip(dhh.chunks_exact(h3)) {
        for j in 0..h3 {
            db_i[j] += ri[j];
            db_h[j] += rh[j];
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); rows * input];
        gemm(false, true, rows, input, h3, &dxi, w_i, F::zero(), &mut dx);
        dx
    });

    GruGrads {
        dx,
        dw_i,
        dw_h,
        db_i,
        db_h,
    }
}
