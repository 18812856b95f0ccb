use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * p`, then `p <- p - lr * v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum buffer per parameter tensor, zero at the start.
pub fn zero_velocity<F: Real>(params: &[Tensor<F>]) -> Vec<Tensor<F>> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Applies one step to every `(param, grad, velocity)` triple.
pub fn sgd_update<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    velocity: &mut [Tensor<F>],
    opt: &Sgd,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Usage(format!(
            "sgd_update: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Dimension {
                op: "sgd_update",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    let (lr, m, wd) = (
        F::from_f64(opt.lr),
        F::from_f64(opt.momentum),
        F::from_f64(opt.weight_decay),
    );
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPT: Sgd = Sgd {
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
    };

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut v = zero_velocity(&p);
        let g = vec![Tensor::vector(vec![0.0, 0.0])];
        let opt = Sgd { weight_decay: 0.0, ..OPT };
        sgd_update(&mut p, &g, &mut v, &opt).unwrap();
        assert_eq!(p[0].data(), [1.0, -2.0]);
    }

    #[test]
    fn first_step_from_rest() {
        let mut p = vec![Tensor::vector(vec![0.5])];
        let mut v = zero_velocity(&p);
        let g = vec![Tensor::vector(vec![2.0])];
        sgd_update(&mut p, &g, &mut v, &OPT).unwrap();
        assert_eq!(p[0].data()[0], 0.5 - 0.01 * (2.0 + 1e-4 * 0.5));
    }

    #[test]
    fn ten_steps_match_scalar_simulation() {
        let grads = [0.3, -1.2, 0.7, 0.0, 2.5, -0.4, 0.1, 0.9, -2.0, 1.1];
        let mut p = vec![Tensor::vector(vec![1.5])];
        let mut v = zero_velocity(&p);
        let (mut ps, mut vs) = (1.5f64, 0.0f64);
        for &g in &grads {
            sgd_update(&mut p, &[Tensor::vector(vec![g])], &mut v, &OPT).unwrap();
            vs = 0.9 * vs + g + 1e-4 * ps;
            ps -= 0.01 * vs;
            assert!((p[0].data()[0] - ps).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut v = zero_velocity(&p);
        let g = vec![Tensor::vector(vec![1.0])];
        assert!(sgd_update(&mut p, &g, &mut v, &OPT).is_err());
        assert!(sgd_update(&mut p, &[], &mut v, &OPT).is_err());
    }
}
