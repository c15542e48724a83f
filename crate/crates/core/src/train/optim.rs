use crate::error::{shape_err, Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 2000,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocities: Vec<Tensor>,
    pub iteration: u64,
}

impl OptimState {
    pub fn for_network(net: &Network) -> Self {
        OptimState {
            velocities: net
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            iteration: 0,
        }
    }
}

/// One SGD step with classical momentum, weight decay folded into the gradient:
/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr * v`.
pub fn sgd_step<'a, I>(
    params: I,
    grads: &[Tensor],
    state: &mut OptimState,
    hyper: &OptimHyper,
) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(shape_err!(
            "sgd step over {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocities.len()
        ));
    }
    for (i, ((w, g), v)) in params.iter().zip(grads).zip(&state.velocities).enumerate() {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(shape_err!(
                "sgd param {} {:?} vs grad {:?} vs velocity {:?}",
                i,
                w.shape(),
                g.shape(),
                v.shape()
            ));
        }
    }
    for ((w, g), v) in params.into_iter().zip(grads).zip(&mut state.velocities) {
        for ((wv, &gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = hyper.momentum * *vv + (gv + hyper.weight_decay * *wv);
            *wv -= hyper.lr * *vv;
        }
    }
    state.iteration += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn hand_step() {
        let mut w = one(1.0);
        let mut state = OptimState {
            velocities: vec![one(0.0)],
            iteration: 0,
        };
        let hyper = OptimHyper {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            iterations: 1,
        };
        sgd_step([&mut w], &[one(0.5)], &mut state, &hyper).unwrap();
        assert_eq!(state.velocities[0].data()[0], 0.5);
        assert_eq!(w.data()[0], 0.95);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut w = Tensor::from_fn(&[2, 2], |i| i as f64 - 1.5);
        let before = w.clone();
        let mut state = OptimState {
            velocities: vec![Tensor::zeros(&[2, 2])],
            iteration: 0,
        };
        let hyper = OptimHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        sgd_step([&mut w], &[Tensor::zeros(&[2, 2])], &mut state, &hyper).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn defaults_and_validation() {
        let d = OptimHyper::default();
        assert_eq!((d.lr, d.momentum, d.weight_decay), (0.0001, 0.9, 0.0005));
        assert!(d.validate().is_ok());
        for bad in [
            OptimHyper { lr: 0.0, ..d },
            OptimHyper { momentum: 1.0, ..d },
            OptimHyper { weight_decay: -1e-3, ..d },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = Tensor::zeros(&[3]);
        let mut state = OptimState {
            velocities: vec![Tensor::zeros(&[3])],
            iteration: 0,
        };
        let h = OptimHyper::default();
        assert!(sgd_step([&mut w], &[Tensor::zeros(&[2])], &mut state, &h).is_err());
        assert!(sgd_step([&mut w], &[], &mut state, &h).is_err());
        assert_eq!(state.iteration, 0);
    }
}
