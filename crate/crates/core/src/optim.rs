//! RMSProp updates and the critic weight-clipping constraint.

use ndarray::Zip;

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};
use crate::scalar::{lit, Scalar};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Running average of squared gradients for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState<T> {
    accumulators: Gradients<T>,
    decay: T,
    epsilon: T,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(net: &Mlp<T>, decay: f64, epsilon: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidConfig(format!("RMSProp decay {decay} not in (0, 1)")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("RMSProp epsilon {epsilon} must be positive")));
        }
        Ok(Self {
            accumulators: Gradients::zeros_like(net),
            decay: lit(decay),
            epsilon: lit(epsilon),
        })
    }

    pub fn with_defaults(net: &Mlp<T>) -> Self {
        Self::new(net, DEFAULT_DECAY, DEFAULT_EPSILON).expect("default RMSProp constants are valid")
    }

    pub fn accumulators(&self) -> &Gradients<T> {
        &self.accumulators
    }
}

/// One RMSProp step:
/// `acc ← decay·acc + (1−decay)·g²`, `θ ← θ − lr·g / (√acc + ε)`.
///
/// Aborts without touching `net` or `state` if any gradient is non-finite.
pub fn rmsprop_step<T: Scalar>(net: &mut Mlp<T>, grads: &Gradients<T>, state: &mut RmsPropState<T>, lr: T) -> Result<()> {
    if !grads.congruent_with(net) || !state.accumulators.congruent_with(net) {
        return Err(Error::Shape("network, gradients and optimizer state disagree".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let decay = state.decay;
    let keep = T::one() - decay;
    let eps = state.epsilon;
    for ((layer, (gw, gb)), (aw, ab)) in net
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.accumulators.layers.iter_mut())
    {
        Zip::from(&mut layer.weight).and(gw).and(aw).for_each(|p, &g, a| {
            *a = decay * *a + keep * g * g;
            *p -= lr * g / (a.sqrt() + eps);
        });
        Zip::from(&mut layer.bias).and(gb).and(ab).for_each(|p, &g, a| {
            *a = decay * *a + keep * g * g;
            *p -= lr * g / (a.sqrt() + eps);
        });
    }
    Ok(())
}

/// Clamps every weight and bias into `[-c, c]`.
pub fn clip_parameters<T: Scalar>(net: &mut Mlp<T>, c: T) {
    net.for_each_param_mut(|p| *p = p.max(-c).min(c));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, Activation, Dense};
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;

    fn scalar_net(value: f64) -> Mlp<f64> {
        Mlp::from_layers(vec![Dense {
            weight: array![[value]],
            bias: array![0.0],
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    fn grads_of(w: f64, b: f64) -> Gradients<f64> {
        Gradients {
            layers: vec![(array![[w]], array![b])],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_accumulator() {
        let mut net = scalar_net(0.5);
        let mut state = RmsPropState::with_defaults(&net);
        rmsprop_step(&mut net, &grads_of(1.0, 0.0), &mut state, 0.1).unwrap();
        let before = net.clone();
        let acc_before = state.accumulators().layers[0].0[[0, 0]];
        rmsprop_step(&mut net, &grads_of(0.0, 0.0), &mut state, 0.1).unwrap();
        assert_eq!(net, before);
        assert!((state.accumulators().layers[0].0[[0, 0]] - 0.9 * acc_before).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut net = scalar_net(0.0);
        let mut state = RmsPropState::new(&net, 0.9, 1e-8).unwrap();
        rmsprop_step(&mut net, &grads_of(1.0, 0.0), &mut state, 0.1).unwrap();
        assert!((state.accumulators().layers[0].0[[0, 0]] - 0.1).abs() < 1e-15);
        let expected = -0.1 / (0.1f64.sqrt() + 1e-8);
        assert!((net.param(0) - expected).abs() < 1e-15);
        assert!((net.param(0) + 0.316_227_7).abs() < 1e-6);
    }

    #[test]
    fn repeated_identical_gradients_shrink_the_step() {
        let mut net = scalar_net(0.0);
        let mut state = RmsPropState::with_defaults(&net);
        rmsprop_step(&mut net, &grads_of(1.0, 0.0), &mut state, 0.1).unwrap();
        let first = net.param(0);
        rmsprop_step(&mut net, &grads_of(1.0, 0.0), &mut state, 0.1).unwrap();
        let second = net.param(0) - first;
        assert!(second.abs() < first.abs());
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut net = scalar_net(0.25);
        let mut state = RmsPropState::with_defaults(&net);
        let before = (net.clone(), state.clone());
        assert!(rmsprop_step(&mut net, &grads_of(f64::NAN, 0.0), &mut state, 0.1).is_err());
        assert_eq!((net, state), before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut net = scalar_net(0.25);
        let mut state = RmsPropState::with_defaults(&net);
        let wrong = Gradients {
            layers: vec![(Array2::zeros((2, 1)), Array1::zeros(2))],
        };
        assert!(matches!(rmsprop_step(&mut net, &wrong, &mut state, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn clipping_clamps_and_is_a_noop_inside_the_box() {
        let mut net = scalar_net(0.5);
        clip_parameters(&mut net, 0.01);
        assert_eq!(net.param(0), 0.01);

        let mut small = scalar_net(0.004);
        let before = small.clone();
        clip_parameters(&mut small, 0.01);
        assert_eq!(small, before);

        let mut big: Mlp<f64> =
            init_mlp(&[8, 16, 1], &[Activation::leaky_relu(), Activation::Linear], 3).unwrap();
        big.for_each_param_mut(|p| *p += 0.3);
        clip_parameters(&mut big, 0.01);
        assert!(big.max_abs_param() <= 0.01);
        let once = big.clone();
        clip_parameters(&mut big, 0.01);
        assert_eq!(big, once);
    }

    proptest! {
        #[test]
        fn updates_are_finite_and_oppose_the_gradient(
            params in prop::collection::vec(-2.0f64..2.0, 6),
            grads in prop::collection::vec(-1e3f64..1e3, 6),
            lr in 1e-6f64..1.0,
        ) {
            let mut net = Mlp::from_layers(vec![Dense {
                weight: Array2::from_shape_vec((2, 2), params[..4].to_vec()).unwrap(),
                bias: Array1::from(params[4..].to_vec()),
                activation: Activation::Linear,
            }]).unwrap();
            let g = Gradients { layers: vec![(
                Array2::from_shape_vec((2, 2), grads[..4].to_vec()).unwrap(),
                Array1::from(grads[4..].to_vec()),
            )] };
            let before = net.clone();
            let mut state = RmsPropState::with_defaults(&net);
            rmsprop_step(&mut net, &g, &mut state, lr).unwrap();
            for i in 0..6 {
                let delta = net.param(i) - before.param(i);
                prop_assert!(net.param(i).is_finite());
                let gi = g.get(i);
                if gi != 0.0 {
                    prop_assert!(delta != 0.0 && delta.signum() == -gi.signum());
                }
            }
        }
    }
}
