use rand::Rng;

use crate::tensor::{Float, ParamStore, Var};

use super::layers::{Conv, ConvSpec, Ctx};

/// Logit of the 0.01 occupancy prior.
pub const OCCUPANCY_PRIOR_BIAS: f64 = -4.59;

/// Four-layer prediction network: three 3x3 conv + ReLU layers and a 1x1
/// output layer.
#[derive(Clone, Debug)]
pub struct Head {
    hidden: Vec<Conv>,
    out: Conv,
}

impl Head {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, c: usize, out_channels: usize, out_bias: f64, rng: &mut impl Rng) -> Self {
        let hidden = (0..3)
            .map(|i| Conv::new(store, &format!("{name}.conv{i}"), ConvSpec::new(c, c, 3), rng))
            .collect();
        let out = Conv::new(store, &format!("{name}.out"), ConvSpec::new(c, out_channels, 1), rng);
        // A damped output layer keeps initial predictions near the prior.
        store.get_mut(out.weight).value.scale_assign(F::from_f64_lossy(0.1));
        store.get_mut(out.bias.expect("output conv has a bias")).value.fill(F::from_f64_lossy(out_bias));
        Self { hidden, out }
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Var {
        let mut y = x;
        for conv in &self.hidden {
            y = conv.forward_relu(cx, y);
        }
        self.out.forward(cx, y)
    }
}
