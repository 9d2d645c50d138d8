use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{norm_groups, Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Forward-pass context: the tape plus parameter bindings, so a parameter
/// used several times (shared heads, shared fusion convs) enters the graph
/// once.
pub struct Ctx<'a, F: Float> {
    pub g: &'a mut Graph<F>,
    pub store: &'a ParamStore<F>,
    bound: HashMap<ParamId, Var>,
}

impl<'a, F: Float> Ctx<'a, F> {
    pub fn new(g: &'a mut Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self { g, store, bound: HashMap::new() }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.g.param(self.store, id);
        self.bound.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.g.value(v).dims4()
    }
}

/// Convolution with bias and optional group normalization.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub norm: Option<(ParamId, ParamId, usize)>,
    pub stride: usize,
    pub pad: usize,
}

/// Builder settings for [`Conv::new`].
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub norm: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: 1, norm: false }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn norm(mut self, on: bool) -> Self {
        self.norm = on;
        self
    }
}

impl Conv {
    /// Normalized convolutions carry no bias; the norm's shift replaces it.
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let weight = store.add_conv_weight(format!("{name}.weight"), spec.cout, spec.cin, spec.k, rng);
        let (bias, norm) = if spec.norm {
            let gamma = store.add(format!("{name}.norm.gamma"), Tensor::full(&[spec.cout], F::one()));
            let beta = store.add(format!("{name}.norm.beta"), Tensor::zeros(&[spec.cout]));
            (None, Some((gamma, beta, norm_groups(spec.cout))))
        } else {
            (Some(store.add(format!("{name}.bias"), Tensor::zeros(&[spec.cout]))), None)
        };
        Self {
            weight,
            bias,
            norm,
            stride: spec.stride,
            pad: spec.k / 2,
        }
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Var {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        let y = cx.g.conv2d(x, w, b, self.stride, self.pad);
        match self.norm {
            Some((gamma, beta, groups)) => {
                let (gv, bv) = (cx.p(gamma), cx.p(beta));
                cx.g.group_norm(y, gv, bv, groups)
            }
            None => y,
        }
    }

    pub fn forward_relu<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Var {
        let y = self.forward(cx, x);
        cx.g.relu(y)
    }
}
