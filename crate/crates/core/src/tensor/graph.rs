use std::sync::Arc;

use super::kernels::{self, NormStats};
use super::{Float, ParamId, ParamStore, Tensor};

/// Node handle on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Precomputed bilinear gather table for sampling `[N, C, H, W]` feature maps
/// onto an `out_h x out_w` grid at several heights.
///
/// Entries are laid out `[view][height][cell]`; each cell carries four source
/// indices into the view's `H x W` plane and their bilinear weights. Invalid
/// cells carry zero weights.
#[derive(Clone, Debug)]
pub struct SampleTable<F> {
    pub views: usize,
    pub heights: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub index: Vec<[u32; 4]>,
    pub weight: Vec<[F; 4]>,
}

impl<F: Float> SampleTable<F> {
    fn cells(&self) -> usize {
        self.out_h * self.out_w
    }

    fn entry(&self, view: usize, height: usize, cell: usize) -> usize {
        (view * self.heights + height) * self.cells() + cell
    }
}

enum Op<F> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats<F>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, F),
    Concat(Vec<Var>),
    Upsample(Var),
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Sample {
        x: Var,
        table: Arc<SampleTable<F>>,
    },
    ViewMax {
        x: Var,
        arg: Vec<u32>,
    },
    ViewMean(Var),
    Sigmoid(Var),
    /// Scalar function of one input whose gradient was computed eagerly.
    ScalarFn {
        x: Var,
        grad: Tensor<F>,
    },
    Sum(Vec<Var>),
    SumAll(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Reverse-mode tape. Build it with the operator methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<F> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(out, Op::Conv { x, w, b, stride, pad }, tracked)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let eps = F::from_f64_lossy(1e-5);
        let (out, stats) = kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps);
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let tracked = self.tracked(x);
        self.push(out, Op::Relu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        let tracked = self.tracked(x);
        self.push(out, Op::Sigmoid(x), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), tracked)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        let tracked = self.tracked(x);
        self.push(out, Op::Scale(x, s), tracked)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [n, _, h, w] = self.value(parts[0]).dims4();
        let channels: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let [pn, pc, ph, pw] = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched extents");
                pc
            })
            .collect();
        let ctot: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for i in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[i * c * h * w..(i + 1) * c * h * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::from_vec(&[n, ctot, h, w], data), Op::Concat(parts.to_vec()), tracked)
    }

    /// Nearest-neighbour resize to `ho x wo`.
    pub fn upsample_nearest(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let out = kernels::upsample_nearest_forward(self.value(x), ho, wo);
        let tracked = self.tracked(x);
        self.push(out, Op::Upsample(x), tracked)
    }

    pub fn max_pool3s2(&mut self, x: Var) -> Var {
        let (out, arg) = kernels::max_pool_forward(self.value(x));
        let tracked = self.tracked(x);
        self.push(out, Op::MaxPool { x, arg }, tracked)
    }

    /// Gathers `[N, C, H, W]` features through `table`, producing
    /// `[N, heights * C, out_h, out_w]` with height-major channel blocks.
    pub fn sample(&mut self, x: Var, table: Arc<SampleTable<F>>) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4();
        assert_eq!(n, table.views, "sample: table built for {} views, got {n}", table.views);
        assert_eq!((h, w), (table.in_h, table.in_w), "sample: feature extent mismatch");
        let cells = table.cells();
        let mut out = Tensor::zeros(&[n, table.heights * c, table.out_h, table.out_w]);
        let od = out.data_mut();
        for v in 0..n {
            for hi in 0..table.heights {
                for cell in 0..cells {
                    let e = table.entry(v, hi, cell);
                    let (idx, wt) = (table.index[e], table.weight[e]);
                    if wt.iter().all(|&q| q == F::zero()) {
                        continue;
                    }
                    for ch in 0..c {
                        let plane = &xv.data()[(v * c + ch) * h * w..(v * c + ch + 1) * h * w];
                        let s = plane[idx[0] as usize] * wt[0]
                            + plane[idx[1] as usize] * wt[1]
                            + plane[idx[2] as usize] * wt[2]
                            + plane[idx[3] as usize] * wt[3];
                        od[((v * table.heights + hi) * c + ch) * cells + cell] = s;
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Sample { x, table }, tracked)
    }

    /// Elementwise maximum over the leading (view) axis.
    pub fn view_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let per = xv.len() / n;
        let mut out = vec![F::neg_infinity(); per];
        let mut arg = vec![0u32; per];
        for v in 0..n {
            for (i, &val) in xv.data()[v * per..(v + 1) * per].iter().enumerate() {
                if val > out[i] {
                    out[i] = val;
                    arg[i] = v as u32;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = 1;
        let tracked = self.tracked(x);
        self.push(Tensor::from_vec(&shape, out), Op::ViewMax { x, arg }, tracked)
    }

    /// Arithmetic mean over the leading (view) axis.
    pub fn view_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let per = xv.len() / n;
        let inv = F::one() / F::from_usize(n).unwrap();
        let mut out = vec![F::zero(); per];
        for v in 0..n {
            for (o, &val) in out.iter_mut().zip(&xv.data()[v * per..(v + 1) * per]) {
                *o += val;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let mut shape = xv.shape().to_vec();
        shape[0] = 1;
        let tracked = self.tracked(x);
        self.push(Tensor::from_vec(&shape, out), Op::ViewMean(x), tracked)
    }

    /// Scalar node `value` depending on `x` with precomputed `d value / d x`.
    pub fn scalar_fn(&mut self, x: Var, value: F, grad: Tensor<F>) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape(), "scalar_fn: gradient shape mismatch");
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, tracked)
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::Sum(parts.to_vec()), tracked)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), tracked)
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let acc = |v: Var, t: Tensor<F>, grads: &mut [Option<Tensor<F>>]| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match grads[v.0].as_mut() {
                Some(e) => e.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::Conv { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(x), self.value(w), g, stride, pad, self.tracked(x));
                if let Some(dx) = dx {
                    acc(x, dx, grads);
                }
                acc(w, dw, grads);
                if let Some(b) = b {
                    acc(b, db, grads);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (dx, dg, db) = kernels::group_norm_backward(self.value(*x), self.value(*gamma), stats, *groups, g);
                acc(*x, dx, grads);
                acc(*gamma, dg, grads);
                acc(*beta, db, grads);
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= F::zero() {
                        *dv = F::zero();
                    }
                }
                acc(x, d, grads);
            }
            &Op::Sigmoid(x) => {
                let mut d = g.clone();
                for (dv, &s) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= s * (F::one() - s);
                }
                acc(x, d, grads);
            }
            &Op::Add(a, b) => {
                acc(a, g.clone(), grads);
                acc(b, g.clone(), grads);
            }
            &Op::Scale(x, s) => acc(x, g.map(|v| v * s), grads),
            Op::Concat(parts) => {
                let [n, ctot, h, w] = g.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dims4()[1];
                    let mut d = Vec::with_capacity(n * c * hw);
                    for item in 0..n {
                        let start = (item * ctot + offset) * hw;
                        d.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    acc(p, Tensor::from_vec(&[n, c, h, w], d), grads);
                    offset += c;
                }
            }
            &Op::Upsample(x) => {
                let [_, _, h, w] = self.value(x).dims4();
                acc(x, kernels::upsample_nearest_backward(g, h, w), grads);
            }
            Op::MaxPool { x, arg } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    d.data_mut()[a as usize] += gv;
                }
                acc(*x, d, grads);
            }
            Op::Sample { x, table } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let cells = table.cells();
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let dd = d.data_mut();
                for v in 0..n {
                    for hi in 0..table.heights {
                        for cell in 0..cells {
                            let e = table.entry(v, hi, cell);
                            let (idx, wt) = (table.index[e], table.weight[e]);
                            if wt.iter().all(|&q| q == F::zero()) {
                                continue;
                            }
                            for ch in 0..c {
                                let gv = g.data()[((v * table.heights + hi) * c + ch) * cells + cell];
                                let base = (v * c + ch) * h * w;
                                for k in 0..4 {
                                    dd[base + idx[k] as usize] += gv * wt[k];
                                }
                            }
                        }
                    }
                }
                acc(*x, d, grads);
            }
            Op::ViewMax { x, arg } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let per = g.len();
                for (i, (&a, &gv)) in arg.iter().zip(g.data()).enumerate() {
                    d.data_mut()[a as usize * per + i] = gv;
                }
                acc(*x, d, grads);
            }
            &Op::ViewMean(x) => {
                let shape = self.value(x).shape().to_vec();
                let n = shape[0];
                let inv = F::one() / F::from_usize(n).unwrap();
                let mut data = Vec::with_capacity(n * g.len());
                for _ in 0..n {
                    data.extend(g.data().iter().map(|&v| v * inv));
                }
                acc(x, Tensor::from_vec(&shape, data), grads);
            }
            Op::ScalarFn { x, grad } => {
                let s = g.data()[0];
                acc(*x, grad.map(|v| v * s), grads);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(p, g.clone(), grads);
                }
            }
            &Op::SumAll(x) => {
                let s = g.data()[0];
                acc(x, Tensor::full(self.value(x).shape(), s), grads);
            }
        }
    }

    /// Adds the parameter gradients held in `grads` to `store`'s buffers.
    pub fn accumulate_param_grads(&self, grads: &Grads<F>, store: &mut ParamStore<F>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 * 1.37 + seed) * 0.917).sin()).collect())
    }

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += h;
                let mut xm = x0.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x0: Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(x.clone(), true);
            let out = build(&mut g, v);
            let w = pseudo(g.value(out).shape(), 0.5);
            let wv = g.input(w, false);
            let prod = elementwise_mul_const(&mut g, out, wv);
            let s = g.sum_all(prod);
            (g, v, s)
        };
        let (g, v, s) = eval(&x0);
        let analytic = g.backward(s).get(v).cloned().unwrap();
        let numeric = numeric_grad(&x0, |x| {
            let (g, _, s) = eval(x);
            g.value(s).data()[0]
        });
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    // Weighted sum through a ScalarFn so every output entry matters.
    fn elementwise_mul_const(g: &mut Graph<f64>, x: Var, w: Var) -> Var {
        let wv = g.value(w).clone();
        let xv = g.value(x).clone();
        let prod: f64 = xv.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
        g.scalar_fn(x, prod, wv)
    }

    #[test]
    fn conv_gradients() {
        check(pseudo(&[2, 3, 7, 6], 0.1), |g, x| {
            let w = g.input(pseudo(&[4, 3, 3, 3], 2.0), false);
            let b = g.input(pseudo(&[4], 3.0), false);
            g.conv2d(x, w, Some(b), 2, 1)
        });
        check(pseudo(&[4, 3, 3, 3], 0.2), |g, w| {
            let x = g.input(pseudo(&[2, 3, 7, 6], 1.0), false);
            g.conv2d(x, w, None, 1, 1)
        });
    }

    #[test]
    fn group_norm_gradients() {
        check(pseudo(&[2, 4, 3, 3], 0.4), |g, x| {
            let ga = g.input(pseudo(&[4], 1.0), false);
            let be = g.input(pseudo(&[4], 2.0), false);
            g.group_norm(x, ga, be, 2)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check(pseudo(&[2, 2, 5, 5], 0.7), |g, x| g.max_pool3s2(x));
        check(pseudo(&[1, 2, 3, 5], 0.7), |g, x| g.upsample_nearest(x, 6, 9));
        check(pseudo(&[3, 2, 4, 4], 0.9), |g, x| g.view_max(x));
        check(pseudo(&[3, 2, 4, 4], 0.9), |g, x| g.view_mean(x));
        check(pseudo(&[1, 2, 4, 4], 0.9), |g, x| {
            let y = g.sigmoid(x);
            let z = g.relu(x);
            let c = g.concat(&[y, z]);
            let s = g.scale(c, 0.5);
            g.add(s, c)
        });
    }

    #[test]
    fn sample_gradients() {
        let table = Arc::new(SampleTable {
            views: 2,
            heights: 2,
            in_h: 3,
            in_w: 4,
            out_h: 2,
            out_w: 2,
            index: (0..16).map(|i| [i % 12, (i + 1) % 12, (i + 4) % 12, (i + 5) % 12]).collect(),
            weight: (0..16)
                .map(|i| if i == 5 { [0.0; 4] } else { [0.1, 0.2, 0.3, 0.4] })
                .collect(),
        });
        check(pseudo(&[2, 3, 3, 4], 0.3), move |g, x| g.sample(x, table.clone()));
    }
}
