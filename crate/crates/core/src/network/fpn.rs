use rand::Rng;

use crate::tensor::{Float, ParamStore, Var};

use super::layers::{Conv, ConvSpec, Ctx};

/// Three-level feature pyramid with concatenation fusion: lateral 1x1
/// projections, a top-down path and an optional bottom-up path.
#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: [Conv; 3],
    /// Top-down fusion producing levels 4 and 3.
    top_down: [Conv; 2],
    /// Bottom-up downsampling into levels 4 and 5.
    down: [Conv; 2],
    bottom_up: [Conv; 2],
    pub use_bottom_up: bool,
}

impl Fpn {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: [usize; 3],
        c: usize,
        use_bottom_up: bool,
        norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let lateral = [0, 1, 2].map(|i| Conv::new(store, &format!("{name}.lateral{}", i + 3), ConvSpec::new(in_channels[i], c, 1), rng));
        let fuse = |store: &mut ParamStore<F>, tag: String, rng: &mut _| Conv::new(store, &tag, ConvSpec::new(2 * c, c, 3).norm(norm), rng);
        let top_down = [
            fuse(store, format!("{name}.top_down4"), rng),
            fuse(store, format!("{name}.top_down3"), rng),
        ];
        let down = [4, 5].map(|l| Conv::new(store, &format!("{name}.down{l}"), ConvSpec::new(c, c, 3).stride(2).norm(norm), rng));
        let bottom_up = [
            fuse(store, format!("{name}.bottom_up4"), rng),
            fuse(store, format!("{name}.bottom_up5"), rng),
        ];
        Self { lateral, top_down, down, bottom_up, use_bottom_up }
    }

    fn resize_to<F: Float>(cx: &mut Ctx<'_, F>, x: Var, like: Var) -> Var {
        let [_, _, h, w] = cx.shape(x);
        let [_, _, th, tw] = cx.shape(like);
        if (h, w) == (th, tw) {
            x
        } else {
            cx.g.upsample_nearest(x, th, tw)
        }
    }

    fn downsample<F: Float>(cx: &mut Ctx<'_, F>, conv: &Conv, x: Var, like: Var) -> Var {
        let [_, _, h, w] = cx.shape(x);
        let [_, _, th, tw] = cx.shape(like);
        let y = if (h, w) == (th, tw) {
            Conv { stride: 1, ..conv.clone() }.forward_relu(cx, x)
        } else {
            conv.forward_relu(cx, x)
        };
        Self::resize_to(cx, y, like)
    }

    /// `[X_3, X_4, X_5]` with any channel widths to C-channel maps of the same
    /// spatial shapes.
    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, feats: [Var; 3]) -> [Var; 3] {
        let lat: Vec<Var> = (0..3).map(|i| self.lateral[i].forward(cx, feats[i])).collect();
        let t5 = lat[2];
        let up5 = Self::resize_to(cx, t5, lat[1]);
        let cat4 = cx.g.concat(&[lat[1], up5]);
        let t4 = self.top_down[0].forward_relu(cx, cat4);
        let up4 = Self::resize_to(cx, t4, lat[0]);
        let cat3 = cx.g.concat(&[lat[0], up4]);
        let t3 = self.top_down[1].forward_relu(cx, cat3);
        if !self.use_bottom_up {
            return [t3, t4, t5];
        }
        let d3 = Self::downsample(cx, &self.down[0], t3, t4);
        let cat4 = cx.g.concat(&[t4, d3]);
        let o4 = self.bottom_up[0].forward_relu(cx, cat4);
        let d4 = Self::downsample(cx, &self.down[1], o4, t5);
        let cat5 = cx.g.concat(&[t5, d4]);
        let o5 = self.bottom_up[1].forward_relu(cx, cat5);
        [t3, o4, o5]
    }

    #[cfg(test)]
    pub(crate) fn fusion_convs(&self) -> impl Iterator<Item = &Conv> {
        self.top_down.iter().chain(&self.bottom_up)
    }

    #[cfg(test)]
    pub(crate) fn lateral_convs(&self) -> &[Conv; 3] {
        &self.lateral
    }
}
