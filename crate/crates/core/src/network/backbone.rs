use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Var};

use super::layers::{Conv, ConvSpec, Ctx};

/// Residual encoder layout: a strided stem and four stages of basic blocks;
/// the last three stages give the stride-8/16/32 features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem: usize,
    pub stages: [usize; 4],
    pub blocks: [usize; 4],
}

impl BackboneConfig {
    /// 18-layer residual network stage widths.
    pub fn resnet18() -> Self {
        Self { stem: 64, stages: [64, 128, 256, 512], blocks: [2, 2, 2, 2] }
    }

    /// Quarter-width variant for desk-scale runs.
    pub fn small() -> Self {
        Self { stem: 16, stages: [16, 32, 64, 128], blocks: [2, 2, 2, 2] }
    }

    /// Minimal variant for gradient checks and shape tests.
    pub fn tiny() -> Self {
        Self { stem: 4, stages: [4, 4, 8, 8], blocks: [1, 1, 1, 1] }
    }

    /// `C_3, C_4, C_5`.
    pub fn out_channels(&self) -> [usize; 3] {
        [self.stages[1], self.stages[2], self.stages[3]]
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl BasicBlock {
    fn new<F: Float>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), ConvSpec::new(cin, cout, 3).stride(stride).norm(true), rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), ConvSpec::new(cout, cout, 3).norm(true), rng);
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Conv::new(store, &format!("{name}.down"), ConvSpec::new(cin, cout, 1).stride(stride).norm(true), rng));
        Self { conv1, conv2, shortcut }
    }

    fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Var {
        let y = self.conv1.forward_relu(cx, x);
        let y = self.conv2.forward(cx, y);
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        let sum = cx.g.add(y, skip);
        cx.g.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new<F: Float>(store: &mut ParamStore<F>, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let stem = Conv::new(store, "backbone.stem", ConvSpec::new(3, cfg.stem, 7).stride(2).norm(true), rng);
        let mut cin = cfg.stem;
        let mut stages = Vec::new();
        for (s, (&cout, &n)) in cfg.stages.iter().zip(&cfg.blocks).enumerate() {
            let blocks = (0..n)
                .map(|b| {
                    let stride = if b == 0 && s > 0 { 2 } else { 1 };
                    let block = BasicBlock::new(store, &format!("backbone.stage{}.{b}", s + 1), cin, cout, stride, rng);
                    cin = cout;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        Self { stem, stages }
    }

    /// `[N, 3, H, W]` images to `[F_3, F_4, F_5]`.
    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, images: Var) -> Result<[Var; 3]> {
        let [_, c, h, w] = cx.shape(images);
        if c != 3 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "backbone input must be 3 x H x W with H, W divisible by 4; got {c} x {h} x {w}"
            )));
        }
        let x = self.stem.forward_relu(cx, images);
        let mut x = cx.g.max_pool3s2(x);
        let mut outs = Vec::with_capacity(3);
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(cx, x);
            }
            if s > 0 {
                outs.push(x);
            }
        }
        Ok([outs[0], outs[1], outs[2]])
    }
}
