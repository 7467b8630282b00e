//! Learned building blocks: convolution layer, squeeze-and-excitation gate,
//! SE-ResBlock and SRiR (a stack of SE-ResBlocks inside a long skip).

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    /// Squeeze ratio: the gate's hidden width is `channels / se_reduction`.
    pub se_reduction: usize,
    /// SE-ResBlocks inside one SRiR.
    pub blocks_per_srir: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { se_reduction: 16, blocks_per_srir: 3 }
    }
}

impl BlockConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels == 0 || self.se_reduction == 0 || self.blocks_per_srir == 0 {
            return Err(Error::Config("channels, se_reduction and blocks_per_srir must be positive".into()));
        }
        if !channels.is_multiple_of(self.se_reduction) {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by se_reduction {}",
                self.se_reduction
            )));
        }
        Ok(())
    }

    pub fn se_params(&self, channels: usize) -> usize {
        let hidden = channels / self.se_reduction;
        Conv::param_count(channels, hidden, 1) + Conv::param_count(hidden, channels, 1)
    }

    pub fn se_resblock_params(&self, channels: usize) -> usize {
        2 * Conv::param_count(channels, channels, 3) + self.se_params(channels)
    }

    pub fn srir_params(&self, channels: usize) -> usize {
        self.blocks_per_srir * self.se_resblock_params(channels) + Conv::param_count(channels, channels, 3)
    }
}

/// Same-padded convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
}

impl Conv {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut b = b.scope(name);
        let fan_in = cin * k * k;
        let weight = b.uniform("weight", (cout, cin, k, k), fan_in);
        let bias = b.uniform("bias", (1, cout, 1, 1), fan_in);
        Self { weight, bias, in_channels: cin }
    }

    /// Bias starts at zero instead of the fan-in draw.
    pub fn zero_bias<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut b = b.scope(name);
        let weight = b.uniform("weight", (cout, cin, k, k), cin * k * k);
        let bias = b.zeros("bias", (1, cout, 1, 1));
        Self { weight, bias, in_channels: cin }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.dim().1 != self.in_channels {
            return shape_err(format!("layer expects {} channels, got {}", self.in_channels, x.dim().1));
        }
        x.conv2d(&p[self.weight], Some(&p[self.bias]))
    }
}

/// `x * sigmoid(W2 relu(W1 gap(x)))`, one gate value per (batch, channel).
#[derive(Debug, Clone)]
pub struct SeGate {
    reduce: Conv,
    expand: Conv,
}

impl SeGate {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, cfg: &BlockConfig) -> Self {
        let hidden = channels / cfg.se_reduction;
        let mut b = b.scope("se");
        Self {
            reduce: Conv::zero_bias(&mut b, "reduce", channels, hidden, 1),
            expand: Conv::zero_bias(&mut b, "expand", hidden, channels, 1),
        }
    }

    /// The `(B, C, 1, 1)` gate in `(0, 1)`.
    pub fn gate<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let squeezed = self.reduce.forward(p, &x.global_avg_pool())?.relu();
        Ok(self.expand.forward(p, &squeezed)?.sigmoid())
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.channel_gate(&self.gate(p, x)?)
    }
}

/// `x + se(conv(relu(conv(x))))`.
#[derive(Debug, Clone)]
pub struct SeResBlock {
    conv1: Conv,
    conv2: Conv,
    se: SeGate,
}

impl SeResBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, cfg: &BlockConfig) -> Self {
        Self {
            conv1: Conv::new(b, "conv1", channels, channels, 3),
            conv2: Conv::new(b, "conv2", channels, channels, 3),
            se: SeGate::new(b, channels, cfg),
        }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv1.forward(p, x)?.relu();
        let h = self.conv2.forward(p, &h)?;
        x.add(&self.se.forward(p, &h)?)
    }
}

/// SE-ResBlocks followed by a 3x3 conv, all wrapped in a long skip.
#[derive(Debug, Clone)]
pub struct Srir {
    blocks: Vec<SeResBlock>,
    tail: Conv,
}

impl Srir {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, cfg: &BlockConfig) -> Self {
        let blocks = (0..cfg.blocks_per_srir)
            .map(|i| SeResBlock::new(&mut b.scope(&format!("block{i}")), channels, cfg))
            .collect();
        Self { blocks, tail: Conv::new(b, "tail", channels, channels, 3) }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(p, &h)?;
        }
        x.add(&self.tail.forward(p, &h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: (usize, usize, usize, usize)) -> Var<f64> {
        let mut k = 0.0;
        Var::constant(Array4::from_shape_fn(shape, |_| {
            k += 0.37;
            (k as f64).sin()
        }))
    }

    fn build<M>(f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> M) -> (M, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = f(&mut ParamBuilder::new(&mut store, &mut rng));
        (m, store)
    }

    #[test]
    fn zero_weight_gate_halves() {
        let cfg = BlockConfig { se_reduction: 2, blocks_per_srir: 1 };
        let (se, mut store) = build(|b| SeGate::new(b, 4, &cfg));
        store.zero_all();
        let x = input((2, 4, 3, 5));
        let y = se.forward(&store.bind(false), &x).unwrap();
        assert_eq!(y.value(), &(x.value() * 0.5));
        let zero = Var::constant(Array4::zeros((1, 4, 3, 3)));
        store.randomize(3, 1.0);
        assert!(se.forward(&store.bind(false), &zero).unwrap().value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_strictly_inside_unit_interval() {
        let cfg = BlockConfig { se_reduction: 4, blocks_per_srir: 1 };
        let (se, mut store) = build(|b| SeGate::new(b, 8, &cfg));
        for seed in 0..20 {
            store.randomize(seed, 2.0);
            let g = se.gate(&store.bind(false), &input((3, 8, 4, 4))).unwrap();
            assert!(g.value().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_weights_are_identities() {
        let cfg = BlockConfig { se_reduction: 2, blocks_per_srir: 3 };
        let (blk, mut s1) = build(|b| SeResBlock::new(b, 4, &cfg));
        let (srir, mut s2) = build(|b| Srir::new(b, 4, &cfg));
        s1.zero_all();
        s2.zero_all();
        let x = input((1, 4, 5, 7));
        assert_eq!(blk.forward(&s1.bind(false), &x).unwrap().value(), x.value());
        assert_eq!(srir.forward(&s2.bind(false), &x).unwrap().value(), x.value());
    }

    #[test]
    fn shapes_preserved_and_mismatch_rejected() {
        let cfg = BlockConfig { se_reduction: 2, blocks_per_srir: 2 };
        let (srir, store) = build(|b| Srir::new(b, 4, &cfg));
        let p = store.bind(false);
        for &(h, w) in &[(1, 1), (2, 7), (9, 4)] {
            assert_eq!(srir.forward(&p, &input((2, 4, h, w))).unwrap().dim(), (2, 4, h, w));
        }
        assert!(matches!(srir.forward(&p, &input((1, 3, 4, 4))), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn counted_params_match_store() {
        let cfg = BlockConfig { se_reduction: 4, blocks_per_srir: 3 };
        let (_, store) = build(|b| Srir::new(b, 8, &cfg));
        assert_eq!(store.num_scalars(), cfg.srir_params(8));
        assert!(cfg.validate(6).is_err());
        assert!(cfg.validate(8).is_ok());
    }
}
