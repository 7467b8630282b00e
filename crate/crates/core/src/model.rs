//! The full deraining network: prior extraction (REM), prior/image fusion
//! (IFM), the wavelet multi-level backbone (WMLM) and the multi-stage
//! assembly with iterative prior refresh and ensemble feature reuse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{BlockConfig, Conv, Srir};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C`. Calibrated so the default model has ~3.1M
    /// parameters.
    pub base_channels: usize,
    pub num_wmlm: usize,
    pub levels_per_wmlm: usize,
    pub srir_per_level: usize,
    pub rem_srir_depth: usize,
    pub block: BlockConfig,
    /// Gate-and-concat fusion; when off the two streams are only concatenated.
    pub use_ifm: bool,
    /// Feed each stage a 1x1 reduction of all earlier stage features; when
    /// off, stage `n` consumes only the output of stage `n - 1`.
    pub use_ensemble: bool,
    /// Recompute the prior from each intermediate prediction; when off every
    /// stage reuses the prior of the rainy input.
    pub rcp_update: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 60,
            num_wmlm: 3,
            levels_per_wmlm: 3,
            srir_per_level: 1,
            rem_srir_depth: 1,
            block: BlockConfig { se_reduction: 15, blocks_per_srir: 3 },
            use_ifm: true,
            use_ensemble: true,
            rcp_update: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_wmlm == 0 || self.levels_per_wmlm == 0 || self.srir_per_level == 0 || self.rem_srir_depth == 0 {
            return Err(Error::Config(
                "num_wmlm, levels_per_wmlm, srir_per_level and rem_srir_depth must be >= 1".into(),
            ));
        }
        if self.levels_per_wmlm > 16 {
            return Err(Error::Config("levels_per_wmlm is unreasonably large".into()));
        }
        self.block.validate(self.base_channels)
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels_per_wmlm - 1)
    }

    /// Trainable scalar count, derived from the architecture without
    /// instantiating it.
    pub fn param_count(&self) -> usize {
        self.breakdown().iter().map(|(_, n)| n).sum()
    }

    /// Parameter count per top-level module, in construction order.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let c = self.base_channels;
        let srir = self.block.srir_params(c);
        let levels = self.levels_per_wmlm;
        let mut out = vec![("shallow".to_string(), Conv::param_count(3, c, 3))];
        for n in 1..=self.num_wmlm {
            if n > 1 && self.use_ensemble {
                out.push((format!("stage{n}.ensemble"), Conv::param_count((n - 1) * c, c, 1)));
            }
            out.push((format!("stage{n}.rem"), Conv::param_count(1, c, 3) + self.rem_srir_depth * srir));
            if self.use_ifm {
                out.push((format!("stage{n}.ifm"), 2 * Conv::param_count(c, c, 3)));
            }
            out.push((format!("stage{n}.fuse"), Conv::param_count(2 * c, c, 1)));
            let resize = Conv::param_count(4 * c, c, 1) + Conv::param_count(c, 4 * c, 1);
            out.push((format!("stage{n}.wmlm"), levels * self.srir_per_level * srir + (levels - 1) * resize));
            out.push((format!("stage{n}.out"), Conv::param_count(c, 3, 3)));
        }
        out
    }
}

/// Lifts the one-channel prior to `C` feature channels.
#[derive(Debug, Clone)]
pub struct Rem {
    head: Conv,
    body: Vec<Srir>,
}

impl Rem {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let head = Conv::new(b, "head", 1, c, 3);
        let body = (0..cfg.rem_srir_depth)
            .map(|i| Srir::new(&mut b.scope(&format!("srir{i}")), c, &cfg.block))
            .collect();
        Self { head, body }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, prior: &Var<T>) -> Result<Var<T>> {
        let mut h = self.head.forward(p, prior)?;
        for s in &self.body {
            h = s.forward(p, &h)?;
        }
        Ok(h)
    }
}

/// Shares one sigmoid similarity map between image and prior features and
/// re-injects each gated stream residually before concatenation.
#[derive(Debug, Clone)]
pub struct Ifm {
    map_image: Conv,
    map_prior: Conv,
}

impl Ifm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        Self {
            map_image: Conv::new(b, "map_image", channels, channels, 3),
            map_prior: Conv::new(b, "map_prior", channels, channels, 3),
        }
    }

    /// `(B, C, H, W) x 2 -> (B, 2C, H, W)`.
    pub fn forward<T: Real>(&self, p: &Bound<T>, image: &Var<T>, prior: &Var<T>) -> Result<Var<T>> {
        if image.dim() != prior.dim() {
            return shape_err(format!("IFM inputs {:?} vs {:?}", image.dim(), prior.dim()));
        }
        let hi = self.map_image.forward(p, image)?;
        let hp = self.map_prior.forward(p, prior)?;
        let sim = hi.mul(&hp)?.sigmoid();
        let image = image.add(&sim.mul(image)?)?;
        let prior = prior.add(&sim.mul(prior)?)?;
        Var::concat(&[image, prior])
    }
}

/// Haar pyramid with one SRiR group per level, merged coarse to fine.
#[derive(Debug, Clone)]
pub struct Wmlm {
    down: Vec<Conv>,
    levels: Vec<Vec<Srir>>,
    up: Vec<Conv>,
}

impl Wmlm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let mut down = Vec::new();
        let mut levels = Vec::new();
        let mut up = Vec::new();
        for i in 0..cfg.levels_per_wmlm {
            if i > 0 {
                down.push(Conv::new(b, &format!("down{i}"), 4 * c, c, 1));
            }
            let mut lb = b.scope(&format!("level{i}"));
            levels.push(
                (0..cfg.srir_per_level)
                    .map(|j| Srir::new(&mut lb.scope(&format!("srir{j}")), c, &cfg.block))
                    .collect(),
            );
            if i > 0 {
                up.push(Conv::new(b, &format!("up{i}"), c, 4 * c, 1));
            }
        }
        Self { down, levels, up }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, h, w) = x.dim();
        let m = 1usize << self.down.len();
        if h % m != 0 || w % m != 0 {
            return shape_err(format!("WMLM input {h}x{w} not divisible by {m}"));
        }
        let mut pyramid = vec![x.clone()];
        for conv in &self.down {
            let coarser = conv.forward(p, &pyramid.last().expect("non-empty").dwt2()?)?;
            pyramid.push(coarser);
        }
        let mut processed = Vec::with_capacity(pyramid.len());
        for (feat, group) in pyramid.iter().zip(&self.levels) {
            let mut h = feat.clone();
            for s in group {
                h = s.forward(p, &h)?;
            }
            processed.push(h);
        }
        for i in (1..processed.len()).rev() {
            let lifted = self.up[i - 1].forward(p, &processed[i])?.iwt2()?;
            processed[i - 1] = lifted.add(&processed[i - 1])?;
        }
        Ok(processed.swap_remove(0))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    ensemble: Option<Conv>,
    rem: Rem,
    ifm: Option<Ifm>,
    fuse: Conv,
    wmlm: Wmlm,
    out: Conv,
}

/// Per-stage predictions `B_n`, backbone features `F_n` and the priors `P_n`
/// that guided each stage.
pub struct StageOutputs<T: Real> {
    pub predictions: Vec<Var<T>>,
    pub features: Vec<Var<T>>,
    pub priors: Vec<Var<T>>,
}

impl<T: Real> StageOutputs<T> {
    pub fn last(&self) -> &Var<T> {
        self.predictions.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone)]
pub struct SpdNet {
    config: ModelConfig,
    shallow: Conv,
    stages: Vec<Stage>,
}

impl SpdNet {
    /// Builds the architecture and a freshly initialised parameter store.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::build(config, &mut ParamBuilder::new(&mut store, &mut rng));
        Ok((net, store))
    }

    fn build<T: Real>(config: ModelConfig, b: &mut ParamBuilder<'_, T>) -> Self {
        let c = config.base_channels;
        let shallow = Conv::new(b, "shallow", 3, c, 3);
        let stages = (1..=config.num_wmlm)
            .map(|n| {
                let mut sb = b.scope(&format!("stage{n}"));
                let ensemble = (n > 1 && config.use_ensemble).then(|| Conv::new(&mut sb, "ensemble", (n - 1) * c, c, 1));
                let rem = Rem::new(&mut sb.scope("rem"), &config);
                let ifm = config.use_ifm.then(|| Ifm::new(&mut sb.scope("ifm"), c));
                let fuse = Conv::new(&mut sb, "fuse", 2 * c, c, 1);
                let wmlm = Wmlm::new(&mut sb.scope("wmlm"), &config);
                let out = Conv::new(&mut sb, "out", c, 3, 3);
                Stage { ensemble, rem, ifm, fuse, wmlm, out }
            })
            .collect();
        Self { config, shallow, stages }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, rainy: &Var<T>) -> Result<StageOutputs<T>> {
        let (_, ch, h, w) = rainy.dim();
        if ch != 3 {
            return shape_err(format!("network input needs 3 channels, got {ch}"));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return shape_err(format!("input {h}x{w} must be padded to a multiple of {m}"));
        }
        let shallow = self.shallow.forward(p, rainy)?;
        let first_prior = rainy.residue_channel()?;
        let mut prior = first_prior.clone();
        let mut out = StageOutputs { predictions: Vec::new(), features: Vec::new(), priors: Vec::new() };
        for (n, stage) in self.stages.iter().enumerate() {
            let entry = match (&stage.ensemble, out.features.last()) {
                (_, None) => shallow.clone(),
                (Some(reduce), Some(_)) => reduce.forward(p, &Var::concat(&out.features)?)?,
                (None, Some(prev)) => prev.clone(),
            };
            let prior_feat = stage.rem.forward(p, &prior)?;
            let fused = match &stage.ifm {
                Some(ifm) => ifm.forward(p, &entry, &prior_feat)?,
                None => Var::concat(&[entry, prior_feat])?,
            };
            let feat = stage.wmlm.forward(p, &stage.fuse.forward(p, &fused)?)?;
            let pred = stage.out.forward(p, &feat)?;
            out.priors.push(prior.clone());
            if n + 1 < self.stages.len() {
                prior = if self.config.rcp_update {
                    pred.clamp(T::zero(), T::one()).residue_channel()?
                } else {
                    first_prior.clone()
                };
            }
            out.features.push(feat);
            out.predictions.push(pred);
        }
        Ok(out)
    }

    /// Forward pass without gradient tracking; returns every stage prediction.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, rainy: &ndarray::Array4<T>) -> Result<Vec<ndarray::Array4<T>>> {
        let outs = self.forward(&params.bind(false), &Var::constant(rainy.clone()))?;
        Ok(outs.predictions.into_iter().map(|v| v.value().clone()).collect())
    }
}
