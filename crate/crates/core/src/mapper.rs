//! Mapping networks that turn encoder features into decoder prefixes.
//!
//! Each mapper appends a fixed number of learnable tokens to its projected
//! input, runs a bidirectional transformer and returns only the outputs at the
//! learnable positions, so the prefix count never depends on audio length.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{GlobalFeature, TemporalFeature};
use crate::nn::{sinusoidal_encoding, Block, Init, Linear, ParamBuilder, ParamGroup, ParamStore};
use crate::{Error, Result};

pub const TEMPORAL_PREFIX: &str = "mapper_t";
pub const GLOBAL_PREFIX: &str = "mapper_g";
pub const BYPASS_PREFIX: &str = "mapper_bypass";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    /// Number of temporal prefixes `n`.
    pub n_temporal: usize,
    /// Number of global prefixes `m`.
    pub n_global: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub use_positional_encoding: bool,
    /// When false the transformers are bypassed and features are projected
    /// straight to one prefix row per time step (plus one global row).
    pub enabled: bool,
    pub use_temporal: bool,
    pub use_global: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            n_temporal: 15,
            n_global: 11,
            d_model: 768,
            n_layers: 4,
            n_heads: 8,
            conv_kernel: 3,
            use_positional_encoding: true,
            enabled: true,
            use_temporal: true,
            use_global: true,
        }
    }
}

impl MapperConfig {
    pub fn toy() -> Self {
        Self {
            n_temporal: 4,
            n_global: 2,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Error::Config {
            key: format!("mapper.{key}"),
            reason: reason.to_string(),
        };
        if !self.use_temporal && !self.use_global {
            return Err(Error::EmptyPrefix);
        }
        if self.d_model == 0 {
            return Err(bad("d_model", "must be positive"));
        }
        if self.enabled {
            if self.use_temporal && self.n_temporal == 0 {
                return Err(bad("n_temporal", "must be at least 1 when temporal features are used"));
            }
            if self.use_global && self.n_global == 0 {
                return Err(bad("n_global", "must be at least 1 when the global feature is used"));
            }
            if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                return Err(bad("n_heads", "must divide d_model"));
            }
            if self.conv_kernel % 2 == 0 {
                return Err(bad("conv_kernel", "must be odd"));
            }
        }
        Ok(())
    }

    /// Number of prefix rows produced for an `f_t` of time length `n_frames`.
    pub fn prefix_len(&self, n_frames: usize) -> usize {
        let (t, g) = if self.enabled {
            (self.n_temporal, self.n_global)
        } else {
            (n_frames, 1)
        };
        t * self.use_temporal as usize + g * self.use_global as usize
    }
}

/// `(B, K, d_model)` prefix rows.
#[derive(Debug, Clone)]
pub struct PrefixSequence(pub Tensor);

impl PrefixSequence {
    pub fn len(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }
}

/// Row-wise concatenation, temporal block first. With one side absent the
/// other is returned unchanged.
pub fn concat_prefixes(p_t: Option<&PrefixSequence>, p_g: Option<&PrefixSequence>) -> Result<PrefixSequence> {
    match (p_t, p_g) {
        (None, None) => Err(Error::EmptyPrefix),
        (Some(p), None) | (None, Some(p)) => Ok(p.clone()),
        (Some(t), Some(g)) => {
            if t.width() != g.width() || t.0.dims()[0] != g.0.dims()[0] {
                return Err(Error::DimensionMismatch(format!(
                    "cannot concatenate prefixes {:?} and {:?}",
                    t.0.dims(),
                    g.0.dims()
                )));
            }
            Ok(PrefixSequence(Tensor::cat(&[&t.0, &g.0], 1)?))
        }
    }
}

fn transformer(pb: &ParamBuilder, cfg: &MapperConfig) -> Result<Vec<Block>> {
    (0..cfg.n_layers)
        .map(|i| Block::new(&pb.pp("layers").pp(i), cfg.d_model, cfg.n_heads, 1e-5))
        .collect()
}

/// Appends `tokens` to `x`, runs `layers` and returns the token positions.
fn run_with_tokens(x: &Tensor, tokens: &Tensor, layers: &[Block]) -> Result<Tensor> {
    let (b, s, d) = x.dims3()?;
    let k = tokens.dims()[0];
    let tokens = tokens.unsqueeze(0)?.broadcast_as((b, k, d))?.contiguous()?;
    let mut h = Tensor::cat(&[x, &tokens], 1)?;
    for layer in layers {
        h = layer.forward(&h, None)?;
    }
    Ok(h.narrow(1, s, k)?)
}

/// Temporal mapper: frequency-flattened `f_t` → 1-D conv → positional
/// encoding → transformer with `n` learnable tokens.
#[derive(Debug, Clone)]
pub struct TemporalMapper {
    conv_weight: Tensor,
    conv_bias: Tensor,
    tokens: Tensor,
    layers: Vec<Block>,
    in_dim: usize,
    positional: bool,
    d_model: usize,
}

impl TemporalMapper {
    pub fn new(pb: &ParamBuilder, cfg: &MapperConfig, in_dim: usize) -> Result<Self> {
        let conv = pb.pp("conv");
        Ok(Self {
            conv_weight: conv.get((cfg.d_model, in_dim, cfg.conv_kernel), "weight", Init::FanIn)?,
            conv_bias: conv.get(cfg.d_model, "bias", Init::Zeros)?,
            tokens: pb.get((cfg.n_temporal, cfg.d_model), "prefix_tokens", Init::Normal { std: 0.02 })?,
            layers: transformer(pb, cfg)?,
            in_dim,
            positional: cfg.use_positional_encoding,
            d_model: cfg.d_model,
        })
    }

    pub fn forward(&self, f_t: &TemporalFeature) -> Result<PrefixSequence> {
        let x = flatten_temporal(f_t, self.in_dim)?;
        let (_, n, _) = x.dims3()?;
        let h = same_conv1d(&x, &self.conv_weight)?.broadcast_add(&self.conv_bias)?;
        let h = if self.positional {
            h.broadcast_add(&sinusoidal_encoding(n, self.d_model, h.dtype(), h.device())?)?
        } else {
            h
        };
        Ok(PrefixSequence(run_with_tokens(&h.contiguous()?, &self.tokens, &self.layers)?))
    }
}

/// "Same"-padded 1-D convolution of `(B, N, C)` by a `(D, C, K)` kernel as a
/// single matmul over stacked windows, giving `(B, N, D)`. The library conv
/// op's kernel gradient disagreed with finite differences when padded; this
/// form only differentiates through pad, narrow and matmul.
fn same_conv1d(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (d, c, k) = weight.dims3()?;
    let (b, n, _) = x.dims3()?;
    let padded = x.pad_with_zeros(1, k / 2, k / 2)?;
    let windows = (0..k).map(|o| padded.narrow(1, o, n)).collect::<candle_core::Result<Vec<_>>>()?;
    // (B, N, C, K) flattened so that index c * K + o matches the kernel layout
    let cols = Tensor::stack(&windows, 3)?.reshape((b, n, c * k))?;
    let w = weight.reshape((d, c * k))?.t()?;
    Ok(cols.broadcast_matmul(&w)?)
}

/// Global mapper: `f_g` projected to one token, then a transformer with `m`
/// learnable tokens. No positional encoding.
#[derive(Debug, Clone)]
pub struct GlobalMapper {
    proj: Linear,
    tokens: Tensor,
    layers: Vec<Block>,
    in_dim: usize,
}

impl GlobalMapper {
    pub fn new(pb: &ParamBuilder, cfg: &MapperConfig, in_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::with_init(&pb.pp("proj"), in_dim, cfg.d_model, Init::FanIn)?,
            tokens: pb.get((cfg.n_global, cfg.d_model), "prefix_tokens", Init::Normal { std: 0.02 })?,
            layers: transformer(pb, cfg)?,
            in_dim,
        })
    }

    pub fn forward(&self, f_g: &GlobalFeature) -> Result<PrefixSequence> {
        let x = check_global(f_g, self.in_dim)?;
        let h = self.proj.forward(x)?.unsqueeze(1)?;
        Ok(PrefixSequence(run_with_tokens(&h, &self.tokens, &self.layers)?))
    }
}

/// Ablation path without mapping networks: one linear row per time step of
/// `f_t` and one for `f_g`, so the prefix count is `N + 1`.
#[derive(Debug, Clone)]
pub struct BypassMapper {
    temporal: Option<Linear>,
    global: Option<Linear>,
    temporal_dim: usize,
    global_dim: usize,
}

impl BypassMapper {
    pub fn new(pb: &ParamBuilder, cfg: &MapperConfig, channel_dim: usize) -> Result<Self> {
        let temporal_dim = 2 * channel_dim;
        Ok(Self {
            temporal: cfg
                .use_temporal
                .then(|| Linear::with_init(&pb.pp("temporal_proj"), temporal_dim, cfg.d_model, Init::FanIn))
                .transpose()?,
            global: cfg
                .use_global
                .then(|| Linear::with_init(&pb.pp("global_proj"), channel_dim, cfg.d_model, Init::FanIn))
                .transpose()?,
            temporal_dim,
            global_dim: channel_dim,
        })
    }

    pub fn forward(&self, f_t: &TemporalFeature, f_g: &GlobalFeature) -> Result<PrefixSequence> {
        let t = match &self.temporal {
            Some(l) => Some(PrefixSequence(l.forward(&flatten_temporal(f_t, self.temporal_dim)?)?)),
            None => None,
        };
        let g = match &self.global {
            Some(l) => Some(PrefixSequence(l.forward(check_global(f_g, self.global_dim)?)?.unsqueeze(1)?)),
            None => None,
        };
        concat_prefixes(t.as_ref(), g.as_ref())
    }
}

fn flatten_temporal(f_t: &TemporalFeature, in_dim: usize) -> Result<Tensor> {
    let dims = f_t.0.dims();
    if dims.len() != 4 || dims[2] * dims[3] != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "temporal feature {dims:?} does not flatten to width {in_dim}"
        )));
    }
    Ok(f_t.0.reshape((dims[0], dims[1], in_dim))?)
}

fn check_global(f_g: &GlobalFeature, in_dim: usize) -> Result<&Tensor> {
    let dims = f_g.0.dims();
    if dims.len() != 2 || dims[1] != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "global feature {dims:?}, expected (B, {in_dim})"
        )));
    }
    Ok(&f_g.0)
}

/// Both mapping networks, or the bypass, as selected by the configuration.
#[derive(Debug, Clone)]
pub struct PrefixMapper {
    config: MapperConfig,
    temporal: Option<TemporalMapper>,
    global: Option<GlobalMapper>,
    bypass: Option<BypassMapper>,
}

impl PrefixMapper {
    pub fn new(store: &ParamStore, config: MapperConfig, channel_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut mapper = Self {
            config: config.clone(),
            temporal: None,
            global: None,
            bypass: None,
        };
        if config.enabled {
            if config.use_temporal {
                let pb = store.root(TEMPORAL_PREFIX, ParamGroup::MapperTemporal, true);
                mapper.temporal = Some(TemporalMapper::new(&pb, &config, 2 * channel_dim)?);
            }
            if config.use_global {
                let pb = store.root(GLOBAL_PREFIX, ParamGroup::MapperGlobal, true);
                mapper.global = Some(GlobalMapper::new(&pb, &config, channel_dim)?);
            }
        } else {
            let pb = store.root(BYPASS_PREFIX, ParamGroup::MapperBypass, true);
            mapper.bypass = Some(BypassMapper::new(&pb, &config, channel_dim)?);
        }
        Ok(mapper)
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn map_temporal(&self, f_t: &TemporalFeature) -> Result<Option<PrefixSequence>> {
        self.temporal.as_ref().map(|m| m.forward(f_t)).transpose()
    }

    pub fn map_global(&self, f_g: &GlobalFeature) -> Result<Option<PrefixSequence>> {
        self.global.as_ref().map(|m| m.forward(f_g)).transpose()
    }

    /// The full prefix `V` for a batch of features.
    pub fn map(&self, f_t: &TemporalFeature, f_g: &GlobalFeature) -> Result<PrefixSequence> {
        if let Some(b) = &self.bypass {
            return b.forward(f_t, f_g);
        }
        let p_t = self.map_temporal(f_t)?;
        let p_g = self.map_global(f_g)?;
        concat_prefixes(p_t.as_ref(), p_g.as_ref())
    }
}

/// Largest entry of a tensor's absolute value.
#[cfg(test)]
pub(crate) fn max_abs(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?
        .flatten_all()?
        .max(candle_core::D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    const C: usize = 8;

    fn features(n: usize, seed: f32) -> (TemporalFeature, GlobalFeature) {
        let dev = Device::Cpu;
        let vals: Vec<f32> = (0..n * 2 * C).map(|i| ((i as f32 + seed) * 0.37).sin()).collect();
        let ft = Tensor::from_vec(vals, (1, n, 2, C), &dev).unwrap();
        let fg = Tensor::from_vec((0..C).map(|i| (i as f32 * 0.3 + seed).cos()).collect::<Vec<_>>(), (1, C), &dev)
            .unwrap();
        (TemporalFeature(ft), GlobalFeature(fg))
    }

    fn cfg() -> MapperConfig {
        MapperConfig {
            n_temporal: 4,
            n_global: 2,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            ..MapperConfig::default()
        }
    }

    fn mapper(cfg: MapperConfig) -> PrefixMapper {
        PrefixMapper::new(&ParamStore::new(5, DType::F32, Device::Cpu), cfg, C).unwrap()
    }

    #[test]
    fn prefix_count_is_independent_of_duration() {
        let m = mapper(cfg());
        for n in [1, 8, 23] {
            let (ft, fg) = features(n, 0.0);
            let pt = m.map_temporal(&ft).unwrap().unwrap();
            assert_eq!(pt.0.dims(), [1, 4, 16]);
            let v = m.map(&ft, &fg).unwrap();
            assert_eq!(v.0.dims(), [1, 6, 16]);
            assert!(max_abs(&v.0).unwrap().is_finite());
        }
    }

    #[test]
    fn concat_keeps_temporal_rows_first() {
        let m = mapper(cfg());
        let (ft, fg) = features(5, 1.0);
        let pt = m.map_temporal(&ft).unwrap().unwrap();
        let pg = m.map_global(&fg).unwrap().unwrap();
        let v = m.map(&ft, &fg).unwrap();
        assert_eq!(max_abs(&(v.0.narrow(1, 0, 4).unwrap() - &pt.0).unwrap()).unwrap(), 0.0);
        assert_eq!(max_abs(&(v.0.narrow(1, 4, 2).unwrap() - &pg.0).unwrap()).unwrap(), 0.0);
        assert!(matches!(concat_prefixes(None, None), Err(Error::EmptyPrefix)));
        let other = PrefixSequence(Tensor::zeros((1, 2, 7), DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(concat_prefixes(Some(&pt), Some(&other)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn global_disabled_returns_temporal_prefix() {
        let m = mapper(MapperConfig { use_global: false, ..cfg() });
        let (ft, fg) = features(5, 1.0);
        let pt = m.map_temporal(&ft).unwrap().unwrap();
        let v = m.map(&ft, &fg).unwrap();
        assert_eq!(max_abs(&(v.0 - pt.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn zero_global_feature_gives_finite_output() {
        let m = mapper(cfg());
        let fg = GlobalFeature(Tensor::zeros((1, C), DType::F32, &Device::Cpu).unwrap());
        let pg = m.map_global(&fg).unwrap().unwrap();
        assert_eq!(pg.0.dims(), [1, 2, 16]);
        assert!(max_abs(&pg.0).unwrap().is_finite());
    }

    #[test]
    fn permutations_change_outputs() {
        let m = mapper(cfg());
        let (ft, fg) = features(6, 2.0);
        let rev_t = TemporalFeature(
            ft.0.index_select(&Tensor::new(&[5u32, 4, 3, 2, 1, 0], &Device::Cpu).unwrap(), 1).unwrap(),
        );
        let a = m.map_temporal(&ft).unwrap().unwrap();
        let b = m.map_temporal(&rev_t).unwrap().unwrap();
        assert!(max_abs(&(a.0 - b.0).unwrap()).unwrap() > 1e-6);

        let idx: Vec<u32> = (0..C as u32).rev().collect();
        let perm_g = GlobalFeature(fg.0.index_select(&Tensor::new(idx, &Device::Cpu).unwrap(), 1).unwrap());
        let a = m.map_global(&fg).unwrap().unwrap();
        let b = m.map_global(&perm_g).unwrap().unwrap();
        assert!(max_abs(&(a.0 - b.0).unwrap()).unwrap() > 1e-6);
    }

    #[test]
    fn learnable_tokens_drive_the_output() {
        let store = ParamStore::new(5, DType::F32, Device::Cpu);
        let m = PrefixMapper::new(&store, cfg(), C).unwrap();
        let (ft, _) = features(4, 0.5);
        let before = m.map_temporal(&ft).unwrap().unwrap();
        let var = store.entry("mapper_t/prefix_tokens").unwrap().var;
        var.set(&var.zeros_like().unwrap()).unwrap();
        let after = m.map_temporal(&ft).unwrap().unwrap();
        assert!(max_abs(&(before.0 - after.0).unwrap()).unwrap() > 1e-6);
    }

    #[test]
    fn bypass_gives_one_row_per_step_plus_global() {
        let c = MapperConfig { enabled: false, ..cfg() };
        let m = mapper(c.clone());
        let (ft, fg) = features(8, 0.0);
        assert_eq!(m.map(&ft, &fg).unwrap().len(), 9);
        assert_eq!(c.prefix_len(8), 9);
        let (ft, fg) = features(3, 0.0);
        assert_eq!(m.map(&ft, &fg).unwrap().len(), 4);
        let only_t = mapper(MapperConfig { use_global: false, ..c });
        assert_eq!(only_t.map(&ft, &fg).unwrap().len(), 3);
    }

    #[test]
    fn validation() {
        assert!(matches!(
            MapperConfig { use_global: false, use_temporal: false, ..cfg() }.validate(),
            Err(Error::EmptyPrefix)
        ));
        assert!(MapperConfig { n_heads: 3, ..cfg() }.validate().is_err());
        assert!(MapperConfig { n_temporal: 0, ..cfg() }.validate().is_err());
        assert!(MapperConfig { n_temporal: 0, use_temporal: false, ..cfg() }.validate().is_ok());
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let m = mapper(cfg());
        let bad = TemporalFeature(Tensor::zeros((1, 4, 2, C + 1), DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(m.map_temporal(&bad), Err(Error::ShapeMismatch(_))));
    }
}
