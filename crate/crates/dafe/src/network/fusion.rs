//! How the predicted density map is folded into the stride-4 detector
//! features. Each variant is a strategy registered by name and selected at
//! runtime via `fusion.mode`, so ablation arms are pure configuration:
//!
//! - `enrich`: features + alpha * broadcast(density), alpha learnable
//! - `add`:    features + broadcast(density)
//! - `concat`: 1x1 conv over [features | density] back to the feature width
//! - `none`:   features unchanged (density head still trains if weighted)
//!
//! Every mode consumes the density map as data: the caller detaches it, so
//! the estimator is trained by the density loss alone and detector gradients
//! never reach it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{InitFn, ParamId, ParamStore, Tape, ValueId};
use crate::ops::ConvMeta;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub mode: String,
    /// Initial value of the learnable scale in `enrich` mode.
    pub alpha_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: "enrich".into(),
            alpha_init: 0.1,
        }
    }
}

/// A fusion variant factory: registers whatever parameters the variant
/// needs and returns the runnable module.
pub trait FusionStrategy {
    fn name(&self) -> &'static str;
    fn build(
        &self,
        ps: &mut ParamStore,
        cfg: &FusionConfig,
        feat_channels: usize,
        init: &mut InitFn,
    ) -> Box<dyn FusionModule>;
}

/// A built fusion instance, applied once per forward pass.
pub trait FusionModule: std::fmt::Debug {
    /// Whether the density estimate participates at all; when false the
    /// forward pass may skip wiring density into this module.
    fn needs_density(&self) -> bool {
        true
    }
    fn fuse(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        features: ValueId,
        density: ValueId,
    ) -> Result<ValueId>;
}

/// Name-keyed registry of fusion strategies. Deterministic iteration order
/// keeps listings stable.
pub struct FusionRegistry {
    strategies: BTreeMap<&'static str, Box<dyn FusionStrategy>>,
}

impl FusionRegistry {
    pub fn empty() -> Self {
        FusionRegistry {
            strategies: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(EnrichStrategy));
        r.register(Box::new(AddStrategy));
        r.register(Box::new(ConcatStrategy));
        r.register(Box::new(NoneStrategy));
        r
    }

    pub fn register(&mut self, s: Box<dyn FusionStrategy>) {
        self.strategies.insert(s.name(), s);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }

    pub fn build(
        &self,
        cfg: &FusionConfig,
        ps: &mut ParamStore,
        feat_channels: usize,
        init: &mut InitFn,
    ) -> Result<Box<dyn FusionModule>> {
        let s = self.strategies.get(cfg.mode.as_str()).ok_or_else(|| {
            Error::Config(format!(
                "unknown fusion mode '{}' (available: {})",
                cfg.mode,
                self.names().join(", ")
            ))
        })?;
        Ok(s.build(ps, cfg, feat_channels, init))
    }
}

impl std::fmt::Debug for FusionRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FusionRegistry")
            .field("names", &self.names())
            .finish()
    }
}

struct EnrichStrategy;

impl FusionStrategy for EnrichStrategy {
    fn name(&self) -> &'static str {
        "enrich"
    }

    fn build(
        &self,
        ps: &mut ParamStore,
        cfg: &FusionConfig,
        feat_channels: usize,
        _init: &mut InitFn,
    ) -> Box<dyn FusionModule> {
        let alpha = ps.add("fusion.alpha", Tensor::scalar(cfg.alpha_init));
        Box::new(Enrich {
            alpha,
            feat_channels,
        })
    }
}

/// features + alpha * broadcast(density). The learnable scalar starts small
/// so early training is near-identity.
#[derive(Debug)]
struct Enrich {
    alpha: ParamId,
    feat_channels: usize,
}

impl FusionModule for Enrich {
    fn fuse(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        features: ValueId,
        density: ValueId,
    ) -> Result<ValueId> {
        let wide = tape.broadcast(density, self.feat_channels)?;
        tape.scale_add(ps, features, wide, self.alpha)
    }
}

struct AddStrategy;

impl FusionStrategy for AddStrategy {
    fn name(&self) -> &'static str {
        "add"
    }

    fn build(
        &self,
        _ps: &mut ParamStore,
        _cfg: &FusionConfig,
        feat_channels: usize,
        _init: &mut InitFn,
    ) -> Box<dyn FusionModule> {
        Box::new(AddFusion { feat_channels })
    }
}

#[derive(Debug)]
struct AddFusion {
    feat_channels: usize,
}

impl FusionModule for AddFusion {
    fn fuse(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        features: ValueId,
        density: ValueId,
    ) -> Result<ValueId> {
        let _ = ps;
        let wide = tape.broadcast(density, self.feat_channels)?;
        tape.add(features, wide)
    }
}

struct ConcatStrategy;

impl FusionStrategy for ConcatStrategy {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn build(
        &self,
        ps: &mut ParamStore,
        _cfg: &FusionConfig,
        feat_channels: usize,
        init: &mut InitFn,
    ) -> Box<dyn FusionModule> {
        let meta = ConvMeta::new(feat_channels + 1, feat_channels, 1);
        let (w, b) = init(ps, "fusion.concat", meta);
        Box::new(ConcatFusion { meta, w, b })
    }
}

#[derive(Debug)]
struct ConcatFusion {
    meta: ConvMeta,
    w: ParamId,
    b: ParamId,
}

impl FusionModule for ConcatFusion {
    fn fuse(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        features: ValueId,
        density: ValueId,
    ) -> Result<ValueId> {
        let cat = tape.concat(&[features, density])?;
        tape.conv(ps, self.meta, self.w, self.b, cat)
    }
}

struct NoneStrategy;

impl FusionStrategy for NoneStrategy {
    fn name(&self) -> &'static str {
        "none"
    }

    fn build(
        &self,
        _ps: &mut ParamStore,
        _cfg: &FusionConfig,
        _feat_channels: usize,
        _init: &mut InitFn,
    ) -> Box<dyn FusionModule> {
        Box::new(NoFusion)
    }
}

#[derive(Debug)]
struct NoFusion;

impl FusionModule for NoFusion {
    fn needs_density(&self) -> bool {
        false
    }

    fn fuse(
        &self,
        _tape: &mut Tape,
        _ps: &ParamStore,
        features: ValueId,
        _density: ValueId,
    ) -> Result<ValueId> {
        Ok(features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_default_modes() {
        let r = FusionRegistry::with_defaults();
        assert_eq!(r.names(), vec!["add", "concat", "enrich", "none"]);
    }

    #[test]
    fn unknown_mode_is_rejected_with_available_names() {
        let r = FusionRegistry::with_defaults();
        let mut ps = ParamStore::new();
        let cfg = FusionConfig { mode: "mystery".into(), alpha_init: 0.1 };
        let mut init = |ps: &mut ParamStore, name: &str, meta: ConvMeta| {
            let w = ps.add(format!("{name}.w"), Tensor::zeros(meta.weight_shape()));
            let b = ps.add(
                format!("{name}.b"),
                Tensor::zeros(crate::tensor::Shape::new(1, meta.out_channels, 1, 1)),
            );
            (w, b)
        };
        let err = r.build(&cfg, &mut ps, 32, &mut init).unwrap_err();
        assert!(err.to_string().contains("enrich"), "{err}");
    }
}
