//! The detection graph: backbone, density estimator, scale fusion, density
//! fusion, context modules, and four detector heads at strides 4/8/16/32.

pub mod backbone;
pub mod context;
pub mod fusion;
pub mod pyramid;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchors::AnchorConfig;
use crate::density::{DensityEstimator, EstimatorConfig};
use crate::error::{Error, Result};
use crate::graph::{InitFn, ParamId, ParamStore, Tape, ValueId};
use crate::ops::ConvMeta;
use crate::tensor::{Shape, Tensor};

pub use backbone::{Backbone, BackboneConfig, Taps};
pub use context::{ContextConfig, ContextModule};
pub use fusion::{FusionConfig, FusionModule, FusionRegistry, FusionStrategy};
pub use pyramid::{PyramidConfig, ScaleFusion};

/// Detector strides are fixed by the architecture; anchor tables must agree.
pub const DETECTOR_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub estimator: EstimatorConfig,
    pub pyramid: PyramidConfig,
    pub context: ContextConfig,
    pub fusion: FusionConfig,
    pub anchors: AnchorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            estimator: EstimatorConfig::default(),
            pyramid: PyramidConfig::default(),
            context: ContextConfig::default(),
            fusion: FusionConfig::default(),
            anchors: AnchorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.context.validate()?;
        if self.anchors.detectors.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 detector anchor entries, got {}",
                self.anchors.detectors.len()
            )));
        }
        for (det, want) in self.anchors.detectors.iter().zip(DETECTOR_STRIDES) {
            if det.stride != want {
                return Err(Error::Config(format!(
                    "anchor stride {} does not match detector stride {want}",
                    det.stride
                )));
            }
            if det.scales.is_empty() {
                return Err(Error::Config("anchor scales must be non-empty".into()));
            }
        }
        if self.pyramid.channels == 0 {
            return Err(Error::Config("pyramid channels must be positive".into()));
        }
        if self.estimator.reduce_channels == 0 || self.estimator.conv_channels == 0 {
            return Err(Error::Config("estimator channels must be positive".into()));
        }
        Ok(())
    }
}

/// He fan-in initialization for conv weights, zero biases.
pub fn he_initializer(
    mut rng: ChaCha8Rng,
) -> impl FnMut(&mut ParamStore, &str, ConvMeta) -> (ParamId, ParamId) {
    move |ps: &mut ParamStore, name: &str, meta: ConvMeta| {
        let fan_in = (meta.in_channels * meta.kh * meta.kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let ws = meta.weight_shape();
        let w = Tensor::from_vec(ws, (0..ws.len()).map(|_| normal.sample(&mut rng)).collect());
        let b = Tensor::zeros(Shape::new(1, meta.out_channels, 1, 1));
        (
            ps.add(format!("{name}.w"), w),
            ps.add(format!("{name}.b"), b),
        )
    }
}

/// Sibling 1x1 convolutions producing per-anchor class logits and box
/// regression deltas. Channel layout is scale-major: logits (bg, face) per
/// scale at channels (2s, 2s+1), deltas (tx, ty, tw, th) at 4s..4s+4.
#[derive(Debug, Clone)]
pub struct Head {
    pub num_scales: usize,
    cls_meta: ConvMeta,
    box_meta: ConvMeta,
    cls: (ParamId, ParamId),
    bbox: (ParamId, ParamId),
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub cls: ValueId,
    pub bbox: ValueId,
}

impl Head {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        num_scales: usize,
        init: &mut InitFn,
    ) -> Self {
        let cls_meta = ConvMeta::new(in_channels, 2 * num_scales, 1);
        let box_meta = ConvMeta::new(in_channels, 4 * num_scales, 1);
        let cls = init(ps, &format!("{name}.cls"), cls_meta);
        let bbox = init(ps, &format!("{name}.box"), box_meta);
        // Face logits start biased toward background so the initial score
        // field is ~1% face, which keeps early hard-negative mining sane.
        let face_bias = -(0.99f64 / 0.01).ln();
        let cls_bias = ps.get_mut(cls.1);
        for s in 0..num_scales {
            cls_bias.data[2 * s + 1] = face_bias;
        }
        Head {
            num_scales,
            cls_meta,
            box_meta,
            cls,
            bbox,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<HeadOutput> {
        Ok(HeadOutput {
            cls: tape.conv(ps, self.cls_meta, self.cls.0, self.cls.1, x)?,
            bbox: tape.conv(ps, self.box_meta, self.bbox.0, self.bbox.1, x)?,
        })
    }
}

/// The assembled network. Parameters live in `params`; `forward` records a
/// fresh tape per image.
#[derive(Debug)]
pub struct DetectionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    estimator: DensityEstimator,
    pyramid1: ScaleFusion,
    pyramid2: ScaleFusion,
    fusion: Box<dyn FusionModule>,
    contexts: Vec<Option<ContextModule>>,
    heads: Vec<Head>,
}

/// One recorded forward pass with handles to every tensor later stages need.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub input: ValueId,
    pub taps: Taps,
    /// Density estimate at stride 4, single channel, non-negative.
    pub density: ValueId,
    /// Per-detector input features at strides 4/8/16/32.
    pub features: [ValueId; 4],
    pub heads: Vec<HeadOutput>,
}

impl DetectionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(config, seed, &FusionRegistry::with_defaults())
    }

    pub fn with_registry(
        config: ModelConfig,
        seed: u64,
        registry: &FusionRegistry,
    ) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut init = he_initializer(ChaCha8Rng::seed_from_u64(seed));

        let backbone = Backbone::build(&mut ps, config.backbone.clone(), &mut init)?;
        let widths = &config.backbone.widths;
        let estimator = DensityEstimator::build(
            &mut ps,
            config.estimator,
            [widths[0], widths[1], widths[2]],
            &mut init,
        );
        let pyramid1 = ScaleFusion::build(
            &mut ps,
            "pyramid1",
            config.pyramid,
            widths[3],
            widths[4],
            &mut init,
        );
        let pyramid2 = ScaleFusion::build(
            &mut ps,
            "pyramid2",
            config.pyramid,
            widths[4],
            widths[4],
            &mut init,
        );
        let fusion = registry.build(&config.fusion, &mut ps, widths[2], &mut init)?;

        let feat_channels = [
            widths[2],
            config.pyramid.channels,
            config.pyramid.channels,
            widths[4],
        ];
        let mut contexts = Vec::new();
        let mut heads = Vec::new();
        for k in 0..4 {
            let name = format!("d{}", k + 1);
            let ctx = if config.context.enabled {
                Some(ContextModule::build(
                    &mut ps,
                    &format!("{name}.context"),
                    config.context.clone(),
                    feat_channels[k],
                    &mut init,
                )?)
            } else {
                None
            };
            contexts.push(ctx);
            heads.push(Head::build(
                &mut ps,
                &name,
                feat_channels[k],
                config.anchors.detectors[k].scales.len(),
                &mut init,
            ));
        }
        Ok(DetectionModel {
            config,
            params: ps,
            backbone,
            estimator,
            pyramid1,
            pyramid2,
            fusion,
            contexts,
            heads,
        })
    }

    /// Runs the full graph on a preprocessed (normalized, padded) image.
    pub fn forward(&self, image: Tensor) -> Result<ForwardPass> {
        self.forward_fused(image, None)
    }

    /// `forward` with the fusion input optionally pinned to a fixed map.
    ///
    /// The density estimate always enters fusion detached: the estimator
    /// trains against its own loss only, and detector gradients stop at the
    /// fusion boundary. `fused` substitutes the pinned value, which lets a
    /// finite-difference harness hold the fusion input still while
    /// parameters move, matching what backward differentiates.
    pub fn forward_fused(&self, image: Tensor, fused: Option<&Tensor>) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let in_shape = image.shape;
        let input = tape.input(image);
        let taps = self.backbone.forward(&mut tape, &self.params, input)?;
        let density = self.estimator.forward(
            &mut tape,
            &self.params,
            taps.conv1,
            taps.conv2,
            taps.conv3,
        )?;
        let f3 = if self.fusion.needs_density() {
            let den_in = match fused {
                Some(t) => {
                    if t.shape != tape.shape(density) {
                        return Err(Error::Shape(format!(
                            "pinned fusion input {} does not match density shape {}",
                            t.shape,
                            tape.shape(density)
                        )));
                    }
                    tape.input(t.clone())
                }
                None => tape.detach(density),
            };
            self.fusion.fuse(&mut tape, &self.params, taps.conv3, den_in)?
        } else {
            taps.conv3
        };
        let p1 = self
            .pyramid1
            .fuse(&mut tape, &self.params, taps.conv4, taps.conv5)?;
        let p2 = self
            .pyramid2
            .fuse(&mut tape, &self.params, taps.conv5, taps.conv5_pooled)?;
        let features = [f3, p1, p2, taps.conv5_pooled];
        for (k, &f) in features.iter().enumerate() {
            let s = tape.shape(f);
            let stride = DETECTOR_STRIDES[k];
            assert_eq!(
                (s.h, s.w),
                (in_shape.h / stride, in_shape.w / stride),
                "detector {} features must sit at stride {stride}",
                k + 1
            );
        }
        let mut heads = Vec::new();
        for k in 0..4 {
            let mut x = features[k];
            if let Some(ctx) = &self.contexts[k] {
                x = ctx.apply(&mut tape, &self.params, x)?;
            }
            heads.push(self.heads[k].forward(&mut tape, &self.params, x)?);
        }
        Ok(ForwardPass {
            tape,
            input,
            taps,
            density,
            features,
            heads,
        })
    }
}
