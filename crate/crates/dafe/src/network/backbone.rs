//! Five-block convolutional backbone with taps at strides 1/2/4/8/16 and a
//! final pooled tap at stride 32.

use crate::error::{Error, Result};
use crate::graph::{InitFn, ParamId, ParamStore, Tape, ValueId};
use crate::ops::ConvMeta;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output width of each of the five blocks.
    pub widths: Vec<usize>,
    pub convs_per_block: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            widths: vec![8, 16, 32, 64, 64],
            convs_per_block: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 5 {
            return Err(Error::Config(format!(
                "backbone needs exactly 5 block widths, got {}",
                self.widths.len()
            )));
        }
        if self.in_channels == 0 || self.convs_per_block == 0 || self.widths.contains(&0) {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone taps in stride order 1, 2, 4, 8, 16, 32. The first three feed
/// the density estimator; the last four feed detector features.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub conv1: ValueId,
    pub conv2: ValueId,
    pub conv3: ValueId,
    pub conv4: ValueId,
    pub conv5: ValueId,
    pub conv5_pooled: ValueId,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    blocks: Vec<Vec<(ConvMeta, ParamId, ParamId)>>,
}

impl Backbone {
    pub fn build(ps: &mut ParamStore, cfg: BackboneConfig, init: &mut InitFn) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut in_c = cfg.in_channels;
        for (bi, &width) in cfg.widths.iter().enumerate() {
            let mut convs = Vec::new();
            for ci in 0..cfg.convs_per_block {
                let meta = ConvMeta::new(in_c, width, 3).with_padding(1);
                let (w, b) = init(ps, &format!("backbone.block{}.conv{}", bi + 1, ci + 1), meta);
                convs.push((meta, w, b));
                in_c = width;
            }
            blocks.push(convs);
        }
        Ok(Backbone { cfg, blocks })
    }

    /// Each block is 3x3 convs + relu; a 2x2 max pool follows every block,
    /// so block k emits its tap at stride 2^(k-1) and the pool after block 5
    /// emits the stride-32 tap. Spatial dims must be multiples of 32 (the
    /// pipeline reflect-pads inputs beforehand).
    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, image: ValueId) -> Result<Taps> {
        let s = tape.shape(image);
        if s.h % 32 != 0 || s.w % 32 != 0 {
            return Err(Error::Shape(format!(
                "backbone input dims must be multiples of 32, got {s}"
            )));
        }
        if s.c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {s}",
                self.cfg.in_channels
            )));
        }
        let mut x = image;
        let mut taps = Vec::with_capacity(6);
        for block in &self.blocks {
            for &(meta, w, b) in block {
                let c = tape.conv(ps, meta, w, b, x)?;
                x = tape.relu(c);
            }
            taps.push(x);
            x = tape.maxpool(x);
        }
        taps.push(x);
        Ok(Taps {
            conv1: taps[0],
            conv2: taps[1],
            conv3: taps[2],
            conv4: taps[3],
            conv5: taps[4],
            conv5_pooled: taps[5],
        })
    }
}
