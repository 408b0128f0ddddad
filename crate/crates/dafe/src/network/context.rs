//! Receptive-field enlargement by parallel dilated 3x3 convolutions whose
//! outputs are concatenated and merged back to the input width.

use crate::error::{Error, Result};
use crate::graph::{InitFn, ParamId, ParamStore, Tape, ValueId};
use crate::ops::ConvMeta;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextConfig {
    pub enabled: bool,
    pub dilations: Vec<usize>,
    pub branch_width: usize,
    /// Add the module input back onto the merged output.
    pub residual: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            enabled: true,
            dilations: vec![1, 2, 4],
            branch_width: 16,
            residual: false,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::Config("context dilations must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &d in &self.dilations {
            if d < 1 {
                return Err(Error::Config("context dilations must be >= 1".into()));
            }
            if !seen.insert(d) {
                return Err(Error::Config(format!("duplicate context dilation {d}")));
            }
        }
        if self.branch_width == 0 {
            return Err(Error::Config("context branch width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContextModule {
    cfg: ContextConfig,
    in_channels: usize,
    branches: Vec<(ConvMeta, ParamId, ParamId)>,
    merge: (ConvMeta, ParamId, ParamId),
}

impl ContextModule {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        cfg: ContextConfig,
        in_channels: usize,
        init: &mut InitFn,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut branches = Vec::new();
        for &d in &cfg.dilations {
            // padding = dilation keeps spatial dims unchanged for 3x3 kernels
            let meta = ConvMeta::new(in_channels, cfg.branch_width, 3)
                .with_padding(d)
                .with_dilation(d);
            branches.push((meta, init(ps, &format!("{name}.dil{d}"), meta)));
        }
        let merge_meta = ConvMeta::new(cfg.dilations.len() * cfg.branch_width, in_channels, 1);
        let merge = init(ps, &format!("{name}.merge"), merge_meta);
        Ok(ContextModule {
            cfg,
            in_channels,
            branches: branches
                .into_iter()
                .map(|(m, (w, b))| (m, w, b))
                .collect(),
            merge: (merge_meta, merge.0, merge.1),
        })
    }

    /// Each branch: dilated 3x3 conv + relu. Branches concatenate and a 1x1
    /// conv merges back to the input width (no activation after the merge).
    pub fn apply(&self, tape: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        if tape.shape(x).c != self.in_channels {
            return Err(Error::Shape(format!(
                "context module built for {} channels, got {}",
                self.in_channels,
                tape.shape(x)
            )));
        }
        let mut outs = Vec::with_capacity(self.branches.len());
        for &(meta, w, b) in &self.branches {
            let c = tape.conv(ps, meta, w, b, x)?;
            outs.push(tape.relu(c));
        }
        let cat = tape.concat(&outs)?;
        let (mm, mw, mb) = self.merge;
        let merged = tape.conv(ps, mm, mw, mb, cat)?;
        Ok(if self.cfg.residual {
            tape.add(merged, x)?
        } else {
            merged
        })
    }
}
