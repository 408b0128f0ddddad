//! Lateral fusion of two adjacent-stride feature maps: both are reduced to a
//! common width by 1x1 convs, the coarser map is bilinearly upsampled, and
//! the two are summed.

use crate::error::{Error, Result};
use crate::graph::{InitFn, ParamId, ParamStore, Tape, ValueId};
use crate::ops::ConvMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    /// Common width both inputs are reduced to (and the output width).
    pub channels: usize,
    pub relu_after_sum: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            channels: 128,
            relu_after_sum: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaleFusion {
    pub cfg: PyramidConfig,
    lo_meta: ConvMeta,
    hi_meta: ConvMeta,
    lo: (ParamId, ParamId),
    hi: (ParamId, ParamId),
}

impl ScaleFusion {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        cfg: PyramidConfig,
        lo_channels: usize,
        hi_channels: usize,
        init: &mut InitFn,
    ) -> Self {
        let lo_meta = ConvMeta::new(lo_channels, cfg.channels, 1);
        let hi_meta = ConvMeta::new(hi_channels, cfg.channels, 1);
        let lo = init(ps, &format!("{name}.lo_reduce"), lo_meta);
        let hi = init(ps, &format!("{name}.hi_reduce"), hi_meta);
        ScaleFusion {
            cfg,
            lo_meta,
            hi_meta,
            lo,
            hi,
        }
    }

    /// `f_lo` at stride s, `f_hi` at stride 2s (spatial dims = ceil of half
    /// of f_lo's). Output is at f_lo's resolution with `cfg.channels` width.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        f_lo: ValueId,
        f_hi: ValueId,
    ) -> Result<ValueId> {
        let slo = tape.shape(f_lo);
        let shi = tape.shape(f_hi);
        if shi.h != slo.h.div_ceil(2) || shi.w != slo.w.div_ceil(2) {
            return Err(Error::Shape(format!(
                "scale fusion expects the coarse map at half resolution: {slo} vs {shi}"
            )));
        }
        let lo_red = tape.conv(ps, self.lo_meta, self.lo.0, self.lo.1, f_lo)?;
        let hi_red = tape.conv(ps, self.hi_meta, self.hi.0, self.hi.1, f_hi)?;
        let hi_up = tape.upsample(hi_red, slo.h, slo.w)?;
        let sum = tape.add(lo_red, hi_up)?;
        Ok(if self.cfg.relu_after_sum {
            tape.relu(sum)
        } else {
            sum
        })
    }
}
