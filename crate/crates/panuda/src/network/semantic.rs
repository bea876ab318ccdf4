//! Semantic decoder: project every pyramid level to a common width, upsample
//! to stride 4, concatenate, and fuse with a small conv stack before the
//! per-pixel classifier.

use rand::Rng;

use crate::real::Real;
use crate::tensor::conv::Conv2dSpec;
use crate::tensor::params::{ParamBinding, ParamStore};
use crate::tensor::{Graph, Tv};

use super::layers::Conv;

const EMBED: usize = 64;

#[derive(Clone, Debug)]
pub struct SemanticDecoder {
    proj: Vec<Conv>,
    fuse1: Conv,
    fuse2: Conv,
    head: Conv,
    pub num_outputs: usize,
}

impl SemanticDecoder {
    /// `num_outputs` is the channel count of the final map: the number of
    /// classes for semantic segmentation, or 3 (heatmap + 2 offsets) when the
    /// same decoder body is reused as a bottom-up instance decoder.
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        widths: &[usize; 4],
        num_outputs: usize,
    ) -> Self {
        let s1 = Conv2dSpec { stride: 1, pad: 0, dilation: 1, groups: 1 };
        let proj = (0..4)
            .map(|i| Conv::new(ps, rng, &format!("{name}.proj{i}"), widths[i], EMBED, 1, s1))
            .collect();
        let fuse1 = Conv::new(ps, rng, &format!("{name}.fuse1"), 4 * EMBED, EMBED, 1, s1);
        let fuse2 = Conv::new(
            ps,
            rng,
            &format!("{name}.fuse2"),
            EMBED,
            EMBED,
            3,
            Conv2dSpec { stride: 1, pad: 1, dilation: 1, groups: 1 },
        );
        let head = Conv::new(ps, rng, &format!("{name}.head"), EMBED, num_outputs, 1, s1);
        SemanticDecoder { proj, fuse1, fuse2, head, num_outputs }
    }

    /// Fused stride-4 feature `[EMBED, H/4, W/4]`; also the hook point for
    /// feature-level losses.
    pub fn fused<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, feats: &[Tv]) -> Tv {
        let s0 = g.shape(feats[0]);
        let (h4, w4) = (s0[1], s0[2]);
        let mut parts = Vec::with_capacity(4);
        for (i, &f) in feats.iter().enumerate() {
            let p = self.proj[i].fwd(g, bind, f);
            let p = if i == 0 { p } else { g.upsample_bilinear(p, h4, w4) };
            parts.push(p);
        }
        let cat = g.concat(0, &parts);
        let x = g.relu(self.fuse1.fwd(g, bind, cat));
        g.relu(self.fuse2.fwd(g, bind, x))
    }

    /// Full-resolution map `[num_outputs, H, W]`.
    pub fn fwd<T: Real>(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        feats: &[Tv],
        out_h: usize,
        out_w: usize,
    ) -> Tv {
        let x = self.fused(g, bind, feats);
        let logits = self.head.fwd(g, bind, x);
        g.upsample_bilinear(logits, out_h, out_w)
    }
}
