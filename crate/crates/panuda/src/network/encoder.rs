//! Hierarchical transformer encoder producing a feature pyramid at strides
//! {4, 8, 16, 32}. Each stage is an overlapping patch embedding followed by
//! transformer blocks with spatially reduced attention and a mix-FFN whose
//! depthwise convolution carries positional information.

use rand::Rng;

use crate::real::Real;
use crate::tensor::conv::Conv2dSpec;
use crate::tensor::params::{ParamBinding, ParamStore};
use crate::tensor::{Graph, Tv};

use super::layers::{spatial_to_tokens, tokens_to_spatial, Conv, Linear, Ln};

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    /// FFN hidden width as a multiple of the stage width
    pub ffn_expand: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: [32, 64, 128, 256],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            ffn_expand: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Ln,
    q: Linear,
    k: Linear,
    v: Linear,
    sr: Option<(Conv, Ln)>,
    proj: Linear,
    ln2: Ln,
    fc1: Linear,
    dw: Conv,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c: usize,
        heads: usize,
        sr_ratio: usize,
        ffn_expand: usize,
    ) -> Self {
        let hidden = c * ffn_expand;
        Block {
            ln1: Ln::new(ps, &format!("{name}.ln1"), c),
            q: Linear::new(ps, rng, &format!("{name}.q"), c, c),
            k: Linear::new(ps, rng, &format!("{name}.k"), c, c),
            v: Linear::new(ps, rng, &format!("{name}.v"), c, c),
            sr: if sr_ratio > 1 {
                let conv = Conv::new(
                    ps,
                    rng,
                    &format!("{name}.sr"),
                    c,
                    c,
                    sr_ratio,
                    Conv2dSpec { stride: sr_ratio, pad: 0, dilation: 1, groups: 1 },
                );
                let ln = Ln::new(ps, &format!("{name}.srln"), c);
                Some((conv, ln))
            } else {
                None
            },
            proj: Linear::new(ps, rng, &format!("{name}.proj"), c, c),
            ln2: Ln::new(ps, &format!("{name}.ln2"), c),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), c, hidden),
            dw: Conv::new(
                ps,
                rng,
                &format!("{name}.dw"),
                hidden,
                hidden,
                3,
                Conv2dSpec { stride: 1, pad: 1, dilation: 1, groups: hidden },
            ),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, c),
            heads,
        }
    }

    /// x: `[N, C]` tokens over an `h x w` grid.
    fn fwd<T: Real>(
        &self,
        g: &Graph<T>,
        bind: &ParamBinding<T>,
        x: Tv,
        c: usize,
        h: usize,
        w: usize,
    ) -> Tv {
        // attention
        let xn = self.ln1.fwd(g, bind, x);
        let q = self.q.fwd(g, bind, xn);
        let kv_in = match &self.sr {
            Some((conv, ln)) => {
                let sp = tokens_to_spatial(g, xn, c, h, w);
                let red = conv.fwd(g, bind, sp);
                let rh = h / conv.spec.stride;
                let rw = w / conv.spec.stride;
                let t = spatial_to_tokens(g, red, c, rh, rw);
                ln.fwd(g, bind, t)
            }
            None => xn,
        };
        let n_kv = g.shape(kv_in)[0];
        let k = self.k.fwd(g, bind, kv_in);
        let v = self.v.fwd(g, bind, kv_in);
        let d = c / self.heads;
        let n = h * w;
        let qh = g.permute(g.reshape(q, &[n, self.heads, d]), &[1, 0, 2]); // [h,N,d]
        let kt = g.permute(g.reshape(k, &[n_kv, self.heads, d]), &[1, 2, 0]); // [h,d,N']
        let vh = g.permute(g.reshape(v, &[n_kv, self.heads, d]), &[1, 0, 2]); // [h,N',d]
        let scores = g.scale(g.bmm(qh, kt), T::from_f64(1.0 / (d as f64).sqrt()));
        let attn = g.softmax_lastdim(scores);
        let out = g.bmm(attn, vh); // [h,N,d]
        let out = g.reshape(g.permute(out, &[1, 0, 2]), &[n, c]);
        let out = self.proj.fwd(g, bind, out);
        let x = g.add(x, out);

        // mix-FFN
        let xn = self.ln2.fwd(g, bind, x);
        let hdim = g.shape(bind.get(g, self.fc1.b))[0];
        let t = self.fc1.fwd(g, bind, xn);
        let sp = tokens_to_spatial(g, t, hdim, h, w);
        let sp = self.dw.fwd(g, bind, sp);
        let t = spatial_to_tokens(g, g.gelu(sp), hdim, h, w);
        let t = self.fc2.fwd(g, bind, t);
        g.add(x, t)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    patch: Conv,
    patch_ln: Ln,
    blocks: Vec<Block>,
    out_ln: Ln,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for s in 0..4 {
            let c = cfg.widths[s];
            let (k, stride, pad) = if s == 0 { (7, 4, 3) } else { (3, 2, 1) };
            let patch = Conv::new(
                ps,
                rng,
                &format!("{name}.s{s}.patch"),
                c_in,
                c,
                k,
                Conv2dSpec { stride, pad, dilation: 1, groups: 1 },
            );
            let patch_ln = Ln::new(ps, &format!("{name}.s{s}.pln"), c);
            let blocks = (0..cfg.depths[s])
                .map(|b| {
                    Block::new(
                        ps,
                        rng,
                        &format!("{name}.s{s}.b{b}"),
                        c,
                        cfg.heads[s],
                        cfg.sr_ratios[s],
                        cfg.ffn_expand,
                    )
                })
                .collect();
            let out_ln = Ln::new(ps, &format!("{name}.s{s}.oln"), c);
            stages.push(Stage { patch, patch_ln, blocks, out_ln });
            c_in = c;
        }
        Encoder { cfg: cfg.clone(), stages }
    }

    /// image: `[3,H,W]` with H, W divisible by 32. Returns the four stage
    /// outputs `[C_s, H/4/2^s, W/4/2^s]`.
    pub fn fwd<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, image: Tv) -> Vec<Tv> {
        let shape = g.shape(image);
        let (mut h, mut w) = (shape[1], shape[2]);
        let mut x = image;
        let mut feats = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            let c = self.cfg.widths[s];
            let sp = stage.patch.fwd(g, bind, x);
            h = if s == 0 { h / 4 } else { h / 2 };
            w = if s == 0 { w / 4 } else { w / 2 };
            let mut t = spatial_to_tokens(g, sp, c, h, w);
            t = stage.patch_ln.fwd(g, bind, t);
            for b in &stage.blocks {
                t = b.fwd(g, bind, t, c, h, w);
            }
            t = stage.out_ln.fwd(g, bind, t);
            let sp = tokens_to_spatial(g, t, c, h, w);
            feats.push(sp);
            x = sp;
        }
        feats
    }
}
