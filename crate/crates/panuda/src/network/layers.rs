//! Small parameterized layers shared by the encoder and decoders.

use rand::Rng;

use crate::real::Real;
use crate::tensor::conv::Conv2dSpec;
use crate::tensor::params::{Init, ParamBinding, ParamId, ParamStore};
use crate::tensor::{Graph, Tv};

/// Fully connected layer over token matrices `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: ps.add(&format!("{name}.w"), Init::normal(rng, &[d_in, d_out], 0.02)),
            b: ps.add(&format!("{name}.b"), Init::zeros(&[d_out])),
        }
    }

    pub fn fwd<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, x: Tv) -> Tv {
        g.add_rows(g.matmul(x, bind.get(g, self.w)), bind.get(g, self.b))
    }
}

/// 2-d convolution `[C,H,W] -> [O,H',W']` with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: Conv2dSpec,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            Init::kaiming(rng, &[c_out, c_in / spec.groups, k, k]),
        );
        let b = ps.add(&format!("{name}.b"), Init::zeros(&[c_out]));
        Conv { w, b, spec }
    }

    pub fn fwd<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, x: Tv) -> Tv {
        g.add_chan(g.conv2d(x, bind.get(g, self.w), self.spec), bind.get(g, self.b))
    }
}

/// Layer norm over the last dimension.
#[derive(Clone, Debug)]
pub struct Ln {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Ln {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Ln {
            gamma: ps.add(&format!("{name}.g"), Init::ones(&[dim])),
            beta: ps.add(&format!("{name}.b"), Init::zeros(&[dim])),
        }
    }

    pub fn fwd<T: Real>(&self, g: &Graph<T>, bind: &ParamBinding<T>, x: Tv) -> Tv {
        g.layer_norm(x, bind.get(g, self.gamma), bind.get(g, self.beta), T::from_f64(1e-6))
    }
}

/// `[N,C]` tokens (row-major over a `h x w` grid) -> `[C,h,w]`.
pub fn tokens_to_spatial<T: Real>(g: &Graph<T>, x: Tv, c: usize, h: usize, w: usize) -> Tv {
    let x = g.reshape(x, &[h, w, c]);
    g.permute(x, &[2, 0, 1])
}

/// `[C,h,w]` -> `[N,C]` tokens.
pub fn spatial_to_tokens<T: Real>(g: &Graph<T>, x: Tv, c: usize, h: usize, w: usize) -> Tv {
    let x = g.permute(x, &[1, 2, 0]);
    g.reshape(x, &[h * w, c])
}
