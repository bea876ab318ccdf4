//! Central finite-difference verification of tape gradients.

use ndarray::ArrayD;

use super::Graph;
use crate::real::Real;

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences. `build` must construct the loss from the given leaf
/// values on the provided fresh graph. Returns the maximum relative error
/// over all checked coordinates (at most `max_coords` per leaf).
pub fn check<T, F>(leaves: &[ArrayD<T>], eps: f64, max_coords: usize, build: F) -> f64
where
    T: Real,
    F: Fn(&Graph<T>, &[super::Tv]) -> super::Tv,
{
    // analytic
    let g = Graph::new();
    let tvs: Vec<_> = leaves.iter().map(|l| g.leaf(l.clone(), true)).collect();
    let loss = build(&g, &tvs);
    assert!(g.value(loss).ndim() == 0, "gradcheck: loss must be scalar");
    let grads = g.backward(loss);

    let eval = |perturbed: &[ArrayD<T>]| -> f64 {
        let g = Graph::new();
        let tvs: Vec<_> = perturbed.iter().map(|l| g.leaf(l.clone(), true)).collect();
        let loss = build(&g, &tvs);
        g.value(loss)[[]].to_f64()
    };

    let mut max_rel = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(tvs[li])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(leaf.raw_dim()));
        let n = leaf.len();
        let stride = (n / max_coords.max(1)).max(1);
        for flat in (0..n).step_by(stride) {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            let slice_p = plus[li].as_slice_memory_order_mut().unwrap();
            slice_p[flat] = slice_p[flat] + T::from_f64(eps);
            let slice_m = minus[li].as_slice_memory_order_mut().unwrap();
            slice_m[flat] = slice_m[flat] - T::from_f64(eps);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice_memory_order().unwrap()[flat].to_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv::Conv2dSpec;
    use crate::tensor::params::Init;
    use rand::SeedableRng;
    use std::rc::Rc;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn gradcheck_matmul_softmax_ce() {
        let mut r = rng();
        let x: ArrayD<f64> = Init::normal(&mut r, &[4, 3], 1.0);
        let w: ArrayD<f64> = Init::normal(&mut r, &[3, 5], 1.0);
        let target = Rc::new(vec![0usize, 2, 4, usize::MAX]);
        let weight = Rc::new(vec![1.0, 0.5, 2.0, 1.0]);
        let err = check(&[x, w], 1e-5, 64, |g, tv| {
            let y = g.matmul(tv[0], tv[1]);
            g.cross_entropy(y, target.clone(), weight.clone())
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn gradcheck_conv_layernorm_gelu() {
        let mut r = rng();
        let x: ArrayD<f64> = Init::normal(&mut r, &[2, 6, 6], 1.0);
        let w: ArrayD<f64> = Init::normal(&mut r, &[3, 2, 3, 3], 0.5);
        let gamma: ArrayD<f64> = Init::ones(&[3]);
        let beta: ArrayD<f64> = Init::zeros(&[3]);
        let err = check(&[x, w, gamma, beta], 1e-5, 64, |g, tv| {
            let y = g.conv2d(
                tv[0],
                tv[1],
                Conv2dSpec {
                    stride: 1,
                    pad: 1,
                    dilation: 1,
                    groups: 1,
                },
            );
            let y = g.gelu(y);
            // tokens [N, C]
            let y = g.permute(y, &[1, 2, 0]);
            let y = g.reshape(y, &[36, 3]);
            let y = g.layer_norm(y, tv[2], tv[3], 1e-6);
            let y = g.sigmoid(y);
            g.mean_all(y)
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn gradcheck_attention_path() {
        let mut r = rng();
        let q: ArrayD<f64> = Init::normal(&mut r, &[2, 4, 3], 1.0);
        let k: ArrayD<f64> = Init::normal(&mut r, &[2, 3, 4], 1.0);
        let err = check(&[q, k], 1e-5, 64, |g, tv| {
            let s = g.bmm(tv[0], tv[1]);
            let p = g.softmax_lastdim(s);
            g.mean_all(p)
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn gradcheck_upsample_roi_bce() {
        let mut r = rng();
        let x: ArrayD<f64> = Init::normal(&mut r, &[2, 5, 5], 1.0);
        let boxes = Rc::new(vec![[0.5, 0.5, 3.5, 4.0], [1.0, 0.0, 4.9, 4.9]]);
        let tgt = Rc::new(Init::constant(&[2, 2, 3, 3], 0.3));
        let wgt = Rc::new(Init::ones(&[2, 2, 3, 3]));
        let err = check(&[x], 1e-5, 50, |g, tv| {
            let up = g.upsample_bilinear(tv[0], 5, 5);
            let roi = g.roi_align(up, boxes.clone(), 3, 3);
            g.bce_with_logits(roi, tgt.clone(), wgt.clone())
        });
        assert!(err < 1e-5, "rel err {err}");
    }
}
