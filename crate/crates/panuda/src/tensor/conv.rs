//! Spatial ops on the tape: conv2d (im2col), bilinear upsampling, RoI align.

use std::rc::Rc;

use ndarray::{Array2, Array4, ArrayD};

use super::{Graph, Tv};
use crate::real::Real;

#[derive(Copy, Clone, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

pub fn conv_out_size(inp: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (inp + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

/// `x: [C,H,W] -> col: [C*kh*kw, oh*ow]`
fn im2col<T: Real>(
    x: &ndarray::ArrayView3<T>,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(
    col: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<T> {
    let mut x = ndarray::Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] =
                            x[[ci, iy as usize, ix as usize]] + col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

impl<T: Real> Graph<T> {
    /// 2D convolution. `x: [C,H,W]`, `w: [O, C/g, kh, kw]` -> `[O, oh, ow]`.
    pub fn conv2d(&self, x: Tv, weight: Tv, spec: Conv2dSpec) -> Tv {
        let (vx, vw) = (self.value(x), self.value(weight));
        let x3 = vx
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("conv2d: x must be [C,H,W]");
        let w4 = vw
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d: w must be [O,C/g,kh,kw]");
        let (c, h, w) = x3.dim();
        let (o, cg, kh, kw) = w4.dim();
        let g = spec.groups;
        assert_eq!(c, cg * g, "conv2d: channel/group mismatch");
        assert_eq!(o % g, 0, "conv2d: out channels not divisible by groups");
        let oh = conv_out_size(h, kh, spec.stride, spec.pad, spec.dilation);
        let ow = conv_out_size(w, kw, spec.stride, spec.pad, spec.dilation);
        let og = o / g;

        let mut out = ndarray::Array3::<T>::zeros((o, oh, ow));
        let mut cols: Vec<Array2<T>> = Vec::with_capacity(g);
        for gi in 0..g {
            let xg = x3.slice(ndarray::s![gi * cg..(gi + 1) * cg, .., ..]);
            let col = im2col(&xg, kh, kw, &spec, oh, ow);
            let wg = w4
                .slice(ndarray::s![gi * og..(gi + 1) * og, .., .., ..])
                .into_shape_with_order((og, cg * kh * kw))
                .unwrap()
                .to_owned();
            let res = wg.dot(&col); // [og, oh*ow]
            out.slice_mut(ndarray::s![gi * og..(gi + 1) * og, .., ..])
                .assign(&res.into_shape_with_order((og, oh, ow)).unwrap());
            cols.push(col);
        }
        let cols = Rc::new(cols);
        let out = out.into_dyn();
        let vx2 = vx.clone();
        let vw2 = vw.clone();
        self.push(
            out,
            &[x, weight],
            Box::new(move |gout| {
                let gstd = gout.as_standard_layout();
                let g3 = gstd.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let w4 = vw2.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut dw = Array4::<T>::zeros((o, cg, kh, kw));
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for gi in 0..g {
                    let go = g3
                        .slice(ndarray::s![gi * og..(gi + 1) * og, .., ..])
                        .into_shape_with_order((og, oh * ow))
                        .unwrap()
                        .to_owned();
                    // dW = go . col^T
                    // dot may return an F-layout array (thin-matrix path)
                    let dwg = go.dot(&cols[gi].t()).as_standard_layout().into_owned();
                    dw.slice_mut(ndarray::s![gi * og..(gi + 1) * og, .., .., ..])
                        .assign(&dwg.into_shape_with_order((og, cg, kh, kw)).unwrap());
                    // dcol = W^T . go
                    let wg = w4
                        .slice(ndarray::s![gi * og..(gi + 1) * og, .., .., ..])
                        .into_shape_with_order((og, cg * kh * kw))
                        .unwrap()
                        .to_owned();
                    let dcol = wg.t().dot(&go); // [cg*kh*kw, oh*ow]
                    let dxg = col2im(&dcol, cg, h, w, kh, kw, &spec, oh, ow);
                    dx.slice_mut(ndarray::s![gi * cg..(gi + 1) * cg, .., ..])
                        .assign(&dxg);
                }
                let _ = &vx2;
                vec![(x.0, dx.into_dyn()), (weight.0, dw.into_dyn())]
            }),
        )
    }

    /// Bilinear upsampling (align_corners = false). `x: [C,H,W] -> [C,oh,ow]`.
    pub fn upsample_bilinear(&self, x: Tv, oh: usize, ow: usize) -> Tv {
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        // precompute sample positions
        let plan_axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    let frac = T::from_f64(src - i0 as f64);
                    (i0, i1, frac)
                })
                .collect()
        };
        let ys = plan_axis(oh, h);
        let xs = plan_axis(ow, w);
        let mut out = ndarray::Array3::<T>::zeros((c, oh, ow));
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = x3[[ci, y0, x0]];
                    let v01 = x3[[ci, y0, x1]];
                    let v10 = x3[[ci, y1, x0]];
                    let v11 = x3[[ci, y1, x1]];
                    let top = v00 * (T::one() - fx) + v01 * fx;
                    let bot = v10 * (T::one() - fx) + v11 * fx;
                    out[[ci, oy, ox]] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        self.push(
            out.into_dyn(),
            &[x],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = g3[[ci, oy, ox]];
                            dx[[ci, y0, x0]] =
                                dx[[ci, y0, x0]] + gv * (T::one() - fx) * (T::one() - fy);
                            dx[[ci, y0, x1]] = dx[[ci, y0, x1]] + gv * fx * (T::one() - fy);
                            dx[[ci, y1, x0]] = dx[[ci, y1, x0]] + gv * (T::one() - fx) * fy;
                            dx[[ci, y1, x1]] = dx[[ci, y1, x1]] + gv * fx * fy;
                        }
                    }
                }
                vec![(x.0, dx.into_dyn())]
            }),
        )
    }

    /// RoI align with 2x2 sampling per bin. `x: [C,H,W]`, boxes in feature-map
    /// pixel coordinates `(y0,x0,y1,x1)` -> `[R,C,oh,ow]`. Gradients flow to
    /// the features only; box coordinates are treated as constants.
    pub fn roi_align(&self, x: Tv, boxes: Rc<Vec<[f64; 4]>>, oh: usize, ow: usize) -> Tv {
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let r = boxes.len();
        let mut out = Array4::<T>::zeros((r, c, oh, ow));
        // (dst flat index within one roi-channel plane) -> 4 taps
        let sample = |y: f64, x: f64| -> [(usize, usize, f64); 4] {
            let yc = y.clamp(0.0, (h - 1) as f64);
            let xc = x.clamp(0.0, (w - 1) as f64);
            let y0 = yc.floor() as usize;
            let x0 = xc.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = yc - y0 as f64;
            let fx = xc - x0 as f64;
            [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ]
        };
        // precompute taps per roi/bin/sample
        let mut taps: Vec<[(usize, usize, f64); 4]> = Vec::with_capacity(r * oh * ow * 4);
        for b in boxes.iter() {
            let bh = (b[2] - b[0]).max(1e-6);
            let bw = (b[3] - b[1]).max(1e-6);
            let cell_h = bh / oh as f64;
            let cell_w = bw / ow as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let y = b[0] + (oy as f64 + (sy as f64 + 0.5) / 2.0) * cell_h;
                            let xx = b[1] + (ox as f64 + (sx as f64 + 0.5) / 2.0) * cell_w;
                            taps.push(sample(y, xx));
                        }
                    }
                }
            }
        }
        let quarter = T::from_f64(0.25);
        for ri in 0..r {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((ri * oh + oy) * ow + ox) * 4;
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for s in 0..4 {
                            for &(ty, tx, tw) in &taps[base + s] {
                                acc = acc + x3[[ci, ty, tx]] * T::from_f64(tw);
                            }
                        }
                        out[[ri, ci, oy, ox]] = acc * quarter;
                    }
                }
            }
        }
        let taps = Rc::new(taps);
        self.push(
            out.into_dyn(),
            &[x],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for ri in 0..r {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let base = ((ri * oh + oy) * ow + ox) * 4;
                            for ci in 0..c {
                                let gv = g4[[ri, ci, oy, ox]] * quarter;
                                for s in 0..4 {
                                    for &(ty, tx, tw) in &taps[base + s] {
                                        dx[[ci, ty, tx]] =
                                            dx[[ci, ty, tx]] + gv * T::from_f64(tw);
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x.0, dx.into_dyn())]
            }),
        )
    }

    /// Select one roi-plane from a `[R,C,oh,ow]` tensor -> `[C,oh,ow]`.
    pub fn index_roi(&self, x: Tv, ri: usize) -> Tv {
        let vx = self.value(x);
        let out = vx.index_axis(ndarray::Axis(0), ri).to_owned();
        let dim = vx.raw_dim();
        self.push(
            out,
            &[x],
            Box::new(move |g| {
                let mut dx = ArrayD::<T>::zeros(dim.clone());
                dx.index_axis_mut(ndarray::Axis(0), ri).assign(g);
                vec![(x.0, dx)]
            }),
        )
    }
}

/// Downsample a boolean mask by majority pooling with an integer factor.
/// Used to bring a thing-mask to feature stride. Exactly half counts as true.
pub fn majority_pool_mask(mask: &ndarray::Array2<bool>, factor: usize) -> ndarray::Array2<bool> {
    let (h, w) = mask.dim();
    let (oh, ow) = (h / factor, w / factor);
    let mut out = ndarray::Array2::from_elem((oh, ow), false);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut cnt = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    if mask[[oy * factor + dy, ox * factor + dx]] {
                        cnt += 1;
                    }
                }
            }
            out[[oy, ox]] = 2 * cnt >= factor * factor;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn conv2d_identity_kernel() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Array3::from_shape_fn((1, 3, 3), |(_, y, x)| (y * 3 + x) as f64).into_dyn(),
            true,
        );
        let w = g.leaf(Array4::from_shape_fn((1, 1, 1, 1), |_| 2.0).into_dyn(), true);
        let y = g.conv2d(x, w, Conv2dSpec::default());
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 3, 3]);
        assert_eq!(v[[0, 2, 2]], 16.0);
    }

    #[test]
    fn upsample_shapes_and_corner_values() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Array3::from_elem((2, 4, 4), 3.0).into_dyn(), true);
        let y = g.upsample_bilinear(x, 8, 8);
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 8, 8]);
        // constant input stays constant
        assert!((v[[1, 5, 7]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn majority_pool_half_true() {
        let mut m = ndarray::Array2::from_elem((4, 4), false);
        m[[0, 0]] = true;
        m[[0, 1]] = true;
        // 2 of 4 in the top-left 2x2 block -> majority (ties count)
        let p = majority_pool_mask(&m, 2);
        assert!(p[[0, 0]]);
        assert!(!p[[1, 1]]);
    }
}
