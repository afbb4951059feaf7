//! Convolutions and spatial layout ops, expressed as index-map data
//! movement plus matmul so their gradients come from already-verified
//! primitives.
//!
//! Layout is always [batch, channels, height, width]. Convolution
//! weights are [out_ch, in_ch/groups, kh, kw]; transposed-convolution
//! weights are [in_ch, out_ch, kh, kw].

use std::rc::Rc;

use super::{Scalar, Tensor};

fn expect4(t: &Tensor<impl Scalar>, name: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{name}: expected [B,C,H,W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

impl<T: Scalar> Tensor<T> {
    /// Zero padding of the two spatial axes.
    pub fn zero_pad2d(&self, pad: usize) -> Tensor<T> {
        if pad == 0 {
            return self.clone();
        }
        let (b, c, h, w) = expect4(self, "zero_pad2d");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut map = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                let base = ((bi * c + ci) * hp + pad) * wp + pad;
                for y in 0..h {
                    for x in 0..w {
                        map.push(base + y * wp + x);
                    }
                }
            }
        }
        self.scatter_map(&[b, c, hp, wp], Rc::new(map))
    }

    /// Reflection padding (no edge duplication) of the right and
    /// bottom borders, used to grow images to a stride-compatible
    /// size. Folds at the borders, so any pad amount is valid.
    pub fn reflect_pad_bottom_right(&self, pad_h: usize, pad_w: usize) -> Tensor<T> {
        if pad_h == 0 && pad_w == 0 {
            return self.clone();
        }
        let (b, c, h, w) = expect4(self, "reflect_pad_bottom_right");
        let (hp, wp) = (h + pad_h, w + pad_w);
        let mut map = Vec::with_capacity(b * c * hp * wp);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for y in 0..hp {
                    let ry = reflect_index(y, h);
                    for x in 0..wp {
                        map.push(base + ry * w + reflect_index(x, w));
                    }
                }
            }
        }
        self.gather_map(&[b, c, hp, wp], Rc::new(map))
    }

    /// Top-left crop of the spatial axes.
    pub fn crop2d(&self, new_h: usize, new_w: usize) -> Tensor<T> {
        let (_, _, h, w) = expect4(self, "crop2d");
        assert!(new_h <= h && new_w <= w, "crop2d: {new_h}x{new_w} exceeds {h}x{w}");
        self.slice(2, 0, new_h).slice(3, 0, new_w)
    }

    /// Grouped 2-D convolution.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<T> {
        let (b, cin, h, w) = expect4(self, "conv2d input");
        let ws = weight.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d: weight must be [Cout,Cin/g,kh,kw], got {ws:?}");
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert!(
            groups >= 1 && cin % groups == 0 && cout % groups == 0,
            "conv2d: groups {groups} must divide in {cin} and out {cout} channels"
        );
        assert_eq!(cin_g, cin / groups, "conv2d: weight in-channels vs input {cin} / groups {groups}");
        assert_eq!(bias.shape(), &[cout], "conv2d: bias shape vs out channels {cout}");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        assert!(hp >= kh && wp >= kw, "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}");
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;
        let l = oh * ow;

        let padded = self.zero_pad2d(pad);
        let cout_g = cout / groups;
        let mut parts: Vec<Tensor<T>> = Vec::with_capacity(groups);
        for g in 0..groups {
            let xg = if groups == 1 {
                padded.clone()
            } else {
                padded.slice(1, g * cin_g, cin_g)
            };
            // im2col: [B, Cin_g*kh*kw, L]
            let mut map = Vec::with_capacity(b * cin_g * kh * kw * l);
            for bi in 0..b {
                for ci in 0..cin_g {
                    let base = (bi * cin_g + ci) * hp * wp;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            for oy in 0..oh {
                                let iy = oy * stride + ki;
                                for ox in 0..ow {
                                    map.push(base + iy * wp + ox * stride + kj);
                                }
                            }
                        }
                    }
                }
            }
            let cols = xg.gather_map(&[b, cin_g * kh * kw, l], Rc::new(map));
            let wg = if groups == 1 {
                weight.clone()
            } else {
                weight.slice(0, g * cout_g, cout_g)
            };
            let wflat = wg.reshape(&[cout_g, cin_g * kh * kw]);
            parts.push(wflat.matmul(&cols)); // [B, Cout_g, L]
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let joined = if groups == 1 {
            parts[0].clone()
        } else {
            Tensor::concat(&refs, 1)
        };
        joined
            .add(&bias.reshape(&[cout, 1]))
            .reshape(&[b, cout, oh, ow])
    }

    /// Transposed 2-D convolution (no groups). Output size is
    /// (H-1)*stride - 2*pad + kh + output_padding; `output_padding`
    /// must not exceed `pad`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Tensor<T> {
        let (b, cin, h, w) = expect4(self, "conv_transpose2d input");
        let ws = weight.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv_transpose2d: weight must be [Cin,Cout,kh,kw], got {ws:?}");
        let (wcin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv_transpose2d: weight in-channels vs input {cin}");
        assert_eq!(bias.shape(), &[cout], "conv_transpose2d: bias shape vs out channels {cout}");
        assert!(
            output_padding <= pad,
            "conv_transpose2d: output_padding {output_padding} > pad {pad} unsupported"
        );
        let hf = (h - 1) * stride + kh;
        let wf = (w - 1) * stride + kw;
        let oh = hf + output_padding - 2 * pad;
        let ow = wf + output_padding - 2 * pad;

        // cols[b, (co,ki,kj), (y,x)] = sum_ci W[ci,co,ki,kj] * X[b,ci,y,x]
        let wflat = weight
            .reshape(&[cin, cout * kh * kw])
            .transpose_last2(); // [Cout*kh*kw, Cin]
        let xflat = self.reshape(&[b, cin, h * w]);
        let cols = wflat.matmul(&xflat); // [B, Cout*kh*kw, H*W]

        // col2im: scatter every kernel tap into the full-size output.
        let mut map = Vec::with_capacity(b * cout * kh * kw * h * w);
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * hf * wf;
                for ki in 0..kh {
                    for kj in 0..kw {
                        for y in 0..h {
                            let oy = y * stride + ki;
                            for x in 0..w {
                                map.push(obase + oy * wf + x * stride + kj);
                            }
                        }
                    }
                }
            }
        }
        let full = cols.scatter_map(&[b, cout, hf, wf], Rc::new(map));
        let cropped = full
            .slice(2, pad, oh.min(hf - pad))
            .slice(3, pad, ow.min(wf - pad));
        // output_padding rows/cols beyond the full buffer are zeros
        let (ch, cw) = (cropped.shape()[2], cropped.shape()[3]);
        let grown = if ch < oh || cw < ow {
            cropped.pad_bottom_right_zero(oh - ch, ow - cw)
        } else {
            cropped
        };
        grown.add(&bias.reshape(&[cout, 1, 1]))
    }

    fn pad_bottom_right_zero(&self, extra_h: usize, extra_w: usize) -> Tensor<T> {
        let (b, c, h, w) = expect4(self, "pad_bottom_right_zero");
        let (hp, wp) = (h + extra_h, w + extra_w);
        let mut map = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hp * wp;
                for y in 0..h {
                    for x in 0..w {
                        map.push(base + y * wp + x);
                    }
                }
            }
        }
        self.scatter_map(&[b, c, hp, wp], Rc::new(map))
    }

    /// Rearranges [B, C*r^2, H, W] into [B, C, H*r, W*r]; channel
    /// index decomposes as c*r^2 + dy*r + dx.
    pub fn pixel_shuffle(&self, r: usize) -> Tensor<T> {
        let (b, cr2, h, w) = expect4(self, "pixel_shuffle");
        assert!(r >= 1 && cr2 % (r * r) == 0, "pixel_shuffle: channels {cr2} not divisible by r^2 ({r})");
        let c = cr2 / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut map = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    let (iy, dy) = (y / r, y % r);
                    for x in 0..ow {
                        let (ix, dx) = (x / r, x % r);
                        let ch = ci * r * r + dy * r + dx;
                        map.push(((bi * cr2 + ch) * h + iy) * w + ix);
                    }
                }
            }
        }
        self.gather_map(&[b, c, oh, ow], Rc::new(map))
    }
}

/// Fold an out-of-range coordinate back into [0, n) by reflecting at
/// the borders without repeating edge samples.
fn reflect_index(mut i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i %= period;
    if i >= n {
        period - i
    } else {
        i
    }
}
