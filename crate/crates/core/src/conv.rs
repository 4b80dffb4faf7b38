//! Plain convolution primitives shared across the crate.
//!
//! Everything operates on `C×h×w` tensors with zero padding of `K/2` so
//! stride-1 convolutions preserve spatial size. Backward passes exist for
//! the layers the micro-trainer updates (pointwise and stride-1 depthwise);
//! the dense conv is inference-only.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 1×1 convolution: channel mix. `w` is `[C_out × C_in]`, bias optional.
pub fn pointwise(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 2 {
        return Err(Error::Shape("pointwise: need 3-D input and 2-D weight".into()));
    }
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, c_in2) = (w.shape()[0], w.shape()[1]);
    if c_in != c_in2 {
        return Err(Error::Shape(format!("pointwise: {c_in} channels vs weight {c_in2}")));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::Shape("pointwise: bias length mismatch".into()));
        }
    }
    let hw = h * wd;
    let mut out = Tensor::zeros(&[c_out, h, wd]);
    let mut acc = vec![0.0; hw];
    for o in 0..c_out {
        let base = match bias {
            Some(b) => b.data()[o],
            None => 0.0,
        };
        acc.iter_mut().for_each(|v| *v = base);
        for i in 0..c_in {
            let coeff = w.at2(o, i);
            if coeff == 0.0 {
                continue;
            }
            let plane = &x.data()[i * hw..(i + 1) * hw];
            for (a, &xv) in acc.iter_mut().zip(plane) {
                *a += coeff * xv;
            }
        }
        out.data_mut()[o * hw..(o + 1) * hw].copy_from_slice(&acc);
    }
    Ok(out)
}

/// Gradients of [`pointwise`]: returns `(d_input, d_weight, d_bias)`.
pub fn pointwise_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    if grad_out.shape() != [c_out, h, wd] {
        return Err(Error::Shape("pointwise_backward: grad shape mismatch".into()));
    }
    let hw = h * wd;
    let mut dx = Tensor::zeros(&[c_in, h, wd]);
    let mut dw = Tensor::zeros(&[c_out, c_in]);
    let mut db = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        let gplane = &grad_out.data()[o * hw..(o + 1) * hw];
        db.data_mut()[o] = gplane.iter().sum();
        for i in 0..c_in {
            let xplane = &x.data()[i * hw..(i + 1) * hw];
            let coeff = w.at2(o, i);
            let mut acc = 0.0;
            for (p, (&g, &xv)) in gplane.iter().zip(xplane).enumerate() {
                acc += g * xv;
                dx.data_mut()[i * hw + p] += coeff * g;
            }
            dw.set2(o, i, acc);
        }
    }
    Ok((dx, dw, db))
}

/// Depthwise K×K convolution, zero padding `K/2`, configurable stride.
/// `k` is `[C × K × K]` (one kernel per channel), bias optional.
pub fn depthwise(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    if x.rank() != 3 || k.rank() != 3 {
        return Err(Error::Shape("depthwise: need 3-D input and 3-D kernel".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if k.shape()[0] != c || k.shape()[1] != k.shape()[2] {
        return Err(Error::Shape(format!(
            "depthwise: kernel {:?} does not fit {c} channels",
            k.shape()
        )));
    }
    let ks = k.shape()[1];
    if ks % 2 == 0 || stride == 0 {
        return Err(Error::Config("depthwise: kernel must be odd, stride positive".into()));
    }
    let pad = ks / 2;
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = match bias {
                    Some(b) => b.data()[ch],
                    None => 0.0,
                };
                for ky in 0..ks {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..ks {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += k.at3(ch, ky, kx) * x.at3(ch, y as usize, xx as usize);
                    }
                }
                out.set3(ch, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Gradients of stride-1 [`depthwise`]: returns `(d_input, d_kernel, d_bias)`.
pub fn depthwise_backward(x: &Tensor, k: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = k.shape()[1];
    let pad = ks / 2;
    if grad_out.shape() != x.shape() {
        return Err(Error::Shape("depthwise_backward: grad shape mismatch".into()));
    }
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut dk = Tensor::zeros(&[c, ks, ks]);
    let mut db = Tensor::zeros(&[c]);
    for ch in 0..c {
        db.data_mut()[ch] = grad_out.plane(ch).iter().sum();
        for oy in 0..h {
            for ox in 0..w {
                let g = grad_out.at3(ch, oy, ox);
                if g == 0.0 {
                    continue;
                }
                for ky in 0..ks {
                    let y = oy as isize + ky as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..ks {
                        let xx = ox as isize + kx as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let xv = x.at3(ch, y as usize, xx as usize);
                        dk.set3(ch, ky, kx, dk.at3(ch, ky, kx) + g * xv);
                        dx.set3(ch, y as usize, xx as usize, dx.at3(ch, y as usize, xx as usize) + g * k.at3(ch, ky, kx));
                    }
                }
            }
        }
    }
    Ok((dx, dk, db))
}

/// Dense K×K convolution: `w` is `[C_out × C_in × K × K]` flattened to
/// 4-D, zero padding `K/2`, stride 1. Used by the stem and head convs.
pub fn dense_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::Shape("dense_conv: need 3-D input and 4-D weight".into()));
    }
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, c_in2, ks, ks2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if c_in != c_in2 || ks != ks2 || ks % 2 == 0 {
        return Err(Error::Shape(format!("dense_conv: weight {:?} does not fit input", w.shape())));
    }
    let pad = ks / 2;
    let mut out = Tensor::zeros(&[c_out, h, wd]);
    for o in 0..c_out {
        for oy in 0..h {
            for ox in 0..wd {
                let mut acc = match bias {
                    Some(b) => b.data()[o],
                    None => 0.0,
                };
                for i in 0..c_in {
                    for ky in 0..ks {
                        let y = oy as isize + ky as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..ks {
                            let xx = ox as isize + kx as isize - pad as isize;
                            if xx < 0 || xx >= wd as isize {
                                continue;
                            }
                            let widx = ((o * c_in + i) * ks + ky) * ks + kx;
                            acc += w.data()[widx] * x.at3(i, y as usize, xx as usize);
                        }
                    }
                }
                out.set3(o, oy, ox, acc);
            }
        }
    }
    Ok(out)
}
