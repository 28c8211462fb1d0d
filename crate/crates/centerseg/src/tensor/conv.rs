//! 2-D convolution (cross-correlation semantics) for the backbone.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    /// `x: [Cin,H,W]`, `kernels: [Cout,Cin,k,k]`, optional per-channel
    /// bias `[Cout]`. Differentiable with respect to all three.
    pub fn conv2d(
        &self,
        kernels: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ks = kernels.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects [C,H,W] input and [Co,Ci,k,k] kernels, got {:?} / {:?}",
                xs, ks
            )));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, cik, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if ci != cik {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                ci, cik
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::Dimension(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    b.shape(),
                    co
                )));
            }
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension("conv2d kernel larger than padded input".into()));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let xd = self.data();
        let kd = kernels.data();
        let mut out = vec![T::zero(); co * oh * ow];
        if let Some(b) = bias {
            let bd = b.data();
            for c in 0..co {
                for v in &mut out[c * oh * ow..(c + 1) * oh * ow] {
                    *v = bd[c];
                }
            }
        }
        for c_out in 0..co {
            for c_in in 0..ci {
                let xplane = &xd[c_in * h * w..(c_in + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = kd[((c_out * ci + c_in) * kh + ky) * kw + kx];
                        if kv == T::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut out[(c_out * oh + oy) * ow..(c_out * oh + oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                orow[ox] = orow[ox] + kv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }

        let px = self.clone();
        let pk = kernels.clone();
        let has_bias = bias.is_some();
        let vjp = Box::new(move |g: &[T], _y: &[T]| {
            let xd = px.data();
            let kd = pk.data();
            let mut gx = vec![T::zero(); ci * h * w];
            let mut gk = vec![T::zero(); co * ci * kh * kw];
            for c_out in 0..co {
                for c_in in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kidx = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                            let kv = kd[kidx];
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let go = g[(c_out * oh + oy) * ow + ox];
                                    let xidx = (c_in * h + iy as usize) * w + ix as usize;
                                    acc = acc + go * xd[xidx];
                                    gx[xidx] = gx[xidx] + go * kv;
                                }
                            }
                            gk[kidx] = gk[kidx] + acc;
                        }
                    }
                }
            }
            let mut grads = vec![gx, gk];
            if has_bias {
                let mut gb = vec![T::zero(); co];
                for c in 0..co {
                    for v in &g[c * oh * ow..(c + 1) * oh * ow] {
                        gb[c] = gb[c] + *v;
                    }
                }
                grads.push(gb);
            }
            grads
        });
        let mut parents = vec![self.clone(), kernels.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, vec![co, oh, ow], parents, vjp))
    }
}
