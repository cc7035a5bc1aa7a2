//! 2-D convolution with stride, zero padding, and channel groups.

use super::{Graph, Op, TensorError, TensorId};

struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    batched: bool,
}

fn resolve_dims(
    idims: &[usize],
    wdims: &[usize],
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvDims, TensorError> {
    let err = |detail: String| TensorError::Shape { op: "conv2d", detail };
    let (batched, batch, c_in, h, w) = match idims.len() {
        3 => (false, 1, idims[0], idims[1], idims[2]),
        4 => (true, idims[0], idims[1], idims[2], idims[3]),
        _ => return Err(err(format!("input must be [C,H,W] or [N,C,H,W], got {idims:?}"))),
    };
    if wdims.len() != 4 {
        return Err(err(format!("weight must be [C_out,C_in/groups,kH,kW], got {wdims:?}")));
    }
    let (c_out, c_per_group, kh, kw) = (wdims[0], wdims[1], wdims[2], wdims[3]);
    if groups == 0 || stride == 0 {
        return Err(TensorError::Config {
            op: "conv2d",
            detail: format!("stride {stride} and groups {groups} must be positive"),
        });
    }
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(err(format!(
            "groups {groups} must divide input channels {c_in} and output channels {c_out}"
        )));
    }
    if c_per_group != c_in / groups {
        return Err(err(format!(
            "weight dims {wdims:?} expect {} channels per group, input has {}",
            c_per_group,
            c_in / groups
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(err(format!(
            "kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvDims { batch, c_in, h, w, c_out, kh, kw, oh, ow, batched })
}

impl Graph {
    /// Cross-correlation of `input` with `weight`. Accepts a single image
    /// [C, H, W] or a batch [N, C, H, W]; `groups == C_in == C_out` gives a
    /// depthwise convolution.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<TensorId, TensorError> {
        let d = resolve_dims(self.dims(input), self.dims(weight), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.dims(b) != [d.c_out] {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    detail: format!("bias dims {:?}, expected [{}]", self.dims(b), d.c_out),
                });
            }
        }
        let x = self.data(input);
        let wv = self.data(weight);
        let bv = bias.map(|b| self.data(b).to_vec());
        let cpg_in = d.c_in / groups;
        let cpg_out = d.c_out / groups;
        let mut out = vec![0.0f32; d.batch * d.c_out * d.oh * d.ow];

        for n in 0..d.batch {
            for co in 0..d.c_out {
                let group = co / cpg_out;
                let base_ci = group * cpg_in;
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut acc = bv.as_ref().map_or(0.0, |b| b[co]);
                        for ci in 0..cpg_in {
                            let in_ch = base_ci + ci;
                            for ky in 0..d.kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * d.c_in + in_ch) * d.h + iy as usize) * d.w
                                        + ix as usize;
                                    let wi = ((co * cpg_in + ci) * d.kh + ky) * d.kw + kx;
                                    acc += x[xi] * wv[wi];
                                }
                            }
                        }
                        out[((n * d.c_out + co) * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }

        let out_dims = if d.batched {
            vec![d.batch, d.c_out, d.oh, d.ow]
        } else {
            vec![d.c_out, d.oh, d.ow]
        };
        let rg = self.requires(input)
            || self.requires(weight)
            || bias.map_or(false, |b| self.requires(b));
        Ok(self.push(
            out_dims,
            out,
            rg,
            Op::Conv2d { input, weight, bias, stride, padding, groups },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn conv2d_backward(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
        groups: usize,
        gout: &[f32],
    ) {
        let d = resolve_dims(self.dims(input), self.dims(weight), stride, padding, groups)
            .expect("dims validated at forward time");
        let x = self.data(input).to_vec();
        let wv = self.data(weight).to_vec();
        let cpg_in = d.c_in / groups;
        let cpg_out = d.c_out / groups;

        let need_gx = self.requires(input);
        let need_gw = self.requires(weight);
        let mut gx = if need_gx { vec![0.0f32; x.len()] } else { Vec::new() };
        let mut gw = if need_gw { vec![0.0f32; wv.len()] } else { Vec::new() };

        if need_gx || need_gw {
            for n in 0..d.batch {
                for co in 0..d.c_out {
                    let group = co / cpg_out;
                    let base_ci = group * cpg_in;
                    for oy in 0..d.oh {
                        for ox in 0..d.ow {
                            let g = gout[((n * d.c_out + co) * d.oh + oy) * d.ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..cpg_in {
                                let in_ch = base_ci + ci;
                                for ky in 0..d.kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= d.h as isize {
                                        continue;
                                    }
                                    for kx in 0..d.kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= d.w as isize {
                                            continue;
                                        }
                                        let xi = ((n * d.c_in + in_ch) * d.h + iy as usize)
                                            * d.w
                                            + ix as usize;
                                        let wi =
                                            ((co * cpg_in + ci) * d.kh + ky) * d.kw + kx;
                                        if need_gx {
                                            gx[xi] += g * wv[wi];
                                        }
                                        if need_gw {
                                            gw[wi] += g * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_gx {
            self.accumulate(input, &gx);
        }
        if need_gw {
            self.accumulate(weight, &gw);
        }
        if let Some(b) = bias {
            if self.requires(b) {
                let mut gb = vec![0.0f32; d.c_out];
                for n in 0..d.batch {
                    for co in 0..d.c_out {
                        for oy in 0..d.oh {
                            for ox in 0..d.ow {
                                gb[co] += gout[((n * d.c_out + co) * d.oh + oy) * d.ow + ox];
                            }
                        }
                    }
                }
                self.accumulate(b, &gb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(g.dims(y), &[1, 3, 3]);
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn sum_kernel_collapses_window() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(g.dims(y), &[1, 1, 1]);
        assert_eq!(g.data(y), &[10.0][..]);
    }

    #[test]
    fn output_spatial_size_follows_stride_and_padding() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 32, 32]));
        let w = g.leaf(Tensor::zeros(&[8, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(g.dims(y), &[1, 8, 16, 16]);
    }

    #[test]
    fn depthwise_groups_keep_channels_separate() {
        let mut g = Graph::new();
        // Two channels, 1x1 kernels scaling by 10 and 100 respectively.
        let x = g.leaf(Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![2, 1, 1, 1], vec![10.0, 100.0]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0, 2).unwrap();
        assert_eq!(g.data(y), &[10.0, 200.0][..]);
    }

    #[test]
    fn shape_error_names_offending_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 8, 8]));
        let w = g.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "{msg}");
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }
}
