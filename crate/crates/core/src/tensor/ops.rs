use rand::Rng;

use super::{Module, Parameter, Tensor};
use crate::error::{Error, Result};

/// Affine map along the trailing dimension: `input[..., Cin] @ weight[Cin, Cout] + bias[Cout]`.
/// Dot product over four interleaved partial sums, which vectorises.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, cout) = check_linear(input, weight, bias)?;
    let rows = input.rows();
    let w = weight.values();
    let mut out = Vec::with_capacity(rows * cout);
    for r in 0..rows {
        let x = input.row(r);
        let mut acc = bias.values().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * cout..(i + 1) * cout];
            acc.iter_mut().zip(wrow).for_each(|(a, &wv)| *a += xi * wv);
        }
        out.extend_from_slice(&acc);
    }
    debug_assert_eq!(input.cols(), cin);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = cout;
    Tensor::new(shape, out)
}

fn check_linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if weight.shape().len() != 2 || input.cols() != weight.shape()[0] {
        return Err(Error::Dimension {
            op: "linear",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let cout = weight.shape()[1];
    if bias.shape() != [cout] {
        return Err(Error::Dimension {
            op: "linear bias",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok((weight.shape()[0], cout))
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let cin = input.cols();
    if weight.shape().len() != 2 || weight.shape()[0] != cin {
        return Err(Error::Dimension {
            op: "linear_backward",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let cout = weight.shape()[1];
    if grad_out.cols() != cout || grad_out.rows() != input.rows() {
        return Err(Error::Dimension {
            op: "linear_backward grad",
            left: grad_out.shape().to_vec(),
            right: vec![input.rows(), cout],
        });
    }
    let w = weight.values();
    let mut gin = vec![0.0; input.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for r in 0..input.rows() {
        let x = input.row(r);
        let go = grad_out.row(r);
        gb.iter_mut().zip(go).for_each(|(b, &g)| *b += g);
        let gx = &mut gin[r * cin..(r + 1) * cin];
        for i in 0..cin {
            let wrow = &w[i * cout..(i + 1) * cout];
            gx[i] = dot(wrow, go);
            let xi = x[i];
            if xi != 0.0 {
                gw[i * cout..(i + 1) * cout]
                    .iter_mut()
                    .zip(go)
                    .for_each(|(a, &g)| *a += xi * g);
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

/// Fully connected layer with weight `[Cin, Cout]` and bias `[Cout]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Uniform `±1/sqrt(Cin)` weights, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::uniform(&[cin, cout], bound, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn zeros(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(&[cin, cout])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        linear(input, &self.weight.tensor, &self.bias.tensor)
    }

    /// Accumulates weight and bias gradients, returns the input gradient.
    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let g = linear_backward(input, &self.weight.tensor, grad_out)?;
        self.weight.accumulate(g.weight.values());
        self.bias.accumulate(g.bias.values());
        Ok(g.input)
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = input.shape();
    let k = kernel.shape();
    if s.len() != 3 || k.len() != 4 || k[0] != 3 || k[1] != 3 || k[2] != s[2] {
        return Err(Error::Dimension {
            op: "conv2d_stride2",
            left: s.to_vec(),
            right: k.to_vec(),
        });
    }
    if s[0] < 3 || s[1] < 3 {
        return Err(Error::Dimension {
            op: "conv2d_stride2 (input smaller than kernel)",
            left: s.to_vec(),
            right: vec![3, 3],
        });
    }
    if bias.shape() != [k[3]] {
        return Err(Error::Dimension {
            op: "conv2d_stride2 bias",
            left: k.to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok((s[0], s[1], s[2], k[3]))
}

/// Output spatial size of a 3x3, stride 2, padding 1 convolution.
fn conv_out(n: usize) -> usize {
    n.div_ceil(2)
}

/// 3x3 convolution with stride 2 and zero padding 1 over an `[H, W, Cin]`
/// map; kernel layout is `[ky, kx, Cin, Cout]`.
pub fn conv2d_stride2(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin, cout) = conv_dims(input, kernel, bias)?;
    let (ho, wo) = (conv_out(h), conv_out(w));
    let x = input.values();
    let k = kernel.values();
    let mut out = Vec::with_capacity(ho * wo * cout);
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = bias.values().to_vec();
            for ky in 0..3 {
                let Some(iy) = (2 * oy + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (2 * ox + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let xin = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        acc.iter_mut().zip(krow).for_each(|(a, &kv)| *a += xv * kv);
                    }
                }
            }
            out.extend_from_slice(&acc);
        }
    }
    Tensor::new(vec![ho, wo, cout], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_stride2_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let cout = kernel.shape().get(3).copied().unwrap_or(0);
    let bias = Tensor::zeros(&[cout.max(1)]);
    let (h, w, cin, cout) = conv_dims(input, kernel, &bias)?;
    let (ho, wo) = (conv_out(h), conv_out(w));
    grad_out.expect_shape(&[ho, wo, cout], "conv2d_stride2_backward")?;
    let x = input.values();
    let k = kernel.values();
    let go = grad_out.values();
    let mut gin = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &go[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            // reduced maps are read sparsely, so whole rows are often zero
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            gb.iter_mut().zip(g).for_each(|(b, &v)| *b += v);
            for ky in 0..3 {
                let Some(iy) = (2 * oy + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (2 * ox + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let base = (iy * w + ix) * cin;
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        gin[base + ci] += dot(krow, g);
                        let xv = x[base + ci];
                        if xv != 0.0 {
                            gk[kbase + ci * cout..kbase + (ci + 1) * cout]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(a, &gv)| *a += xv * gv);
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

/// Stride-2 3x3 convolution layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Conv2d {
    pub kernel: Parameter,
    pub bias: Parameter,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((9 * cin) as f64).sqrt();
        Self {
            kernel: Parameter::new(
                format!("{name}.kernel"),
                Tensor::uniform(&[3, 3, cin, cout], bound, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn zeros(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            kernel: Parameter::new(format!("{name}.kernel"), Tensor::zeros(&[3, 3, cin, cout])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d_stride2(input, &self.kernel.tensor, &self.bias.tensor)
    }

    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let g = conv2d_stride2_backward(input, &self.kernel.tensor, grad_out)?;
        self.kernel.accumulate(g.kernel.values());
        self.bias.accumulate(g.bias.values());
        Ok(g.input)
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.kernel);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

/// Row-wise softmax over the trailing dimension, max-subtracted.
pub fn softmax(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `log softmax(row)` for a single row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Gradient of softmax given its output `y` and upstream gradient.
pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.expect_same_shape(grad_out, "softmax_backward")?;
    let mut g = grad_out.clone();
    for r in 0..output.rows() {
        let y = output.row(r);
        let dot: f64 = y.iter().zip(grad_out.row(r)).map(|(a, b)| a * b).sum();
        g.row_mut(r)
            .iter_mut()
            .zip(y)
            .for_each(|(gv, &yv)| *gv = yv * (*gv - dot));
    }
    Ok(g)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
