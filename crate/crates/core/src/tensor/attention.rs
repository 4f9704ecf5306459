use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::softmax_in_place;
use super::{Linear, Module, Parameter, Tensor};
use crate::error::{Error, Result};

/// Multi-head scaled dot-product self-attention over a `[N, C]` query set,
/// with output projection and residual connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Intermediates kept by [`SelfAttention::forward`].
#[derive(Debug, Clone)]
pub struct SelfAttentionCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `[heads, N, N]` attention weights.
    attn: Vec<f64>,
    context: Tensor,
}

impl SelfAttentionCache {
    /// Attention weights of `head` for query `n` over all keys.
    pub fn weights(&self, head: usize, n: usize) -> &[f64] {
        let len = self.input.rows();
        &self.attn[(head * len + n) * len..(head * len + n + 1) * len]
    }
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Self {
            heads,
            query: Linear::new(&format!("{name}.query"), channels, channels, rng),
            key: Linear::new(&format!("{name}.key"), channels, channels, rng),
            value: Linear::new(&format!("{name}.value"), channels, channels, rng),
            output: Linear::new(&format!("{name}.output"), channels, channels, rng),
        })
    }

    /// All four projections set to the identity with zero bias.
    pub fn identity(name: &str, channels: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let eye = || {
            Tensor::from_fn(&[channels, channels], |i| {
                if i / channels == i % channels {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let mk = |part: &str| {
            let mut l = Linear::zeros(&format!("{name}.{part}"), channels, channels);
            l.weight.tensor = eye();
            l
        };
        Ok(Self {
            heads,
            query: mk("query"),
            key: mk("key"),
            value: mk("value"),
            output: mk("output"),
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, SelfAttentionCache)> {
        if input.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "self_attention",
                left: input.shape().to_vec(),
                right: vec![0, self.query.in_features()],
            });
        }
        let (n, c) = (input.shape()[0], input.shape()[1]);
        check_heads(c, self.heads)?;
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let q = self.query.forward(input)?;
        let k = self.key.forward(input)?;
        let v = self.value.forward(input)?;
        let mut attn = vec![0.0; self.heads * n * n];
        let mut context = vec![0.0; n * c];
        for h in 0..self.heads {
            let span = h * d..(h + 1) * d;
            for i in 0..n {
                let row = &mut attn[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &q.row(i)[span.clone()];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[span.clone()];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let ctx = &mut context[i * c + h * d..i * c + (h + 1) * d];
                for (j, &a) in row.iter().enumerate() {
                    let vj = &v.row(j)[span.clone()];
                    ctx.iter_mut().zip(vj).for_each(|(o, &vv)| *o += a * vv);
                }
            }
        }
        let context = Tensor::new(vec![n, c], context)?;
        let out = input.add(&self.output.forward(&context)?)?;
        Ok((
            out,
            SelfAttentionCache {
                input: input.clone(),
                q,
                k,
                v,
                attn,
                context,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SelfAttentionCache, grad_out: &Tensor) -> Result<Tensor> {
        let (n, c) = (cache.input.shape()[0], cache.input.shape()[1]);
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut grad_in = grad_out.clone();
        let gctx = self.output.backward(&cache.context, grad_out)?;
        let mut gq = Tensor::zeros(&[n, c]);
        let mut gk = Tensor::zeros(&[n, c]);
        let mut gv = Tensor::zeros(&[n, c]);
        let mut gscore = vec![0.0; n];
        for h in 0..self.heads {
            let span = h * d..(h + 1) * d;
            for i in 0..n {
                let a = cache.weights(h, i);
                let gc = &gctx.row(i)[span.clone()];
                for j in 0..n {
                    let vj = &cache.v.row(j)[span.clone()];
                    gscore[j] = gc.iter().zip(vj).map(|(x, y)| x * y).sum();
                    gv.row_mut(j)[span.clone()]
                        .iter_mut()
                        .zip(gc)
                        .for_each(|(g, &x)| *g += a[j] * x);
                }
                let dot: f64 = a.iter().zip(&gscore).map(|(x, y)| x * y).sum();
                for j in 0..n {
                    let gs = a[j] * (gscore[j] - dot) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    let kj = cache.k.row(j)[span.clone()].to_vec();
                    let qi = cache.q.row(i)[span.clone()].to_vec();
                    gq.row_mut(i)[span.clone()]
                        .iter_mut()
                        .zip(&kj)
                        .for_each(|(g, &x)| *g += gs * x);
                    gk.row_mut(j)[span.clone()]
                        .iter_mut()
                        .zip(&qi)
                        .for_each(|(g, &x)| *g += gs * x);
                }
            }
        }
        grad_in.add_assign(&self.query.backward(&cache.input, &gq)?)?;
        grad_in.add_assign(&self.key.backward(&cache.input, &gk)?)?;
        grad_in.add_assign(&self.value.backward(&cache.input, &gv)?)?;
        Ok(grad_in)
    }
}

impl Module for SelfAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
        self.output.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.query.visit_params_mut(f);
        self.key.visit_params_mut(f);
        self.value.visit_params_mut(f);
        self.output.visit_params_mut(f);
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Config(format!(
            "channel count {channels} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal per-head, per-query, per-key, per-channel attention.
    fn attention_oracle(layer: &SelfAttention, x: &Tensor) -> Vec<f64> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let d = c / layer.heads;
        let q = layer.query.forward(x).unwrap();
        let k = layer.key.forward(x).unwrap();
        let v = layer.value.forward(x).unwrap();
        let mut ctx = vec![0.0; n * c];
        for h in 0..layer.heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for (j, s) in scores.iter_mut().enumerate() {
                    for ch in 0..d {
                        *s += q.values()[i * c + h * d + ch] * k.values()[j * c + h * d + ch];
                    }
                    *s /= (d as f64).sqrt();
                }
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..n {
                    let a = scores[j].exp() / z;
                    for ch in 0..d {
                        ctx[i * c + h * d + ch] += a * v.values()[j * c + h * d + ch];
                    }
                }
            }
        }
        let ctx = Tensor::new(vec![n, c], ctx).unwrap();
        let proj = layer.output.forward(&ctx).unwrap();
        x.add(&proj).unwrap().into_values()
    }

    #[test]
    fn single_query_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = SelfAttention::new("sa", 4, 2, &mut rng).unwrap();
        let x = Tensor::normal(&[1, 4], 1.0, &mut rng);
        let (y, cache) = layer.forward(&x).unwrap();
        assert_eq!(cache.weights(0, 0), &[1.0]);
        let v = layer.value.forward(&x).unwrap();
        let expected = x.add(&layer.output.forward(&v).unwrap()).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn identical_queries_get_identical_outputs() {
        let layer = SelfAttention::identity("sa", 4, 2).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.4, 0.1, -0.2, 0.3, 0.4]).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = SelfAttention::new("sa", 4, 2, &mut rng).unwrap();
        layer.query.bias.tensor = Tensor::normal(&[4], 0.3, &mut rng);
        let x = Tensor::normal(&[3, 4], 1.0, &mut rng);
        let (y, _) = layer.forward(&x).unwrap();
        for (a, b) in y.values().iter().zip(attention_oracle(&layer, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            SelfAttention::new("sa", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
