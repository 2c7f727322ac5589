//! Plain-loop reference implementations used as test oracles. Nothing here
//! touches the autodiff graph.

#![allow(dead_code)]

use icm_core::Tensor;

pub fn sigma(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row `[.., :]` of a 4-d tensor as a slice.
fn row4(t: &Tensor<f64>, a: usize, b: usize, c: usize) -> &[f64] {
    let s = t.shape();
    let start = ((a * s[1] + b) * s[2] + c) * s[3];
    &t.data()[start..start + s[3]]
}

/// Linear attention over every token of every channel, written in kernel
/// form: for query token t of channel i and head h,
/// `Σ_{j,s} (σ(q)·σ(k_js)) v_js / (Σ_{j,s} σ(q)·σ(k_js) + ε)`.
/// `q`, `k`, `v` are `[m, h, n, d_k]`.
pub fn concatenated_linear_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let s = q.shape().to_vec();
    let (m, h, n, dk) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(q.len());
    for i in 0..m {
        for hh in 0..h {
            for t in 0..n {
                let sq: Vec<f64> = row4(q, i, hh, t).iter().map(|&x| sigma(x)).collect();
                let mut num = vec![0.0; dk];
                let mut den = 0.0;
                for j in 0..m {
                    for u in 0..n {
                        let sk: Vec<f64> = row4(k, j, hh, u).iter().map(|&x| sigma(x)).collect();
                        let w = dot(&sq, &sk);
                        for (acc, &val) in num.iter_mut().zip(row4(v, j, hh, u)) {
                            *acc += w * val;
                        }
                        den += w;
                    }
                }
                out.extend(num.iter().map(|x| x / (den + eps)));
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Softmax attention per channel and head, `[m, h, n, d_k]`.
pub fn softmax_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let s = q.shape().to_vec();
    let (m, h, n, dk) = (s[0], s[1], s[2], s[3]);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Vec::with_capacity(q.len());
    for i in 0..m {
        for hh in 0..h {
            for t in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|u| dot(row4(q, i, hh, t), row4(k, i, hh, u)) * scale)
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dk {
                    out.push((0..n).map(|u| e[u] / z * row4(v, i, hh, u)[d]).sum());
                }
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// `x[rows, d_in] · w[d_in, d_out] + b`.
pub fn affine(x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut acc = b.data()[o];
            for i in 0..d_in {
                acc += x[r * d_in + i] * w.data()[i * d_out + o];
            }
            out[r * d_out + o] = acc;
        }
    }
    out
}

/// `[m·n, h·d_k]` row-major projections → `[m, h, n, d_k]`.
pub fn heads_of(flat: &[f64], m: usize, n: usize, h: usize, dk: usize) -> Tensor<f64> {
    Tensor::from_fn([m, h, n, dk], |idx| {
        let d = idx % dk;
        let t = (idx / dk) % n;
        let hh = (idx / (dk * n)) % h;
        let i = idx / (dk * n * h);
        flat[(i * n + t) * (h * dk) + hh * dk + d]
    })
}

pub struct LayerWeights<'a> {
    pub wq: &'a Tensor<f64>,
    pub bq: &'a Tensor<f64>,
    pub wk: &'a Tensor<f64>,
    pub bk: &'a Tensor<f64>,
    pub wv: &'a Tensor<f64>,
    pub bv: &'a Tensor<f64>,
    pub wo: &'a Tensor<f64>,
    pub bo: &'a Tensor<f64>,
    pub beta: &'a Tensor<f64>,
}

/// Straight-line ICM layer: projections, memory accumulation over every
/// channel, memory read, softmax attention, gate, head merge, output
/// projection. `x` is `[m, n, d]`.
pub fn icm_layer(x: &Tensor<f64>, w: &LayerWeights<'_>, heads: usize, eps: f64) -> Tensor<f64> {
    let s = x.shape();
    let (m, n, d) = (s[0], s[1], s[2]);
    let dk = d / heads;
    let q = heads_of(&affine(x.data(), m * n, w.wq, w.bq), m, n, heads, dk);
    let k = heads_of(&affine(x.data(), m * n, w.wk, w.bk), m, n, heads, dk);
    let v = heads_of(&affine(x.data(), m * n, w.wv, w.bv), m, n, heads, dk);

    // M[h][a][b] = Σ_i Σ_t σ(K)[i,h,t,a] V[i,h,t,b];  z[h][a] = Σ_i Σ_t σ(K)[i,h,t,a]
    let mut mem = vec![vec![vec![0.0; dk]; dk]; heads];
    let mut z = vec![vec![0.0; dk]; heads];
    for i in 0..m {
        for hh in 0..heads {
            for t in 0..n {
                for a in 0..dk {
                    let sk = sigma(k.at(&[i, hh, t, a]));
                    z[hh][a] += sk;
                    for b in 0..dk {
                        mem[hh][a][b] += sk * v.at(&[i, hh, t, b]);
                    }
                }
            }
        }
    }
    let dot_att = softmax_attention(&q, &k, &v);
    let mut merged = vec![0.0; m * n * d];
    for i in 0..m {
        for hh in 0..heads {
            let gate = sigmoid(w.beta.data()[hh]);
            for t in 0..n {
                let sq: Vec<f64> = (0..dk).map(|a| sigma(q.at(&[i, hh, t, a]))).collect();
                let den: f64 = (0..dk).map(|a| sq[a] * z[hh][a]).sum::<f64>() + eps;
                for b in 0..dk {
                    let num: f64 = (0..dk).map(|a| sq[a] * mem[hh][a][b]).sum();
                    let a_mem = num / den;
                    let a_dot = dot_att.at(&[i, hh, t, b]);
                    merged[(i * n + t) * d + hh * dk + b] = gate * a_mem + (1.0 - gate) * a_dot;
                }
            }
        }
    }
    Tensor::new([m, n, d], affine(&merged, m * n, w.wo, w.bo)).unwrap()
}
