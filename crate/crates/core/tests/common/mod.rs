#![allow(dead_code)]

//! Straight-line reference implementations on plain row-major vectors.

use dream_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Plain matrix: `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn of(t: &Tensor) -> M {
        let s = t.shape();
        let (r, c) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        };
        M { r, c, d: t.data().to_vec() }
    }

    pub fn zeros(r: usize, c: usize) -> M {
        M { r, c, d: vec![0.0; r * c] }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self, start: usize, len: usize) -> M {
        M {
            r: len,
            c: self.c,
            d: self.d[start * self.c..(start + len) * self.c].to_vec(),
        }
    }

    pub fn cols(&self, start: usize, len: usize) -> M {
        let mut d = Vec::with_capacity(self.r * len);
        for i in 0..self.r {
            d.extend_from_slice(&self.row(i)[start..start + len]);
        }
        M { r: self.r, c: len, d }
    }

    pub fn dot(&self, b: &M) -> M {
        assert_eq!(self.c, b.r);
        let mut out = M::zeros(self.r, b.c);
        for i in 0..self.r {
            for j in 0..b.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.at(i, k) * b.at(k, j);
                }
                out.d[i * b.c + j] = s;
            }
        }
        out
    }

    pub fn t(&self) -> M {
        let mut out = M::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[j * self.r + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M {
            r: self.r,
            c: self.c,
            d: self.d.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, o: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M {
            r: self.r,
            c: self.c,
            d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn plus(&self, o: &M) -> M {
        self.zip(o, |a, b| a + b)
    }

    pub fn add_bias(&self, b: &[f64]) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[i * self.c + j] += b[j];
            }
        }
        out
    }

    pub fn vstack(parts: &[M]) -> M {
        let c = parts[0].c;
        let mut d = Vec::new();
        for p in parts {
            assert_eq!(p.c, c);
            d.extend_from_slice(&p.d);
        }
        M { r: d.len() / c, c, d }
    }

    pub fn hstack(parts: &[M]) -> M {
        let r = parts[0].r;
        let c = parts.iter().map(|p| p.c).sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                d.extend_from_slice(p.row(i));
            }
        }
        M { r, c, d }
    }

    pub fn max_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(self.d.len(), t.numel(), "size mismatch");
        self.d
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn layer_norm(x: &M, g: &[f64], b: &[f64], eps: f64) -> M {
    let mut out = x.clone();
    for i in 0..x.r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) / (var + eps).sqrt() * g[j] + b[j];
        }
    }
    out
}

pub fn rms_norm(x: &M, g: &[f64], eps: f64) -> M {
    let mut out = x.clone();
    for i in 0..x.r {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            out.d[i * x.c + j] = row[j] / (ms + eps).sqrt() * g[j];
        }
    }
    out
}

/// Single-head attention; `visible(i, j)` selects keys for query `i`.
pub fn attend(q: &M, k: &M, v: &M, scale: f64, visible: impl Fn(usize, usize) -> bool) -> M {
    let mut out = M::zeros(q.r, v.c);
    for i in 0..q.r {
        let keys: Vec<usize> = (0..k.r).filter(|&j| visible(i, j)).collect();
        let logits: Vec<f64> = keys
            .iter()
            .map(|&j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let w = softmax(&logits);
        for (wi, &j) in w.iter().zip(&keys) {
            for c in 0..v.c {
                out.d[i * v.c + c] += wi * v.at(j, c);
            }
        }
    }
    out
}

/// Multi-head (grouped) attention: query head `h` reads key/value head
/// `h / (q_heads / kv_heads)`; heads are column blocks.
pub fn grouped_attend(
    q: &M,
    k: &M,
    v: &M,
    q_heads: usize,
    kv_heads: usize,
    visible: impl Fn(usize, usize) -> bool + Copy,
) -> M {
    let hd = q.c / q_heads;
    let group = q_heads / kv_heads;
    let heads: Vec<M> = (0..q_heads)
        .map(|h| {
            let kv = h / group;
            attend(
                &q.cols(h * hd, hd),
                &k.cols(kv * hd, hd),
                &v.cols(kv * hd, hd),
                1.0 / (hd as f64).sqrt(),
                visible,
            )
        })
        .collect();
    M::hstack(&heads)
}

/// Rotary embedding of one `head_dim` vector at position `pos`.
pub fn rope_vec(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let hd = x.len();
    let mut out = x.to_vec();
    for k in 0..hd / 2 {
        let theta = base.powf(-2.0 * k as f64 / hd as f64);
        let (s, c) = (pos as f64 * theta).sin_cos();
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * c - b * s;
        out[2 * k + 1] = a * s + b * c;
    }
    out
}

/// Applies [`rope_vec`] to every head block of every row; row `i` sits at
/// `positions[i]`.
pub fn rope_rows(x: &M, heads: usize, positions: &[usize], base: f64) -> M {
    let hd = x.c / heads;
    let mut out = x.clone();
    for i in 0..x.r {
        for h in 0..heads {
            let r = rope_vec(&x.row(i)[h * hd..(h + 1) * hd], positions[i], base);
            out.d[i * x.c + h * hd..i * x.c + (h + 1) * hd].copy_from_slice(&r);
        }
    }
    out
}

pub fn log_softmax_at(xs: &[f64], t: usize) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    xs[t] - m - z.ln()
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Least-squares weights `w` with `Σ w_j L[j] ≈ v`, and the residual norm.
pub fn simplex_weights(l: &M, v: &[f64]) -> (Vec<f64>, f64) {
    let gram: Vec<Vec<f64>> = (0..l.r)
        .map(|i| (0..l.r).map(|j| l.row(i).iter().zip(l.row(j)).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let rhs: Vec<f64> = (0..l.r).map(|i| l.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect();
    let w = solve(gram, rhs);
    let resid: f64 = (0..l.c)
        .map(|c| {
            let fit: f64 = (0..l.r).map(|j| w[j] * l.at(j, c)).sum();
            (fit - v[c]).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    (w, resid)
}
