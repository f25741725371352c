//! Straight-line loop implementations of the mixed-head and dual-channel
//! blocks, written directly from the block equations with an independent
//! complex type and no tape.

use mobius_core::attention::graph::{init_dual_layer, init_mixed_layer};
use mobius_core::attention::{
    dual_channel_layer, mixed_head_layer, AttentionConfig, KvPolicy, QueryPolicy, SoftmaxPolicy,
};
use mobius_core::autodiff::ParamStore;
use mobius_core::{ComplexTensor, Tensor};
use num_complex::Complex64 as Z;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;
type CMat = Vec<Vec<Z>>;

const N: usize = 6;

pub struct P<'a>(pub &'a ParamStore, pub String);

impl P<'_> {
    fn vec(&self, leaf: &str) -> Vec<f64> {
        self.0.get(&format!("{}.{leaf}", self.1)).unwrap().data().to_vec()
    }
    fn mat(&self, leaf: &str) -> Mat {
        let t = self.0.get(&format!("{}.{leaf}", self.1)).unwrap();
        let c = t.shape()[1];
        t.data().chunks(c).map(<[f64]>::to_vec).collect()
    }
    fn has(&self, leaf: &str) -> bool {
        self.0.contains(&format!("{}.{leaf}", self.1))
    }
    fn cvec(&self, leaf: &str) -> Vec<Z> {
        self.vec(&format!("{leaf}_re")).into_iter().zip(self.vec(&format!("{leaf}_im"))).map(|(r, i)| Z::new(r, i)).collect()
    }
    fn cmat(&self, leaf: &str) -> CMat {
        let (r, i) = (self.mat(&format!("{leaf}_re")), self.mat(&format!("{leaf}_im")));
        r.iter().zip(&i).map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| Z::new(x, y)).collect()).collect()
    }
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-12).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| (0..b.len()).map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i][o]).sum::<f64>()).collect())
        .collect()
}

fn add(x: &Mat, y: &Mat) -> Mat {
    x.iter().zip(y).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Scaled dot-product attention of one real head.
fn vanilla_head(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dh = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt()).collect();
            let s = softmax(&logits);
            (0..v[0].len()).map(|c| s.iter().zip(v).map(|(p, vj)| p * vj[c]).sum()).collect()
        })
        .collect()
}

fn columns(x: &Mat, start: usize, len: usize) -> Mat {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Möbius head on `ρ` (`[n, dh]` complex): Möbius query per dimension,
/// complex linear key/value, softmax of the reduced scores, applied to V.
fn mobius_head(p: &P, rho: &CMat, cfg: &AttentionConfig) -> CMat {
    let dh = rho[0].len();
    let lin = |leaf: &str, x: &[Z]| -> Vec<Z> {
        if p.has(&format!("{leaf}_re")) && p.0.get(&format!("{}.{leaf}_re", p.1)).unwrap().rank() == 2 {
            let w = p.cmat(leaf);
            (0..dh).map(|o| (0..dh).map(|i| x[i] * w[i][o]).sum()).collect()
        } else {
            let w = p.cvec(leaf);
            x.iter().zip(&w).map(|(a, b)| a * b).collect()
        }
    };
    let (a, b, c, d) = (p.cvec("a"), p.cvec("b"), p.cvec("c"), p.cvec("d"));
    let q: CMat = rho
        .iter()
        .map(|r| {
            let r = if p.has("pre_re") { lin("pre", r) } else { r.clone() };
            (0..dh).map(|j| (a[j] * r[j] + b[j]) / (c[j] * r[j] + d[j])).collect()
        })
        .collect();
    let k: CMat = rho.iter().map(|r| lin("key", r)).collect();
    let v: CMat = rho.iter().map(|r| lin("value", r)).collect();
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| {
                    let o: Z = qi.iter().zip(kj).map(|(x, y)| x * if cfg.conj_transpose { y.conj() } else { *y }).sum();
                    let l = match cfg.softmax {
                        SoftmaxPolicy::RealPart => o.re,
                        SoftmaxPolicy::Magnitude => o.norm(),
                    };
                    l / (dh as f64).sqrt()
                })
                .collect();
            let s = softmax(&logits);
            (0..dh).map(|col| s.iter().zip(&v).map(|(w, vj)| vj[col] * *w).sum()).collect()
        })
        .collect()
}

fn feed_forward(p: &P, x: &Mat, ffn: &str) -> Mat {
    let h = affine(x, &p.mat(&format!("{ffn}.in.weight")), &p.vec(&format!("{ffn}.in.bias")));
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    affine(&h, &p.mat(&format!("{ffn}.out.weight")), &p.vec(&format!("{ffn}.out.bias")))
}

/// Projection, residual, norm, feed-forward, residual, norm.
fn tail(p: &P, joined: &Mat, residual: &Mat, out: &str, ffn: &str) -> Mat {
    let a = affine(joined, &p.mat(&format!("{out}.weight")), &p.vec(&format!("{out}.bias")));
    let a = layer_norm(&add(&a, residual), &p.vec("attn_ln.gain"), &p.vec("attn_ln.bias"));
    let f = add(&feed_forward(p, &a, ffn), &a);
    layer_norm(&f, &p.vec("ffn_ln.gain"), &p.vec("ffn_ln.bias"))
}

fn normed_input(p: &P, re: &Mat, im: &Mat) -> (Mat, Mat) {
    let (g, b) = (p.vec("input_ln.gain"), p.vec("input_ln.bias"));
    (layer_norm(re, &g, &b), layer_norm(im, &g, &b))
}

fn complex_slice(re: &Mat, im: &Mat, start: usize, len: usize) -> CMat {
    re.iter().zip(im).map(|(r, i)| (start..start + len).map(|c| Z::new(r[c], i[c])).collect()).collect()
}

pub fn mixed_oracle(p: &P, re: &Mat, im: &Mat, cfg: &AttentionConfig) -> Mat {
    let (xr, xi) = normed_input(p, re, im);
    let dh = cfg.d_head();
    let nv = cfg.n_vanilla_heads();
    let mut joined: Mat = vec![Vec::new(); re.len()];
    if nv > 0 {
        let x = add(&xr, &xi);
        let q = affine(&x, &p.mat("attn.query.weight"), &p.vec("attn.query.bias"));
        let k = affine(&x, &p.mat("attn.key.weight"), &p.vec("attn.key.bias"));
        let v = affine(&x, &p.mat("attn.value.weight"), &p.vec("attn.value.bias"));
        for h in 0..nv {
            let o = vanilla_head(&columns(&q, h * dh, dh), &columns(&k, h * dh, dh), &columns(&v, h * dh, dh));
            joined.iter_mut().zip(o).for_each(|(j, r)| j.extend(r));
        }
    }
    for g in nv..cfg.n_heads {
        let hp = P(p.0, format!("{}.attn.mobius.{g}", p.1));
        let o = mobius_head(&hp, &complex_slice(&xr, &xi, g * dh, dh), cfg);
        joined.iter_mut().zip(o).for_each(|(j, r)| j.extend(r.iter().map(|z| z.re + z.im)));
    }
    tail(p, &joined, &xr, "attn_out", "ffn")
}

pub fn dual_oracle(p: &P, re: &Mat, im: &Mat, cfg: &AttentionConfig) -> (Mat, Mat) {
    let (xr, xi) = normed_input(p, re, im);
    let dh = cfg.d_head();
    let (mut ar, mut ai): (Mat, Mat) = (vec![Vec::new(); re.len()], vec![Vec::new(); re.len()]);
    for g in 0..cfg.n_heads {
        let hp = P(p.0, format!("{}.attn.mobius.{g}", p.1));
        let o = mobius_head(&hp, &complex_slice(&xr, &xi, g * dh, dh), cfg);
        for (i, row) in o.iter().enumerate() {
            ar[i].extend(row.iter().map(|z| z.re));
            ai[i].extend(row.iter().map(|z| z.im));
        }
    }
    (tail(p, &ar, &xr, "attn_out_re", "ffn_re"), tail(p, &ai, &xi, "attn_out_im", "ffn_im"))
}

/// Initialized weights plus broad noise, so norms, biases and Möbius
/// coefficients are all generic.
pub fn random_store(cfg: &AttentionConfig, dual: bool, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    if dual {
        init_dual_layer(&mut s, "blk", cfg, rng).unwrap();
    } else {
        init_mixed_layer(&mut s, "blk", cfg, rng).unwrap();
    }
    for (_, t) in s.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    s
}

pub fn random_input(d: usize, rng: &mut ChaCha8Rng) -> (Mat, Mat) {
    let mut m = || (0..N).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect::<Mat>();
    (m(), m())
}

pub fn to_ctensor(re: &Mat, im: &Mat) -> ComplexTensor {
    let flat = |m: &Mat| Tensor::new(&[m.len(), m[0].len()], m.concat()).unwrap();
    ComplexTensor::new(flat(re), flat(im)).unwrap()
}

pub fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    t.data().iter().zip(m.concat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn configs() -> Vec<(AttentionConfig, AttentionConfig)> {
    let base = AttentionConfig { d_model: 16, n_heads: 4, n_mobius_heads: 2, ..AttentionConfig::default() };
    let variant = AttentionConfig {
        kv: KvPolicy::Full,
        query: QueryPolicy::LinearThenMobius,
        softmax: SoftmaxPolicy::Magnitude,
        conj_transpose: true,
        ..base.clone()
    };
    [base, variant].into_iter().map(|c| (c.clone(), AttentionConfig { n_mobius_heads: c.n_heads, ..c })).collect()
}

/// Largest deviation of the mixed-head block from its oracle for one seed.
pub fn mixed_error(cfg: &AttentionConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_store(cfg, false, &mut rng);
    let (re, im) = random_input(cfg.d_model, &mut rng);
    let got = mixed_head_layer(&store, "blk", &to_ctensor(&re, &im), cfg).unwrap();
    max_diff(&got, &mixed_oracle(&P(&store, "blk".into()), &re, &im, cfg))
}

/// Largest deviation of the dual-channel block (both channels) from its oracle.
pub fn dual_error(cfg: &AttentionConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_store(cfg, true, &mut rng);
    let (re, im) = random_input(cfg.d_model, &mut rng);
    let got = dual_channel_layer(&store, "blk", &to_ctensor(&re, &im), cfg).unwrap();
    let (wr, wi) = dual_oracle(&P(&store, "blk".into()), &re, &im, cfg);
    max_diff(got.re(), &wr).max(max_diff(got.im(), &wi))
}
