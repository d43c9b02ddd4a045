//! Binary64 forward and reverse-mode backward over a flattened copy of a
//! bundle's parameters. Only used for training.

use crate::error::{Error, Result};
use crate::model::{MlpKind, ModelBundle, ModelConfig};
use crate::numerics::{log_softmax, softmax, LN_EPS};

#[derive(Debug, Clone)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ln2_g: usize,
    ln2_b: usize,
    keys: usize,
    linear: Option<usize>,
    values: usize,
}

/// Offsets of every tensor inside the flat parameter vector, in manifest order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    emb: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    unemb: usize,
    ubias: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut offsets = std::collections::HashMap::new();
        let mut at = 0;
        for (name, shape) in ModelBundle::tensor_layout(config) {
            offsets.insert(name, at);
            at += shape.iter().product::<usize>();
        }
        let get = |n: &str| offsets[n];
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| get(&format!("layers.{l}.{s}"));
                LayerOffsets {
                    ln1_g: p("attn_norm.gain"),
                    ln1_b: p("attn_norm.bias"),
                    q: p("attn.query"),
                    k: p("attn.key"),
                    v: p("attn.value"),
                    o: p("attn.output"),
                    ln2_g: p("mlp_norm.gain"),
                    ln2_b: p("mlp_norm.bias"),
                    keys: p("mlp.keys"),
                    linear: offsets.get(&format!("layers.{l}.mlp.linear")).copied(),
                    values: p("mlp.values"),
                }
            })
            .collect();
        Self {
            emb: get("embedding"),
            pos: get("positional"),
            layers,
            lnf_g: get("final_norm.gain"),
            lnf_b: get("final_norm.bias"),
            unemb: offsets.get("unembedding").copied().unwrap_or_else(|| get("embedding")),
            ubias: get("unembed_bias"),
            len: at,
        }
    }

    /// Offsets of the key, optional linear, and value matrices of `layer`.
    pub fn mlp_offsets(&self, layer: usize) -> (usize, Option<usize>, usize) {
        let l = &self.layers[layer];
        (l.keys, l.linear, l.values)
    }
}

pub(crate) fn flatten(bundle: &ModelBundle) -> Vec<f64> {
    bundle
        .named_tensors()
        .into_iter()
        .flat_map(|(_, _, d)| d.iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect()
}

pub(crate) fn unflatten(theta: &[f64], bundle: &mut ModelBundle) -> Result<()> {
    let mut at = 0;
    for (name, _, data) in bundle.named_tensors_mut() {
        for slot in data.iter_mut() {
            let v = theta[at] as f32;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("trained tensor {name}")));
            }
            *slot = v;
            at += 1;
        }
    }
    Ok(())
}

fn row(th: &[f64], off: usize, cols: usize, r: usize) -> &[f64] {
    &th[off + r * cols..off + (r + 1) * cols]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(th: &[f64], off: usize, rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| dot(row(th, off, cols, r), x)).collect()
}

/// Accumulates `dW += dy ⊗ x` and `dx += Wᵀ dy`.
#[allow(clippy::too_many_arguments)]
fn matvec_bwd(th: &[f64], grad: &mut [f64], off: usize, rows: usize, cols: usize, x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let base = off + r * cols;
        for c in 0..cols {
            grad[base + c] += g * x[c];
            dx[c] += th[base + c] * g;
        }
    }
}

struct Norm {
    xhat: Vec<f64>,
    inv: f64,
}

fn ln_fwd(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Norm) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
    let y = xhat.iter().zip(g.iter().zip(b)).map(|(h, (g, b))| h * g + b).collect();
    (y, Norm { xhat, inv })
}

fn ln_bwd(dy: &[f64], norm: &Norm, th: &[f64], grad: &mut [f64], g_off: usize, b_off: usize) -> Vec<f64> {
    let n = dy.len();
    let mut dxhat = vec![0.0; n];
    for j in 0..n {
        grad[g_off + j] += dy[j] * norm.xhat[j];
        grad[b_off + j] += dy[j];
        dxhat[j] = dy[j] * th[g_off + j];
    }
    let nf = n as f64;
    let mean_d = dxhat.iter().sum::<f64>() / nf;
    let mean_dx = dxhat.iter().zip(&norm.xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
    (0..n)
        .map(|j| norm.inv * (dxhat[j] - mean_d - norm.xhat[j] * mean_dx))
        .collect()
}

struct LayerCache {
    n1: Vec<Norm>,
    h1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `[t][head][u]` attention weights.
    att: Vec<Vec<Vec<f64>>>,
    z: Vec<Vec<f64>>,
    n2: Vec<Norm>,
    h2: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    lin: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
}

pub(crate) struct Cache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    nf: Vec<Option<Norm>>,
    hf: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

/// Flat binary64 parameters plus the config they came from.
#[derive(Debug, Clone)]
pub(crate) struct Net {
    pub config: ModelConfig,
    pub layout: Layout,
    pub theta: Vec<f64>,
}

impl Net {
    pub fn from_bundle(bundle: &ModelBundle) -> Self {
        Self {
            config: bundle.config.clone(),
            layout: Layout::new(&bundle.config),
            theta: flatten(bundle),
        }
    }

    pub fn forward(&self, ids: &[u32]) -> Cache {
        let cfg = &self.config;
        let th = &self.theta;
        let lay = &self.layout;
        let (d, dm, nh) = (cfg.d_model, cfg.d_mlp, cfg.n_heads);
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let t_len = ids.len();
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                let e = row(th, lay.emb, d, id as usize);
                let p = row(th, lay.pos, d, t);
                e.iter().zip(p).map(|(a, b)| a + b).collect()
            })
            .collect();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &lay.layers {
            let mut n1 = Vec::with_capacity(t_len);
            let mut h1 = Vec::with_capacity(t_len);
            for xt in &x {
                let (h, n) = ln_fwd(xt, &th[lo.ln1_g..lo.ln1_g + d], &th[lo.ln1_b..lo.ln1_b + d]);
                h1.push(h);
                n1.push(n);
            }
            let q: Vec<Vec<f64>> = h1.iter().map(|h| matvec(th, lo.q, d, d, h)).collect();
            let k: Vec<Vec<f64>> = h1.iter().map(|h| matvec(th, lo.k, d, d, h)).collect();
            let v: Vec<Vec<f64>> = h1.iter().map(|h| matvec(th, lo.v, d, d, h)).collect();
            let mut att = Vec::with_capacity(t_len);
            let mut z = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let mut zt = vec![0.0; d];
                let mut heads = Vec::with_capacity(nh);
                for head in 0..nh {
                    let span = head * hd..(head + 1) * hd;
                    let logits: Vec<f64> = (0..=t).map(|u| dot(&q[t][span.clone()], &k[u][span.clone()]) * scale).collect();
                    let a = softmax(&logits);
                    for (u, &w) in a.iter().enumerate() {
                        for j in span.clone() {
                            zt[j] += w * v[u][j];
                        }
                    }
                    heads.push(a);
                }
                att.push(heads);
                z.push(zt);
            }
            for (xt, zt) in x.iter_mut().zip(&z) {
                for (xr, o) in xt.iter_mut().zip(matvec(th, lo.o, d, d, zt)) {
                    *xr += o;
                }
            }
            let mut n2 = Vec::with_capacity(t_len);
            let mut h2 = Vec::with_capacity(t_len);
            let mut pre = Vec::with_capacity(t_len);
            let mut lin = Vec::with_capacity(t_len);
            let mut m = Vec::with_capacity(t_len);
            for xt in x.iter_mut() {
                let (h, n) = ln_fwd(xt, &th[lo.ln2_g..lo.ln2_g + d], &th[lo.ln2_b..lo.ln2_b + d]);
                let p = matvec(th, lo.keys, dm, d, &h);
                let li = match lo.linear {
                    Some(off) => matvec(th, off, dm, d, &h),
                    None => Vec::new(),
                };
                let mt: Vec<f64> = (0..dm)
                    .map(|i| {
                        let g = cfg.activation.apply(p[i]);
                        if cfg.mlp_kind == MlpKind::Gated { g * li[i] } else { g }
                    })
                    .collect();
                for (i, &mi) in mt.iter().enumerate() {
                    for (xr, vv) in xt.iter_mut().zip(row(th, lo.values, d, i)) {
                        *xr += mi * vv;
                    }
                }
                n2.push(n);
                h2.push(h);
                pre.push(p);
                lin.push(li);
                m.push(mt);
            }
            layers.push(LayerCache { n1, h1, q, k, v, att, z, n2, h2, pre, lin, m });
        }
        let mut nf = Vec::with_capacity(t_len);
        let mut hf = Vec::with_capacity(t_len);
        let mut logits = Vec::with_capacity(t_len);
        for xt in &x {
            let (h, n) = if cfg.final_norm {
                let (h, n) = ln_fwd(xt, &th[lay.lnf_g..lay.lnf_g + d], &th[lay.lnf_b..lay.lnf_b + d]);
                (h, Some(n))
            } else {
                (xt.clone(), None)
            };
            let lg: Vec<f64> = (0..cfg.vocab_size)
                .map(|t| dot(row(th, lay.unemb, d, t), &h) + th[lay.ubias + t])
                .collect();
            nf.push(n);
            hf.push(h);
            logits.push(lg);
        }
        Cache { ids: ids.to_vec(), layers, nf, hf, logits }
    }

    /// Adds `∂loss/∂θ` to `grad` given `∂loss/∂logits` per position.
    pub fn backward(&self, cache: &Cache, dlogits: &[Vec<f64>], grad: &mut [f64]) {
        let cfg = &self.config;
        let th = &self.theta;
        let lay = &self.layout;
        let (d, dm, nh, v_size) = (cfg.d_model, cfg.d_mlp, cfg.n_heads, cfg.vocab_size);
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let t_len = cache.ids.len();

        let mut dx: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut dh = vec![0.0; d];
            matvec_bwd(th, grad, lay.unemb, v_size, d, &cache.hf[t], &dlogits[t], &mut dh);
            for (j, &g) in dlogits[t].iter().enumerate() {
                grad[lay.ubias + j] += g;
            }
            dx.push(match &cache.nf[t] {
                Some(n) => ln_bwd(&dh, n, th, grad, lay.lnf_g, lay.lnf_b),
                None => dh,
            });
        }

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP
            for t in 0..t_len {
                let mut dh2 = vec![0.0; d];
                for i in 0..dm {
                    let vi = lo.values + i * d;
                    let mut dmi = 0.0;
                    for j in 0..d {
                        dmi += th[vi + j] * dx[t][j];
                        grad[vi + j] += lc.m[t][i] * dx[t][j];
                    }
                    let p = lc.pre[t][i];
                    let (dpre, dlin) = match lo.linear {
                        Some(_) => (dmi * lc.lin[t][i] * cfg.activation.derivative(p), dmi * cfg.activation.apply(p)),
                        None => (dmi * cfg.activation.derivative(p), 0.0),
                    };
                    let ki = lo.keys + i * d;
                    if dpre != 0.0 {
                        for j in 0..d {
                            grad[ki + j] += dpre * lc.h2[t][j];
                            dh2[j] += dpre * th[ki + j];
                        }
                    }
                    if let Some(off) = lo.linear {
                        let wi = off + i * d;
                        if dlin != 0.0 {
                            for j in 0..d {
                                grad[wi + j] += dlin * lc.h2[t][j];
                                dh2[j] += dlin * th[wi + j];
                            }
                        }
                    }
                }
                let back = ln_bwd(&dh2, &lc.n2[t], th, grad, lo.ln2_g, lo.ln2_b);
                for (a, b) in dx[t].iter_mut().zip(back) {
                    *a += b;
                }
            }
            // attention
            let mut dq = vec![vec![0.0; d]; t_len];
            let mut dk = vec![vec![0.0; d]; t_len];
            let mut dv = vec![vec![0.0; d]; t_len];
            for t in 0..t_len {
                let mut dz = vec![0.0; d];
                matvec_bwd(th, grad, lo.o, d, d, &lc.z[t], &dx[t], &mut dz);
                for head in 0..nh {
                    let span = head * hd..(head + 1) * hd;
                    let a = &lc.att[t][head];
                    let da: Vec<f64> = (0..=t).map(|u| dot(&dz[span.clone()], &lc.v[u][span.clone()])).collect();
                    let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    for u in 0..=t {
                        for j in span.clone() {
                            dv[u][j] += a[u] * dz[j];
                        }
                        let ds = a[u] * (da[u] - mean) * scale;
                        if ds != 0.0 {
                            for j in span.clone() {
                                dq[t][j] += ds * lc.k[u][j];
                                dk[u][j] += ds * lc.q[t][j];
                            }
                        }
                    }
                }
            }
            for t in 0..t_len {
                let mut dh1 = vec![0.0; d];
                matvec_bwd(th, grad, lo.q, d, d, &lc.h1[t], &dq[t], &mut dh1);
                matvec_bwd(th, grad, lo.k, d, d, &lc.h1[t], &dk[t], &mut dh1);
                matvec_bwd(th, grad, lo.v, d, d, &lc.h1[t], &dv[t], &mut dh1);
                let back = ln_bwd(&dh1, &lc.n1[t], th, grad, lo.ln1_g, lo.ln1_b);
                for (a, b) in dx[t].iter_mut().zip(back) {
                    *a += b;
                }
            }
        }
        for (t, &id) in cache.ids.iter().enumerate() {
            let e = lay.emb + id as usize * d;
            let p = lay.pos + t * d;
            for j in 0..d {
                grad[e + j] += dx[t][j];
                grad[p + j] += dx[t][j];
            }
        }
    }
}

/// `Σ_j log p(y_j | x, y_<j)` from a cache over `x ++ y`, and its gradient
/// with respect to the logits (added to `dlogits` scaled by `weight`).
pub(crate) fn continuation_logprob(
    cache: &Cache,
    prompt_len: usize,
    dlogits: Option<(&mut [Vec<f64>], f64)>,
) -> f64 {
    let mut total = 0.0;
    let mut sink = dlogits;
    for pos in prompt_len..cache.ids.len() {
        let target = cache.ids[pos] as usize;
        let src = pos - 1;
        let lsm = log_softmax(&cache.logits[src]);
        total += lsm[target];
        if let Some((d, w)) = sink.as_mut() {
            for (j, l) in lsm.iter().enumerate() {
                let p = l.exp();
                d[src][j] += *w * (if j == target { 1.0 } else { 0.0 } - p);
            }
        }
    }
    total
}
