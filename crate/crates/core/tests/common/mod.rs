//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashMap;

use preflab::lm::LmModel;

/// Named tensor slices of a model's flat parameter vector.
pub struct Weights<'a> {
    params: &'a [f64],
    by_name: HashMap<String, (usize, Vec<usize>)>,
}

impl<'a> Weights<'a> {
    pub fn of(model: &'a LmModel) -> Self {
        let by_name = model
            .layout()
            .tensors()
            .iter()
            .map(|(n, r, s)| (n.clone(), (r.start, s.clone())))
            .collect();
        Weights {
            params: model.params(),
            by_name,
        }
    }

    fn get(&self, name: &str) -> &'a [f64] {
        let (off, shape) = &self.by_name[name];
        &self.params[*off..off + shape.iter().product::<usize>()]
    }

    /// Entry (i, j) of a row-major matrix.
    fn m(&self, name: &str, i: usize, j: usize) -> f64 {
        let cols = self.by_name[name].1[1];
        self.get(name)[i * cols + j]
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| g * (v - mu) / (var + 1e-5).sqrt() + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn affine(w: &Weights, wn: &str, bn: &str, x: &[f64], out: usize) -> Vec<f64> {
    let b = w.get(bn);
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w.m(wn, i, j)).sum::<f64>())
        .collect()
}

/// Next-token probabilities after `prefix`, recomputing the whole prefix
/// from scratch with scalar loops: pre-norm blocks, causal multi-head
/// attention, tanh-GELU MLP, final norm, untied output head.
pub fn next_token_probs(model: &LmModel, prefix: &[u32]) -> Vec<f64> {
    let c = *model.config();
    let w = Weights::of(model);
    let (d, hd) = (c.d_model, c.d_model / c.n_heads);
    let mut xs: Vec<Vec<f64>> = prefix
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| w.m("tok_emb", id as usize, j) + w.m("pos_emb", t, j)).collect())
        .collect();
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                let h = layer_norm(x, w.get(&p("ln1.g")), w.get(&p("ln1.b")));
                affine(&w, &p("attn.w_qkv"), &p("attn.b_qkv"), &h, 3 * d)
            })
            .collect();
        let mut next = Vec::with_capacity(xs.len());
        for (t, x) in xs.iter().enumerate() {
            let mut att = vec![0.0; d];
            for h in 0..c.n_heads {
                let q = &qkv[t][h * hd..(h + 1) * hd];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        let k = &qkv[s][d + h * hd..d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let a = sc.exp() / z;
                    for j in 0..hd {
                        att[h * hd + j] += a * qkv[s][2 * d + h * hd + j];
                    }
                }
            }
            let o = affine(&w, &p("attn.w_o"), &p("attn.b_o"), &att, d);
            let mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let h2 = layer_norm(&mid, w.get(&p("ln2.g")), w.get(&p("ln2.b")));
            let f: Vec<f64> = affine(&w, &p("mlp.w_fc"), &p("mlp.b_fc"), &h2, c.d_ff)
                .into_iter()
                .map(gelu)
                .collect();
            let pr = affine(&w, &p("mlp.w_proj"), &p("mlp.b_proj"), &f, d);
            next.push(mid.iter().zip(&pr).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    let hf = layer_norm(xs.last().unwrap(), w.get("ln_f.g"), w.get("ln_f.b"));
    let logits: Vec<f64> = (0..c.vocab_size)
        .map(|j| hf.iter().enumerate().map(|(i, h)| h * w.m("head", i, j)).sum())
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

/// Log of the chained next-token probabilities of `ids[1..]`.
pub fn chain_logprob(model: &LmModel, ids: &[u32]) -> f64 {
    (1..ids.len())
        .map(|t| next_token_probs(model, &ids[..t])[ids[t] as usize].ln())
        .sum()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (cs, sn) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = cs * akp - sn * akq;
                    a[k][q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Sample covariance (n − 1 denominator).
pub fn covariance(xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (xs.len(), xs[0].len());
    let mu: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| xs.iter().map(|x| (x[i] - mu[i]) * (x[j] - mu[j])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect()
}

/// Line-by-line stub scorer: every token costs ln 10, tokens are
/// whitespace-separated words plus EOS.
pub const UNIFORM_STUB: &str = r#"while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed -E 's/.*"id":"([^"]*)".*/\1/')
  text=$(printf '%s' "$line" | sed -E 's/.*"text":"(.*)"}$/\1/')
  n=$(printf '%s\n' "$text" | wc -w)
  n=$((n + 1))
  lp=$(awk -v n="$n" 'BEGIN { printf "%.17g", -n * log(10) }')
  printf '{"id":"%s","logprob":%s,"num_tokens":%d}\n' "$id" "$lp" "$n"
done"#;
