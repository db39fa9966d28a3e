//! Straight-line f64 reference implementation of the decoder, written from
//! the architecture description and sharing no code with the engine.
#![allow(dead_code)]

use twostage_core::model::ModelWeights;

pub struct Trace {
    /// `T × vocab`.
    pub logits: Vec<Vec<f64>>,
    /// Per block, `T × d_int` gated FFN activations.
    pub hidden: Vec<Vec<Vec<f64>>>,
}

fn weight(m: &twostage_core::tensor::Tensor, r: usize, c: usize) -> f64 {
    m.data()[r * m.cols() + c] as f64
}

fn rms(x: &[f64], w: &[f32], eps: f32) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps as f64).sqrt();
    x.iter().zip(w).map(|(v, &g)| v * inv * g as f64).collect()
}

fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let hd = v.len();
    for i in 0..hd / 2 {
        let angle = pos as f64 / theta.powf(2.0 * i as f64 / hd as f64);
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * angle.cos() - b * angle.sin();
        v[2 * i + 1] = a * angle.sin() + b * angle.cos();
    }
}

/// Forward pass that skips the attention of every block in `skip`.
pub fn reference_forward(model: &ModelWeights, tokens: &[u32], skip: &[usize]) -> Trace {
    let c = &model.config;
    let (d, hd) = (c.d_model, c.head_dim);
    let t_len = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&id| {
            (0..d)
                .map(|j| weight(&model.token_embedding, id as usize, j))
                .collect()
        })
        .collect();
    let mut hidden = Vec::new();

    for (b, block) in model.blocks.iter().enumerate() {
        if let (Some(a), false) = (&block.attention, skip.contains(&b)) {
            let xn: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &a.norm, c.norm_eps)).collect();
            let project = |m: &twostage_core::tensor::Tensor, row: &[f64]| -> Vec<f64> {
                (0..m.cols())
                    .map(|o| (0..row.len()).map(|i| row[i] * weight(m, i, o)).sum())
                    .collect()
            };
            let q: Vec<Vec<f64>> = xn.iter().map(|r| project(&a.wq, r)).collect();
            let k: Vec<Vec<f64>> = xn.iter().map(|r| project(&a.wk, r)).collect();
            let v: Vec<Vec<f64>> = xn.iter().map(|r| project(&a.wv, r)).collect();
            let mut heads_out = vec![vec![0.0; d]; t_len];
            for h in 0..c.n_heads {
                let kvh = h * c.n_kv_heads / c.n_heads;
                let qs: Vec<Vec<f64>> = (0..t_len)
                    .map(|i| {
                        let mut s = q[i][h * hd..(h + 1) * hd].to_vec();
                        rotate(&mut s, i, c.rope_theta as f64);
                        s
                    })
                    .collect();
                let ks: Vec<Vec<f64>> = (0..t_len)
                    .map(|i| {
                        let mut s = k[i][kvh * hd..(kvh + 1) * hd].to_vec();
                        rotate(&mut s, i, c.rope_theta as f64);
                        s
                    })
                    .collect();
                for i in 0..t_len {
                    let logits: Vec<f64> = (0..=i)
                        .map(|j| {
                            qs[i].iter().zip(&ks[j]).map(|(p, q)| p * q).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, w) in e.iter().enumerate() {
                        for u in 0..hd {
                            heads_out[i][h * hd + u] += w / z * v[j][kvh * hd + u];
                        }
                    }
                }
            }
            for i in 0..t_len {
                let o = project(&a.wo, &heads_out[i]);
                x[i].iter_mut().zip(o).for_each(|(r, v)| *r += v);
            }
        }

        let f = &block.ffn;
        assert!(
            f.hidden_dims.is_none(),
            "reference covers the neuron layout only"
        );
        let width = f.width();
        let mut acts = Vec::with_capacity(t_len);
        for row in x.iter_mut() {
            let xn = rms(row, &f.norm, c.norm_eps);
            let z: Vec<f64> = (0..width)
                .map(|j| {
                    let g: f64 = (0..d).map(|i| xn[i] * weight(&f.w_gate, j, i)).sum();
                    let u: f64 = (0..d).map(|i| xn[i] * weight(&f.w_up, j, i)).sum();
                    g / (1.0 + (-g).exp()) * u
                })
                .collect();
            for (o, r) in row.iter_mut().enumerate() {
                *r += (0..width)
                    .map(|j| z[j] * weight(&f.w_down, o, j))
                    .sum::<f64>();
            }
            acts.push(z);
        }
        hidden.push(acts);
    }

    let logits = x
        .iter()
        .map(|r| {
            let h = rms(r, &model.final_norm, c.norm_eps);
            (0..c.vocab_size)
                .map(|v| (0..d).map(|i| h[i] * weight(&model.lm_head, v, i)).sum())
                .collect()
        })
        .collect();
    Trace { logits, hidden }
}

/// Summed next-token negative log-likelihood under `logits`.
pub fn reference_nll(logits: &[Vec<f64>], tokens: &[u32]) -> f64 {
    (1..tokens.len())
        .map(|t| {
            let row = &logits[t - 1];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[tokens[t] as usize]
        })
        .sum()
}

/// Per-block, per-neuron mean over sequences of the token-axis norm of the
/// gated activation.
pub fn reference_scores(model: &ModelWeights, seqs: &[Vec<u32>], l1: bool) -> Vec<Vec<f64>> {
    let traces: Vec<Trace> = seqs
        .iter()
        .map(|s| reference_forward(model, s, &[]))
        .collect();
    (0..model.blocks.len())
        .map(|b| {
            let width = model.blocks[b].ffn.width();
            (0..width)
                .map(|j| {
                    traces
                        .iter()
                        .map(|tr| {
                            let col = tr.hidden[b].iter().map(|row| row[j]);
                            if l1 {
                                col.map(f64::abs).sum::<f64>()
                            } else {
                                col.map(|v| v * v).sum::<f64>().sqrt()
                            }
                        })
                        .sum::<f64>()
                        / traces.len() as f64
                })
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
