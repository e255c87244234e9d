//! Plain `f64` transcription of the model equations, written without the
//! tape, for comparison against the library.

use hmn_core::numerics::ParamStore;

pub struct Weights<'a>(pub &'a ParamStore<f64>);

impl Weights<'_> {
    pub fn get(&self, name: &str) -> &[f64] {
        let id = self.0.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.0.get(id).data()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    x.exp().ln_1p()
}

/// `W x` with `W` stored row-major with `x.len()` columns.
pub fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return vec![0.0; w.len()];
    }
    w.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn affine(p: &Weights, name: &str, x: &[f64], rows: usize) -> Vec<f64> {
    let mut y = if x.is_empty() {
        vec![0.0; rows]
    } else {
        matvec(p.get(&format!("{name}.weight")), x)
    };
    if let Some(id) = p.0.find(&format!("{name}.bias")) {
        y = add(&y, p.0.get(id).data());
    }
    y
}

fn gate(p: &Weights, cell: &str, g: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = h.len();
    let wx = if x.is_empty() {
        vec![0.0; n]
    } else {
        matvec(p.get(&format!("{cell}.w_{g}")), x)
    };
    let uh = matvec(p.get(&format!("{cell}.u_{g}")), h);
    let b = p.get(&format!("{cell}.b_{g}"));
    (0..n).map(|i| wx[i] + uh[i] + b[i]).collect()
}

pub fn gru(p: &Weights, cell: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = gate(p, cell, "update", x, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(p, cell, "reset", x, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = gate(p, cell, "cand", x, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect()
}

/// Both directions start from `h0`; position `k` holds
/// `[forward after k ; backward after k]`.
pub fn bigru(p: &Weights, name: &str, seq: &[Vec<f64>], h0: &[f64]) -> Vec<Vec<f64>> {
    let n = seq.len();
    let mut fwd = Vec::with_capacity(n);
    let mut h = h0.to_vec();
    for x in seq {
        h = gru(p, &format!("{name}.fwd"), x, &h);
        fwd.push(h.clone());
    }
    let mut bwd = vec![Vec::new(); n];
    let mut h = h0.to_vec();
    for k in (0..n).rev() {
        h = gru(p, &format!("{name}.bwd"), &seq[k], &h);
        bwd[k] = h.clone();
    }
    (0..n).map(|k| [fwd[k].clone(), bwd[k].clone()].concat()).collect()
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `(weights, Σ weights_i · items_i)` with scores `c · tanh(W x + b)`.
pub fn attend(p: &Weights, name: &str, items: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let c = p.get(&format!("{name}.context"));
    let scores: Vec<f64> = items
        .iter()
        .map(|x| {
            let h = affine(p, name, x, c.len());
            h.iter().zip(c).map(|(a, b)| a.tanh() * b).sum()
        })
        .collect();
    let w = softmax(&scores);
    let mut pooled = vec![0.0; items[0].len()];
    for (wi, x) in w.iter().zip(items) {
        for (o, v) in pooled.iter_mut().zip(x) {
            *o += wi * v;
        }
    }
    (w, pooled)
}

pub struct Read {
    pub r: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
}

/// `slots` are the valid stored grids, oldest first, as `K` patch vectors each.
pub fn memory_read(p: &Weights, slots: &[Vec<Vec<f64>>], input_enc: &[Vec<f64>], q: &[f64], r_prev: &[f64]) -> Read {
    let w2 = q.len();
    if slots.is_empty() {
        return Read {
            r: vec![0.0; w2],
            alpha: Vec::new(),
            gamma: Vec::new(),
        };
    }
    let zero = vec![0.0; w2 / 2];
    let mut rhos = Vec::new();
    let mut alpha = Vec::new();
    for slot in slots {
        let m = bigru(p, "memory.patch_encoder", slot, &zero);
        let aug: Vec<Vec<f64>> = m
            .iter()
            .zip(input_enc)
            .map(|(mk, fk)| {
                let mut v: Vec<f64> = mk.iter().zip(fk).map(|(a, b)| a * b).collect();
                v.extend(mk.iter().zip(fk).map(|(a, b)| (a - b).abs()));
                v
            })
            .collect();
        let (a, rho) = attend(p, "memory.patch_attention", &aug);
        alpha.push(a);
        rhos.push(rho);
    }
    let rho_bar = bigru(p, "memory.frame_encoder", &rhos, &zero);
    let zs: Vec<Vec<f64>> = rho_bar
        .iter()
        .map(|rb| {
            let mut v: Vec<f64> = rb.iter().zip(q).map(|(a, b)| a * b).collect();
            v.extend(rb.iter().zip(r_prev).map(|(a, b)| a * b));
            v.extend(rb.iter().zip(q).map(|(a, b)| (a - b).abs()));
            v
        })
        .collect();
    let (gamma, pooled) = attend(p, "memory.frame_attention", &zs);
    let r = affine(p, "memory.output", &pooled, w2);
    Read { r, alpha, gamma }
}

pub struct Step {
    pub y_hat: Vec<f64>,
    pub eta_hat: Vec<Vec<f64>>,
    pub read: Read,
    pub beta: Vec<f64>,
}

/// One frame of the HMN with noise `z`; memory appending is left to the caller.
pub fn hmn_step(
    p: &Weights,
    hidden: usize,
    slots: &[Vec<Vec<f64>>],
    r_prev: &[f64],
    frame: &[Vec<f64>],
    z: &[f64],
) -> Step {
    let zero = vec![0.0; hidden];
    let enc = bigru(p, "input_encoder", frame, &zero);
    let (beta, q) = attend(p, "input_attention", &enc);
    let read = memory_read(p, slots, &enc, &q, r_prev);
    let logits = affine(p, "classifier", &read.r, 2);
    let y_hat = softmax(&logits);
    let seed: Vec<f64> = affine(p, "decoder_init", &[read.r.clone(), z.to_vec()].concat(), hidden)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let none: Vec<Vec<f64>> = vec![Vec::new(); frame.len()];
    let states = bigru(p, "decoder", &none, &seed);
    let dim = frame[0].len();
    let eta_hat = states
        .iter()
        .map(|h| affine(p, "regressor", h, dim).into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    Step {
        y_hat,
        eta_hat,
        read,
        beta,
    }
}

pub fn disc_logit(p: &Weights, hidden: usize, r: &[f64], eta: &[Vec<f64>]) -> f64 {
    let enc = bigru(p, "disc.encoder", eta, &vec![0.0; hidden]);
    let n = enc.len() as f64;
    let mut summary = vec![0.0; enc[0].len()];
    for e in &enc {
        for (s, v) in summary.iter_mut().zip(e) {
            *s += v / n;
        }
    }
    let h: Vec<f64> = affine(p, "disc.fuse", &[summary, r.to_vec()].concat(), hidden)
        .into_iter()
        .map(f64::tanh)
        .collect();
    affine(p, "disc.out", &h, 1)[0]
}

pub fn d_loss(l_real: f64, l_fake: f64) -> f64 {
    softplus(-l_real) + softplus(l_fake)
}

pub fn g_loss(l_fake: f64, y_hat: &[f64], label: usize, eta_hat: &[Vec<f64>], eta: &[Vec<f64>]) -> f64 {
    let adv = softplus(-l_fake);
    let cls = -y_hat[label].ln();
    let mse: f64 = eta_hat
        .iter()
        .zip(eta)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    adv + cls + mse
}
