//! Candidate-aware attention over evolved groups, short-term target attention
//! over the latest raw events, and the fusion head producing pCTR.

use crate::error::{Error, Result};
use crate::numeric::ops::{sigmoid, silu_grad_scalar, silu_scalar, softmax_slice, softmax_slice_backward};
use crate::numeric::{dot, outer_acc, vec_mat, vec_mat_acc, vec_matt_acc, Matrix, ParamSet};

pub const CAND_W: &str = "cand.w";
pub const CAND_B: &str = "cand.b";
pub const ATT_T: &str = "att.wt";
pub const ATT_G: &str = "att.wg";
pub const SHORT_Q: &str = "short.wq";
pub const SHORT_V: &str = "short.wv";
pub const HEAD_W1: &str = "head.w1";
pub const HEAD_B1: &str = "head.b1";
pub const HEAD_W2: &str = "head.w2";
pub const HEAD_B2: &str = "head.b2";

/// Projected group keys `P = G′·W_g`, shared by every candidate of a request.
#[derive(Clone, Debug)]
pub struct GroupKeys {
    pub p: Matrix,
    pub valid: Vec<bool>,
}

impl GroupKeys {
    pub fn new(g_prime: &Matrix, wg: &Matrix, valid: &[bool]) -> Result<Self> {
        if g_prime.cols() != wg.rows() || valid.len() != g_prime.rows() {
            return Err(Error::dim("candidate_attention", "G′, W_g and mask disagree"));
        }
        Ok(Self {
            p: g_prime.mm(wg),
            valid: valid.to_vec(),
        })
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }
}

#[derive(Clone, Debug)]
pub struct LongAttention {
    pub alpha: Vec<f64>,
    pub r_long: Vec<f64>,
    te: Vec<f64>,
}

/// `α = softmax_s((e·W_t)·P_s / √d_g)` over valid groups, `r_long = Σ α_s P_s`.
pub fn attend_groups(keys: &GroupKeys, e: &[f64], wt: &Matrix) -> Result<LongAttention> {
    let d_g = keys.p.cols();
    if e.len() != wt.rows() || wt.cols() != d_g {
        return Err(Error::dim("candidate_attention", "candidate does not fit W_t"));
    }
    let te = vec_mat(e, wt);
    let scale = 1.0 / (d_g as f64).sqrt();
    let logits: Vec<f64> = keys.p.iter_rows().map(|p| dot(&te, p) * scale).collect();
    let mut alpha = vec![0.0; logits.len()];
    softmax_slice(&logits, Some(&keys.valid), &mut alpha).ok_or(Error::FullyMasked { row: 0 })?;
    let mut r_long = vec![0.0; d_g];
    for (a, p) in alpha.iter().zip(keys.p.iter_rows()) {
        if *a != 0.0 {
            for (r, v) in r_long.iter_mut().zip(p) {
                *r += a * v;
            }
        }
    }
    Ok(LongAttention { alpha, r_long, te })
}

/// Accumulates into `d_p` (gradient of `P`) and `g_wt`; returns `∂/∂e`.
pub fn attend_groups_backward(
    keys: &GroupKeys,
    e: &[f64],
    wt: &Matrix,
    att: &LongAttention,
    d_r: &[f64],
    d_p: &mut Matrix,
    g_wt: &mut Matrix,
) -> Vec<f64> {
    let d_g = keys.p.cols();
    let scale = 1.0 / (d_g as f64).sqrt();
    let d_alpha: Vec<f64> = keys.p.iter_rows().map(|p| dot(d_r, p)).collect();
    let mut d_logit = vec![0.0; d_alpha.len()];
    softmax_slice_backward(&att.alpha, &d_alpha, &mut d_logit);
    let mut d_te = vec![0.0; d_g];
    for s in 0..keys.p.rows() {
        let a = att.alpha[s];
        let dl = d_logit[s] * scale;
        let p = keys.p.row(s);
        for (t, v) in d_te.iter_mut().zip(p) {
            *t += dl * v;
        }
        for ((dp, r), t) in d_p.row_mut(s).iter_mut().zip(d_r).zip(&att.te) {
            *dp += a * r + dl * t;
        }
    }
    outer_acc(e, &d_te, g_wt);
    let mut de = vec![0.0; e.len()];
    vec_matt_acc(&d_te, wt, &mut de);
    de
}

/// Attention weights and long-term representation for one candidate, from
/// scratch.
pub fn candidate_attention(
    e: &[f64],
    g_prime: &Matrix,
    wt: &Matrix,
    wg: &Matrix,
    valid: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let keys = GroupKeys::new(g_prime, wg, valid)?;
    let att = attend_groups(&keys, e, wt)?;
    Ok((att.alpha, att.r_long))
}

/// Recent-event keys `E` and values `E·W_sv`, shared by every candidate.
#[derive(Clone, Debug)]
pub struct ShortKeys {
    pub events: Matrix,
    pub values: Matrix,
}

impl ShortKeys {
    pub fn new(events: Matrix, wsv: &Matrix) -> Self {
        let values = events.mm(wsv);
        Self { events, values }
    }

    pub fn len(&self) -> usize {
        self.events.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.events.rows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ShortAttention {
    pub beta: Vec<f64>,
    pub r_short: Vec<f64>,
    q: Vec<f64>,
}

/// DIN-style target attention: `q = e·W_sq`, `β = softmax_j(E_j·q / √d)`,
/// `r_short = Σ β_j E_j·W_sv`. No events gives a zero vector.
pub fn short_term_repr(keys: &ShortKeys, e: &[f64], wsq: &Matrix) -> ShortAttention {
    let d = keys.values.cols();
    if keys.is_empty() {
        return ShortAttention {
            beta: vec![],
            r_short: vec![0.0; d],
            q: vec![0.0; wsq.cols()],
        };
    }
    let q = vec_mat(e, wsq);
    let scale = 1.0 / (keys.events.cols() as f64).sqrt();
    let logits: Vec<f64> = keys.events.iter_rows().map(|r| dot(r, &q) * scale).collect();
    let mut beta = vec![0.0; logits.len()];
    softmax_slice(&logits, None, &mut beta).expect("non-empty");
    let mut r_short = vec![0.0; d];
    for (b, v) in beta.iter().zip(keys.values.iter_rows()) {
        for (r, x) in r_short.iter_mut().zip(v) {
            *r += b * x;
        }
    }
    ShortAttention { beta, r_short, q }
}

/// Accumulates into `d_events` (∂E, direct path only), `d_values` (∂(E·W_sv))
/// and `g_wsq`; returns `∂/∂e`.
pub fn short_term_backward(
    keys: &ShortKeys,
    e: &[f64],
    wsq: &Matrix,
    att: &ShortAttention,
    d_r: &[f64],
    d_events: &mut Matrix,
    d_values: &mut Matrix,
    g_wsq: &mut Matrix,
) -> Vec<f64> {
    let mut de = vec![0.0; e.len()];
    if keys.is_empty() {
        return de;
    }
    let scale = 1.0 / (keys.events.cols() as f64).sqrt();
    let d_beta: Vec<f64> = keys.values.iter_rows().map(|v| dot(d_r, v)).collect();
    let mut d_logit = vec![0.0; d_beta.len()];
    softmax_slice_backward(&att.beta, &d_beta, &mut d_logit);
    let mut dq = vec![0.0; att.q.len()];
    for j in 0..keys.len() {
        let dl = d_logit[j] * scale;
        for (dv, r) in d_values.row_mut(j).iter_mut().zip(d_r) {
            *dv += att.beta[j] * r;
        }
        for (q, x) in dq.iter_mut().zip(keys.events.row(j)) {
            *q += dl * x;
        }
        for (de_j, q) in d_events.row_mut(j).iter_mut().zip(&att.q) {
            *de_j += dl * q;
        }
    }
    outer_acc(e, &dq, g_wsq);
    vec_matt_acc(&dq, wsq, &mut de);
    de
}

pub struct Head<'a> {
    pub w1: &'a Matrix,
    pub b1: &'a Matrix,
    pub w2: &'a Matrix,
    pub b2: &'a Matrix,
}

impl<'a> Head<'a> {
    pub fn from_params(p: &'a ParamSet) -> Self {
        Self {
            w1: p.value(HEAD_W1),
            b1: p.value(HEAD_B1),
            w2: p.value(HEAD_W2),
            b2: p.value(HEAD_B2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    pub z: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    pub logit: f64,
}

/// `logit = SiLU(z·W1 + b1)·w2 + b2` with `z = [r_long, r_short, aux, e]`.
pub fn head_forward(head: &Head, z: Vec<f64>) -> Result<HeadCache> {
    if z.len() != head.w1.rows() {
        return Err(Error::dim(
            "fuse_and_predict",
            format!("fused input has {} dims, head expects {}", z.len(), head.w1.rows()),
        ));
    }
    let mut pre = head.b1.row(0).to_vec();
    vec_mat_acc(&z, head.w1, &mut pre);
    let hidden: Vec<f64> = pre.iter().map(|&x| silu_scalar(x)).collect();
    let logit = head.b2[(0, 0)] + (0..hidden.len()).map(|i| hidden[i] * head.w2[(i, 0)]).sum::<f64>();
    Ok(HeadCache { z, pre, hidden, logit })
}

pub struct HeadGrads<'a> {
    pub w1: &'a mut Matrix,
    pub b1: &'a mut Matrix,
    pub w2: &'a mut Matrix,
    pub b2: &'a mut Matrix,
}

/// Accumulates head gradients for `∂loss/∂logit = d_logit`; returns `∂/∂z`.
pub fn head_backward(head: &Head, cache: &HeadCache, d_logit: f64, g: HeadGrads) -> Vec<f64> {
    g.b2.data_mut()[0] += d_logit;
    let mut d_pre = vec![0.0; cache.pre.len()];
    for i in 0..cache.pre.len() {
        g.w2.data_mut()[i] += cache.hidden[i] * d_logit;
        d_pre[i] = head.w2[(i, 0)] * d_logit * silu_grad_scalar(cache.pre[i]);
    }
    for (b, d) in g.b1.row_mut(0).iter_mut().zip(&d_pre) {
        *b += d;
    }
    outer_acc(&cache.z, &d_pre, g.w1);
    let mut dz = vec![0.0; cache.z.len()];
    vec_matt_acc(&d_pre, head.w1, &mut dz);
    dz
}

pub fn fuse(r_long: &[f64], r_short: &[f64], aux: &[f64], e: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(r_long.len() + r_short.len() + aux.len() + e.len());
    z.extend_from_slice(r_long);
    z.extend_from_slice(r_short);
    z.extend_from_slice(aux);
    z.extend_from_slice(e);
    z
}

/// Smallest distance of a reported pCTR from 0 or 1.
pub const PCTR_MARGIN: f64 = 1e-15;

/// `σ(logit)` kept strictly inside (0, 1).
pub fn pctr(logit: f64) -> f64 {
    sigmoid(logit).clamp(PCTR_MARGIN, 1.0 - PCTR_MARGIN)
}

pub fn fuse_and_predict(r_long: &[f64], r_short: &[f64], aux: &[f64], e: &[f64], head: &Head) -> Result<f64> {
    Ok(pctr(head_forward(head, fuse(r_long, r_short, aux, e))?.logit))
}
