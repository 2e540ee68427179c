//! Pooled-embedding comparator: the mean of recent event embeddings next to
//! the candidate embedding, fed to a two-layer MLP.

use serde::{Deserialize, Serialize};

use crate::behavior::BehaviorEvent;
use crate::error::{Error, Result};
use crate::model::{bce_from_logit, CtrModel, RawRequest, Vocab};
use crate::numeric::ops::{sigmoid, silu_grad_scalar, silu_scalar};
use crate::numeric::{outer_acc, seeded_rng, uniform_with_rng, vec_mat_acc, vec_matt_acc, xavier_with_rng, Gradients, Matrix, ParamSet};

pub const ITEM: &str = "base.item";
pub const BEH: &str = "base.beh";
pub const W1: &str = "base.w1";
pub const B1: &str = "base.b1";
pub const W2: &str = "base.w2";
pub const B2: &str = "base.b2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub d_item: usize,
    pub d_beh: usize,
    pub hidden: usize,
    /// Most recent events pooled.
    pub window: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            d_item: 8,
            d_beh: 2,
            hidden: 32,
            window: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PooledBaseline {
    pub cfg: BaselineConfig,
}

#[derive(Clone, Debug)]
pub struct PooledRequest {
    pub user_id: u32,
    pub events: Vec<(u32, u8)>,
    pub candidates: Vec<u32>,
    pub labels: Vec<u8>,
}

fn row_or_zero(id: usize, m: &Matrix) -> usize {
    if id < m.rows() {
        id
    } else {
        0
    }
}

impl PooledBaseline {
    pub fn new(cfg: BaselineConfig) -> Result<Self> {
        if cfg.d_item == 0 || cfg.d_beh == 0 || cfg.hidden == 0 || cfg.window == 0 {
            return Err(Error::invalid("baseline dimensions must be positive"));
        }
        Ok(Self { cfg })
    }

    fn input_dim(&self) -> usize {
        2 * self.cfg.d_item + self.cfg.d_beh
    }

    pub fn init_params(&self, vocab: Vocab, seed: u64) -> ParamSet {
        let c = &self.cfg;
        let mut rng = seeded_rng(seed);
        let mut p = ParamSet::new();
        p.insert(ITEM, uniform_with_rng(vocab.items, c.d_item, 0.3, &mut rng));
        p.insert(BEH, uniform_with_rng(vocab.behaviors, c.d_beh, 0.3, &mut rng));
        p.insert(W1, xavier_with_rng(self.input_dim(), c.hidden, &mut rng));
        p.insert(B1, Matrix::zeros(1, c.hidden));
        p.insert(W2, xavier_with_rng(c.hidden, 1, &mut rng));
        p.insert(B2, Matrix::zeros(1, 1));
        p
    }

    fn pooled(&self, params: &ParamSet, events: &[(u32, u8)]) -> (Vec<f64>, Vec<(usize, usize)>) {
        let (items, behs) = (params.value(ITEM), params.value(BEH));
        let d = self.cfg.d_item + self.cfg.d_beh;
        let mut out = vec![0.0; d];
        let rows: Vec<(usize, usize)> = events
            .iter()
            .map(|&(i, b)| (row_or_zero(i as usize, items), row_or_zero(b as usize, behs)))
            .collect();
        if rows.is_empty() {
            return (out, rows);
        }
        let inv = 1.0 / rows.len() as f64;
        for &(i, b) in &rows {
            for (o, v) in out.iter_mut().zip(items.row(i).iter().chain(behs.row(b))) {
                *o += v * inv;
            }
        }
        (out, rows)
    }

    /// Returns the logit and the hidden pre-activation.
    fn forward(&self, params: &ParamSet, pooled: &[f64], cand_row: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let mut x = pooled.to_vec();
        x.extend_from_slice(params.value(ITEM).row(cand_row));
        let mut pre = params.value(B1).row(0).to_vec();
        vec_mat_acc(&x, params.value(W1), &mut pre);
        let h: Vec<f64> = pre.iter().map(|&v| silu_scalar(v)).collect();
        let mut logit = params.value(B2).data()[0];
        vec_mat_acc(&h, params.value(W2), std::slice::from_mut(&mut logit));
        (x, pre, logit)
    }
}

impl CtrModel for PooledBaseline {
    type Prepared = PooledRequest;

    fn prepare(&self, r: &RawRequest) -> Result<PooledRequest> {
        let start = r.history.len().saturating_sub(self.cfg.window);
        Ok(PooledRequest {
            user_id: r.user_id,
            events: r.history[start..]
                .iter()
                .map(|e: &BehaviorEvent| (e.item_id, e.behavior))
                .collect(),
            candidates: r.candidates.clone(),
            labels: r.labels.clone(),
        })
    }

    fn labels<'a>(&self, p: &'a PooledRequest) -> &'a [u8] {
        &p.labels
    }

    fn user_id(&self, p: &PooledRequest) -> u32 {
        p.user_id
    }

    fn logits(&self, params: &ParamSet, p: &PooledRequest) -> Result<Vec<f64>> {
        let (pooled, _) = self.pooled(params, &p.events);
        let items = params.value(ITEM);
        Ok(p.candidates
            .iter()
            .map(|&c| self.forward(params, &pooled, row_or_zero(c as usize, items)).2)
            .collect())
    }

    fn loss_and_grad(&self, params: &ParamSet, p: &PooledRequest, grads: &mut Gradients) -> Result<f64> {
        let (d_item, d_beh) = (self.cfg.d_item, self.cfg.d_beh);
        let (pooled, rows) = self.pooled(params, &p.events);
        let mut d_pooled = vec![0.0; d_item + d_beh];
        let mut loss = 0.0;
        for (&c, &y) in p.candidates.iter().zip(&p.labels) {
            let cand_row = row_or_zero(c as usize, params.value(ITEM));
            let (x, pre, logit) = self.forward(params, &pooled, cand_row);
            let y = y as f64;
            loss += bce_from_logit(logit, y);
            let dl = sigmoid(logit) - y;
            let h: Vec<f64> = pre.iter().map(|&v| silu_scalar(v)).collect();
            outer_acc(&h, &[dl], grads.get_mut(W2));
            grads.get_mut(B2).data_mut()[0] += dl;
            let d_pre: Vec<f64> = pre
                .iter()
                .zip(params.value(W2).data())
                .map(|(&v, &w)| dl * w * silu_grad_scalar(v))
                .collect();
            outer_acc(&x, &d_pre, grads.get_mut(W1));
            grads.get_mut(B1).row_mut(0).iter_mut().zip(&d_pre).for_each(|(g, d)| *g += d);
            let mut dx = vec![0.0; x.len()];
            vec_matt_acc(&d_pre, params.value(W1), &mut dx);
            d_pooled.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            let g_item = grads.get_mut(ITEM);
            g_item.row_mut(cand_row).iter_mut().zip(&dx[d_item + d_beh..]).for_each(|(g, d)| *g += d);
        }
        if !rows.is_empty() {
            let inv = 1.0 / rows.len() as f64;
            for &(i, b) in &rows {
                let gi = grads.get_mut(ITEM).row_mut(i);
                gi.iter_mut().zip(&d_pooled[..d_item]).for_each(|(g, d)| *g += d * inv);
                let gb = grads.get_mut(BEH).row_mut(b);
                gb.iter_mut().zip(&d_pooled[d_item..]).for_each(|(g, d)| *g += d * inv);
            }
        }
        Ok(loss)
    }
}
