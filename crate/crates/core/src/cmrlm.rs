//! Dual-tower contrastive pretraining over entity modality pairs.
//!
//! Each entity is described by a text-side and an image-side feature vector.
//! Two small MLP towers map them into a shared unit sphere; a symmetric
//! InfoNCE objective with a learnable temperature pulls matching pairs
//! together. The concatenated tower outputs become the entity's multimodal
//! embedding used for clustering.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ops::{silu_backward, softmax_slice};
use crate::numeric::{
    l2_norm, seeded_rng, silu, xavier_with_rng, AdamConfig, Matrix, ParamSet,
};

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityPair {
    pub entity_id: u32,
    pub text_features: Vec<f64>,
    pub image_features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Text,
    Image,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Text => "text",
            Side::Image => "image",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TowerConfig {
    pub d_txt: usize,
    pub d_img: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub init_temperature: f64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            d_txt: 24,
            d_img: 32,
            hidden: 64,
            d_emb: 16,
            init_temperature: 0.07,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 3e-3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TowerModel {
    pub config: TowerConfig,
    pub params: ParamSet,
}

struct TowerCache {
    x: Matrix,
    pre: Matrix,
    hidden: Matrix,
    norms: Vec<f64>,
    out: Matrix,
}

impl TowerModel {
    pub fn new(config: TowerConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        for (side, d_in) in [(Side::Text, config.d_txt), (Side::Image, config.d_img)] {
            let p = side.prefix();
            params.insert(format!("{p}.w1"), xavier_with_rng(d_in, config.hidden, &mut rng));
            params.insert(format!("{p}.b1"), Matrix::zeros(1, config.hidden));
            params.insert(format!("{p}.w2"), xavier_with_rng(config.hidden, config.d_emb, &mut rng));
            params.insert(format!("{p}.b2"), Matrix::zeros(1, config.d_emb));
        }
        params.insert(
            "temperature",
            Matrix::row_vector(&[config.init_temperature]),
        );
        Self { config, params }
    }

    pub fn from_params(config: TowerConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0);
        model.params.load_values_from(&params)?;
        Ok(model)
    }

    pub fn temperature(&self) -> f64 {
        self.params.value("temperature")[(0, 0)]
    }

    fn input_dim(&self, side: Side) -> usize {
        match side {
            Side::Text => self.config.d_txt,
            Side::Image => self.config.d_img,
        }
    }

    fn forward_batch(&self, side: Side, x: Matrix) -> Result<TowerCache> {
        if x.cols() != self.input_dim(side) {
            return Err(Error::dim(
                "encode",
                format!("{:?} features have dim {}, expected {}", side, x.cols(), self.input_dim(side)),
            ));
        }
        let p = side.prefix();
        let mut pre = x.mm(self.params.value(&format!("{p}.w1")));
        pre.add_row_broadcast(self.params.value(&format!("{p}.b1")).data());
        let hidden = silu(&pre);
        let mut out = hidden.mm(self.params.value(&format!("{p}.w2")));
        out.add_row_broadcast(self.params.value(&format!("{p}.b2")).data());
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let n = l2_norm(out.row(i));
            if !(n > 1e-12) {
                return Err(Error::invalid(format!(
                    "{:?} tower produced a zero vector for row {i}; cannot normalize",
                    side
                )));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(TowerCache {
            x,
            pre,
            hidden,
            norms,
            out,
        })
    }

    /// Accumulates parameter gradients given `d_out`, the gradient w.r.t. the
    /// normalized outputs.
    fn backward_batch(&mut self, side: Side, cache: &TowerCache, d_out: &Matrix) {
        let p = side.prefix();
        let mut d_raw = d_out.clone();
        for i in 0..d_raw.rows() {
            let u = cache.out.row(i);
            let du = d_out.row(i);
            let proj: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
            for (j, d) in d_raw.row_mut(i).iter_mut().enumerate() {
                *d = (du[j] - u[j] * proj) / cache.norms[i];
            }
        }
        let gw2 = cache.hidden.tmm(&d_raw);
        self.params.grad_mut(&format!("{p}.w2")).add_assign(&gw2);
        d_raw.accumulate_col_sums(self.params.grad_mut(&format!("{p}.b2")).data_mut());
        let d_hidden = d_raw.mmt(self.params.value(&format!("{p}.w2")));
        let d_pre = silu_backward(&cache.pre, &d_hidden);
        let gw1 = cache.x.tmm(&d_pre);
        self.params.grad_mut(&format!("{p}.w1")).add_assign(&gw1);
        d_pre.accumulate_col_sums(self.params.grad_mut(&format!("{p}.b1")).data_mut());
    }

    /// Unit-norm embedding of one side's features.
    pub fn encode(&self, side: Side, features: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_batch(side, Matrix::row_vector(features))?;
        Ok(cache.out.row(0).to_vec())
    }

    pub fn encode_batch(&self, side: Side, features: Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(side, features)?.out)
    }

    /// Concatenation of both unit tower outputs, renormalized to unit length.
    pub fn embed_entity(&self, pair: &ModalityPair) -> Result<Vec<f64>> {
        let mut v = self.encode(Side::Text, &pair.text_features)?;
        v.extend(self.encode(Side::Image, &pair.image_features)?);
        let n = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }

    /// One embedding row per pair, in input order.
    pub fn embed_all(&self, pairs: &[ModalityPair]) -> Result<Matrix> {
        let mut out = Matrix::zeros(pairs.len(), 2 * self.config.d_emb);
        for (i, pair) in pairs.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&self.embed_entity(pair)?);
        }
        Ok(out)
    }

    /// Loss and accumulated gradients for one batch of pairs.
    fn batch_loss_and_grads(&mut self, batch: &[&ModalityPair]) -> Result<f64> {
        let text = stack(batch.iter().map(|p| p.text_features.as_slice()), self.config.d_txt)?;
        let image = stack(batch.iter().map(|p| p.image_features.as_slice()), self.config.d_img)?;
        let tc = self.forward_batch(Side::Text, text)?;
        let ic = self.forward_batch(Side::Image, image)?;
        let tau = self.temperature();
        let grads = contrastive_loss_grad(&tc.out, &ic.out, tau)?;
        self.backward_batch(Side::Text, &tc, &grads.d_text);
        self.backward_batch(Side::Image, &ic, &grads.d_image);
        self.params.grad_mut("temperature")[(0, 0)] += grads.d_temperature;
        Ok(grads.loss)
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != dim {
            return Err(Error::dim("stack", format!("row of dim {}, expected {dim}", r.len())));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Matrix::from_vec(n, dim, data)
}

/// Symmetric InfoNCE: the mean of the text→image and image→text
/// cross-entropies over the `n × n` similarity matrix `T·Iᵀ / τ`, with
/// matching rows as positives.
pub fn contrastive_loss(text_embs: &Matrix, img_embs: &Matrix, temperature: f64) -> Result<f64> {
    Ok(contrastive_loss_grad(text_embs, img_embs, temperature)?.loss)
}

pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_text: Matrix,
    pub d_image: Matrix,
    pub d_temperature: f64,
}

pub fn contrastive_loss_grad(text: &Matrix, image: &Matrix, tau: f64) -> Result<ContrastiveGrad> {
    let n = text.rows();
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two pairs"));
    }
    if text.shape() != image.shape() {
        return Err(Error::dim(
            "contrastive_loss",
            format!("{:?} vs {:?}", text.shape(), image.shape()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut logits = text.mmt(image);
    logits.scale(1.0 / tau);

    let mut row_p = Matrix::zeros(n, n);
    for i in 0..n {
        softmax_slice(logits.row(i), None, row_p.row_mut(i));
    }
    let logits_t = logits.transpose();
    let mut col_p = Matrix::zeros(n, n);
    for j in 0..n {
        softmax_slice(logits_t.row(j), None, col_p.row_mut(j));
    }

    let nf = n as f64;
    let mut loss = 0.0;
    for i in 0..n {
        loss -= row_p[(i, i)].ln();
        loss -= col_p[(i, i)].ln();
    }
    loss /= 2.0 * nf;

    // dL/dlogits = ((P_row - I) + (P_colᵀ - I)) / 2n
    let mut d_logits = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            d_logits[(i, j)] = (row_p[(i, j)] - target + col_p[(j, i)] - target) / (2.0 * nf);
        }
    }
    let mut d_temperature = 0.0;
    for (d, s) in d_logits.data().iter().zip(logits.data()) {
        d_temperature -= d * s / tau;
    }
    let mut d_text = d_logits.mm(image);
    d_text.scale(1.0 / tau);
    let mut d_image = d_logits.tmm(text);
    d_image.scale(1.0 / tau);
    Ok(ContrastiveGrad {
        loss,
        d_text,
        d_image,
        d_temperature,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainLog {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
}

/// Trains both towers with in-batch negatives.
pub fn pretrain(
    pairs: &[ModalityPair],
    tower: TowerConfig,
    config: &PretrainConfig,
) -> Result<(TowerModel, PretrainLog)> {
    if pairs.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two entities"));
    }
    let mut model = TowerModel::new(tower, config.seed);
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let adam = AdamConfig::with_lr(config.lr);
    let all: Vec<&ModalityPair> = pairs.iter().collect();
    let initial_loss = full_loss(&model, &all)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let bs = config.batch_size.max(2);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        let mut chunks: Vec<&[usize]> = order.chunks(bs).collect();
        // a trailing singleton has no negatives; fold it into the previous batch
        let merged;
        if chunks.len() > 1 && chunks.last().map(|c| c.len()) == Some(1) {
            let tail = chunks.pop().unwrap();
            let prev = chunks.pop().unwrap();
            merged = [prev, tail].concat();
            chunks.push(&merged);
        }
        for (b, chunk) in chunks.iter().enumerate() {
            let batch: Vec<&ModalityPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            model.params.zero_grads();
            let loss = model.batch_loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            model.params.adam_step(&adam);
            let t = model.params.value_mut("temperature");
            t[(0, 0)] = t[(0, 0)].clamp(MIN_TEMPERATURE, MAX_TEMPERATURE);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok((
        model,
        PretrainLog {
            epoch_losses,
            initial_loss,
        },
    ))
}

/// Contrastive loss over the whole pair set in one batch.
pub fn full_loss(model: &TowerModel, pairs: &[&ModalityPair]) -> Result<f64> {
    let text = stack(pairs.iter().map(|p| p.text_features.as_slice()), model.config.d_txt)?;
    let image = stack(pairs.iter().map(|p| p.image_features.as_slice()), model.config.d_img)?;
    let t = model.encode_batch(Side::Text, text)?;
    let i = model.encode_batch(Side::Image, image)?;
    contrastive_loss(&t, &i, model.temperature())
}

/// Alignment diagnostics: mean cosine of matching pairs, of non-matching
/// pairs, and the fraction of entities whose nearest image embedding (by
/// cosine) to their text embedding is their own.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentReport {
    pub matched_cosine: f64,
    pub mismatched_cosine: f64,
    pub retrieval_top1: f64,
}

pub fn alignment_report(model: &TowerModel, pairs: &[ModalityPair]) -> Result<AlignmentReport> {
    let refs: Vec<&ModalityPair> = pairs.iter().collect();
    let text = stack(refs.iter().map(|p| p.text_features.as_slice()), model.config.d_txt)?;
    let image = stack(refs.iter().map(|p| p.image_features.as_slice()), model.config.d_img)?;
    let t = model.encode_batch(Side::Text, text)?;
    let i = model.encode_batch(Side::Image, image)?;
    let sims = t.mmt(&i);
    let n = pairs.len();
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    let mut hits = 0;
    for a in 0..n {
        let row = sims.row(a);
        matched += row[a];
        mismatched += row.iter().sum::<f64>() - row[a];
        let best = (0..n)
            .max_by(|&x, &y| row[x].total_cmp(&row[y]).then(y.cmp(&x)))
            .unwrap();
        if best == a {
            hits += 1;
        }
    }
    Ok(AlignmentReport {
        matched_cosine: matched / n as f64,
        mismatched_cosine: mismatched / (n * (n - 1)) as f64,
        retrieval_top1: hits as f64 / n as f64,
    })
}
