//! The assembled CTR model: interest groups → group evolution → candidate
//! attention, plus short-term and auxiliary features, trained per request.
//!
//! A request is one user at one instant scored against several candidates.
//! The user-side work (grouping, intra-group attention, the HSTU stack, the
//! recent-event keys) runs once per request and is shared by its candidates,
//! in the forward and in the backward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::behavior::{BehaviorEvent, CategoryMap};
use crate::buckets::LogBuckets;
use crate::cagam::{self, GroupKeys, Head, HeadGrads, ShortKeys};
use crate::datagen::{hour_of_day, Sample};
use crate::error::{Error, Result};
use crate::idecm::ClusterMap;
use crate::igiem::{self, EmbedDims, EventIndex, MhsaWeights, StatVector};
use crate::numeric::ops::{sigmoid, softplus};
use crate::numeric::{
    hex_digest, outer_acc, seeded_rng, uniform_with_rng, vec_mat_acc, vec_matt_acc, xavier_with_rng, Gradients, Matrix,
    ParamSet,
};
use crate::tgetm::{self, HstuBlock, HstuCache};

pub const USER_TABLE: &str = "aux.user";
pub const HOUR_TABLE: &str = "aux.hour";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_item: usize,
    pub d_time: usize,
    pub d_loc: usize,
    pub d_beh: usize,
    pub heads: usize,
    pub d_stat: usize,
    pub d_h: usize,
    /// HSTU depth `N`.
    pub layers: usize,
    /// Groups kept per request.
    pub top_k: usize,
    /// Most recent events kept per group (`B`).
    pub group_cap: usize,
    /// Recent events for the short-term path.
    pub n_short: usize,
    pub d_user: usize,
    pub d_hour: usize,
    pub hidden: usize,
    pub time_bucket_width: f64,
    pub time_buckets: usize,
    pub gap_bucket_width: f64,
    pub gap_buckets: usize,
    pub disable_stats: bool,
    pub disable_behavior_evolution: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let lb = LogBuckets::default();
        Self {
            d_item: 8,
            d_time: 4,
            d_loc: 2,
            d_beh: 2,
            heads: 2,
            d_stat: 8,
            d_h: 16,
            layers: 2,
            top_k: 8,
            group_cap: 32,
            n_short: 10,
            d_user: 4,
            d_hour: 4,
            hidden: 32,
            time_bucket_width: lb.width,
            time_buckets: lb.count,
            gap_bucket_width: lb.width,
            gap_buckets: lb.count,
            disable_stats: false,
            disable_behavior_evolution: false,
        }
    }
}

impl ModelConfig {
    pub fn embed_dims(&self) -> EmbedDims {
        EmbedDims {
            item: self.d_item,
            time: self.d_time,
            loc: self.d_loc,
            beh: self.d_beh,
        }
    }

    /// Behavior embedding width `d`.
    pub fn d(&self) -> usize {
        self.embed_dims().total()
    }

    pub fn d_g(&self) -> usize {
        self.d() + self.d_stat
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.d_g() + self.d() + self.d_user + self.d_hour
    }

    pub fn time_bucketing(&self) -> LogBuckets {
        LogBuckets::new(self.time_bucket_width, self.time_buckets)
    }

    pub fn gap_bucketing(&self) -> LogBuckets {
        LogBuckets::new(self.gap_bucket_width, self.gap_buckets)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_item,
            self.d_time,
            self.d_loc,
            self.d_beh,
            self.heads,
            self.d_stat,
            self.d_h,
            self.layers,
            self.top_k,
            self.group_cap,
            self.d_user,
            self.d_hour,
            self.hidden,
            self.time_buckets,
            self.gap_buckets,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid("model dimensions and counts must be positive"));
        }
        if self.d() % self.heads != 0 {
            return Err(Error::invalid(format!("heads = {} must divide d = {}", self.heads, self.d())));
        }
        if !(self.time_bucket_width > 0.0 && self.gap_bucket_width > 0.0) {
            return Err(Error::invalid("bucket widths must be positive"));
        }
        Ok(())
    }
}

/// Table sizes; ids at or beyond a size share the reserved row 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub items: usize,
    pub locations: usize,
    pub behaviors: usize,
    pub users: usize,
}

impl Vocab {
    /// Smallest tables covering every id in `samples` and `extra_items`.
    pub fn covering<'a>(samples: impl IntoIterator<Item = &'a Sample>, extra_items: usize, behaviors: usize) -> Self {
        let mut v = Vocab {
            items: extra_items + 1,
            locations: 1,
            behaviors: behaviors + 1,
            users: 1,
        };
        for s in samples {
            v.users = v.users.max(s.user_id as usize + 1);
            v.items = v.items.max(s.candidate as usize + 1);
            for e in s.history.iter() {
                v.items = v.items.max(e.item_id as usize + 1);
                v.locations = v.locations.max(e.location_id as usize + 1);
            }
        }
        v
    }
}

/// Samples sharing a user and request time, with their common history.
#[derive(Clone, Debug)]
pub struct RawRequest {
    pub user_id: u32,
    pub request_time: i64,
    pub history: Arc<Vec<BehaviorEvent>>,
    pub candidates: Vec<u32>,
    pub labels: Vec<u8>,
}

/// Groups consecutive samples with equal `(user_id, request_time)`.
pub fn group_requests(samples: &[Sample]) -> Vec<RawRequest> {
    let mut out: Vec<RawRequest> = Vec::new();
    for s in samples {
        match out.last_mut() {
            Some(r) if r.user_id == s.user_id && r.request_time == s.request_time => {
                r.candidates.push(s.candidate);
                r.labels.push(s.label);
            }
            _ => out.push(RawRequest {
                user_id: s.user_id,
                request_time: s.request_time,
                history: Arc::clone(&s.history),
                candidates: vec![s.candidate],
                labels: vec![s.label],
            }),
        }
    }
    out
}

/// A model trainable by the generic trainer.
pub trait CtrModel: Sync {
    type Prepared: Send + Sync;

    fn prepare(&self, request: &RawRequest) -> Result<Self::Prepared>;

    fn labels<'a>(&self, prepared: &'a Self::Prepared) -> &'a [u8];

    fn user_id(&self, prepared: &Self::Prepared) -> u32;

    /// One logit per candidate.
    fn logits(&self, params: &ParamSet, prepared: &Self::Prepared) -> Result<Vec<f64>>;

    /// Summed logit-BCE over the request's candidates; gradients are added to `grads`.
    fn loss_and_grad(&self, params: &ParamSet, prepared: &Self::Prepared, grads: &mut Gradients) -> Result<f64>;
}

/// BCE of `σ(logit)` against `y`, computed from the logit.
#[inline]
pub fn bce_from_logit(logit: f64, y: f64) -> f64 {
    softplus(logit) - y * logit
}

/// A selected group with its statistics and capped events.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedGroup {
    pub cluster_id: u32,
    pub events: Vec<BehaviorEvent>,
    pub stats: StatVector,
    pub max_timestamp: i64,
}

/// Candidate-independent inputs of one request.
#[derive(Clone, Debug, PartialEq)]
pub struct UserContext {
    pub user_id: u32,
    pub request_time: i64,
    /// Top-k groups ascending by max timestamp (no padding entries).
    pub groups: Vec<PreparedGroup>,
    pub short: Vec<BehaviorEvent>,
}

#[derive(Clone, Debug)]
pub struct PreparedRequest {
    pub ctx: UserContext,
    pub candidates: Vec<u32>,
    pub labels: Vec<u8>,
}

/// Evolved group matrix `G′` of one user, padded to `top_k` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LongState {
    pub g_prime: Matrix,
    pub valid: Vec<bool>,
    pub timestamps: Vec<i64>,
}

impl LongState {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

struct GroupCache {
    idx: Vec<EventIndex>,
    mhsa: Option<igiem::MhsaCache>,
}

struct LongCache {
    groups: Vec<GroupCache>,
    hstu: Vec<HstuCache>,
}

struct RequestShared {
    keys: Option<GroupKeys>,
    short: ShortKeys,
    short_idx: Vec<EventIndex>,
    aux: Vec<f64>,
    user_row: usize,
    hour: usize,
}

#[derive(Clone, Debug)]
pub struct Dmgin {
    pub cfg: ModelConfig,
    pub clusters: Arc<ClusterMap>,
    pub categories: CategoryMap,
}

fn row_or_zero(id: usize, table: &Matrix) -> usize {
    if id < table.rows() {
        id
    } else {
        0
    }
}

fn add_into_row(m: &mut Matrix, row: usize, offset: usize, values: &[f64]) {
    for (o, v) in m.row_mut(row)[offset..offset + values.len()].iter_mut().zip(values) {
        *o += v;
    }
}

impl Dmgin {
    pub fn new(cfg: ModelConfig, clusters: Arc<ClusterMap>, categories: CategoryMap) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            clusters,
            categories,
        })
    }

    pub fn init_params(&self, vocab: Vocab, seed: u64) -> ParamSet {
        let c = &self.cfg;
        let (d, d_g) = (c.d(), c.d_g());
        let mut rng = seeded_rng(seed);
        let mut p = ParamSet::new();
        let emb = 0.3;
        p.insert(igiem::ITEM_TABLE, uniform_with_rng(vocab.items, c.d_item, emb, &mut rng));
        p.insert(igiem::TIME_TABLE, uniform_with_rng(c.time_buckets, c.d_time, emb, &mut rng));
        p.insert(igiem::LOC_TABLE, uniform_with_rng(vocab.locations, c.d_loc, emb, &mut rng));
        p.insert(igiem::BEH_TABLE, uniform_with_rng(vocab.behaviors, c.d_beh, emb, &mut rng));
        for name in [igiem::MHSA_Q, igiem::MHSA_K, igiem::MHSA_V, igiem::MHSA_O] {
            p.insert(name, xavier_with_rng(d, d, &mut rng));
        }
        p.insert(igiem::STAT_W, xavier_with_rng(igiem::STAT_FEATURES, c.d_stat, &mut rng));
        p.insert(igiem::STAT_B, Matrix::zeros(1, c.d_stat));
        // Own stream, so the other tensors start identical at any depth.
        let mut layer_rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
        for l in 0..c.layers {
            let [w1, b1, w2, b2, bias] = tgetm::param_names(l);
            p.insert(w1, xavier_with_rng(d_g, 4 * c.d_h, &mut layer_rng));
            p.insert(b1, Matrix::zeros(1, 4 * c.d_h));
            let mut out = xavier_with_rng(c.d_h, d_g, &mut layer_rng);
            out.scale(0.5 / c.layers as f64);
            p.insert(w2, out);
            p.insert(b2, Matrix::zeros(1, d_g));
            p.insert(bias, Matrix::zeros(1, c.gap_buckets));
        }
        p.insert(cagam::CAND_W, xavier_with_rng(c.d_item, d_g, &mut rng));
        p.insert(cagam::CAND_B, Matrix::zeros(1, d_g));
        p.insert(cagam::ATT_T, xavier_with_rng(d_g, d_g, &mut rng));
        p.insert(cagam::ATT_G, xavier_with_rng(d_g, d_g, &mut rng));
        p.insert(cagam::SHORT_Q, xavier_with_rng(d_g, d, &mut rng));
        p.insert(cagam::SHORT_V, xavier_with_rng(d, d, &mut rng));
        p.insert(USER_TABLE, uniform_with_rng(vocab.users, c.d_user, 0.1, &mut rng));
        p.insert(HOUR_TABLE, uniform_with_rng(24, c.d_hour, 0.1, &mut rng));
        p.insert(cagam::HEAD_W1, xavier_with_rng(c.fused_dim(), c.hidden, &mut rng));
        p.insert(cagam::HEAD_B1, Matrix::zeros(1, c.hidden));
        p.insert(cagam::HEAD_W2, xavier_with_rng(c.hidden, 1, &mut rng));
        p.insert(cagam::HEAD_B2, Matrix::zeros(1, 1));
        p
    }

    /// Checks that `params` has every tensor this architecture reads, with
    /// matching shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let vocab = Vocab {
            items: params.get(igiem::ITEM_TABLE).map_or(1, |p| p.value.rows()),
            locations: params.get(igiem::LOC_TABLE).map_or(1, |p| p.value.rows()),
            behaviors: params.get(igiem::BEH_TABLE).map_or(1, |p| p.value.rows()),
            users: params.get(USER_TABLE).map_or(1, |p| p.value.rows()),
        };
        let want = self.init_params(vocab, 0);
        for (name, p) in want.iter() {
            match params.get(name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                Some(q) => {
                    return Err(Error::dim(
                        "check_params",
                        format!("{name}: {:?} vs expected {:?}", q.value.shape(), p.value.shape()),
                    ))
                }
                None => return Err(Error::invalid(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if params.len() != want.len() {
            return Err(Error::invalid("checkpoint has parameters this model does not use"));
        }
        Ok(())
    }

    /// Identifies parameters, configuration and cluster map together.
    pub fn model_hash(&self, params: &ParamSet) -> String {
        let mut bytes = params.to_checkpoint_bytes();
        bytes.extend_from_slice(serde_json::to_string(&self.cfg).expect("config serializes").as_bytes());
        bytes.extend_from_slice(self.clusters.to_text().as_bytes());
        bytes.extend_from_slice(format!("{:?}", self.categories).as_bytes());
        hex_digest(&bytes)
    }

    /// Groups the history, keeps the top-k most recently touched groups and
    /// computes their statistics before capping.
    pub fn user_context(&self, user_id: u32, request_time: i64, history: &[BehaviorEvent]) -> Result<UserContext> {
        let groups = igiem::group_sequence(history, &self.clusters);
        let top = igiem::topk_groups(&groups, self.cfg.top_k);
        let mut prepared = Vec::with_capacity(top.groups.len());
        for g in &top.groups {
            prepared.push(PreparedGroup {
                cluster_id: g.cluster_id,
                events: g.capped(self.cfg.group_cap).to_vec(),
                stats: igiem::compute_stats(g, request_time, &self.categories)?,
                max_timestamp: g.max_timestamp,
            });
        }
        let short = history[history.len().saturating_sub(self.cfg.n_short)..].to_vec();
        Ok(UserContext {
            user_id,
            request_time,
            groups: prepared,
            short,
        })
    }

    fn hstu_blocks<'a>(&self, params: &'a ParamSet) -> Vec<HstuBlock<'a>> {
        (0..self.cfg.layers).map(|l| HstuBlock::from_params(params, l)).collect()
    }

    fn long_forward(&self, params: &ParamSet, ctx: &UserContext) -> Result<(LongState, LongCache)> {
        let k = self.cfg.top_k;
        let (d, d_g) = (self.cfg.d(), self.cfg.d_g());
        let buckets = self.cfg.time_bucketing();
        let mut g = Matrix::zeros(k, d_g);
        let mut valid = vec![false; k];
        let mut timestamps = vec![0i64; k];
        let mut caches = Vec::with_capacity(ctx.groups.len());
        let w = MhsaWeights::from_params(params);
        for (s, grp) in ctx.groups.iter().enumerate() {
            let (x, idx) = igiem::embed_events(params, &grp.events, ctx.request_time, &buckets);
            let mask = vec![true; x.rows()];
            let (dyna, mhsa) = if self.cfg.disable_behavior_evolution {
                (igiem::masked_mean(&x, &mask)?, None)
            } else {
                let (dyna, cache) = igiem::intra_group_mhsa(&x, &mask, &w, self.cfg.heads)?;
                (dyna, Some(cache))
            };
            let row = g.row_mut(s);
            row[..d].copy_from_slice(&dyna);
            if !self.cfg.disable_stats {
                row[d..].copy_from_slice(&igiem::embed_stats(params, &grp.stats));
            }
            valid[s] = true;
            timestamps[s] = grp.max_timestamp;
            caches.push(GroupCache { idx, mhsa });
        }
        let blocks = self.hstu_blocks(params);
        let (g_prime, hstu) = tgetm::stack_forward(&blocks, &g, &valid, &timestamps, &self.cfg.gap_bucketing())?;
        Ok((
            LongState {
                g_prime,
                valid,
                timestamps,
            },
            LongCache { groups: caches, hstu },
        ))
    }

    fn long_backward(
        &self,
        params: &ParamSet,
        ctx: &UserContext,
        cache: &LongCache,
        d_gprime: &Matrix,
        grads: &mut Gradients,
    ) {
        let d = self.cfg.d();
        let blocks = self.hstu_blocks(params);
        let (block_grads, dg) = tgetm::stack_backward(&blocks, &cache.hstu, d_gprime);
        for (l, bg) in block_grads.iter().enumerate() {
            let names = tgetm::param_names(l);
            for (name, m) in names.iter().zip([&bg.w1, &bg.b1, &bg.w2, &bg.b2, &bg.bias]) {
                grads.get_mut(name).add_assign(m);
            }
        }
        let w = MhsaWeights::from_params(params);
        for (s, (grp, gc)) in ctx.groups.iter().zip(&cache.groups).enumerate() {
            let (d_dyna, d_stat) = igiem::split_group_grad(dg.row(s), d);
            if !self.cfg.disable_stats {
                igiem::embed_stats_backward(&grp.stats, d_stat, grads);
            }
            let dx = match &gc.mhsa {
                Some(mc) => {
                    let mg = igiem::intra_group_mhsa_backward(mc, &w, d_dyna);
                    grads.get_mut(igiem::MHSA_Q).add_assign(&mg.wq);
                    grads.get_mut(igiem::MHSA_K).add_assign(&mg.wk);
                    grads.get_mut(igiem::MHSA_V).add_assign(&mg.wv);
                    grads.get_mut(igiem::MHSA_O).add_assign(&mg.wo);
                    mg.x
                }
                None => igiem::masked_mean_backward(gc.idx.len(), &vec![true; gc.idx.len()], d_dyna),
            };
            igiem::embed_backward(&gc.idx, &dx, self.cfg.embed_dims(), grads);
        }
    }

    /// `G′` for one user; depends on history only.
    pub fn long_state(&self, params: &ParamSet, ctx: &UserContext) -> Result<LongState> {
        Ok(self.long_forward(params, ctx)?.0)
    }

    fn shared(&self, params: &ParamSet, ctx: &UserContext, long: &LongState) -> Result<RequestShared> {
        let keys = if long.n_valid() > 0 {
            Some(GroupKeys::new(&long.g_prime, params.value(cagam::ATT_G), &long.valid)?)
        } else {
            None
        };
        let (events, short_idx) = igiem::embed_events(params, &ctx.short, ctx.request_time, &self.cfg.time_bucketing());
        let short = ShortKeys::new(events, params.value(cagam::SHORT_V));
        let users = params.value(USER_TABLE);
        let user_row = row_or_zero(ctx.user_id as usize, users);
        let hour = hour_of_day(ctx.request_time);
        let mut aux = users.row(user_row).to_vec();
        aux.extend_from_slice(params.value(HOUR_TABLE).row(hour));
        Ok(RequestShared {
            keys,
            short,
            short_idx,
            aux,
            user_row,
            hour,
        })
    }

    fn candidate_embedding(&self, params: &ParamSet, item: u32) -> (usize, Vec<f64>) {
        let table = params.value(igiem::ITEM_TABLE);
        let row = row_or_zero(item as usize, table);
        let mut e = params.value(cagam::CAND_B).row(0).to_vec();
        vec_mat_acc(table.row(row), params.value(cagam::CAND_W), &mut e);
        (row, e)
    }

    /// Logits for `candidates` given a (fresh or cached) long-term state.
    pub fn score(&self, params: &ParamSet, ctx: &UserContext, long: &LongState, candidates: &[u32]) -> Result<Vec<f64>> {
        let shared = self.shared(params, ctx, long)?;
        let (table, wc, bc) = (
            params.value(igiem::ITEM_TABLE),
            params.value(cagam::CAND_W),
            params.value(cagam::CAND_B),
        );
        let (wt, wsq) = (params.value(cagam::ATT_T), params.value(cagam::SHORT_Q));
        let head = Head::from_params(params);
        let mut e = vec![0.0; bc.cols()];
        candidates
            .iter()
            .map(|&c| {
                e.copy_from_slice(bc.row(0));
                vec_mat_acc(table.row(row_or_zero(c as usize, table)), wc, &mut e);
                let r_long = match &shared.keys {
                    Some(k) => cagam::attend_groups(k, &e, wt)?.r_long,
                    None => vec![0.0; self.cfg.d_g()],
                };
                let r_short = cagam::short_term_repr(&shared.short, &e, wsq).r_short;
                Ok(cagam::head_forward(&head, cagam::fuse(&r_long, &r_short, &shared.aux, &e))?.logit)
            })
            .collect()
    }

    /// Full path: recompute the long-term state from history, then score.
    pub fn predict(&self, params: &ParamSet, ctx: &UserContext, candidates: &[u32]) -> Result<Vec<f64>> {
        let long = self.long_state(params, ctx)?;
        Ok(self
            .score(params, ctx, &long, candidates)?
            .into_iter()
            .map(cagam::pctr)
            .collect())
    }

    pub fn prepare_request(&self, r: &RawRequest) -> Result<PreparedRequest> {
        Ok(PreparedRequest {
            ctx: self.user_context(r.user_id, r.request_time, &r.history)?,
            candidates: r.candidates.clone(),
            labels: r.labels.clone(),
        })
    }

    fn request_loss_grad(&self, params: &ParamSet, req: &PreparedRequest, grads: &mut Gradients) -> Result<f64> {
        let c = &self.cfg;
        let (d, d_g) = (c.d(), c.d_g());
        let (long, long_cache) = self.long_forward(params, &req.ctx)?;
        let shared = self.shared(params, &req.ctx, &long)?;
        let head = Head::from_params(params);
        let (wt, wsq, wc) = (
            params.value(cagam::ATT_T),
            params.value(cagam::SHORT_Q),
            params.value(cagam::CAND_W),
        );
        let item_table = params.value(igiem::ITEM_TABLE);

        let mut d_p = Matrix::zeros(c.top_k, d_g);
        let n_short = shared.short.len();
        let mut d_short_events = Matrix::zeros(n_short, d);
        let mut d_short_values = Matrix::zeros(n_short, d);
        let mut loss = 0.0;
        for (&cand, &label) in req.candidates.iter().zip(&req.labels) {
            let (row, e) = self.candidate_embedding(params, cand);
            let long_att = match &shared.keys {
                Some(k) => Some(cagam::attend_groups(k, &e, wt)?),
                None => None,
            };
            let r_long = long_att.as_ref().map_or_else(|| vec![0.0; d_g], |a| a.r_long.clone());
            let short_att = cagam::short_term_repr(&shared.short, &e, wsq);
            let hc = cagam::head_forward(&head, cagam::fuse(&r_long, &short_att.r_short, &shared.aux, &e))?;
            let y = label as f64;
            loss += bce_from_logit(hc.logit, y);
            let d_logit = sigmoid(hc.logit) - y;

            let dz = {
                let names = [cagam::HEAD_W1, cagam::HEAD_B1, cagam::HEAD_W2, cagam::HEAD_B2];
                let [mut w1, mut b1, mut w2, mut b2] =
                    names.map(|n| std::mem::replace(grads.get_mut(n), Matrix::zeros(0, 0)));
                let g = HeadGrads {
                    w1: &mut w1,
                    b1: &mut b1,
                    w2: &mut w2,
                    b2: &mut b2,
                };
                let dz = cagam::head_backward(&head, &hc, d_logit, g);
                for (n, m) in names.into_iter().zip([w1, b1, w2, b2]) {
                    *grads.get_mut(n) = m;
                }
                dz
            };
            let (d_rlong, rest) = dz.split_at(d_g);
            let (d_rshort, rest) = rest.split_at(d);
            let (d_aux, d_e_direct) = rest.split_at(c.d_user + c.d_hour);
            let mut de = d_e_direct.to_vec();
            if let (Some(k), Some(att)) = (&shared.keys, &long_att) {
                let mut g_wt = std::mem::replace(grads.get_mut(cagam::ATT_T), Matrix::zeros(0, 0));
                let de_long = cagam::attend_groups_backward(k, &e, wt, att, d_rlong, &mut d_p, &mut g_wt);
                *grads.get_mut(cagam::ATT_T) = g_wt;
                de.iter_mut().zip(&de_long).for_each(|(a, b)| *a += b);
            }
            {
                let mut g_wsq = std::mem::replace(grads.get_mut(cagam::SHORT_Q), Matrix::zeros(0, 0));
                let de_short = cagam::short_term_backward(
                    &shared.short,
                    &e,
                    wsq,
                    &short_att,
                    d_rshort,
                    &mut d_short_events,
                    &mut d_short_values,
                    &mut g_wsq,
                );
                *grads.get_mut(cagam::SHORT_Q) = g_wsq;
                de.iter_mut().zip(&de_short).for_each(|(a, b)| *a += b);
            }
            add_into_row(grads.get_mut(USER_TABLE), shared.user_row, 0, &d_aux[..c.d_user]);
            add_into_row(grads.get_mut(HOUR_TABLE), shared.hour, 0, &d_aux[c.d_user..]);
            // e = item_row · W_c + b_c
            outer_acc(item_table.row(row), &de, grads.get_mut(cagam::CAND_W));
            add_into_row(grads.get_mut(cagam::CAND_B), 0, 0, &de);
            let mut d_item = vec![0.0; c.d_item];
            vec_matt_acc(&de, wc, &mut d_item);
            add_into_row(grads.get_mut(igiem::ITEM_TABLE), row, 0, &d_item);
        }

        if n_short > 0 {
            grads
                .get_mut(cagam::SHORT_V)
                .add_assign(&shared.short.events.tmm(&d_short_values));
            d_short_events.add_assign(&d_short_values.mmt(params.value(cagam::SHORT_V)));
            igiem::embed_backward(&shared.short_idx, &d_short_events, c.embed_dims(), grads);
        }
        if shared.keys.is_some() {
            grads.get_mut(cagam::ATT_G).add_assign(&long.g_prime.tmm(&d_p));
            let d_gprime = d_p.mmt(params.value(cagam::ATT_G));
            self.long_backward(params, &req.ctx, &long_cache, &d_gprime, grads);
        }
        Ok(loss)
    }
}

impl CtrModel for Dmgin {
    type Prepared = PreparedRequest;

    fn prepare(&self, request: &RawRequest) -> Result<PreparedRequest> {
        self.prepare_request(request)
    }

    fn labels<'a>(&self, p: &'a PreparedRequest) -> &'a [u8] {
        &p.labels
    }

    fn user_id(&self, p: &PreparedRequest) -> u32 {
        p.ctx.user_id
    }

    fn logits(&self, params: &ParamSet, p: &PreparedRequest) -> Result<Vec<f64>> {
        let long = self.long_state(params, &p.ctx)?;
        self.score(params, &p.ctx, &long, &p.candidates)
    }

    fn loss_and_grad(&self, params: &ParamSet, p: &PreparedRequest, grads: &mut Gradients) -> Result<f64> {
        self.request_loss_grad(params, p, grads)
    }
}
