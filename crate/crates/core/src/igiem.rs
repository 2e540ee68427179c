//! Interest groups: reorganizing a lifelong sequence by cluster, group
//! statistics, behavior embeddings, intra-group self-attention with mean
//! pooling, recency-based top-k selection and the final group vector.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::behavior::{BehaviorEvent, Category, CategoryMap};
use crate::buckets::LogBuckets;
use crate::error::{Error, Result};
use crate::idecm::ClusterMap;
use crate::numeric::ops::{softmax_slice, softmax_slice_backward};
use crate::numeric::{outer_acc, vec_mat_acc, vec_matt_acc, Gradients, Matrix, ParamSet};

pub const ITEM_TABLE: &str = "emb.item";
pub const TIME_TABLE: &str = "emb.time";
pub const LOC_TABLE: &str = "emb.loc";
pub const BEH_TABLE: &str = "emb.beh";
pub const MHSA_Q: &str = "mhsa.wq";
pub const MHSA_K: &str = "mhsa.wk";
pub const MHSA_V: &str = "mhsa.wv";
pub const MHSA_O: &str = "mhsa.wo";
pub const STAT_W: &str = "stat.w";
pub const STAT_B: &str = "stat.b";

pub const STAT_FEATURES: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct InterestGroup {
    pub cluster_id: u32,
    /// Time-ascending; all of the group's events until [`InterestGroup::capped`].
    pub events: Vec<BehaviorEvent>,
    /// Latest timestamp over the full (pre-cap) group.
    pub max_timestamp: i64,
}

impl InterestGroup {
    /// The `cap` most recent events.
    pub fn capped(&self, cap: usize) -> &[BehaviorEvent] {
        &self.events[self.events.len().saturating_sub(cap)..]
    }
}

/// Splits a sequence into one group per touched cluster, ordered by cluster id.
/// Items missing from `clusters` fall into cluster 0.
pub fn group_sequence(events: &[BehaviorEvent], clusters: &ClusterMap) -> Vec<InterestGroup> {
    let mut by_cluster: BTreeMap<u32, Vec<BehaviorEvent>> = BTreeMap::new();
    for e in events {
        by_cluster.entry(clusters.cluster_of(e.item_id)).or_default().push(*e);
    }
    by_cluster
        .into_iter()
        .map(|(cluster_id, mut events)| {
            // stable: equal timestamps keep input order
            events.sort_by_key(|e| e.timestamp);
            let max_timestamp = events.last().map_or(i64::MIN, |e| e.timestamp);
            InterestGroup {
                cluster_id,
                events,
                max_timestamp,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatVector {
    /// Indexed by [`Category::index`].
    pub counts: [u64; 4],
    /// Seconds since the group's latest event.
    pub max_time: f64,
    /// Seconds since the group's mean event time.
    pub avg_time: f64,
    pub avg_price: f64,
}

impl StatVector {
    pub fn to_features(&self) -> [f64; STAT_FEATURES] {
        [
            self.counts[0] as f64,
            self.counts[1] as f64,
            self.counts[2] as f64,
            self.counts[3] as f64,
            self.max_time,
            self.avg_time,
            self.avg_price,
        ]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Category counts, recency of the latest and of the mean event, and mean
/// payment price, over the whole (uncapped) group.
pub fn compute_stats(group: &InterestGroup, now: i64, categories: &CategoryMap) -> Result<StatVector> {
    if group.events.is_empty() {
        return Err(Error::invalid(format!("group {} has no events", group.cluster_id)));
    }
    let mut counts = [0u64; 4];
    let mut price_sum = 0.0;
    let mut ts_sum = 0.0;
    for e in &group.events {
        let cat = categories.category(e.behavior);
        counts[cat.index()] += 1;
        if cat == Category::Payment {
            price_sum += e.price;
        }
        ts_sum += (now - e.timestamp) as f64;
    }
    let n = group.events.len() as f64;
    let paid = counts[Category::Payment.index()];
    Ok(StatVector {
        counts,
        max_time: ((now - group.max_timestamp) as f64).max(0.0),
        avg_time: (ts_sum / n).max(0.0),
        avg_price: if paid > 0 { price_sum / paid as f64 } else { 0.0 },
    })
}

/// Groups chosen for one request: at most `k`, ascending by max timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK<'a> {
    pub groups: Vec<&'a InterestGroup>,
    /// `k - groups.len()` trailing padding slots.
    pub padding: usize,
}

impl TopK<'_> {
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.groups.len()];
        m.resize(self.groups.len() + self.padding, false);
        m
    }
}

/// The `k` groups touched most recently (ties: lower cluster id wins),
/// re-sorted ascending by max timestamp.
pub fn topk_groups(groups: &[InterestGroup], k: usize) -> TopK<'_> {
    let mut order: Vec<&InterestGroup> = groups.iter().collect();
    order.sort_by(|a, b| {
        b.max_timestamp
            .cmp(&a.max_timestamp)
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    order.truncate(k);
    order.sort_by(|a, b| {
        a.max_timestamp
            .cmp(&b.max_timestamp)
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    TopK {
        padding: k - order.len(),
        groups: order,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedDims {
    pub item: usize,
    pub time: usize,
    pub loc: usize,
    pub beh: usize,
}

impl EmbedDims {
    pub fn total(&self) -> usize {
        self.item + self.time + self.loc + self.beh
    }
}

/// Table rows used by one event's embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventIndex {
    pub item: usize,
    pub time: usize,
    pub loc: usize,
    pub beh: usize,
}

fn clamp_row(id: usize, table: &Matrix) -> usize {
    if id < table.rows() {
        id
    } else {
        0
    }
}

/// Row lookups for an event seen at `now`; ids outside a table map to row 0.
pub fn event_index(e: &BehaviorEvent, now: i64, buckets: &LogBuckets, params: &ParamSet) -> EventIndex {
    EventIndex {
        item: clamp_row(e.item_id as usize, params.value(ITEM_TABLE)),
        time: clamp_row(buckets.bucket((now - e.timestamp) as f64), params.value(TIME_TABLE)),
        loc: clamp_row(e.location_id as usize, params.value(LOC_TABLE)),
        beh: clamp_row(e.behavior as usize, params.value(BEH_TABLE)),
    }
}

/// `e_b = [item, time bucket, location, behavior type]`.
pub fn behavior_embed(params: &ParamSet, idx: EventIndex) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(params.value(ITEM_TABLE).row(idx.item));
    out.extend_from_slice(params.value(TIME_TABLE).row(idx.time));
    out.extend_from_slice(params.value(LOC_TABLE).row(idx.loc));
    out.extend_from_slice(params.value(BEH_TABLE).row(idx.beh));
    out
}

pub fn embed_events(
    params: &ParamSet,
    events: &[BehaviorEvent],
    now: i64,
    buckets: &LogBuckets,
) -> (Matrix, Vec<EventIndex>) {
    let idx: Vec<EventIndex> = events.iter().map(|e| event_index(e, now, buckets, params)).collect();
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| behavior_embed(params, i)).collect();
    let d = params.value(ITEM_TABLE).cols()
        + params.value(TIME_TABLE).cols()
        + params.value(LOC_TABLE).cols()
        + params.value(BEH_TABLE).cols();
    let mut m = Matrix::zeros(rows.len(), d);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(r);
    }
    (m, idx)
}

/// Scatters embedding-row gradients back into the four tables.
pub fn embed_backward(idx: &[EventIndex], d_rows: &Matrix, dims: EmbedDims, grads: &mut Gradients) {
    let spans = [
        (ITEM_TABLE, 0, dims.item),
        (TIME_TABLE, dims.item, dims.time),
        (LOC_TABLE, dims.item + dims.time, dims.loc),
        (BEH_TABLE, dims.item + dims.time + dims.loc, dims.beh),
    ];
    for (r, ix) in idx.iter().enumerate() {
        let d = d_rows.row(r);
        for (table, (name, start, len)) in [ix.item, ix.time, ix.loc, ix.beh].into_iter().zip(spans) {
            let g = grads.get_mut(name).row_mut(table);
            for (o, v) in g.iter_mut().zip(&d[start..start + len]) {
                *o += v;
            }
        }
    }
}

pub struct MhsaWeights<'a> {
    pub wq: &'a Matrix,
    pub wk: &'a Matrix,
    pub wv: &'a Matrix,
    pub wo: &'a Matrix,
}

impl<'a> MhsaWeights<'a> {
    pub fn from_params(p: &'a ParamSet) -> Self {
        Self {
            wq: p.value(MHSA_Q),
            wk: p.value(MHSA_K),
            wv: p.value(MHSA_V),
            wo: p.value(MHSA_O),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MhsaCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    concat: Matrix,
    valid: Vec<bool>,
    n_valid: usize,
    heads: usize,
}

#[derive(Clone, Debug)]
pub struct MhsaGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub x: Matrix,
}

/// Multi-head self-attention over a group's behavior embeddings followed by
/// mean pooling over the valid rows.
///
/// Heads use column blocks of `W_Q`, `W_K`, `W_V` (width `d / h`) and share
/// the output projection `W_O`. Padded rows are masked as keys and left out
/// of the pool.
pub fn intra_group_mhsa(
    x: &Matrix,
    valid: &[bool],
    w: &MhsaWeights,
    heads: usize,
) -> Result<(Vec<f64>, MhsaCache)> {
    let (n, d) = x.shape();
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim("intra_group_mhsa", format!("{heads} heads do not divide d = {d}")));
    }
    if valid.len() != n {
        return Err(Error::dim("intra_group_mhsa", "one mask flag per row"));
    }
    if w.wq.shape() != (d, d) || w.wk.shape() != (d, d) || w.wv.shape() != (d, d) || w.wo.shape() != (d, d) {
        return Err(Error::dim("intra_group_mhsa", format!("projections must be {d}x{d}")));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::invalid("intra_group_mhsa: every row is padding"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.mm(w.wq);
    let k = x.mm(w.wk);
    let v = x.mm(w.wv);
    let mut concat = Matrix::zeros(n, d);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (q.col_block(h * dh, dh), k.col_block(h * dh, dh), v.col_block(h * dh, dh));
        let mut scores = qh.mmt(&kh);
        scores.scale(scale);
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            softmax_slice(scores.row(i), Some(valid), a.row_mut(i)).expect("at least one valid key");
        }
        concat.add_col_block(h * dh, &a.mm(&vh));
        attn.push(a);
    }
    let out = concat.mm(w.wo);
    let mut dyna = vec![0.0; d];
    for i in (0..n).filter(|&i| valid[i]) {
        for (p, o) in dyna.iter_mut().zip(out.row(i)) {
            *p += o;
        }
    }
    dyna.iter_mut().for_each(|p| *p /= n_valid as f64);
    Ok((
        dyna,
        MhsaCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            concat,
            valid: valid.to_vec(),
            n_valid,
            heads,
        },
    ))
}

pub fn intra_group_mhsa_backward(cache: &MhsaCache, w: &MhsaWeights, d_dyna: &[f64]) -> MhsaGrads {
    let (n, d) = cache.x.shape();
    let dh = d / cache.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_out = Matrix::zeros(n, d);
    for i in (0..n).filter(|&i| cache.valid[i]) {
        for (o, g) in d_out.row_mut(i).iter_mut().zip(d_dyna) {
            *o = g / cache.n_valid as f64;
        }
    }
    let g_wo = cache.concat.tmm(&d_out);
    let d_concat = d_out.mmt(w.wo);
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for h in 0..cache.heads {
        let a = &cache.attn[h];
        let d_oh = d_concat.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let da = d_oh.mmt(&vh);
        dv.add_col_block(h * dh, &a.tmm(&d_oh));
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            softmax_slice_backward(a.row(i), da.row(i), ds.row_mut(i));
        }
        ds.scale(scale);
        dq.add_col_block(h * dh, &ds.mm(&cache.k.col_block(h * dh, dh)));
        dk.add_col_block(h * dh, &ds.tmm(&cache.q.col_block(h * dh, dh)));
    }
    let mut dx = dq.mmt(w.wq);
    dx.add_assign(&dk.mmt(w.wk));
    dx.add_assign(&dv.mmt(w.wv));
    MhsaGrads {
        wq: cache.x.tmm(&dq),
        wk: cache.x.tmm(&dk),
        wv: cache.x.tmm(&dv),
        wo: g_wo,
        x: dx,
    }
}

/// Mean of the valid rows; stands in for self-attention when behavior
/// evolution is ablated.
pub fn masked_mean(x: &Matrix, valid: &[bool]) -> Result<Vec<f64>> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::invalid("masked_mean: every row is padding"));
    }
    let mut out = vec![0.0; x.cols()];
    for i in (0..x.rows()).filter(|&i| valid[i]) {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v / n_valid as f64;
        }
    }
    Ok(out)
}

pub fn masked_mean_backward(rows: usize, valid: &[bool], d_out: &[f64]) -> Matrix {
    let n_valid = valid.iter().filter(|&&v| v).count() as f64;
    let mut dx = Matrix::zeros(rows, d_out.len());
    for i in (0..rows).filter(|&i| valid[i]) {
        for (o, g) in dx.row_mut(i).iter_mut().zip(d_out) {
            *o = g / n_valid;
        }
    }
    dx
}

/// `log1p` of every statistic, the input of the stat projection.
pub fn stat_inputs(stats: &StatVector) -> [f64; STAT_FEATURES] {
    stats.to_features().map(f64::ln_1p)
}

/// `stat_emb = log1p(stat) · W_s + b_s`.
pub fn embed_stats(params: &ParamSet, stats: &StatVector) -> Vec<f64> {
    let mut out = params.value(STAT_B).row(0).to_vec();
    vec_mat_acc(&stat_inputs(stats), params.value(STAT_W), &mut out);
    out
}

pub fn embed_stats_backward(stats: &StatVector, d_emb: &[f64], grads: &mut Gradients) {
    outer_acc(&stat_inputs(stats), d_emb, grads.get_mut(STAT_W));
    for (b, g) in grads.get_mut(STAT_B).row_mut(0).iter_mut().zip(d_emb) {
        *b += g;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRepr {
    pub dyna: Vec<f64>,
    pub stat_emb: Vec<f64>,
}

impl GroupRepr {
    /// `g = [dyna, stat_emb]`.
    pub fn g(&self) -> Vec<f64> {
        let mut g = self.dyna.clone();
        g.extend_from_slice(&self.stat_emb);
        g
    }
}

pub fn group_repr(params: &ParamSet, dyna: Vec<f64>, stats: &StatVector) -> GroupRepr {
    GroupRepr {
        dyna,
        stat_emb: embed_stats(params, stats),
    }
}

/// Splits `dg` (gradient of `g`) into its `dyna` and `stat_emb` parts.
pub fn split_group_grad(dg: &[f64], d: usize) -> (&[f64], &[f64]) {
    dg.split_at(d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupingRow {
    pub user_id: u32,
    pub events: usize,
    pub groups: usize,
    pub compression: f64,
}

pub fn grouping_row(user_id: u32, events: &[BehaviorEvent], clusters: &ClusterMap) -> GroupingRow {
    let groups = group_sequence(events, clusters).len();
    GroupingRow {
        user_id,
        events: events.len(),
        groups,
        compression: events.len() as f64 / groups.max(1) as f64,
    }
}

/// Per-user `user_id,events,groups,compression` rows.
pub fn write_grouping_diagnostics(path: &Path, rows: &[GroupingRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "user_id,events,groups,compression")?;
    for r in rows {
        writeln!(w, "{},{},{},{:.4}", r.user_id, r.events, r.groups, r.compression)?;
    }
    w.flush()?;
    Ok(())
}

/// Helper for tests and oracles: `x · W` for one row.
pub fn project_row(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    vec_mat_acc(x, w, &mut out);
    out
}

/// Helper for backward passes: `dy · Wᵀ`.
pub fn project_row_back(dy: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    vec_matt_acc(dy, w, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::BehaviorRegistry;
    use crate::numeric::{seeded_rng, uniform_with_rng, xavier_with_rng};
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn ev(item: u32, behavior: u8, t: i64, price: f64) -> BehaviorEvent {
        BehaviorEvent {
            item_id: item,
            behavior,
            timestamp: t,
            location_id: 1,
            price,
        }
    }

    fn map(pairs: &[(u32, u32)]) -> ClusterMap {
        ClusterMap::new(pairs.iter().copied().collect::<HashMap<_, _>>(), 3)
    }

    fn cats() -> CategoryMap {
        CategoryMap::default_for(&BehaviorRegistry::default())
    }

    #[test]
    fn one_item_makes_one_group() {
        let events: Vec<_> = (0..10).map(|t| ev(7, 1, 100 + t, 0.0)).collect();
        let g = group_sequence(&events, &map(&[(7, 2)]));
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].events.len(), 10);
        assert_eq!(g[0].cluster_id, 2);
        assert_eq!(g[0].max_timestamp, 109);
    }

    #[test]
    fn three_clusters_conserve_events_and_unknowns_go_to_zero() {
        let m = map(&[(1, 1), (2, 2), (3, 3)]);
        let events: Vec<_> = (0..10).map(|t| ev(1 + (t % 3) as u32, 1, 50 - t, 0.0)).collect();
        let g = group_sequence(&events, &m);
        assert_eq!(g.len(), 3);
        assert_eq!(g.iter().map(|g| g.events.len()).sum::<usize>(), 10);
        for grp in &g {
            assert!(grp.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
        let g = group_sequence(&[ev(99, 1, 5, 0.0)], &m);
        assert_eq!(g[0].cluster_id, 0);
    }

    #[test]
    fn stats_single_click() {
        let g = group_sequence(&[ev(1, 1, 500, 0.0)], &map(&[(1, 1)]));
        let s = compute_stats(&g[0], 500, &cats()).unwrap();
        // weak slot holds the click
        assert_eq!(s.counts, [0, 1, 0, 0]);
        assert_eq!((s.max_time, s.avg_time, s.avg_price), (0.0, 0.0, 0.0));
    }

    #[test]
    fn stats_payment_average_and_mixed_counts() {
        let g = group_sequence(&[ev(1, 6, 10, 10.0), ev(1, 6, 20, 30.0)], &map(&[(1, 1)]));
        let s = compute_stats(&g[0], 40, &cats()).unwrap();
        assert_eq!(s.avg_price, 20.0);
        assert_eq!(s.counts[Category::Payment.index()], 2);
        assert_eq!(s.max_time, 20.0);
        assert_eq!(s.avg_time, 25.0);

        let events = [ev(1, 1, 1, 0.0), ev(1, 1, 2, 0.0), ev(1, 4, 3, 0.0), ev(1, 1, 4, 0.0)];
        let g = group_sequence(&events, &map(&[(1, 1)]));
        let s = compute_stats(&g[0], 10, &cats()).unwrap();
        let mut oracle = [0u64; 4];
        for e in &events {
            let slot = match e.behavior {
                4 | 5 => 0,
                1..=3 => 1,
                7 => 2,
                _ => 3,
            };
            oracle[slot] += 1;
        }
        assert_eq!(s.counts, oracle);
        let empty = InterestGroup {
            cluster_id: 1,
            events: vec![],
            max_timestamp: 0,
        };
        assert!(compute_stats(&empty, 10, &cats()).is_err());
    }

    #[test]
    fn topk_pads_and_matches_sort_oracle() {
        let mk = |c: u32, t: i64| InterestGroup {
            cluster_id: c,
            events: vec![ev(c, 1, t, 0.0)],
            max_timestamp: t,
        };
        let three = vec![mk(1, 30), mk(2, 10), mk(3, 20)];
        let t = topk_groups(&three, 5);
        assert_eq!(t.groups.len(), 3);
        assert_eq!(t.padding, 2);
        assert_eq!(t.valid_mask(), vec![true, true, true, false, false]);
        let ts: Vec<i64> = t.groups.iter().map(|g| g.max_timestamp).collect();
        assert_eq!(ts, vec![10, 20, 30]);
        assert_eq!(topk_groups(&three, 1).groups[0].cluster_id, 1);

        let mut rng = seeded_rng(4);
        use rand::Rng;
        for _ in 0..20 {
            let groups: Vec<_> = (1..=10).map(|c| mk(c, rng.random_range(0..6))).collect();
            let t = topk_groups(&groups, 4);
            let mut oracle: Vec<(i64, u32)> = groups.iter().map(|g| (-g.max_timestamp, g.cluster_id)).collect();
            oracle.sort();
            let mut want: Vec<(i64, u32)> = oracle[..4].iter().map(|&(t, c)| (-t, c)).collect();
            want.sort();
            let got: Vec<(i64, u32)> = t.groups.iter().map(|g| (g.max_timestamp, g.cluster_id)).collect();
            assert_eq!(got, want);
        }
    }

    fn tables() -> ParamSet {
        let mut rng = seeded_rng(1);
        let mut p = ParamSet::new();
        p.insert(ITEM_TABLE, uniform_with_rng(10, 4, 0.5, &mut rng));
        p.insert(TIME_TABLE, uniform_with_rng(8, 2, 0.5, &mut rng));
        p.insert(LOC_TABLE, uniform_with_rng(3, 1, 0.5, &mut rng));
        p.insert(BEH_TABLE, uniform_with_rng(8, 1, 0.5, &mut rng));
        p
    }

    #[test]
    fn behavior_embedding_layout_and_buckets() {
        let p = tables();
        let b = LogBuckets::new(std::f64::consts::LN_10, 8);
        let e = ev(3, 2, 1000, 0.0);
        let idx = event_index(&e, 1090, &b, &p);
        let v = behavior_embed(&p, idx);
        assert_eq!(v.len(), 8);
        assert_eq!(v, behavior_embed(&p, event_index(&e, 1090, &b, &p)));
        assert_eq!(&v[..4], p.value(ITEM_TABLE).row(3));
        assert_eq!(v[7], p.value(BEH_TABLE)[(2, 0)]);
        assert_ne!(idx.time, event_index(&e, 10_000, &b, &p).time);
        // out-of-range ids fall back to row 0
        let idx = event_index(&BehaviorEvent { location_id: 77, item_id: 500, ..e }, 1090, &b, &p);
        assert_eq!((idx.item, idx.loc), (0, 0));
    }

    fn random_weights(d: usize, seed: u64) -> [Matrix; 4] {
        let mut rng = seeded_rng(seed);
        [0; 4].map(|_| xavier_with_rng(d, d, &mut rng))
    }

    /// Independent per-head reading: explicit Q, K, V per head, softmax by
    /// exp/sum, concatenation, output projection, pooling.
    fn mhsa_oracle(x: &Matrix, valid: &[bool], w: &[Matrix; 4], heads: usize) -> Vec<f64> {
        let (n, d) = x.shape();
        let dh = d / heads;
        let mut pooled = vec![0.0; d];
        let mut n_valid = 0.0;
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            n_valid += 1.0;
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let proj = |m: &Matrix, r: usize, c: usize| -> f64 { (0..d).map(|t| x[(r, t)] * m[(t, h * dh + c)]).sum() };
                let mut weights = vec![0.0; n];
                for j in 0..n {
                    if valid[j] {
                        let s: f64 = (0..dh).map(|c| proj(&w[0], i, c) * proj(&w[1], j, c)).sum();
                        weights[j] = (s / (dh as f64).sqrt()).exp();
                    }
                }
                let z: f64 = weights.iter().sum();
                for c in 0..dh {
                    concat[h * dh + c] = (0..n).map(|j| weights[j] / z * proj(&w[2], j, c)).sum();
                }
            }
            for (c, p) in pooled.iter_mut().enumerate() {
                *p += (0..d).map(|t| concat[t] * w[3][(t, c)]).sum::<f64>();
            }
        }
        pooled.iter().map(|p| p / n_valid).collect()
    }

    fn weights_ref(w: &[Matrix; 4]) -> MhsaWeights<'_> {
        MhsaWeights {
            wq: &w[0],
            wk: &w[1],
            wv: &w[2],
            wo: &w[3],
        }
    }

    #[test]
    fn mhsa_matches_dense_oracle() {
        let mut rng = seeded_rng(8);
        for (trial, heads) in [1usize, 1, 2, 4].into_iter().enumerate() {
            let x = uniform_with_rng(3 + trial, 8, 1.0, &mut rng);
            let w = random_weights(8, trial as u64);
            let mut valid = vec![true; x.rows()];
            if trial == 3 {
                valid[1] = false;
            }
            let (dyna, _) = intra_group_mhsa(&x, &valid, &weights_ref(&w), heads).unwrap();
            let oracle = mhsa_oracle(&x, &valid, &w, heads);
            for (a, b) in dyna.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mhsa_single_event_is_value_then_output_projection() {
        let mut rng = seeded_rng(2);
        let x = uniform_with_rng(1, 4, 1.0, &mut rng);
        let w = random_weights(4, 5);
        let (dyna, _) = intra_group_mhsa(&x, &[true], &weights_ref(&w), 2).unwrap();
        let expect = x.mm(&w[2]).mm(&w[3]);
        for (a, b) in dyna.iter().zip(expect.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_rejects_bad_inputs() {
        let x = Matrix::zeros(2, 4);
        let w = random_weights(4, 1);
        assert!(intra_group_mhsa(&x, &[false, false], &weights_ref(&w), 2).is_err());
        assert!(intra_group_mhsa(&x, &[true, true], &weights_ref(&w), 3).is_err());
    }

    #[test]
    fn mhsa_backward_matches_finite_differences() {
        let mut rng = seeded_rng(13);
        let x = uniform_with_rng(4, 6, 1.0, &mut rng);
        let w = random_weights(6, 3);
        let valid = [true, true, false, true];
        let probe: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let loss = |x: &Matrix, w: &[Matrix; 4]| -> f64 {
            let (d, _) = intra_group_mhsa(x, &valid, &weights_ref(w), 2).unwrap();
            d.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = intra_group_mhsa(&x, &valid, &weights_ref(&w), 2).unwrap();
        let g = intra_group_mhsa_backward(&cache, &weights_ref(&w), &probe);
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..6 {
                let mut xp = x.clone();
                xp.data_mut()[r * 6 + c] += h;
                let mut xm = x.clone();
                xm.data_mut()[r * 6 + c] -= h;
                let num = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
                assert!((num - g.x[(r, c)]).abs() < 1e-7, "x[{r},{c}]");
            }
        }
        for (wi, analytic) in [&g.wq, &g.wk, &g.wv, &g.wo].into_iter().enumerate() {
            for e in 0..36 {
                let mut wp = w.clone();
                wp[wi].data_mut()[e] += h;
                let mut wm = w.clone();
                wm[wi].data_mut()[e] -= h;
                let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
                assert!((num - analytic.data()[e]).abs() < 1e-7, "w{wi}[{e}]");
            }
        }
    }

    #[test]
    fn stat_embedding_composition() {
        let mut rng = seeded_rng(6);
        let mut p = ParamSet::new();
        p.insert(STAT_W, uniform_with_rng(7, 3, 1.0, &mut rng));
        p.insert(STAT_B, uniform_with_rng(1, 3, 1.0, &mut rng));
        let zero = StatVector {
            counts: [0; 4],
            max_time: 0.0,
            avg_time: 0.0,
            avg_price: 0.0,
        };
        assert_eq!(embed_stats(&p, &zero), p.value(STAT_B).row(0).to_vec());
        let s = StatVector {
            counts: [3, 1, 0, 2],
            max_time: 60.0,
            avg_time: 3600.0,
            avg_price: 12.5,
        };
        let feats = [3.0f64, 1.0, 0.0, 2.0, 60.0, 3600.0, 12.5];
        let r = group_repr(&p, vec![0.5; 5], &s);
        for c in 0..3 {
            let oracle = p.value(STAT_B)[(0, c)] + (0..7).map(|i| feats[i].ln_1p() * p.value(STAT_W)[(i, c)]).sum::<f64>();
            assert!((r.stat_emb[c] - oracle).abs() < 1e-12);
        }
        assert_eq!(r.g().len(), 5 + 3);
    }

    proptest! {
        #[test]
        fn grouping_conserves_events(items in proptest::collection::vec((0u32..12, 1i64..1000), 0..200)) {
            let m = map(&[(1, 1), (2, 1), (3, 2), (4, 3), (5, 3), (6, 2)]);
            let events: Vec<_> = items.iter().map(|&(i, t)| ev(i, 1 + (t % 7) as u8, t, 0.0)).collect();
            let groups = group_sequence(&events, &m);
            prop_assert_eq!(groups.iter().map(|g| g.events.len()).sum::<usize>(), events.len());
            for g in &groups {
                prop_assert!(g.events.iter().all(|e| m.cluster_of(e.item_id) == g.cluster_id));
                let s = compute_stats(g, 2000, &cats()).unwrap();
                prop_assert_eq!(s.total() as usize, g.events.len());
                prop_assert!(s.avg_time >= s.max_time && s.max_time >= 0.0);
                prop_assert!(g.capped(4).len() <= 4);
            }
        }

        #[test]
        fn mhsa_is_row_permutation_invariant(seed in 0u64..500, n in 1usize..6) {
            let mut rng = seeded_rng(seed);
            let x = uniform_with_rng(n, 4, 1.0, &mut rng);
            let w = random_weights(4, seed + 1);
            let valid = vec![true; n];
            let (a, _) = intra_group_mhsa(&x, &valid, &weights_ref(&w), 2).unwrap();
            let rows: Vec<Vec<f64>> = (0..n).rev().map(|i| x.row(i).to_vec()).collect();
            let (b, _) = intra_group_mhsa(&Matrix::from_rows(&rows), &valid, &weights_ref(&w), 2).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
