//! End-to-end runners: data → pretraining → clustering → training, with
//! multi-seed aggregation, ablations, the depth sweep and cache serving.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, PooledBaseline};
use crate::behavior::{BehaviorRegistry, CategoryMap};
use crate::cmrlm::{self, AlignmentReport, PretrainConfig, TowerConfig, TowerModel};
use crate::datagen::{generate_dataset, Dataset, GenConfig, Sample};
use crate::error::{Error, Result};
use crate::idecm::{self, ClusterMap, ClusterModel, KMeansConfig};
use crate::igiem;
use crate::model::{group_requests, CtrModel, Dmgin, ModelConfig, RawRequest, Vocab};
use crate::numeric::{Matrix, ParamSet};
use crate::trainer::{self, SeedSummary, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub tower: TowerConfig,
    pub pretrain: PretrainConfig,
    pub kmeans: KMeansConfig,
    pub model: ModelConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    /// Training seeds averaged over; the data seed stays fixed.
    pub seeds: Vec<u64>,
    /// Initialize item embeddings from a PCA of the pretrained entity embeddings.
    pub warm_start: bool,
    /// Per-component standard deviation of warm-started item embeddings.
    pub warm_start_scale: f64,
    /// When false every user shares one id embedding row.
    pub user_embeddings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            tower: TowerConfig::default(),
            pretrain: PretrainConfig::default(),
            kmeans: KMeansConfig::default(),
            model: ModelConfig::default(),
            baseline: BaselineConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            warm_start: true,
            warm_start_scale: 0.2,
            user_embeddings: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate(&BehaviorRegistry::default())?;
        self.model.validate()?;
        self.train.validate()?;
        if self.tower.d_txt != self.data.d_txt || self.tower.d_img != self.data.d_img {
            return Err(Error::invalid(format!(
                "tower input sizes ({}, {}) differ from the generated features ({}, {})",
                self.tower.d_txt, self.tower.d_img, self.data.d_txt, self.data.d_img
            )));
        }
        if self.kmeans.k == 0 || self.kmeans.k > self.data.n_entities {
            return Err(Error::invalid("kmeans.k must be in 1..=n_entities"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.warm_start && self.model.d_item > self.tower.d_emb {
            return Err(Error::invalid("warm start needs d_item <= tower d_emb"));
        }
        if !(self.warm_start_scale > 0.0) {
            return Err(Error::invalid("warm_start_scale must be positive"));
        }
        Ok(())
    }
}

/// Everything upstream of CTR training.
pub struct Prepared {
    pub dataset: Dataset,
    pub tower: TowerModel,
    pub alignment: AlignmentReport,
    pub entity_ids: Vec<u32>,
    pub embeddings: Matrix,
    pub clusters: ClusterModel,
    pub cluster_map: Arc<ClusterMap>,
}

pub fn pretrain_entities(data: &Dataset, cfg: &ExperimentConfig) -> Result<(TowerModel, AlignmentReport, Matrix)> {
    let (tower, _) = cmrlm::pretrain(&data.entities, cfg.tower.clone(), &cfg.pretrain)?;
    let alignment = cmrlm::alignment_report(&tower, &data.entities)?;
    let emb = tower.embed_all(&data.entities)?;
    Ok((tower, alignment, emb))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.data)?;
    let (tower, alignment, embeddings) = pretrain_entities(&dataset, cfg)?;
    let entity_ids: Vec<u32> = dataset.entities.iter().map(|p| p.entity_id).collect();
    let clusters = idecm::fit_entities(&entity_ids, &embeddings, &cfg.kmeans)?;
    let cluster_map = Arc::new(clusters.cluster_map());
    Ok(Prepared {
        dataset,
        tower,
        alignment,
        entity_ids,
        embeddings,
        clusters,
        cluster_map,
    })
}

/// Item rows from the top `d_item` principal components, each scaled to
/// standard deviation `scale`.
pub fn warm_start_rows(ids: &[u32], emb: &Matrix, d_item: usize, scale: f64) -> Result<Vec<(u32, Vec<f64>)>> {
    let proj = idecm::pca(emb, d_item)?;
    let n = emb.rows() as f64;
    let std: Vec<f64> = (0..d_item)
        .map(|c| {
            let ss: f64 = proj.coords.iter_rows().map(|r| r[c] * r[c]).sum();
            (ss / (n - 1.0)).sqrt().max(1e-12)
        })
        .collect();
    Ok(ids
        .iter()
        .zip(proj.coords.iter_rows())
        .map(|(&id, r)| (id, r.iter().zip(&std).map(|(v, s)| v / s * scale).collect()))
        .collect())
}

pub fn apply_warm_start(params: &mut ParamSet, table: &str, rows: &[(u32, Vec<f64>)]) -> Result<()> {
    let t = params.value_mut(table);
    for (id, r) in rows {
        let id = *id as usize;
        if id >= t.rows() || r.len() != t.cols() {
            return Err(Error::dim("apply_warm_start", format!("row {id} of width {}", r.len())));
        }
        t.row_mut(id).copy_from_slice(r);
    }
    Ok(())
}

/// Request-grouped splits and table sizes shared by every model trained on one dataset.
pub struct TrainingData {
    pub train: Vec<RawRequest>,
    pub test: Vec<RawRequest>,
    pub vocab: Vocab,
    pub warm: Option<Vec<(u32, Vec<f64>)>>,
    pub cluster_map: Arc<ClusterMap>,
    pub categories: CategoryMap,
}

impl TrainingData {
    pub fn from_prepared(p: &Prepared, cfg: &ExperimentConfig) -> Result<Self> {
        Self::build(
            &p.dataset.train,
            &p.dataset.test,
            &p.entity_ids,
            &p.embeddings,
            Arc::clone(&p.cluster_map),
            cfg,
        )
    }

    pub fn build(
        train: &[Sample],
        test: &[Sample],
        entity_ids: &[u32],
        embeddings: &Matrix,
        cluster_map: Arc<ClusterMap>,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let registry = BehaviorRegistry::default();
        let max_entity = entity_ids.iter().copied().max().unwrap_or(0) as usize;
        let mut vocab = Vocab::covering(train.iter().chain(test), max_entity, registry.len());
        if !cfg.user_embeddings {
            vocab.users = 1;
        }
        let warm = if cfg.warm_start {
            Some(warm_start_rows(entity_ids, embeddings, cfg.model.d_item, cfg.warm_start_scale)?)
        } else {
            None
        };
        Ok(Self {
            train: group_requests(train),
            test: group_requests(test),
            vocab,
            warm,
            cluster_map,
            categories: CategoryMap::default_for(&registry),
        })
    }
}

pub fn prepare_all<M: CtrModel>(model: &M, reqs: &[RawRequest]) -> Result<Vec<M::Prepared>> {
    reqs.iter().map(|r| model.prepare(r)).collect()
}

pub struct DmginRun {
    pub model: Dmgin,
    pub outcome: TrainOutcome,
}

pub fn train_dmgin(
    data: &TrainingData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    last_good: Option<&Path>,
) -> Result<DmginRun> {
    let model = Dmgin::new(model_cfg.clone(), Arc::clone(&data.cluster_map), data.categories.clone())?;
    let mut params = model.init_params(data.vocab, train_cfg.seed);
    if let Some(w) = &data.warm {
        apply_warm_start(&mut params, igiem::ITEM_TABLE, w)?;
    }
    let tr = prepare_all(&model, &data.train)?;
    let te = prepare_all(&model, &data.test)?;
    let outcome = trainer::train(&model, params, &tr, &te, train_cfg, last_good)?;
    Ok(DmginRun { model, outcome })
}

pub fn train_baseline(
    data: &TrainingData,
    cfg: &BaselineConfig,
    train_cfg: &TrainConfig,
    last_good: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = PooledBaseline::new(cfg.clone())?;
    let mut params = model.init_params(data.vocab, train_cfg.seed);
    if let Some(w) = &data.warm {
        if cfg.d_item == w.first().map_or(0, |r| r.1.len()) {
            apply_warm_start(&mut params, crate::baseline::ITEM, w)?;
        }
    }
    let tr = prepare_all(&model, &data.train)?;
    let te = prepare_all(&model, &data.test)?;
    trainer::train(&model, params, &tr, &te, train_cfg, last_good)
}

fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..train.clone() }
}

pub fn dmgin_seeds(label: &str, data: &TrainingData, model_cfg: &ModelConfig, cfg: &ExperimentConfig) -> Result<SeedSummary> {
    let (mut auc, mut gauc) = (Vec::new(), Vec::new());
    for &s in &cfg.seeds {
        let run = train_dmgin(data, model_cfg, &seeded(&cfg.train, s), None)?;
        auc.push(run.outcome.report.auc);
        gauc.push(run.outcome.report.gauc);
    }
    Ok(SeedSummary::new(label, cfg.seeds.clone(), auc, gauc))
}

pub fn baseline_seeds(data: &TrainingData, cfg: &ExperimentConfig) -> Result<SeedSummary> {
    let (mut auc, mut gauc) = (Vec::new(), Vec::new());
    for &s in &cfg.seeds {
        let out = train_baseline(data, &cfg.baseline, &seeded(&cfg.train, s), None)?;
        auc.push(out.report.auc);
        gauc.push(out.report.gauc);
    }
    Ok(SeedSummary::new("pooled_baseline", cfg.seeds.clone(), auc, gauc))
}

/// Rows `full`, `-stats`, `-behavior-evolution`.
pub fn ablation(data: &TrainingData, cfg: &ExperimentConfig) -> Result<Vec<SeedSummary>> {
    let base = ModelConfig {
        disable_stats: false,
        disable_behavior_evolution: false,
        ..cfg.model.clone()
    };
    let variants = [
        ("full", base.clone()),
        (
            "-stats",
            ModelConfig {
                disable_stats: true,
                ..base.clone()
            },
        ),
        (
            "-behavior-evolution",
            ModelConfig {
                disable_behavior_evolution: true,
                ..base
            },
        ),
    ];
    variants.iter().map(|(l, m)| dmgin_seeds(l, data, m, cfg)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub layers: usize,
    pub summary: SeedSummary,
}

pub fn depth_sweep(data: &TrainingData, cfg: &ExperimentConfig, layers: &[usize]) -> Result<Vec<DepthRow>> {
    layers
        .iter()
        .map(|&n| {
            let m = ModelConfig {
                layers: n,
                ..cfg.model.clone()
            };
            Ok(DepthRow {
                layers: n,
                summary: dmgin_seeds(&format!("layers={n}"), data, &m, cfg)?,
            })
        })
        .collect()
}

pub fn depth_csv(rows: &[DepthRow]) -> String {
    let mut s = String::from("layers,auc,gauc,auc_std,gauc_std\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layers, r.summary.auc_mean, r.summary.gauc_mean, r.summary.auc_std, r.summary.gauc_std
        ));
    }
    s
}

/// Wall time of scoring `candidates` for one user by full recompute and from
/// a precomputed state, best of `repeats`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServeTiming {
    pub candidates: usize,
    pub full_seconds: f64,
    pub cached_seconds: f64,
    pub max_abs_diff: f64,
}

impl ServeTiming {
    pub fn ratio(&self) -> f64 {
        self.cached_seconds / self.full_seconds
    }
}

pub fn time_serving(
    model: &Dmgin,
    params: &ParamSet,
    cache: &crate::cache::CacheReader,
    user_id: u32,
    request_time: i64,
    history: &[crate::behavior::BehaviorEvent],
    candidates: &[u32],
    repeats: usize,
) -> Result<ServeTiming> {
    let (mut full_best, mut cached_best) = (f64::INFINITY, f64::INFINITY);
    let (mut full, mut cached) = (Vec::new(), Vec::new());
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let ctx = model.user_context(user_id, request_time, history)?;
        full = model.predict(params, &ctx, candidates)?;
        full_best = full_best.min(t.elapsed().as_secs_f64());

        let t = Instant::now();
        let short_start = history.len().saturating_sub(model.cfg.n_short);
        let request = crate::model::UserContext {
            user_id,
            request_time,
            groups: Vec::new(),
            short: history[short_start..].to_vec(),
        };
        let rec = cache
            .lookup(user_id)?
            .ok_or_else(|| Error::invalid(format!("user {user_id} is not cached")))?;
        cached = model
            .score(params, &request, &rec.long, candidates)?
            .into_iter()
            .map(crate::cagam::pctr)
            .collect();
        cached_best = cached_best.min(t.elapsed().as_secs_f64());
    }
    let max_abs_diff = full.iter().zip(&cached).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(ServeTiming {
        candidates: candidates.len(),
        full_seconds: full_best,
        cached_seconds: cached_best,
        max_abs_diff,
    })
}
