use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dmgin_core::baseline::PooledBaseline;
use dmgin_core::behavior::{BehaviorRegistry, CategoryMap};
use dmgin_core::cache::{self, CacheReader};
use dmgin_core::cmrlm::{self, ModalityPair};
use dmgin_core::datagen::{self, DatasetPaths, Sample};
use dmgin_core::experiment::{self, TrainingData};
use dmgin_core::idecm::{self, ClusterMap};
use dmgin_core::igiem;
use dmgin_core::metrics;
use dmgin_core::model::{group_requests, Dmgin, RawRequest, UserContext};
use dmgin_core::numeric::{Matrix, ParamSet};
use dmgin_core::trainer;
use dmgin_core::Error as CoreError;

use crate::config::{self, ConfigError, RunConfig};
use crate::{Common, ModelKind};

pub enum Failure {
    Config(String),
    Dependency(String),
    Invariant(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Dependency(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config: {m}"),
            Failure::Dependency(m) => write!(f, "missing dependency: {m}"),
            Failure::Invariant(m) => write!(f, "invariant violated: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidInput(_) => Failure::Config(msg),
            CoreError::Invariant(_)
            | CoreError::NonDeterministic { .. }
            | CoreError::Diverged { .. }
            | CoreError::StaleCache { .. }
            | CoreError::CacheCorrupt(_)
            | CoreError::FullyMasked { .. } => Failure::Invariant(msg),
            _ => Failure::Other(msg),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Artifacts of one run directory.
struct Run {
    dir: PathBuf,
    cfg: RunConfig,
}

impl Run {
    fn open(common: &Common, stage: &str) -> Result<Self> {
        let cfg = config::load(common.config.as_deref(), &common.overrides)?;
        cfg.experiment().validate()?;
        let dir = common.run_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.resolved"), cfg.to_toml())?;
        let run = Self { dir, cfg };
        run.log(stage, "start")?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn data(&self) -> DatasetPaths {
        DatasetPaths::new(&self.path("data"))
    }

    fn log(&self, stage: &str, msg: &str) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path("log.txt"))?;
        writeln!(f, "[{stage}] {msg}")?;
        println!("[{stage}] {msg}");
        Ok(())
    }

    fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Failure::Dependency(format!(
                "{} not found; run `dmgin {producer}` for this run directory first",
                path.display()
            )))
        }
    }

    fn samples(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let d = self.data();
        self.require(&d.train, "gen-data")?;
        self.require(&d.test, "gen-data")?;
        Ok((datagen::load_samples(&d.train)?, datagen::load_samples(&d.test)?))
    }

    fn entities(&self) -> Result<Vec<ModalityPair>> {
        let p = self.data().entities;
        self.require(&p, "gen-data")?;
        Ok(datagen::read_entities(&p)?)
    }

    fn embeddings(&self) -> Result<(Vec<u32>, Matrix)> {
        let p = self.path("entity_embeddings.tsv");
        self.require(&p, "pretrain")?;
        read_embeddings(&p)
    }

    fn cluster_map(&self) -> Result<Arc<ClusterMap>> {
        let p = self.path("clusters.tsv");
        self.require(&p, "cluster")?;
        Ok(Arc::new(ClusterMap::load(&p)?))
    }

    fn training_data(&self) -> Result<TrainingData> {
        let (train, test) = self.samples()?;
        let (ids, emb) = self.embeddings()?;
        let map = self.cluster_map()?;
        Ok(TrainingData::build(&train, &test, &ids, &emb, map, &self.cfg.experiment())?)
    }

    fn dmgin(&self, map: Arc<ClusterMap>) -> Result<Dmgin> {
        Ok(Dmgin::new(
            self.cfg.model.clone(),
            map,
            CategoryMap::default_for(&BehaviorRegistry::default()),
        )?)
    }

    fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        match kind {
            ModelKind::Dmgin => self.path("model.ckpt"),
            ModelKind::Baseline => self.path("baseline.ckpt"),
        }
    }
}

fn write_kv_csv(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_embeddings(path: &Path, ids: &[u32], emb: &Matrix) -> Result<()> {
    let mut s = String::new();
    for (id, row) in ids.iter().zip(emb.iter_rows()) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{id}\t{}\n", vals.join(",")));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<(Vec<u32>, Matrix)> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, msg: &str| {
        Failure::from(CoreError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        })
    };
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let (id, vals) = line.split_once('\t').ok_or_else(|| bad(i + 1, "expected id<TAB>values"))?;
        ids.push(id.parse().map_err(|_| bad(i + 1, "bad entity id"))?);
        let row: std::result::Result<Vec<f64>, _> = vals.split(',').map(str::parse).collect();
        rows.push(row.map_err(|_| bad(i + 1, "bad value"))?);
    }
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(bad(0, "empty file or ragged rows"));
    }
    Ok((ids, Matrix::from_rows(&rows)))
}

pub fn gen_data(c: &Common) -> Result<()> {
    let run = Run::open(c, "gen-data")?;
    let ds = datagen::generate_dataset(&run.cfg.data)?;
    let files = datagen::write_dataset(&run.path("data"), &ds)?;
    write_kv_csv(
        &run.path("gen_metrics.csv"),
        &[
            ("train_samples", ds.train.len().to_string()),
            ("test_samples", ds.test.len().to_string()),
            ("entities", ds.entities.len().to_string()),
            ("bayes_auc", ds.ground_truth.bayes_auc.to_string()),
        ],
    )?;
    run.log("gen-data", &format!("wrote {} files, {} train / {} test samples", files.len(), ds.train.len(), ds.test.len()))
}

pub fn pretrain(c: &Common) -> Result<()> {
    let run = Run::open(c, "pretrain")?;
    let entities = run.entities()?;
    let (tower, log) = cmrlm::pretrain(&entities, run.cfg.tower.clone(), &run.cfg.pretrain)?;
    let report = cmrlm::alignment_report(&tower, &entities)?;
    let emb = tower.embed_all(&entities)?;
    let ids: Vec<u32> = entities.iter().map(|p| p.entity_id).collect();
    tower.params.save(&run.path("tower.ckpt"))?;
    write_embeddings(&run.path("entity_embeddings.tsv"), &ids, &emb)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in log.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(run.path("pretrain_metrics.csv"), csv)?;
    write_kv_csv(
        &run.path("alignment.csv"),
        &[
            ("matched_cosine", report.matched_cosine.to_string()),
            ("mismatched_cosine", report.mismatched_cosine.to_string()),
            ("retrieval_top1", report.retrieval_top1.to_string()),
        ],
    )?;
    run.log(
        "pretrain",
        &format!(
            "matched {:.4} mismatched {:.4} top1 {:.3}",
            report.matched_cosine, report.mismatched_cosine, report.retrieval_top1
        ),
    )
}

pub fn cluster(c: &Common) -> Result<()> {
    let run = Run::open(c, "cluster")?;
    let (ids, emb) = run.embeddings()?;
    let model = idecm::fit_entities(&ids, &emb, &run.cfg.kmeans)?;
    let map = model.cluster_map();
    map.save(&run.path("clusters.tsv"))?;
    model.save_centroids(&run.path("centroids.ckpt"))?;
    let balance = idecm::balance_report(&model, idecm::DEFAULT_IMBALANCE_THRESHOLD);
    write_json(&run.path("balance.json"), &balance)?;
    idecm::export_projection(&model, &emb, &run.path("projection.csv"))?;
    let mut csv = String::from("iteration,inertia\n");
    for (i, v) in model.inertia_history.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(run.path("cluster_metrics.csv"), csv)?;
    if run.data().train.exists() {
        let (train, _) = run.samples()?;
        let mut latest: BTreeMap<u32, &Sample> = BTreeMap::new();
        for s in &train {
            latest.insert(s.user_id, s);
        }
        let rows: Vec<_> = latest
            .values()
            .map(|s| igiem::grouping_row(s.user_id, &s.history, &map))
            .collect();
        igiem::write_grouping_diagnostics(&run.path("grouping.csv"), &rows)?;
    }
    if balance.imbalanced {
        run.log("cluster", "warning: cluster sizes exceed the imbalance threshold")?;
    }
    run.log(
        "cluster",
        &format!("k = {}, inertia {:.4}, {} iterations", model.k(), model.inertia, model.iterations),
    )
}

pub fn train(c: &Common, kind: ModelKind) -> Result<()> {
    let run = Run::open(c, "train")?;
    let data = run.training_data()?;
    let last_good = run.path("last_good.ckpt");
    let (params, report, prefix) = match kind {
        ModelKind::Dmgin => {
            let r = experiment::train_dmgin(&data, &run.cfg.model, &run.cfg.train, Some(&last_good))?;
            (r.outcome.params, r.outcome.report, "")
        }
        ModelKind::Baseline => {
            let o = experiment::train_baseline(&data, &run.cfg.baseline, &run.cfg.train, Some(&last_good))?;
            (o.params, o.report, "baseline_")
        }
    };
    params.save(&run.checkpoint(kind))?;
    std::fs::write(run.path(&format!("{prefix}metrics.csv")), trainer::metrics_csv(&report))?;
    write_json(&run.path(&format!("{prefix}report.json")), &report)?;
    run.log("train", &format!("{kind:?}: test auc {:.4} gauc {:.4}", report.auc, report.gauc))
}

pub fn eval(c: &Common, kind: ModelKind) -> Result<()> {
    let run = Run::open(c, "eval")?;
    let ckpt = run.checkpoint(kind);
    run.require(&ckpt, "train")?;
    let params = ParamSet::load(&ckpt)?;
    let data = run.training_data()?;
    let m = match kind {
        ModelKind::Dmgin => {
            let model = run.dmgin(Arc::clone(&data.cluster_map))?;
            model.check_params(&params)?;
            let te = experiment::prepare_all(&model, &data.test)?;
            trainer::evaluate(&model, &params, &te)?
        }
        ModelKind::Baseline => {
            let model = PooledBaseline::new(run.cfg.baseline.clone())?;
            let te = experiment::prepare_all(&model, &data.test)?;
            trainer::evaluate(&model, &params, &te)?
        }
    };
    let prefix = if kind == ModelKind::Dmgin { "" } else { "baseline_" };
    write_kv_csv(
        &run.path(&format!("{prefix}eval_metrics.csv")),
        &[
            ("loss", m.loss.to_string()),
            ("auc", m.auc.to_string()),
            ("gauc", m.gauc.to_string()),
            ("samples", m.samples.to_string()),
        ],
    )?;
    run.log("eval", &format!("{kind:?}: auc {:.4} gauc {:.4} loss {:.4}", m.auc, m.gauc, m.loss))
}

pub fn ablate(c: &Common) -> Result<()> {
    let run = Run::open(c, "ablate")?;
    let data = run.training_data()?;
    let rows = experiment::ablation(&data, &run.cfg.experiment())?;
    std::fs::write(run.path("ablation.csv"), trainer::summary_csv(&rows))?;
    for r in &rows {
        run.log("ablate", &format!("{}: auc {:.4} ± {:.4}", r.label, r.auc_mean, r.auc_std))?;
    }
    Ok(())
}

pub fn parse_layers(text: &str) -> std::result::Result<Vec<usize>, String> {
    let err = || format!("bad layer list {text:?}; use a..b or a,b,c");
    let out: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?);
        if a == 0 || b < a {
            return Err(err());
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|x| x.trim().parse().map_err(|_| err()))
            .collect::<std::result::Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(err());
    }
    Ok(out)
}

pub fn depth_sweep(c: &Common, layers: &str) -> Result<()> {
    let layers = parse_layers(layers).map_err(Failure::Config)?;
    let run = Run::open(c, "depth-sweep")?;
    let data = run.training_data()?;
    let rows = experiment::depth_sweep(&data, &run.cfg.experiment(), &layers)?;
    std::fs::write(run.path("depth.csv"), experiment::depth_csv(&rows))?;
    for r in &rows {
        run.log("depth-sweep", &format!("N = {}: auc {:.4}", r.layers, r.summary.auc_mean))?;
    }
    Ok(())
}

/// First test request of each user, in user order.
fn first_test_requests(test: &[Sample]) -> Vec<RawRequest> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out: Vec<RawRequest> = group_requests(test)
        .into_iter()
        .filter(|r| seen.insert(r.user_id))
        .collect();
    out.sort_by_key(|r| r.user_id);
    out
}

fn snapshots(model: &Dmgin, reqs: &[RawRequest]) -> Result<Vec<UserContext>> {
    reqs.iter()
        .map(|r| Ok(model.user_context(r.user_id, r.request_time, &r.history)?))
        .collect()
}

pub fn precompute(c: &Common) -> Result<()> {
    let run = Run::open(c, "precompute")?;
    let ckpt = run.checkpoint(ModelKind::Dmgin);
    run.require(&ckpt, "train")?;
    let params = ParamSet::load(&ckpt)?;
    let model = run.dmgin(run.cluster_map()?)?;
    model.check_params(&params)?;
    let (_, test) = run.samples()?;
    let users = snapshots(&model, &first_test_requests(&test))?;
    let header = cache::precompute_all(&model, &params, &users, &run.path("cache.dmgc"))?;
    write_kv_csv(
        &run.path("precompute_metrics.csv"),
        &[
            ("users", header.count.to_string()),
            ("record_bytes", header.record_len().to_string()),
            ("model_hash", header.hash_hex()),
        ],
    )?;
    run.log("precompute", &format!("cached {} users", header.count))
}

pub fn serve_eval(c: &Common) -> Result<()> {
    let run = Run::open(c, "serve-eval")?;
    let cache_path = run.path("cache.dmgc");
    run.require(&cache_path, "precompute")?;
    let ckpt = run.checkpoint(ModelKind::Dmgin);
    run.require(&ckpt, "train")?;
    let params = ParamSet::load(&ckpt)?;
    let model = run.dmgin(run.cluster_map()?)?;
    model.check_params(&params)?;
    let reader = CacheReader::open(&cache_path)?;
    reader.check_model(&model.model_hash(&params))?;
    let (_, test) = run.samples()?;
    let reqs = first_test_requests(&test);
    let ctxs = snapshots(&model, &reqs)?;

    let (mut served, mut labels, mut users) = (Vec::new(), Vec::new(), Vec::new());
    let mut max_diff: f64 = 0.0;
    let mut hits = 0usize;
    for (r, ctx) in reqs.iter().zip(&ctxs) {
        let (p, src) = cache::serve_predict(&reader, &model, &params, ctx, ctx, &r.candidates)?;
        let full = model.predict(&params, ctx, &r.candidates)?;
        max_diff = p.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(max_diff, f64::max);
        hits += usize::from(src == cache::ServeSource::Cache);
        served.extend(p);
        labels.extend_from_slice(&r.labels);
        users.extend(std::iter::repeat_n(r.user_id, r.labels.len()));
    }
    if max_diff > 1e-5 {
        return Err(Failure::Invariant(format!("cached and full pCTR differ by {max_diff:e} > 1e-5")));
    }
    let auc = metrics::auc(&served, &labels).map_or(f64::NAN, |a| a);
    let gauc = metrics::gauc(&users, &served, &labels).map_or(f64::NAN, |a| a);

    // latency on the user with the longest history
    let (r, _) = reqs
        .iter()
        .zip(&ctxs)
        .max_by_key(|(r, _)| (r.history.len(), std::cmp::Reverse(r.user_id)))
        .ok_or_else(|| Failure::Other("no test requests".into()))?;
    let n_items = run.cfg.data.n_entities as u32;
    let candidates: Vec<u32> = (0..run.cfg.serve.candidates as u32).map(|i| i % n_items + 1).collect();
    let timing = experiment::time_serving(
        &model,
        &params,
        &reader,
        r.user_id,
        r.request_time,
        &r.history,
        &candidates,
        run.cfg.serve.repeats,
    )?;
    write_kv_csv(
        &run.path("serve_metrics.csv"),
        &[
            ("requests", reqs.len().to_string()),
            ("cache_hits", hits.to_string()),
            ("max_abs_pctr_diff", max_diff.to_string()),
            ("auc", auc.to_string()),
            ("gauc", gauc.to_string()),
        ],
    )?;
    write_json(&run.path("serve_timing.json"), &timing)?;
    run.log(
        "serve-eval",
        &format!(
            "{hits}/{} cache hits, max |Δp| {max_diff:.2e}, {} candidates: full {:.2} ms, cached {:.2} ms (ratio {:.3})",
            reqs.len(),
            timing.candidates,
            timing.full_seconds * 1e3,
            timing.cached_seconds * 1e3,
            timing.ratio()
        ),
    )
}

pub fn cache_inspect(c: &Common, user: Option<u32>, path: Option<PathBuf>) -> Result<()> {
    let path = path.unwrap_or_else(|| c.run_dir().join("cache.dmgc"));
    if !path.exists() {
        return Err(Failure::Dependency(format!(
            "{} not found; run `dmgin precompute` first",
            path.display()
        )));
    }
    let reader = CacheReader::open(&path)?;
    print!("{}", cache::inspect(&reader, user)?);
    Ok(())
}
