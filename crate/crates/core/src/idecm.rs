//! K-means clustering of entity embeddings into interest clusters.
//!
//! k-means clusters are numbered `0..K`. When used as an item → group map
//! ([`ClusterMap`]) they are shifted to `1..=K`, keeping `0` for items the
//! clustering never saw.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{seeded_rng, Matrix, ParamSet, SeededRng};

pub const DEFAULT_IMBALANCE_THRESHOLD: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 50,
            seed: 11,
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Matrix,
    /// Cluster of each fitted row.
    pub labels: Vec<usize>,
    /// Entity id of each fitted row.
    pub entity_ids: Vec<u32>,
    pub inertia: f64,
    /// Inertia after every assignment step, first entry from the seeding.
    pub inertia_history: Vec<f64>,
    pub repairs: usize,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn assignment(&self) -> HashMap<u32, usize> {
        self.entity_ids.iter().copied().zip(self.labels.iter().copied()).collect()
    }

    pub fn cluster_map(&self) -> ClusterMap {
        ClusterMap::new(
            self.entity_ids
                .iter()
                .zip(&self.labels)
                .map(|(&e, &c)| (e, c as u32 + 1))
                .collect(),
            self.k(),
        )
    }

    pub fn save_centroids(&self, path: &Path) -> Result<()> {
        let mut p = ParamSet::new();
        p.insert("centroids", self.centroids.clone());
        p.save(path)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(x: &Matrix, centroids: &Matrix, labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for i in 0..x.rows() {
        let (c, d) = nearest(centroids, x.row(i));
        labels[i] = c;
        dists[i] = d;
        inertia += d;
    }
    inertia
}

fn sample_d2(d2: &[f64], rng: &mut SeededRng) -> Option<usize> {
    let total: f64 = d2.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut pick = None;
    for (i, &w) in d2.iter().enumerate() {
        if w > 0.0 {
            pick = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
    }
    pick
}

/// Greedy k-means++: each step draws `2 + ⌊ln K⌋` candidates by D² sampling
/// and keeps the one giving the lowest potential.
fn plus_plus_seed(x: &Matrix, k: usize, seed: u64) -> Matrix {
    let n = x.rows();
    let mut rng = seeded_rng(seed);
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let Some(cand) = sample_d2(&d2, &mut rng) else { break };
            let next: Vec<f64> = d2
                .iter()
                .enumerate()
                .map(|(i, &d)| d.min(sq_dist(x.row(i), x.row(cand))))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, next));
            }
        }
        match best {
            Some((_, cand, next)) => {
                chosen.push(cand);
                d2 = next;
            }
            None => {
                // every point coincides with a centre; take the first unused row
                chosen.push((0..n).find(|i| !chosen.contains(i)).unwrap_or(0));
            }
        }
    }
    let mut c = Matrix::zeros(k, x.cols());
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).copy_from_slice(x.row(i));
    }
    c
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops once no centroid moves more than `tol` (Euclidean) or after
/// `max_iters` updates. A cluster left empty by an assignment step is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans_fit(embeddings: &Matrix, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let (n, d) = embeddings.shape();
    let k = cfg.k;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs n >= K >= 1, got n = {n}, K = {k}")));
    }
    if !embeddings.is_finite() {
        return Err(Error::invalid("embeddings contain non-finite values"));
    }
    let mut centroids = plus_plus_seed(embeddings, k, cfg.seed);
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut history = vec![assign_all(embeddings, &centroids, &mut labels, &mut dists)];
    let mut repairs = 0;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(embeddings.row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (t, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *t = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken.push(far);
                next.row_mut(c).copy_from_slice(embeddings.row(far));
                repairs += 1;
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let inertia = assign_all(embeddings, &centroids, &mut labels, &mut dists);
        let prev = *history.last().unwrap();
        if inertia > prev + 1e-9 * prev.abs().max(1e-300) {
            return Err(Error::Invariant(format!(
                "Lloyd inertia increased at iteration {iterations}: {prev} -> {inertia}"
            )));
        }
        history.push(inertia);
        if shift < cfg.tol {
            break;
        }
    }
    Ok(ClusterModel {
        centroids,
        labels,
        entity_ids: (0..n as u32).collect(),
        inertia: *history.last().unwrap(),
        inertia_history: history,
        repairs,
        iterations,
    })
}

/// Fits on entity embeddings (one row per id in `entity_ids`).
pub fn fit_entities(entity_ids: &[u32], embeddings: &Matrix, cfg: &KMeansConfig) -> Result<ClusterModel> {
    if entity_ids.len() != embeddings.rows() {
        return Err(Error::dim("fit_entities", "one id per embedding row"));
    }
    let mut m = kmeans_fit(embeddings, cfg)?;
    m.entity_ids = entity_ids.to_vec();
    Ok(m)
}

/// Nearest centroid; ties go to the lowest cluster id.
pub fn assign(model: &ClusterModel, embedding: &[f64]) -> Result<usize> {
    if embedding.len() != model.centroids.cols() {
        return Err(Error::dim(
            "assign",
            format!("embedding has {} dims, centroids {}", embedding.len(), model.centroids.cols()),
        ));
    }
    Ok(nearest(&model.centroids, embedding).0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub sizes: Vec<usize>,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub cv: f64,
    pub empty: usize,
    pub threshold: f64,
    /// `max / mean > threshold`.
    pub imbalanced: bool,
}

pub fn balance_report(model: &ClusterModel, threshold: f64) -> BalanceReport {
    let mut sizes = vec![0usize; model.k()];
    for &l in &model.labels {
        sizes[l] += 1;
    }
    let k = sizes.len() as f64;
    let mean = model.labels.len() as f64 / k;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / k;
    let max = *sizes.iter().max().unwrap_or(&0);
    BalanceReport {
        min: *sizes.iter().min().unwrap_or(&0),
        max,
        mean,
        cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        empty: sizes.iter().filter(|&&s| s == 0).count(),
        threshold,
        imbalanced: mean > 0.0 && max as f64 / mean > threshold,
        sizes,
    }
}

/// Leading principal axes of a point cloud.
#[derive(Clone, Debug)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// `d × m`, columns are unit eigenvectors ordered by decreasing eigenvalue.
    pub axes: Matrix,
    pub eigenvalues: Vec<f64>,
    /// `n × m` projected coordinates.
    pub coords: Matrix,
}

pub fn pca_2d(x: &Matrix) -> Result<Projection> {
    pca(x, 2)
}

/// Projection onto the top `m` principal axes.
pub fn pca(x: &Matrix, m: usize) -> Result<Projection> {
    let (n, d) = x.shape();
    if n < 2 || m == 0 || d < m {
        return Err(Error::invalid(format!("PCA to {m} components needs 2+ points and {m}+ dimensions")));
    }
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix::zeros(d, m);
    for (col, &e) in order.iter().take(m).enumerate() {
        let v = eig.eigenvectors.column(e);
        // sign convention: the largest-magnitude component is positive
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            axes.data_mut()[r * m + col] = sign * v[r];
        }
    }
    let mut coords = Matrix::zeros(n, m);
    for i in 0..n {
        for c in 0..m {
            coords.data_mut()[i * m + c] = (0..d).map(|j| centred[(i, j)] * axes[(j, c)]).sum();
        }
    }
    Ok(Projection {
        mean,
        axes,
        eigenvalues: order[..m].iter().map(|&e| eig.eigenvalues[e]).collect(),
        coords,
    })
}

/// Writes `entity_id,x,y,cluster_id` rows (after a header) for visual review.
pub fn export_projection(model: &ClusterModel, embeddings: &Matrix, path: &Path) -> Result<Projection> {
    if embeddings.rows() != model.labels.len() {
        return Err(Error::dim("export_projection", "one embedding row per fitted entity"));
    }
    let proj = pca_2d(embeddings)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "entity_id,x,y,cluster_id")?;
    for i in 0..embeddings.rows() {
        let c = proj.coords.row(i);
        writeln!(w, "{},{:?},{:?},{}", model.entity_ids[i], c[0], c[1], model.labels[i])?;
    }
    w.flush()?;
    Ok(proj)
}

/// Item id → group cluster id. Known items map to `1..=K`, unknown ones to 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    map: HashMap<u32, u32>,
    k: usize,
}

pub const UNKNOWN_CLUSTER: u32 = 0;

impl ClusterMap {
    pub fn new(map: HashMap<u32, u32>, k: usize) -> Self {
        Self { map, k }
    }

    /// Number of real clusters; group ids range over `0..=k`.
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn cluster_of(&self, item_id: u32) -> u32 {
        self.map.get(&item_id).copied().unwrap_or(UNKNOWN_CLUSTER)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `entity_id<TAB>cluster_id` lines sorted by entity id.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<_> = self.map.iter().collect();
        rows.sort();
        let mut out = String::new();
        for (e, c) in rows {
            out.push_str(&format!("{e}\t{c}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut map = HashMap::new();
        let mut k = 0;
        for (i, line) in text.lines().enumerate() {
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let (e, c) = line.split_once('\t').ok_or_else(|| err("expected entity_id<TAB>cluster_id"))?;
            let e: u32 = e.parse().map_err(|_| err("bad entity id"))?;
            let c: u32 = c.parse().map_err(|_| err("bad cluster id"))?;
            if c == UNKNOWN_CLUSTER {
                return Err(err("cluster 0 is reserved for unknown items"));
            }
            if map.insert(e, c).is_some() {
                return Err(err("duplicate entity id"));
            }
            k = k.max(c as usize);
        }
        Ok(Self { map, k })
    }
}
