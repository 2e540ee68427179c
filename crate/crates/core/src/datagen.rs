//! Synthetic lifelong behavior data with a planted, recoverable interest
//! structure, plus the JSON-lines dataset format.
//!
//! Every entity belongs to one of `C` semantic archetypes. Its modality pair
//! is a pair of noisy random projections of a latent vector drawn around the
//! archetype centroid, so contrastive pretraining followed by k-means should
//! recover the archetypes. Each user favors a few archetypes and one of them
//! is the user's *top* archetype; a candidate from the top archetype is
//! clicked with probability `p_hi`, any other candidate with `p_lo`. Because
//! the label depends only on that one bit, the Bayes-optimal AUC has a closed
//! form (see [`bayes_auc`]).
//!
//! # Dataset files
//!
//! `train.jsonl` / `test.jsonl` hold one [`Sample`] per line:
//!
//! ```text
//! {"user_id":3,"request_time":1631234567,"candidate":17,"label":1,
//!  "history":[[item_id,behavior,timestamp,location_id,price],...]}
//! ```
//!
//! * `user_id` (u32), `request_time` (i64, seconds), `candidate` (u32 entity id),
//!   `label` (0 or 1)
//! * `history`: the user's events strictly before `request_time`, ascending by
//!   timestamp. `behavior` is the 1-based code in the behavior registry.
//!
//! Unknown fields are rejected. Samples that share `(user_id, request_time)`
//! are candidates of one request and appear on consecutive lines.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::behavior::{BehaviorEvent, BehaviorRegistry, Category, CategoryMap};
use crate::cmrlm::ModalityPair;
use crate::error::{Error, Result};
use crate::numeric::{seeded_rng, Matrix, SeededRng};

pub const EPOCH_BASE: i64 = 1_600_000_000;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Top-level keys of one JSONL sample line.
pub const SAMPLE_FIELDS: [&str; 5] = ["user_id", "request_time", "candidate", "label", "history"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// The top archetype is the one the user interacts with most.
    Frequency,
    /// Favored archetypes get equal traffic; in the top archetype the
    /// strong-interest events are the *latest* ones, in the others the
    /// *earliest*. Counts and marginal time/type distributions match, so
    /// only the joint (behavior type × recency) pattern identifies it.
    Evolution,
    /// Labels ignore the candidate: pure noise at rate `p_lo`.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_entities: usize,
    pub n_archetypes: usize,
    /// Inclusive range of lifelong events per user.
    pub events_per_user: [usize; 2],
    pub favored_archetypes: usize,
    /// Traffic weights of the favored archetypes, top first (frequency signal).
    pub favored_weights: Vec<f64>,
    /// Zipf exponent for re-visiting the same entities inside an archetype.
    pub repeat_concentration: f64,
    /// Share of events drawn from a uniformly random archetype.
    pub noise_rate: f64,
    pub n_locations: usize,
    /// Sampling weights over the behavior registry (frequency signal and noise events).
    pub behavior_weights: Vec<f64>,
    pub signal: SignalKind,
    /// Top-archetype events only occur in this leading fraction of the history span.
    pub top_cutoff_fraction: f64,
    /// All favored-archetype events only occur in this leading fraction.
    pub favored_cutoff_fraction: f64,
    /// Share of strong-interest events per favored group (evolution signal).
    pub strong_fraction: f64,
    pub history_days: f64,
    /// Requests fall in the last `request_window_days`; the final
    /// `test_days` of it form the test split.
    pub request_window_days: f64,
    pub test_days: f64,
    pub train_requests: usize,
    pub test_requests: usize,
    pub candidates_per_request: usize,
    pub p_hi: f64,
    pub p_lo: f64,
    pub candidate_top_share: f64,
    pub candidate_favored_share: f64,
    pub d_latent: usize,
    pub d_txt: usize,
    pub d_img: usize,
    pub archetype_scale: f64,
    pub entity_noise: f64,
    pub modality_noise: f64,
    /// Generation fails if some user has fewer than this many events per
    /// distinct entity.
    pub min_repeat_ratio: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 40,
            n_entities: 80,
            n_archetypes: 8,
            events_per_user: [300, 500],
            favored_archetypes: 3,
            favored_weights: vec![0.6, 0.25, 0.15],
            repeat_concentration: 1.2,
            noise_rate: 0.1,
            n_locations: 16,
            behavior_weights: vec![0.45, 0.15, 0.12, 0.1, 0.06, 0.08, 0.04],
            signal: SignalKind::Frequency,
            top_cutoff_fraction: 1.0,
            favored_cutoff_fraction: 1.0,
            strong_fraction: 0.5,
            history_days: 365.0,
            request_window_days: 10.0,
            test_days: 2.0,
            train_requests: 6,
            test_requests: 2,
            candidates_per_request: 8,
            p_hi: 0.8,
            p_lo: 0.1,
            candidate_top_share: 0.4,
            candidate_favored_share: 0.3,
            d_latent: 16,
            d_txt: 24,
            d_img: 32,
            archetype_scale: 1.0,
            entity_noise: 0.35,
            modality_noise: 0.05,
            min_repeat_ratio: 1.5,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, registry: &BehaviorRegistry) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("generator config: {m}")));
        if self.n_users == 0 || self.n_entities == 0 || self.n_archetypes == 0 {
            return fail("counts must be positive");
        }
        if self.n_entities < self.n_archetypes {
            return fail("n_entities must be at least n_archetypes");
        }
        if self.events_per_user[0] == 0 || self.events_per_user[0] > self.events_per_user[1] {
            return fail("events_per_user must be a non-empty positive range");
        }
        if self.favored_archetypes == 0 || self.favored_archetypes > self.n_archetypes {
            return fail("favored_archetypes must be in 1..=n_archetypes");
        }
        if self.signal == SignalKind::Frequency && self.favored_weights.len() != self.favored_archetypes {
            return fail("favored_weights needs one weight per favored archetype");
        }
        if self.behavior_weights.len() != registry.len() {
            return fail("behavior_weights needs one weight per registered behavior");
        }
        for p in [self.p_hi, self.p_lo, self.noise_rate, self.strong_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return fail("probabilities must lie in [0, 1]");
            }
        }
        for f in [self.top_cutoff_fraction, self.favored_cutoff_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return fail("cutoff fractions must lie in (0, 1]");
            }
        }
        if self.candidate_top_share + self.candidate_favored_share > 1.0 {
            return fail("candidate shares exceed 1");
        }
        if !(self.test_days > 0.0 && self.test_days < self.request_window_days)
            || self.request_window_days >= self.history_days
        {
            return fail("need 0 < test_days < request_window_days < history_days");
        }
        if self.n_locations == 0 || self.candidates_per_request == 0 {
            return fail("n_locations and candidates_per_request must be positive");
        }
        Ok(())
    }

    fn span_seconds(&self) -> f64 {
        self.history_days * SECONDS_PER_DAY
    }

    pub fn end_time(&self) -> i64 {
        EPOCH_BASE + self.span_seconds() as i64
    }

    /// First instant of the test split; every train request is earlier.
    pub fn split_time(&self) -> i64 {
        self.end_time() - (self.test_days * SECONDS_PER_DAY) as i64
    }
}

/// Closed-form AUC of the Bayes scorer when the label depends only on whether
/// the candidate comes from the user's top archetype.
///
/// With `q` the share of top-archetype candidates, a random positive is a
/// top-archetype candidate with probability `a = q·p_hi / (q·p_hi + (1-q)·p_lo)`
/// and a random negative with `b = q(1-p_hi) / (q(1-p_hi) + (1-q)(1-p_lo))`.
/// The Bayes score has two levels, so `AUC = a(1-b) + ½(ab + (1-a)(1-b))`.
pub fn bayes_auc(p_hi: f64, p_lo: f64, q_top: f64) -> f64 {
    let pos = q_top * p_hi + (1.0 - q_top) * p_lo;
    let neg = q_top * (1.0 - p_hi) + (1.0 - q_top) * (1.0 - p_lo);
    if pos <= 0.0 || neg <= 0.0 {
        return 0.5;
    }
    let a = q_top * p_hi / pos;
    let b = q_top * (1.0 - p_hi) / neg;
    a * (1.0 - b) + 0.5 * (a * b + (1.0 - a) * (1.0 - b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub user_id: u32,
    pub request_time: i64,
    pub candidate: u32,
    pub label: u8,
    pub history: Arc<Vec<BehaviorEvent>>,
}

impl Sample {
    /// The `n` most recent history events.
    pub fn short_history(&self, n: usize) -> &[BehaviorEvent] {
        let h = self.history.as_slice();
        &h[h.len().saturating_sub(n)..]
    }

    /// Hour of day of the request, the context half of the auxiliary features.
    pub fn hour_of_day(&self) -> usize {
        hour_of_day(self.request_time)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label {} is not 0 or 1", self.label));
        }
        let mut prev = i64::MIN;
        for e in self.history.iter() {
            if e.timestamp >= self.request_time {
                return Err(format!(
                    "history event at {} is not before request_time {}",
                    e.timestamp, self.request_time
                ));
            }
            if e.timestamp < prev {
                return Err("history is not sorted by timestamp".into());
            }
            if e.timestamp <= 0 || !(e.price >= 0.0) {
                return Err("invalid event timestamp or price".into());
            }
            prev = e.timestamp;
        }
        Ok(())
    }
}

pub fn hour_of_day(t: i64) -> usize {
    (t.rem_euclid(86_400) / 3600) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bayes_auc: f64,
    pub p_hi: f64,
    pub p_lo: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct UserProfile {
    pub user_id: u32,
    /// Favored archetypes, top first.
    pub favored: Vec<usize>,
    pub top: usize,
    pub locations: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub entities: Vec<ModalityPair>,
    /// Archetype of entity `id` at index `id - 1`.
    pub archetype_of: Vec<usize>,
    pub users: Vec<UserProfile>,
    pub ground_truth: GroundTruth,
    /// Full event stream per user (index `user_id - 1`).
    pub streams: Vec<Arc<Vec<BehaviorEvent>>>,
}

impl Dataset {
    pub fn archetype(&self, entity_id: u32) -> usize {
        self.archetype_of[entity_id as usize - 1]
    }
}

struct Generator<'a> {
    cfg: &'a GenConfig,
    categories: CategoryMap,
    strong_codes: Vec<u8>,
    weak_codes: Vec<u8>,
    by_archetype: Vec<Vec<u32>>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a GenConfig, registry: &BehaviorRegistry) -> Self {
        let categories = CategoryMap::default_for(registry);
        let codes = |cat: Category| -> Vec<u8> {
            (1..=registry.len() as u8)
                .filter(|&c| categories.category(c) == cat)
                .collect()
        };
        let strong_codes = codes(Category::Strong);
        let weak_codes = codes(Category::Weak);
        let mut by_archetype = vec![Vec::new(); cfg.n_archetypes];
        for id in 1..=cfg.n_entities as u32 {
            by_archetype[entity_archetype(cfg, id)].push(id);
        }
        Self {
            cfg,
            categories,
            strong_codes,
            weak_codes,
            by_archetype,
        }
    }

    fn sample_behavior(&self, rng: &mut SeededRng) -> u8 {
        let total: f64 = self.cfg.behavior_weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in self.cfg.behavior_weights.iter().enumerate() {
            if u < *w {
                return i as u8 + 1;
            }
            u -= w;
        }
        self.cfg.behavior_weights.len() as u8
    }

    fn price_for(&self, behavior: u8, rng: &mut SeededRng) -> f64 {
        if self.categories.category(behavior) == Category::Payment {
            (rng.random_range(5.0..60.0f64) * 100.0).round() / 100.0
        } else {
            0.0
        }
    }

    fn profile(&self, user_id: u32, rng: &mut SeededRng) -> UserProfile {
        let mut archetypes: Vec<usize> = (0..self.cfg.n_archetypes).collect();
        archetypes.shuffle(rng);
        let favored: Vec<usize> = archetypes[..self.cfg.favored_archetypes].to_vec();
        let locations = (0..3)
            .map(|_| rng.random_range(1..=self.cfg.n_locations as u32))
            .collect();
        UserProfile {
            user_id,
            top: favored[0],
            favored,
            locations,
        }
    }

    fn stream(&self, profile: &UserProfile, rng: &mut SeededRng) -> Result<Vec<BehaviorEvent>> {
        let cfg = self.cfg;
        let n_events = rng.random_range(cfg.events_per_user[0]..=cfg.events_per_user[1]);
        let span = cfg.span_seconds();
        let top_cut = cfg.top_cutoff_fraction * span;
        let fav_cut = cfg.favored_cutoff_fraction * span;

        // per-user preference order over each archetype's entities
        let prefs: Vec<Vec<u32>> = self
            .by_archetype
            .iter()
            .map(|ids| {
                let mut v = ids.clone();
                v.shuffle(rng);
                v
            })
            .collect();
        let weights: Vec<f64> = match cfg.signal {
            SignalKind::Frequency => cfg.favored_weights.clone(),
            _ => vec![1.0; profile.favored.len()],
        };
        let wsum: f64 = weights.iter().sum();
        let unfavored: Vec<usize> = (0..cfg.n_archetypes)
            .filter(|a| !profile.favored.contains(a))
            .collect();

        let mut raw: Vec<(f64, usize)> = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            let offset = rng.random::<f64>() * span;
            let noisy = rng.random::<f64>() < cfg.noise_rate;
            let archetype = if noisy || offset >= fav_cut {
                // evolution data keeps favored archetypes out of the noise and the tail
                match cfg.signal {
                    SignalKind::Evolution if !unfavored.is_empty() => *unfavored.choose(rng).unwrap(),
                    _ => rng.random_range(0..cfg.n_archetypes),
                }
            } else {
                let mut u = rng.random::<f64>() * wsum;
                let mut pick = profile.favored.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                profile.favored[pick]
            };
            // the top archetype never shows up past its cutoff
            let archetype = if archetype == profile.top && offset >= top_cut {
                let others: Vec<usize> = (0..cfg.n_archetypes).filter(|&a| a != profile.top).collect();
                if others.is_empty() {
                    archetype
                } else {
                    *others.choose(rng).unwrap()
                }
            } else {
                archetype
            };
            raw.push((offset, archetype));
        }
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut events = Vec::with_capacity(n_events);
        for &(offset, archetype) in &raw {
            let pool = &prefs[archetype];
            let zipf = Zipf::new(pool.len() as f64, cfg.repeat_concentration)
                .map_err(|e| Error::invalid(format!("zipf: {e}")))?;
            let rank = zipf.sample(rng) as usize;
            let item_id = pool[rank.clamp(1, pool.len()) - 1];
            let behavior = self.sample_behavior(rng);
            events.push(BehaviorEvent {
                item_id,
                behavior,
                timestamp: EPOCH_BASE + offset as i64 + 1,
                location_id: *profile.locations.choose(rng).unwrap(),
                price: 0.0,
            });
        }

        if cfg.signal == SignalKind::Evolution {
            self.plant_evolution(profile, &raw, &mut events, rng);
        }
        for e in &mut events {
            e.price = self.price_for(e.behavior, rng);
        }
        Ok(events)
    }

    /// Rewrites behavior types of favored events: strong interest concentrates
    /// at the end of the top archetype's timeline and at the start of the others'.
    fn plant_evolution(
        &self,
        profile: &UserProfile,
        raw: &[(f64, usize)],
        events: &mut [BehaviorEvent],
        rng: &mut SeededRng,
    ) {
        for &a in &profile.favored {
            let idx: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].1 == a).collect();
            let n_strong = (idx.len() as f64 * self.cfg.strong_fraction).round() as usize;
            for (pos, &i) in idx.iter().enumerate() {
                let strong = if a == profile.top {
                    pos >= idx.len() - n_strong
                } else {
                    pos < n_strong
                };
                let pool = if strong { &self.strong_codes } else { &self.weak_codes };
                events[i].behavior = *pool.choose(rng).unwrap();
            }
        }
    }

    fn candidate(&self, profile: &UserProfile, rng: &mut SeededRng) -> (u32, bool) {
        let cfg = self.cfg;
        let u = rng.random::<f64>();
        let archetype = if u < cfg.candidate_top_share {
            profile.top
        } else if u < cfg.candidate_top_share + cfg.candidate_favored_share && profile.favored.len() > 1 {
            *profile.favored[1..].choose(rng).unwrap()
        } else {
            let rest: Vec<usize> = (0..cfg.n_archetypes)
                .filter(|a| !profile.favored.contains(a))
                .collect();
            match rest.choose(rng) {
                Some(&a) => a,
                None => *profile.favored.choose(rng).unwrap(),
            }
        };
        let id = *self.by_archetype[archetype].choose(rng).unwrap();
        (id, archetype == profile.top)
    }

    fn label(&self, is_top: bool, rng: &mut SeededRng) -> u8 {
        let p = match self.cfg.signal {
            SignalKind::None => self.cfg.p_lo,
            _ if is_top => self.cfg.p_hi,
            _ => self.cfg.p_lo,
        };
        u8::from(rng.random::<f64>() < p)
    }
}

/// Entity ids are `1..=n_entities`, assigned to archetypes round-robin.
pub fn entity_archetype(cfg: &GenConfig, entity_id: u32) -> usize {
    (entity_id as usize - 1) % cfg.n_archetypes
}

/// Modality pairs for every entity: noisy projections of an archetype-centred latent.
pub fn generate_entities(cfg: &GenConfig, rng: &mut SeededRng) -> Vec<ModalityPair> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let gauss = |rng: &mut SeededRng, rows: usize, cols: usize, scale: f64| {
        let data = (0..rows * cols).map(|_| normal.sample(rng) * scale).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    };
    let centroids = gauss(rng, cfg.n_archetypes, cfg.d_latent, cfg.archetype_scale);
    let proj_scale = 1.0 / (cfg.d_latent as f64).sqrt();
    let m_txt = gauss(rng, cfg.d_latent, cfg.d_txt, proj_scale);
    let m_img = gauss(rng, cfg.d_latent, cfg.d_img, proj_scale);
    (1..=cfg.n_entities as u32)
        .map(|id| {
            let a = entity_archetype(cfg, id);
            let z: Vec<f64> = centroids
                .row(a)
                .iter()
                .map(|c| c + normal.sample(rng) * cfg.entity_noise)
                .collect();
            let zm = Matrix::row_vector(&z);
            let mut text = zm.mm(&m_txt).into_vec();
            let mut image = zm.mm(&m_img).into_vec();
            text.iter_mut().for_each(|v| *v += normal.sample(rng) * cfg.modality_noise);
            image.iter_mut().for_each(|v| *v += normal.sample(rng) * cfg.modality_noise);
            ModalityPair {
                entity_id: id,
                text_features: text,
                image_features: image,
            }
        })
        .collect()
}

/// A single user's lifelong stream, without requests; used for grouping
/// diagnostics at full history length.
pub fn generate_user_stream(cfg: &GenConfig, user_id: u32) -> Result<(UserProfile, Vec<BehaviorEvent>)> {
    let registry = BehaviorRegistry::default();
    cfg.validate(&registry)?;
    let generator = Generator::new(cfg, &registry);
    let mut rng = seeded_rng(cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(user_id as u64 + 1)));
    let profile = generator.profile(user_id, &mut rng);
    let events = generator.stream(&profile, &mut rng)?;
    Ok((profile, events))
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    let registry = BehaviorRegistry::default();
    cfg.validate(&registry)?;
    let generator = Generator::new(cfg, &registry);
    let mut rng = seeded_rng(cfg.seed);
    let entities = generate_entities(cfg, &mut rng);
    let archetype_of = (1..=cfg.n_entities as u32)
        .map(|id| entity_archetype(cfg, id))
        .collect();

    let end = cfg.end_time();
    let split = cfg.split_time();
    let window_start = end - (cfg.request_window_days * SECONDS_PER_DAY) as i64;

    let mut users = Vec::with_capacity(cfg.n_users);
    let mut streams = Vec::with_capacity(cfg.n_users);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 1..=cfg.n_users as u32 {
        let (profile, events) = generate_user_stream(cfg, u)?;
        let distinct: HashSet<u32> = events.iter().map(|e| e.item_id).collect();
        let ratio = events.len() as f64 / distinct.len().max(1) as f64;
        if ratio < cfg.min_repeat_ratio {
            return Err(Error::invalid(format!(
                "user {u}: {} events over {} distinct entities (ratio {ratio:.2} < {})",
                events.len(),
                distinct.len(),
                cfg.min_repeat_ratio
            )));
        }
        let events = Arc::new(events);
        let mut times: Vec<(i64, bool)> = Vec::with_capacity(cfg.train_requests + cfg.test_requests);
        for _ in 0..cfg.train_requests {
            times.push((rng.random_range(window_start..split), false));
        }
        for _ in 0..cfg.test_requests {
            times.push((rng.random_range(split + 1..end), true));
        }
        times.sort();
        for (t, is_test) in times {
            let cut = events.partition_point(|e| e.timestamp < t);
            let history = Arc::new(events[..cut].to_vec());
            for _ in 0..cfg.candidates_per_request {
                let (candidate, is_top) = generator.candidate(&profile, &mut rng);
                let sample = Sample {
                    user_id: u,
                    request_time: t,
                    candidate,
                    label: generator.label(is_top, &mut rng),
                    history: Arc::clone(&history),
                };
                if is_test {
                    test.push(sample);
                } else {
                    train.push(sample);
                }
            }
        }
        users.push(profile);
        streams.push(events);
    }
    let q_top = cfg.candidate_top_share;
    let bayes = match cfg.signal {
        SignalKind::None => 0.5,
        _ => bayes_auc(cfg.p_hi, cfg.p_lo, q_top),
    };
    Ok(Dataset {
        train,
        test,
        entities,
        archetype_of,
        users,
        ground_truth: GroundTruth {
            bayes_auc: bayes,
            p_hi: cfg.p_hi,
            p_lo: cfg.p_lo,
            seed: cfg.seed,
        },
        streams,
    })
}

pub fn sample_to_line(sample: &Sample) -> String {
    serde_json::to_string(sample).expect("samples always serialize")
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        w.write_all(sample_to_line(s).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Streaming reader over a JSONL sample file. Errors carry the 1-based line.
pub struct SampleReader<R> {
    inner: R,
    path: PathBuf,
    line: usize,
    buf: String,
}

impl SampleReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(BufReader::new(File::open(path)?), path))
    }
}

impl<R: BufRead> SampleReader<R> {
    pub fn new(inner: R, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
            line: 0,
            buf: String::new(),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }
}

impl<R: BufRead> Iterator for SampleReader<R> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.buf.clear();
        match self.inner.read_line(&mut self.buf) {
            Ok(0) => None,
            Ok(_) => {
                self.line += 1;
                if !self.buf.ends_with('\n') {
                    return Some(Err(self.err("truncated line (missing newline)")));
                }
                let text = self.buf.trim_end();
                let sample: Sample = match serde_json::from_str(text) {
                    Ok(s) => s,
                    Err(e) => return Some(Err(self.err(e.to_string()))),
                };
                if let Err(msg) = sample.validate() {
                    return Some(Err(self.err(msg)));
                }
                Some(Ok(sample))
            }
            Err(e) => Some(Err(e.into())),
        }
    }
}

/// Loads every sample, sharing one history allocation across consecutive
/// candidates of the same request.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut out: Vec<Sample> = Vec::new();
    for s in SampleReader::open(path)? {
        let mut s = s?;
        if let Some(prev) = out.last() {
            if prev.user_id == s.user_id && prev.request_time == s.request_time && prev.history == s.history {
                s.history = Arc::clone(&prev.history);
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_entities(path: &Path, entities: &[ModalityPair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    for e in entities {
        writeln!(w, "{}\t{}\t{}", e.entity_id, join(&e.text_features), join(&e.image_features))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_entities(path: &Path) -> Result<Vec<ModalityPair>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", parts.len())));
        }
        let id = parts[0].parse().map_err(|e| err(format!("entity id: {e}")))?;
        let floats = |s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .map(|x| x.parse::<f64>().map_err(|e| err(format!("feature {x:?}: {e}"))))
                .collect()
        };
        out.push(ModalityPair {
            entity_id: id,
            text_features: floats(parts[1])?,
            image_features: floats(parts[2])?,
        });
    }
    Ok(out)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    std::fs::write(
        path,
        format!("bayes_auc,p_hi,p_lo,seed\n{:?},{:?},{:?},{}\n", gt.bayes_auc, gt.p_hi, gt.p_lo, gt.seed),
    )?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some("bayes_auc,p_hi,p_lo,seed") {
        return Err(err(1, "expected header bayes_auc,p_hi,p_lo,seed"));
    }
    let row = lines.next().ok_or_else(|| err(2, "missing values row"))?;
    let f: Vec<&str> = row.split(',').collect();
    if f.len() != 4 {
        return Err(err(2, "expected 4 values"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| err(2, "bad number"));
    Ok(GroundTruth {
        bayes_auc: num(f[0])?,
        p_hi: num(f[1])?,
        p_lo: num(f[2])?,
        seed: f[3].parse().map_err(|_| err(2, "bad seed"))?,
    })
}

/// Writes the dataset's files into `dir`; returns the written paths.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths = DatasetPaths::new(dir);
    write_samples(&paths.train, &data.train)?;
    write_samples(&paths.test, &data.test)?;
    write_entities(&paths.entities, &data.entities)?;
    write_ground_truth(&paths.ground_truth, &data.ground_truth)?;
    let mut arch = String::new();
    for (i, a) in data.archetype_of.iter().enumerate() {
        arch.push_str(&format!("{}\t{a}\n", i + 1));
    }
    std::fs::write(&paths.archetypes, arch)?;
    Ok(vec![paths.train, paths.test, paths.entities, paths.ground_truth, paths.archetypes])
}

#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub entities: PathBuf,
    pub ground_truth: PathBuf,
    pub archetypes: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            train: dir.join("train.jsonl"),
            test: dir.join("test.jsonl"),
            entities: dir.join("entities.tsv"),
            ground_truth: dir.join("ground_truth.csv"),
            archetypes: dir.join("entity_archetypes.tsv"),
        }
    }
}
