//! A synthetic e-commerce search world with known click probabilities.
//!
//! Users carry latent category preferences and price sensitivity, queries
//! carry a category intent, items carry category, price and quality. The
//! click probability is a logistic function of these, so the Bayes-optimal
//! scorer is available exactly.

use crate::encoder::{
    BehaviorToken, ContextFeatures, Engagement, GateFeatures, QueryFeatures, SideInfo, UserFeatures,
};
use crate::error::{arg_err, Error, Result};
use crate::metrics::{self, MetricReport, Scored};
use crate::numerics::{sigmoid, Rng};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const FORMAT_TAG: &str = "diffrank-synth-v1";

const WORLD_STREAM: u64 = 0xFFFF_FFFF;
const BASE_TIME: i64 = 1_700_000_000;
const KEYWORD_STRIDE: u32 = 1000;
const GENERIC_KEYWORDS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClickWeights {
    pub pref: f64,
    pub query: f64,
    pub quality: f64,
    pub price: f64,
    pub demo: f64,
    pub scene: f64,
    pub bias: f64,
    pub temperature: f64,
}

impl Default for ClickWeights {
    fn default() -> Self {
        Self {
            pref: 0.6,
            query: 1.5,
            quality: 0.6,
            price: 0.8,
            demo: 0.3,
            scene: 0.3,
            bias: -1.6,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurchaseWeights {
    pub quality: f64,
    pub price: f64,
    pub bias: f64,
}

impl Default for PurchaseWeights {
    fn default() -> Self {
        Self {
            quality: 0.8,
            price: 1.0,
            bias: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_sellers: usize,
    pub queries_per_category: usize,
    pub keywords_per_category: usize,
    pub keywords_per_query: usize,
    pub n_age_buckets: usize,
    pub n_genders: usize,
    pub n_locations: usize,
    pub n_scenes: usize,
    pub n_clients: usize,
    /// Dirichlet concentration of user preferences.
    pub pref_concentration: f64,
    /// Log-normal spread of item prices around 1.
    pub price_sigma: f64,
    pub click: ClickWeights,
    pub purchase: PurchaseWeights,
    pub history_len: usize,
    pub n_candidates: usize,
    /// Share of candidates drawn from the query's category.
    pub query_candidate_frac: f64,
    /// Probability that a query intent follows the user's preference.
    pub query_from_pref: f64,
    /// Probability of keeping a non-clicked impression in the history.
    pub keep_impression: f64,
    /// Probability that predicted age or gender is replaced by a random value.
    pub demo_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 2000,
            n_categories: 12,
            n_sellers: 100,
            queries_per_category: 4,
            keywords_per_category: 6,
            keywords_per_query: 3,
            n_age_buckets: 6,
            n_genders: 2,
            n_locations: 8,
            n_scenes: 4,
            n_clients: 3,
            pref_concentration: 0.3,
            price_sigma: 0.5,
            click: ClickWeights::default(),
            purchase: PurchaseWeights::default(),
            history_len: 32,
            n_candidates: 8,
            query_candidate_frac: 0.5,
            query_from_pref: 0.5,
            keep_impression: 0.25,
            demo_noise: 0.2,
        }
    }
}

/// Named world presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Default,
    /// Query intent dominates the click logit.
    QueryDominant,
    /// As `QueryDominant` but with the query weight set to zero.
    ZeroQuery,
    /// Demographic and scene effects dominate.
    Demographic,
}

impl Regime {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::Default),
            "query-dominant" => Ok(Self::QueryDominant),
            "zero-query" => Ok(Self::ZeroQuery),
            "demographic" => Ok(Self::Demographic),
            other => arg_err(format!("unknown world regime '{other}'")),
        }
    }
}

impl WorldConfig {
    pub fn regime(r: Regime) -> Self {
        let base = Self::default();
        let query_dom = ClickWeights {
            pref: 0.3,
            query: 3.0,
            quality: 0.4,
            price: 0.4,
            demo: 0.0,
            scene: 0.0,
            bias: -2.0,
            temperature: 1.0,
        };
        match r {
            Regime::Default => base,
            Regime::QueryDominant => Self {
                click: query_dom,
                ..base
            },
            Regime::ZeroQuery => Self {
                click: ClickWeights {
                    query: 0.0,
                    bias: -1.2,
                    ..query_dom
                },
                ..base
            },
            Regime::Demographic => Self {
                click: ClickWeights {
                    pref: 0.3,
                    query: 0.5,
                    quality: 0.3,
                    price: 0.3,
                    demo: 1.5,
                    scene: 1.5,
                    bias: -1.5,
                    temperature: 1.0,
                },
                demo_noise: 0.8,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("n_sellers", self.n_sellers),
            ("queries_per_category", self.queries_per_category),
            ("keywords_per_category", self.keywords_per_category),
            ("keywords_per_query", self.keywords_per_query),
            ("n_age_buckets", self.n_age_buckets),
            ("n_genders", self.n_genders),
            ("n_locations", self.n_locations),
            ("n_scenes", self.n_scenes),
            ("n_clients", self.n_clients),
            ("history_len", self.history_len),
            ("n_candidates", self.n_candidates),
        ];
        for (k, v) in positive {
            if v == 0 {
                return arg_err(format!("{k} must be positive"));
            }
        }
        if self.keywords_per_query > self.keywords_per_category {
            return arg_err("keywords_per_query exceeds keywords_per_category");
        }
        if self.n_categories as u64 * KEYWORD_STRIDE as u64 > u32::MAX as u64 {
            return arg_err("n_categories too large");
        }
        let probs = [
            ("query_candidate_frac", self.query_candidate_frac),
            ("query_from_pref", self.query_from_pref),
            ("keep_impression", self.keep_impression),
            ("demo_noise", self.demo_noise),
        ];
        for (k, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return arg_err(format!("{k} must lie in [0, 1]"));
            }
        }
        if !(self.pref_concentration > 0.0) || !(self.price_sigma >= 0.0) {
            return arg_err("pref_concentration must be > 0 and price_sigma >= 0");
        }
        if !(self.click.temperature > 0.0) {
            return arg_err("click.temperature must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: u64,
    pub category: u32,
    pub price: f64,
    pub quality: f64,
    pub seller: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: u64,
    pub gender: u32,
    pub age_bucket: u32,
    pub location: u32,
    /// On the probability simplex over categories.
    pub pref: Vec<f64>,
    pub price_sens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryIntent {
    pub id: u64,
    pub category: u32,
    /// Per-category affinity.
    pub affinity: Vec<f64>,
    pub keywords: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub cfg: WorldConfig,
    pub seed: u64,
    pub items: Vec<Item>,
    pub users: Vec<User>,
    pub queries: Vec<QueryIntent>,
    /// `[age_bucket][category]`
    pub demo_aff: Vec<Vec<f64>>,
    /// `[scene][category]`
    pub scene_aff: Vec<Vec<f64>>,
    items_by_cat: Vec<Vec<usize>>,
    queries_by_cat: Vec<Vec<usize>>,
}

pub fn gen_world(seed: u64, cfg: &WorldConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = Rng::stream(seed, WORLD_STREAM);
    let c = cfg.n_categories;
    let items: Vec<Item> = (0..cfg.n_items)
        .map(|i| Item {
            id: i as u64,
            category: rng.below(c) as u32,
            price: (cfg.price_sigma * rng.standard_normal()).exp(),
            quality: rng.standard_normal(),
            seller: rng.below(cfg.n_sellers) as u64,
        })
        .collect();
    let users: Vec<User> = (0..cfg.n_users)
        .map(|u| User {
            id: u as u64,
            gender: rng.below(cfg.n_genders) as u32,
            age_bucket: rng.below(cfg.n_age_buckets) as u32,
            location: rng.below(cfg.n_locations) as u32,
            pref: rng.dirichlet(cfg.pref_concentration, c),
            price_sens: rng.uniform(),
        })
        .collect();
    let mut queries = Vec::with_capacity(c * cfg.queries_per_category);
    for cat in 0..c {
        for _ in 0..cfg.queries_per_category {
            let mut vocab: Vec<u32> = (0..cfg.keywords_per_category as u32).collect();
            rng.shuffle(&mut vocab);
            let mut keywords: Vec<u32> = vocab[..cfg.keywords_per_query]
                .iter()
                .map(|k| cat as u32 * KEYWORD_STRIDE + k)
                .collect();
            // a generic word shared across categories
            keywords.push(c as u32 * KEYWORD_STRIDE + rng.below(GENERIC_KEYWORDS as usize) as u32);
            let mut affinity = vec![0.0; c];
            affinity[cat] = 1.0;
            queries.push(QueryIntent {
                id: queries.len() as u64,
                category: cat as u32,
                affinity,
                keywords,
            });
        }
    }
    let table = |rng: &mut Rng, rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..c).map(|_| rng.standard_normal()).collect())
            .collect()
    };
    let demo_aff = table(&mut rng, cfg.n_age_buckets);
    let scene_aff = table(&mut rng, cfg.n_scenes);
    let mut items_by_cat = vec![Vec::new(); c];
    for (i, it) in items.iter().enumerate() {
        items_by_cat[it.category as usize].push(i);
    }
    let mut queries_by_cat = vec![Vec::new(); c];
    for (i, q) in queries.iter().enumerate() {
        queries_by_cat[q.category as usize].push(i);
    }
    Ok(SynthWorld {
        cfg: cfg.clone(),
        seed,
        items,
        users,
        queries,
        demo_aff,
        scene_aff,
        items_by_cat,
        queries_by_cat,
    })
}

impl SynthWorld {
    /// Pre-temperature click logit.
    pub fn click_logit(&self, user: &User, query: &QueryIntent, item: &Item, scene: u32) -> f64 {
        let w = &self.cfg.click;
        let c = item.category as usize;
        let k = self.cfg.n_categories as f64;
        w.pref * k * user.pref[c] + w.query * query.affinity[c] + w.quality * item.quality
            - w.price * user.price_sens * item.price
            + w.demo * self.demo_aff[user.age_bucket as usize][c]
            + w.scene * self.scene_aff[scene as usize][c]
            + w.bias
    }

    pub fn true_click_prob(
        &self,
        user: &User,
        query: &QueryIntent,
        item: &Item,
        scene: u32,
    ) -> f64 {
        sigmoid(self.click_logit(user, query, item, scene) / self.cfg.click.temperature)
    }

    /// Purchase probability given a click.
    pub fn true_purchase_prob(&self, user: &User, item: &Item) -> f64 {
        let w = &self.cfg.purchase;
        sigmoid(w.quality * item.quality - w.price * user.price_sens * item.price + w.bias)
    }

    /// Draws `(click, purchase)` for one impression.
    pub fn draw_labels(
        &self,
        user: &User,
        query: &QueryIntent,
        item: &Item,
        scene: u32,
        rng: &mut Rng,
    ) -> (bool, bool) {
        let click = rng.bernoulli(self.true_click_prob(user, query, item, scene));
        let purchase = click && rng.bernoulli(self.true_purchase_prob(user, item));
        (click, purchase)
    }

    fn sample_query(&self, user: &User, rng: &mut Rng) -> &QueryIntent {
        let cat = if rng.bernoulli(self.cfg.query_from_pref) {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = user.pref.len() - 1;
            for (i, p) in user.pref.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(self.cfg.n_categories)
        };
        let pool = &self.queries_by_cat[cat];
        &self.queries[pool[rng.below(pool.len())]]
    }

    /// An item from the query's category with probability
    /// `query_candidate_frac`, otherwise uniform over all items.
    fn sample_item(&self, query: &QueryIntent, rng: &mut Rng) -> &Item {
        let pool = &self.items_by_cat[query.category as usize];
        if !pool.is_empty() && rng.bernoulli(self.cfg.query_candidate_frac) {
            &self.items[pool[rng.below(pool.len())]]
        } else {
            &self.items[rng.below(self.items.len())]
        }
    }

    fn noisy(&self, value: u32, card: usize, rng: &mut Rng) -> u32 {
        if rng.bernoulli(self.cfg.demo_noise) {
            rng.below(card) as u32
        } else {
            value
        }
    }

    /// Request `index` of split `split`; reproducible from `(seed, split, index)`.
    pub fn gen_request(&self, seed: u64, split: u32, index: u64) -> RequestRecord {
        let mut rng = Rng::stream(seed, ((split as u64) << 32) | (index & 0xFFFF_FFFF));
        let cfg = &self.cfg;
        let user = &self.users[rng.below(self.users.len())];
        let mut ts = BASE_TIME + rng.below(30 * 86_400) as i64;
        let mut history = Vec::with_capacity(cfg.history_len);
        while history.len() < cfg.history_len {
            let q = self.sample_query(user, &mut rng);
            let scene = rng.below(cfg.n_scenes) as u32;
            for _ in 0..cfg.n_candidates {
                if history.len() == cfg.history_len {
                    break;
                }
                let item = self.sample_item(q, &mut rng);
                let (click, purchase) = self.draw_labels(user, q, item, scene, &mut rng);
                let engagement = match (click, purchase) {
                    (_, true) => Engagement::Purchased,
                    (true, false) => Engagement::Clicked,
                    _ => Engagement::Impressed,
                };
                if !click && !rng.bernoulli(cfg.keep_impression) {
                    continue;
                }
                let view_time = match engagement {
                    Engagement::Impressed => 0.0,
                    Engagement::Clicked => (3.0 + 0.5 * rng.standard_normal()).exp(),
                    Engagement::Purchased => (4.0 + 0.5 * rng.standard_normal()).exp(),
                };
                ts += 5 + rng.below(600) as i64;
                history.push(BehaviorToken {
                    item_id: item.id,
                    side: SideInfo {
                        price: item.price,
                        category: item.category,
                        seller: item.seller,
                        view_time,
                        engagement,
                    },
                    timestamp: ts,
                });
            }
            ts += 600 + rng.below(86_400) as i64;
        }
        let query = self.sample_query(user, &mut rng);
        let scene = rng.below(cfg.n_scenes) as u32;
        let client = rng.below(cfg.n_clients) as u32;
        let candidates = (0..cfg.n_candidates)
            .map(|_| {
                let item = self.sample_item(query, &mut rng);
                let (label_click, label_purchase) =
                    self.draw_labels(user, query, item, scene, &mut rng);
                Candidate {
                    item_id: item.id,
                    price: item.price,
                    category: item.category,
                    seller: item.seller,
                    label_click,
                    label_purchase,
                }
            })
            .collect();
        let predicted_age = self.noisy(user.age_bucket, cfg.n_age_buckets, &mut rng);
        let predicted_gender = self.noisy(user.gender, cfg.n_genders, &mut rng);
        RequestRecord {
            request_id: ((split as u64) << 32) | index,
            timestamp: ts,
            user: UserFeatures {
                user_id: user.id,
                gender: user.gender,
                age_bucket: user.age_bucket,
                location: user.location,
            },
            context: ContextFeatures {
                timestamp: ts,
                search_scene: scene,
                client,
            },
            query: QueryRecord {
                query_id: query.id,
                features: QueryFeatures {
                    keywords: query.keywords.clone(),
                    predicted_age,
                    predicted_gender,
                },
            },
            history,
            candidates,
        }
    }

    /// True click probability of every candidate of a request from this world.
    pub fn oracle_probs(&self, rec: &RequestRecord) -> Result<Vec<f64>> {
        let user = self
            .users
            .get(rec.user.user_id as usize)
            .ok_or_else(|| Error::Input(format!("unknown user {}", rec.user.user_id)))?;
        let query = self
            .queries
            .get(rec.query.query_id as usize)
            .ok_or_else(|| Error::Input(format!("unknown query {}", rec.query.query_id)))?;
        if rec.context.search_scene as usize >= self.cfg.n_scenes {
            return Err(Error::Input(format!(
                "unknown scene {}",
                rec.context.search_scene
            )));
        }
        rec.candidates
            .iter()
            .map(|c| {
                let item = self
                    .items
                    .get(c.item_id as usize)
                    .ok_or_else(|| Error::Input(format!("unknown item {}", c.item_id)))?;
                Ok(self.true_click_prob(user, query, item, rec.context.search_scene))
            })
            .collect()
    }
}

/// Streams `n` requests of split `split`.
pub fn gen_dataset(
    world: &SynthWorld,
    seed: u64,
    split: u32,
    n: usize,
) -> impl Iterator<Item = RequestRecord> + '_ {
    (0..n as u64).map(move |i| world.gen_request(seed, split, i))
}

/// Bayes-oracle scores of every candidate, labelled with clicks.
pub fn oracle_scores(world: &SynthWorld, data: &[RequestRecord]) -> Result<Vec<Scored>> {
    let mut out = Vec::new();
    for rec in data {
        for (c, p) in rec.candidates.iter().zip(world.oracle_probs(rec)?) {
            out.push(Scored {
                score: p,
                label: c.label_click,
                request_id: rec.request_id,
            });
        }
    }
    Ok(out)
}

pub fn oracle_auc(world: &SynthWorld, data: &[RequestRecord]) -> Result<MetricReport> {
    metrics::report(&oracle_scores(world, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: u64,
    pub price: f64,
    pub category: u32,
    pub seller: u64,
    pub label_click: bool,
    pub label_purchase: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    #[serde(flatten)]
    pub features: QueryFeatures,
}

/// One search request: the JSONL line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub timestamp: i64,
    pub user: UserFeatures,
    pub context: ContextFeatures,
    pub query: QueryRecord,
    pub history: Vec<BehaviorToken>,
    pub candidates: Vec<Candidate>,
}

impl RequestRecord {
    pub fn gate_features(&self) -> GateFeatures {
        GateFeatures {
            user: self.user.clone(),
            context: self.context.clone(),
        }
    }

    /// A candidate as an encoder token: impressed, no view time.
    pub fn candidate_token(&self, i: usize) -> BehaviorToken {
        let c = &self.candidates[i];
        BehaviorToken {
            item_id: c.item_id,
            side: SideInfo {
                price: c.price,
                category: c.category,
                seller: c.seller,
                view_time: 0.0,
                engagement: Engagement::Impressed,
            },
            timestamp: self.timestamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history.is_empty() {
            return Err(Error::Input(format!(
                "request {} has an empty history",
                self.request_id
            )));
        }
        if self.candidates.is_empty() {
            return Err(Error::Input(format!(
                "request {} has no candidates",
                self.request_id
            )));
        }
        if self.query.features.keywords.is_empty() {
            return Err(Error::Input(format!(
                "request {} has no query keywords",
                self.request_id
            )));
        }
        for t in &self.history {
            t.validate()?;
        }
        if self
            .history
            .windows(2)
            .any(|w| w[1].timestamp < w[0].timestamp)
        {
            return Err(Error::Input(format!(
                "request {} history timestamps decrease",
                self.request_id
            )));
        }
        Ok(())
    }
}

pub const TRAIN_SPLIT: u32 = 0;
pub const EVAL_SPLIT: u32 = 1;

/// Sidecar describing how a train/eval dataset pair was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub world: WorldConfig,
}

impl Manifest {
    pub fn new(seed: u64, n_train: usize, n_eval: usize, world: WorldConfig) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            seed,
            n_train,
            n_eval,
            world,
        }
    }

    pub fn check_format(&self) -> Result<()> {
        if self.format != FORMAT_TAG {
            return Err(Error::Format(format!(
                "manifest format '{}' is not '{FORMAT_TAG}'",
                self.format
            )));
        }
        Ok(())
    }

    /// Regenerates `(world, train, eval)`.
    pub fn generate(&self) -> Result<(SynthWorld, Vec<RequestRecord>, Vec<RequestRecord>)> {
        self.check_format()?;
        let world = gen_world(self.seed, &self.world)?;
        let train = gen_dataset(&world, self.seed, TRAIN_SPLIT, self.n_train).collect();
        let eval = gen_dataset(&world, self.seed, EVAL_SPLIT, self.n_eval).collect();
        Ok((world, train, eval))
    }
}

pub fn write_jsonl<'a>(
    w: &mut impl Write,
    records: impl IntoIterator<Item = &'a RequestRecord>,
) -> Result<usize> {
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<RequestRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RequestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<RequestRecord>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

pub fn save_jsonl(path: &Path, records: &[RequestRecord]) -> Result<usize> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    let n = write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(n)
}

#[cfg(test)]
#[path = "synthworld_tests.rs"]
mod tests;
