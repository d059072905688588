//! Token construction for behavior sequences, queries and gate features.
//!
//! Every historical interaction becomes `I_t = f(concat(ID_t, Side_t))`, and
//! the sequence row is `x_t = I_t + TimeEmb(timestamp_t) + PosEmb(t)`, where
//! `TimeEmb` is a fixed sinusoidal code of absolute epoch-seconds and
//! `PosEmb` a learned table. Identifiers are hashed into fixed-size tables,
//! so unseen ids never fail (collisions are accepted).

use crate::error::{arg_err, Error, Result};
use crate::numerics::{normal_sample, sinusoidal, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engagement {
    Impressed,
    Clicked,
    Purchased,
}

impl Engagement {
    pub fn index(self) -> usize {
        match self {
            Engagement::Impressed => 0,
            Engagement::Clicked => 1,
            Engagement::Purchased => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideInfo {
    pub price: f64,
    pub category: u32,
    pub seller: u64,
    pub view_time: f64,
    pub engagement: Engagement,
}

/// One historical interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorToken {
    pub item_id: u64,
    #[serde(flatten)]
    pub side: SideInfo,
    pub timestamp: i64,
}

impl BehaviorToken {
    pub fn validate(&self) -> Result<()> {
        let s = &self.side;
        if !s.price.is_finite() || !s.view_time.is_finite() {
            return Err(Error::Input(format!(
                "item {} has non-finite side info",
                self.item_id
            )));
        }
        if s.price < 0.0 || s.view_time < 0.0 {
            return Err(Error::Input(format!(
                "item {} has negative price or view time",
                self.item_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserFeatures {
    pub user_id: u64,
    pub gender: u32,
    pub age_bucket: u32,
    pub location: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub timestamp: i64,
    pub search_scene: u32,
    pub client: u32,
}

/// User profile plus request context; the source of the attention gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateFeatures {
    pub user: UserFeatures,
    pub context: ContextFeatures,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub keywords: Vec<u32>,
    pub predicted_age: u32,
    pub predicted_gender: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub max_n: usize,
    /// Table size for hashed ids (item, seller, user).
    pub id_buckets: usize,
    /// Table size for hashed categorical fields.
    pub cat_buckets: usize,
    /// Wavelength scale of the timestamp code, in seconds.
    pub time_base: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            max_n: 32,
            id_buckets: 1 << 16,
            cat_buckets: 1 << 10,
            time_base: 1e4 * 86400.0,
            init_std: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.max_n == 0 || self.id_buckets == 0 || self.cat_buckets == 0 {
            return arg_err("encoder dims and table sizes must be positive");
        }
        if !(self.time_base > 1.0) {
            return arg_err("time_base must exceed 1");
        }
        Ok(())
    }
}

/// Field salts keep different id spaces from sharing hash slots.
#[derive(Clone, Copy)]
enum Field {
    Item = 1,
    Seller,
    Category,
    Keyword,
    QueryAge,
    QueryGender,
    User,
    Gender,
    Age,
    Location,
    Scene,
    Client,
}

fn hash_id(field: Field, id: u64, buckets: usize) -> usize {
    // splitmix64 finaliser
    let mut z = id ^ ((field as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z % buckets as u64) as usize
}

/// A dense affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            &format!("{name}.w"),
            normal_sample(rng, &[fan_in, fan_out], 0.0, std)?,
        )?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// One-hidden-layer SiLU MLP.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        width: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), fan_in, width, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), width, fan_out, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.silu(h);
        self.out.forward(g, h)
    }
}

/// Parameter handles of the encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub item_id: ParamId,
    pub seller: ParamId,
    pub category: ParamId,
    pub engagement: ParamId,
    pub item_mlp: Mlp,
    pub pos: ParamId,
    pub keyword: ParamId,
    pub query_age: ParamId,
    pub query_gender: ParamId,
    pub query_proj: Linear,
    pub user_id: ParamId,
    pub gender: ParamId,
    pub age: ParamId,
    pub location: ParamId,
    pub scene: ParamId,
    pub client: ParamId,
    pub gate_mlp: Mlp,
}

/// The clean token matrix of one behavior sequence.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `n × d_model`
    pub x0: Tensor,
    pub n: usize,
    /// `(item_id, category)` per retained position.
    pub meta: Vec<(u64, u32)>,
    /// Set when the history exceeded `max_n` and older tokens were dropped.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub p: EncoderParams,
}

/// Width of the concatenated item input: id, category, seller, engagement
/// embeddings plus log-price and log-view-time.
fn item_input_width(d: usize) -> usize {
    4 * d + 2
}

const GATE_FIELDS: usize = 7;

/// Keeps the most recent `max_n` tokens.
pub fn truncate_history(history: &[BehaviorToken], max_n: usize) -> (&[BehaviorToken], bool) {
    if history.len() > max_n {
        (&history[history.len() - max_n..], true)
    } else {
        (history, false)
    }
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let s = cfg.init_std;
        let mut table = |store: &mut ParamStore, name: &str, rows: usize| {
            store.add(
                &format!("enc.{name}"),
                normal_sample(rng, &[rows, d], 0.0, s)?,
            )
        };
        let item_id = table(store, "item_id", cfg.id_buckets)?;
        let seller = table(store, "seller", cfg.id_buckets)?;
        let category = table(store, "category", cfg.cat_buckets)?;
        let engagement = table(store, "engagement", 3)?;
        let pos = table(store, "pos", cfg.max_n)?;
        let keyword = table(store, "keyword", cfg.cat_buckets)?;
        let query_age = table(store, "query_age", cfg.cat_buckets)?;
        let query_gender = table(store, "query_gender", cfg.cat_buckets)?;
        let user_id = table(store, "user_id", cfg.id_buckets)?;
        let gender = table(store, "gender", cfg.cat_buckets)?;
        let age = table(store, "age", cfg.cat_buckets)?;
        let location = table(store, "location", cfg.cat_buckets)?;
        let scene = table(store, "scene", cfg.cat_buckets)?;
        let client = table(store, "client", cfg.cat_buckets)?;
        let item_mlp = Mlp::new(store, rng, "enc.item_f", item_input_width(d), 2 * d, d)?;
        let query_proj = Linear::new(store, rng, "enc.query_proj", 3 * d, d, true)?;
        let gate_mlp = Mlp::new(store, rng, "enc.gate_f", GATE_FIELDS * d, 2 * d, d)?;
        Ok(Self {
            cfg,
            p: EncoderParams {
                item_id,
                seller,
                category,
                engagement,
                item_mlp,
                pos,
                keyword,
                query_age,
                query_gender,
                query_proj,
                user_id,
                gender,
                age,
                location,
                scene,
                client,
                gate_mlp,
            },
        })
    }

    /// `TimeEmb` of an absolute timestamp.
    pub fn time_embedding(&self, timestamp: i64) -> Vec<f64> {
        sinusoidal(timestamp as f64, self.cfg.d_model, self.cfg.time_base)
    }

    /// `I_t` for a batch of tokens: `[len, d_model]`.
    pub fn encode_items(&self, g: &mut Graph, tokens: &[&BehaviorToken]) -> Result<Var> {
        if tokens.is_empty() {
            return arg_err("encode_items needs at least one token");
        }
        for t in tokens {
            t.validate()?;
        }
        let c = &self.cfg;
        let ids: Vec<usize> = tokens
            .iter()
            .map(|t| hash_id(Field::Item, t.item_id, c.id_buckets))
            .collect();
        let cats: Vec<usize> = tokens
            .iter()
            .map(|t| hash_id(Field::Category, t.side.category as u64, c.cat_buckets))
            .collect();
        let sellers: Vec<usize> = tokens
            .iter()
            .map(|t| hash_id(Field::Seller, t.side.seller, c.id_buckets))
            .collect();
        let engs: Vec<usize> = tokens.iter().map(|t| t.side.engagement.index()).collect();
        let numeric: Vec<f64> = tokens
            .iter()
            .flat_map(|t| [t.side.price.ln_1p(), t.side.view_time.ln_1p()])
            .collect();
        let id_e = g.gather(self.p.item_id, &ids)?;
        let cat_e = g.gather(self.p.category, &cats)?;
        let sel_e = g.gather(self.p.seller, &sellers)?;
        let eng_e = g.gather(self.p.engagement, &engs)?;
        let num = g.constant(Tensor::new(vec![tokens.len(), 2], numeric)?);
        let x = g.concat(&[id_e, cat_e, sel_e, eng_e, num], 1)?;
        self.p.item_mlp.forward(g, x)
    }

    /// Sequence rows for a batch of equally long histories: `[B, n, d_model]`.
    ///
    /// Histories longer than `max_n` are cut to their most recent tokens;
    /// all histories must have the same retained length.
    pub fn encode_sequences(&self, g: &mut Graph, histories: &[&[BehaviorToken]]) -> Result<Var> {
        let d = self.cfg.d_model;
        let kept: Vec<&[BehaviorToken]> = histories
            .iter()
            .map(|h| truncate_history(h, self.cfg.max_n).0)
            .collect();
        let n = kept.first().map_or(0, |h| h.len());
        if n == 0 {
            return arg_err("empty history");
        }
        if kept.iter().any(|h| h.len() != n) {
            return arg_err("encode_sequences needs equal-length histories");
        }
        let b = kept.len();
        let tokens: Vec<&BehaviorToken> = kept.iter().flat_map(|h| h.iter()).collect();
        let items = self.encode_items(g, &tokens)?;
        let items = g.reshape(items, &[b, n, d])?;
        let mut time = Vec::with_capacity(b * n * d);
        for t in &tokens {
            time.extend(self.time_embedding(t.timestamp));
        }
        let time = g.constant(Tensor::new(vec![b, n, d], time)?);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(self.p.pos, &positions)?;
        let x = g.add(items, time)?;
        g.add(x, pos)
    }

    /// Query encodings `[B, d_model]`: mean keyword embedding concatenated
    /// with predicted-demographic embeddings, then an affine map.
    pub fn encode_queries(&self, g: &mut Graph, queries: &[&QueryFeatures]) -> Result<Var> {
        let c = &self.cfg;
        let b = queries.len();
        if b == 0 {
            return arg_err("encode_queries needs at least one query");
        }
        if queries.iter().any(|q| q.keywords.is_empty()) {
            return Err(Error::Input("query without keywords".into()));
        }
        let kw_ids: Vec<usize> = queries
            .iter()
            .flat_map(|q| q.keywords.iter())
            .map(|&k| hash_id(Field::Keyword, k as u64, c.cat_buckets))
            .collect();
        let mut pool = vec![0.0; b * kw_ids.len()];
        let mut offset = 0;
        for (i, q) in queries.iter().enumerate() {
            let w = 1.0 / q.keywords.len() as f64;
            for j in 0..q.keywords.len() {
                pool[i * kw_ids.len() + offset + j] = w;
            }
            offset += q.keywords.len();
        }
        let kw = g.gather(self.p.keyword, &kw_ids)?;
        let pool = g.constant(Tensor::new(vec![b, kw_ids.len()], pool)?);
        let kw_mean = g.matmul(pool, kw)?;
        let ages: Vec<usize> = queries
            .iter()
            .map(|q| hash_id(Field::QueryAge, q.predicted_age as u64, c.cat_buckets))
            .collect();
        let genders: Vec<usize> = queries
            .iter()
            .map(|q| hash_id(Field::QueryGender, q.predicted_gender as u64, c.cat_buckets))
            .collect();
        let age_e = g.gather(self.p.query_age, &ages)?;
        let gen_e = g.gather(self.p.query_gender, &genders)?;
        let x = g.concat(&[kw_mean, age_e, gen_e], 1)?;
        self.p.query_proj.forward(g, x)
    }

    /// Gate pre-activations `[B, d_model]` from user and context features.
    pub fn encode_gate_features(&self, g: &mut Graph, feats: &[&GateFeatures]) -> Result<Var> {
        let c = &self.cfg;
        let b = feats.len();
        if b == 0 {
            return arg_err("encode_gate_features needs at least one record");
        }
        let lookup = |field: Field, f: &dyn Fn(&GateFeatures) -> u64, buckets: usize| {
            feats
                .iter()
                .map(|x| hash_id(field, f(x), buckets))
                .collect::<Vec<_>>()
        };
        let users = lookup(Field::User, &|x| x.user.user_id, c.id_buckets);
        let genders = lookup(Field::Gender, &|x| x.user.gender as u64, c.cat_buckets);
        let ages = lookup(Field::Age, &|x| x.user.age_bucket as u64, c.cat_buckets);
        let locs = lookup(Field::Location, &|x| x.user.location as u64, c.cat_buckets);
        let scenes = lookup(
            Field::Scene,
            &|x| x.context.search_scene as u64,
            c.cat_buckets,
        );
        let clients = lookup(Field::Client, &|x| x.context.client as u64, c.cat_buckets);
        let mut time = Vec::with_capacity(b * c.d_model);
        for f in feats {
            time.extend(self.time_embedding(f.context.timestamp));
        }
        let parts = [
            g.gather(self.p.user_id, &users)?,
            g.gather(self.p.gender, &genders)?,
            g.gather(self.p.age, &ages)?,
            g.gather(self.p.location, &locs)?,
            g.gather(self.p.scene, &scenes)?,
            g.gather(self.p.client, &clients)?,
            g.constant(Tensor::new(vec![b, c.d_model], time)?),
        ];
        let x = g.concat(&parts, 1)?;
        self.p.gate_mlp.forward(g, x)
    }

    /// `I_t` of a single token.
    pub fn encode_item(&self, store: &ParamStore, tok: &BehaviorToken) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let v = self.encode_items(&mut g, &[tok])?;
        Ok(g.value(v).data().to_vec())
    }

    /// Clean sequence `x0` of one history, truncated to `max_n` if needed.
    pub fn encode_sequence(
        &self,
        store: &ParamStore,
        history: &[BehaviorToken],
    ) -> Result<TokenSequence> {
        let (kept, truncated) = truncate_history(history, self.cfg.max_n);
        let mut g = Graph::new(store);
        let v = self.encode_sequences(&mut g, &[kept])?;
        let n = kept.len();
        let x0 = g.value(v).clone().reshape(&[n, self.cfg.d_model])?;
        if truncated {
            log::warn!(
                "history of {} tokens truncated to the most recent {}",
                history.len(),
                n
            );
        }
        Ok(TokenSequence {
            x0,
            n,
            meta: kept.iter().map(|t| (t.item_id, t.side.category)).collect(),
            truncated,
        })
    }

    pub fn encode_query(&self, store: &ParamStore, q: &QueryFeatures) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let v = self.encode_queries(&mut g, &[q])?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn encode_gate(&self, store: &ParamStore, f: &GateFeatures) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let v = self.encode_gate_features(&mut g, &[f])?;
        Ok(g.value(v).data().to_vec())
    }

    /// Hash slot of an item id (exposed for hand-set parameter tests).
    pub fn item_slot(&self, item_id: u64) -> usize {
        hash_id(Field::Item, item_id, self.cfg.id_buckets)
    }

    pub fn category_slot(&self, category: u32) -> usize {
        hash_id(Field::Category, category as u64, self.cfg.cat_buckets)
    }

    pub fn seller_slot(&self, seller: u64) -> usize {
        hash_id(Field::Seller, seller, self.cfg.id_buckets)
    }

    pub fn keyword_slot(&self, keyword: u32) -> usize {
        hash_id(Field::Keyword, keyword as u64, self.cfg.cat_buckets)
    }

    pub fn query_age_slot(&self, age: u32) -> usize {
        hash_id(Field::QueryAge, age as u64, self.cfg.cat_buckets)
    }

    pub fn query_gender_slot(&self, gender: u32) -> usize {
        hash_id(Field::QueryGender, gender as u64, self.cfg.cat_buckets)
    }

    pub fn age_slot(&self, age: u32) -> usize {
        hash_id(Field::Age, age as u64, self.cfg.cat_buckets)
    }
}

#[cfg(test)]
#[path = "encoder_tests.rs"]
mod tests;
