//! Training and evaluation loops, checkpoints and the ablation harness.

use crate::diffusion::{
    make_schedule, run_reverse_chain, DiffusionSchedule, NoiseProfile, NoisedSequence,
};
use crate::encoder::{truncate_history, BehaviorToken, EncoderConfig, GateFeatures, QueryFeatures};
use crate::error::{arg_err, Error, Result};
use crate::losses::{kl_loss, total_loss_var, LossConfig};
use crate::metrics::{self, MetricReport, Scored};
use crate::model::{Conditioning, Model, ModelConfig, Task};
use crate::numerics::{normal_sample, Adam, Graph, ParamStore, Rng, Tensor, Var};
use crate::synthworld::{RequestRecord, SynthWorld};
use crate::udl::GateMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_SALT: u64 = 0x5EED_E7A1;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// When false the denoiser sees the clean sequence at `t = 1`.
    pub enabled: bool,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::from_profile(NoiseProfile::Default)
    }
}

impl DiffusionConfig {
    pub fn from_profile(p: NoiseProfile) -> Self {
        let (t_steps, beta_start, beta_end) = p.params();
        Self {
            enabled: p != NoiseProfile::NoNoise,
            t_steps,
            beta_start,
            beta_end,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub task: Task,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub diffusion: DiffusionConfig,
    /// Reverse-chain length used for evaluation; 1 is single-step inference.
    pub eval_steps: usize,
    /// Evaluate every this many epochs; 0 evaluates only after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 5,
            lr: Adam::default().lr,
            seed: 0,
            task: Task::Ctr,
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            diffusion: DiffusionConfig::default(),
            eval_steps: 1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return arg_err("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return arg_err(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        self.model.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        let sched = self.diffusion.schedule()?;
        if self.eval_steps < 1 || self.eval_steps > sched.steps() {
            return arg_err(format!(
                "eval_steps {} outside 1..={}",
                self.eval_steps,
                sched.steps()
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub kl: f64,
    pub batches: usize,
    pub eval: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub fingerprint: String,
    pub n_params: usize,
    pub steps: u64,
    pub curve: Vec<EpochStats>,
    /// Present iff evaluation ran.
    pub metrics: Option<MetricReport>,
    pub seconds: f64,
}

impl RunReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|e| e.loss)
    }
}

pub struct Trained {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
}

impl Trained {
    /// A freshly initialised model.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(cfg.seed, INIT_STREAM);
        let model = Model::new(cfg.model, cfg.encoder, &mut store, &mut rng)?;
        Ok(Self {
            cfg: *cfg,
            model,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(&mut std::io::BufReader::new(f))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.cfg)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        self.store.write_checkpoint(w)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a diffrank model file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let cfg: TrainConfig = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("model header: {e}")))?;
        let saved = ParamStore::read_checkpoint(r)?;
        let mut out = Self::init(&cfg)?;
        out.store.load_values_from(&saved)?;
        Ok(out)
    }

    pub fn scorer(&self, steps: usize) -> Result<ModelScorer<'_>> {
        ModelScorer::new(&self.model, &self.store, &self.cfg, steps)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"DRNKMODL";

/// Candidates used for a task: all for CTR, clicked ones for CVR.
fn task_candidates(rec: &RequestRecord, task: Task) -> Vec<(usize, f64)> {
    rec.candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match task {
            Task::Ctr => Some((i, c.label_click as u8 as f64)),
            Task::Cvr => c.label_click.then_some((i, c.label_purchase as u8 as f64)),
        })
        .collect()
}

/// Request indices grouped by effective history length, ascending.
fn length_groups(data: &[RequestRecord], max_n: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.iter().enumerate() {
        groups
            .entry(r.history.len().min(max_n))
            .or_default()
            .push(i);
    }
    groups.into_values().collect()
}

fn make_batches(data: &[RequestRecord], cfg: &TrainConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    for mut group in length_groups(data, cfg.encoder.max_n) {
        rng.shuffle(&mut group);
        batches.extend(group.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

struct BatchInputs<'a> {
    histories: Vec<&'a [BehaviorToken]>,
    queries: Vec<&'a QueryFeatures>,
    gates: Vec<GateFeatures>,
}

impl<'a> BatchInputs<'a> {
    fn new(recs: &[&'a RequestRecord]) -> Self {
        Self {
            histories: recs.iter().map(|r| r.history.as_slice()).collect(),
            queries: recs.iter().map(|r| &r.query.features).collect(),
            gates: recs.iter().map(|r| r.gate_features()).collect(),
        }
    }

    /// Query and profile-gate encodings, or `None` where the model ignores them.
    fn conditions(&self, model: &Model, g: &mut Graph) -> Result<(Option<Var>, Option<Var>)> {
        let q = match model.cfg.conditioning {
            Conditioning::None => None,
            _ => Some(model.encoder.encode_queries(g, &self.queries)?),
        };
        let u = match model.cfg.gate {
            GateMode::Profile => {
                let refs: Vec<&GateFeatures> = self.gates.iter().collect();
                Some(model.encoder.encode_gate_features(g, &refs)?)
            }
            _ => None,
        };
        Ok((q, u))
    }
}

/// Result of one optimisation step on a batch.
struct StepLoss {
    total: f64,
    bce: f64,
    kl: f64,
}

/// Builds the loss graph for one batch; returns `None` when the batch has no
/// candidates for the task.
/// Returns `(total, bce, kl)`.
pub fn batch_loss<'s>(
    model: &Model,
    g: &mut Graph<'s>,
    recs: &[&RequestRecord],
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Option<(Var, Var, Var)>> {
    let mut owner = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    let cand_tokens: Vec<Vec<(BehaviorToken, f64)>> = recs
        .iter()
        .map(|r| {
            task_candidates(r, cfg.task)
                .into_iter()
                .map(|(i, y)| (r.candidate_token(i), y))
                .collect()
        })
        .collect();
    for (b, cands) in cand_tokens.iter().enumerate() {
        for (tok, y) in cands {
            owner.push(b);
            targets.push(tok);
            labels.push(*y);
        }
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let inputs = BatchInputs::new(recs);
    let x0 = model.encoder.encode_sequences(g, &inputs.histories)?;
    let shape = g.shape(x0).to_vec();
    let (bsz, n, d) = (shape[0], shape[1], shape[2]);
    let (x_t, ts) = if cfg.diffusion.enabled {
        let ts: Vec<usize> = (0..bsz).map(|_| 1 + rng.below(sched.steps())).collect();
        let eps = normal_sample(rng, &[bsz, n, d], 0.0, 1.0)?;
        let signal: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
        let noise_scale: Vec<f64> = ts
            .iter()
            .map(|&t| sched.one_minus_alpha_bar(t).sqrt())
            .collect();
        let mut noise = eps.into_data();
        for (row, chunk) in noise.chunks_mut(n * d).enumerate() {
            chunk.iter_mut().for_each(|e| *e *= noise_scale[row]);
        }
        let a = g.constant(Tensor::new(vec![bsz, 1, 1], signal)?);
        let scaled = g.mul(x0, a)?;
        let noise = g.constant(Tensor::new(vec![bsz, n, d], noise)?);
        (g.add(scaled, noise)?, ts)
    } else {
        (x0, vec![1; bsz])
    };
    let (q, u) = inputs.conditions(model, g)?;
    let (s, dd) = model.denoise(g, x_t, &ts, q, u)?;
    let kl = kl_loss(g, s, dd, x0, cfg.loss.kl_mode)?;
    let target_refs: Vec<&BehaviorToken> = targets.iter().copied().collect();
    let t_enc = model.encoder.encode_items(g, &target_refs)?;
    let logits = model.score_logits(g, dd, t_enc, &owner)?;
    let bce = g.bce_with_logits(logits, &labels)?;
    let total = total_loss_var(g, bce, kl, &cfg.loss)?;
    Ok(Some((total, bce, kl)))
}

fn train_step(
    t: &mut Trained,
    recs: &[&RequestRecord],
    sched: &DiffusionSchedule,
    rng: &mut Rng,
    step: usize,
    batch_id: usize,
) -> Result<Option<StepLoss>> {
    let cfg = t.cfg;
    let grads;
    let loss;
    {
        let mut g = Graph::new(&t.store);
        let Some((total, bce, kl)) = batch_loss(&t.model, &mut g, recs, &cfg, sched, rng)? else {
            return Ok(None);
        };
        loss = StepLoss {
            total: g.value(total).item(),
            bce: g.value(bce).item(),
            kl: g.value(kl).item(),
        };
        if !loss.total.is_finite() || !loss.bce.is_finite() || !loss.kl.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch: batch_id,
                bce: loss.bce,
                kl: loss.kl,
            });
        }
        grads = g.backward(total)?;
    }
    t.store.accumulate(&grads);
    Adam::with_lr(cfg.lr).step(&mut t.store)?;
    Ok(Some(loss))
}

/// Trains a fresh model on `train`; evaluates on `eval` when given.
pub fn train(
    train: &[RequestRecord],
    eval: Option<&[RequestRecord]>,
    cfg: &TrainConfig,
) -> Result<(Trained, RunReport)> {
    let mut trained = Trained::init(cfg)?;
    let report = train_model(&mut trained, train, eval)?;
    Ok((trained, report))
}

/// Continues training `trained` for `trained.cfg.epochs` epochs.
pub fn train_model(
    trained: &mut Trained,
    train: &[RequestRecord],
    eval: Option<&[RequestRecord]>,
) -> Result<RunReport> {
    let cfg = trained.cfg;
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return arg_err("training set is empty");
    }
    for r in train {
        r.validate()?;
    }
    let start = Instant::now();
    let sched = cfg.diffusion.schedule()?;
    let mut rng = Rng::stream(cfg.seed, TRAIN_STREAM);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut metrics = None;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(train, &cfg, &mut rng);
        let (mut sum, mut sum_bce, mut sum_kl, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (batch_id, idx) in batches.iter().enumerate() {
            let recs: Vec<&RequestRecord> = idx.iter().map(|&i| &train[i]).collect();
            if let Some(l) = train_step(trained, &recs, &sched, &mut rng, step, batch_id)? {
                sum += l.total;
                sum_bce += l.bce;
                sum_kl += l.kl;
                count += 1;
                step += 1;
            }
        }
        let denom = count.max(1) as f64;
        let last = epoch + 1 == cfg.epochs;
        let due = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let eval_report = match eval {
            Some(data) if due => Some(evaluate(trained, data, cfg.eval_steps)?),
            _ => None,
        };
        if last {
            metrics = eval_report;
        }
        log::info!(
            "epoch {} loss {:.5} bce {:.5} kl {:.5}",
            epoch + 1,
            sum / denom,
            sum_bce / denom,
            sum_kl / denom
        );
        curve.push(EpochStats {
            epoch: epoch + 1,
            loss: sum / denom,
            bce: sum_bce / denom,
            kl: sum_kl / denom,
            batches: count,
            eval: eval_report,
        });
    }
    if cfg.epochs == 0 {
        if let Some(data) = eval {
            metrics = Some(evaluate(trained, data, cfg.eval_steps)?);
        }
    }
    Ok(RunReport {
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(),
        n_params: trained.store.num_scalars(),
        steps: trained.store.step(),
        curve,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Anything that scores the task candidates of a batch of requests.
pub trait Scorer {
    /// One score per task candidate, in `task_candidates` order.
    fn score_batch(&self, recs: &[&RequestRecord], task: Task) -> Result<Vec<Vec<f64>>>;
}

/// Scores `data` with `scorer` and reduces to AUC / GAUC.
pub fn evaluate_scorer(
    scorer: &impl Scorer,
    data: &[RequestRecord],
    task: Task,
    max_n: usize,
) -> Result<MetricReport> {
    metrics::report(&score_dataset(scorer, data, task, max_n)?)
}

pub fn score_dataset(
    scorer: &impl Scorer,
    data: &[RequestRecord],
    task: Task,
    max_n: usize,
) -> Result<Vec<Scored>> {
    let mut out = Vec::new();
    for group in length_groups(data, max_n) {
        for idx in group.chunks(EVAL_BATCH) {
            let recs: Vec<&RequestRecord> = idx.iter().map(|&i| &data[i]).collect();
            let scores = scorer.score_batch(&recs, task)?;
            for (rec, s) in recs.iter().zip(scores) {
                for ((_, y), score) in task_candidates(rec, task).into_iter().zip(s) {
                    out.push(Scored {
                        score,
                        label: y > 0.5,
                        request_id: rec.request_id,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn evaluate(trained: &Trained, data: &[RequestRecord], steps: usize) -> Result<MetricReport> {
    evaluate_scorer(
        &trained.scorer(steps)?,
        data,
        trained.cfg.task,
        trained.cfg.encoder.max_n,
    )
}

/// The world's true click probabilities.
pub struct OracleScorer<'w>(pub &'w SynthWorld);

impl Scorer for OracleScorer<'_> {
    fn score_batch(&self, recs: &[&RequestRecord], task: Task) -> Result<Vec<Vec<f64>>> {
        recs.iter()
            .map(|r| {
                let p = self.0.oracle_probs(r)?;
                Ok(task_candidates(r, task)
                    .into_iter()
                    .map(|(i, _)| p[i])
                    .collect())
            })
            .collect()
    }
}

/// Runs the reverse chain on a `[B, n, d]` batch from `x_T` and returns the
/// dynamic interest of the final denoiser call.
pub fn chain_interest<F>(
    x_big_t: &NoisedSequence,
    mut denoiser: F,
    sched: &DiffusionSchedule,
    steps: usize,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<(Tensor, Tensor)>,
{
    let mut last_d = None;
    run_reverse_chain(
        x_big_t,
        |x, t| {
            let (x0_hat, d) = denoiser(x, t)?;
            last_d = Some(d);
            Ok(x0_hat)
        },
        sched,
        steps,
        None,
    )?;
    Ok(last_d.expect("chain calls the denoiser"))
}

/// Evaluation-time model: noises each history to `T` with a per-request
/// stream, runs `steps` reverse steps and scores with the final `D`.
pub struct ModelScorer<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    sched: DiffusionSchedule,
    diffusion: bool,
    steps: usize,
    seed: u64,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        model: &'a Model,
        store: &'a ParamStore,
        cfg: &TrainConfig,
        steps: usize,
    ) -> Result<Self> {
        let sched = cfg.diffusion.schedule()?;
        if steps < 1 || steps > sched.steps() {
            return arg_err(format!("steps {steps} outside 1..={}", sched.steps()));
        }
        Ok(Self {
            model,
            store,
            sched,
            diffusion: cfg.diffusion.enabled,
            steps,
            seed: cfg.seed,
        })
    }

    /// Final dynamic interest `[B, n, d]` for a batch of equal-length histories.
    pub fn interest(&self, recs: &[&RequestRecord]) -> Result<Tensor> {
        let inputs = BatchInputs::new(recs);
        let (x0, q, u) = {
            let mut g = Graph::new(self.store);
            let x0 = self
                .model
                .encoder
                .encode_sequences(&mut g, &inputs.histories)?;
            let (q, u) = inputs.conditions(self.model, &mut g)?;
            let q = q.map(|v| g.value(v).clone());
            let u = u.map(|v| g.value(v).clone());
            (g.value(x0).clone(), q, u)
        };
        let shape = x0.shape().to_vec();
        let denoise = |x: &Tensor, t: usize| -> Result<(Tensor, Tensor)> {
            let mut g = Graph::new(self.store);
            let xv = g.constant(x.clone());
            let qv = q.as_ref().map(|q| g.constant(q.clone()));
            let uv = u.as_ref().map(|u| g.constant(u.clone()));
            let (s, d) = self.model.denoise(&mut g, xv, &vec![t; shape[0]], qv, uv)?;
            let d = g.value(d).clone();
            let x0_hat = g.value(s).zip_map(&d, |a, b| a + b)?;
            x0_hat.ensure_finite("denoised batch")?;
            Ok((x0_hat, d))
        };
        if !self.diffusion {
            let x_big_t = NoisedSequence {
                eps: Tensor::zeros(&shape),
                x_t: x0,
                t: 1,
            };
            return chain_interest(&x_big_t, denoise, &self.sched, 1);
        }
        let big_t = self.sched.steps();
        let row = shape[1] * shape[2];
        let mut eps = Vec::with_capacity(x0.numel());
        for r in recs {
            let mut rng = Rng::stream(self.seed ^ EVAL_SALT, r.request_id);
            eps.extend(normal_sample(&mut rng, &[row], 0.0, 1.0)?.into_data());
        }
        let eps = Tensor::new(shape.clone(), eps)?;
        let (a, b) = (
            self.sched.alpha_bar(big_t).sqrt(),
            self.sched.one_minus_alpha_bar(big_t).sqrt(),
        );
        let x_t = x0.zip_map(&eps, |x, e| a * x + b * e)?;
        let x_big_t = NoisedSequence { x_t, t: big_t, eps };
        chain_interest(&x_big_t, denoise, &self.sched, self.steps)
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_batch(&self, recs: &[&RequestRecord], task: Task) -> Result<Vec<Vec<f64>>> {
        let d = self.interest(recs)?;
        let mut owner = Vec::new();
        let mut targets = Vec::new();
        let mut counts = Vec::with_capacity(recs.len());
        for (b, r) in recs.iter().enumerate() {
            let cands = task_candidates(r, task);
            counts.push(cands.len());
            for (i, _) in cands {
                owner.push(b);
                targets.push(r.candidate_token(i));
            }
        }
        if targets.is_empty() {
            return Ok(vec![Vec::new(); recs.len()]);
        }
        let mut g = Graph::new(self.store);
        let dv = g.constant(d);
        let refs: Vec<&BehaviorToken> = targets.iter().collect();
        let t_enc = self.model.encoder.encode_items(&mut g, &refs)?;
        let z = self.model.score_logits(&mut g, dv, t_enc, &owner)?;
        let probs: Vec<f64> = g
            .value(z)
            .data()
            .iter()
            .map(|&z| crate::numerics::sigmoid(z))
            .collect();
        let mut out = Vec::with_capacity(recs.len());
        let mut at = 0;
        for c in counts {
            out.push(probs[at..at + c].to_vec());
            at += c;
        }
        Ok(out)
    }
}

/// Per-position dynamic-interest norms and category click probabilities of
/// one request, for interest inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectRow {
    pub position: usize,
    pub item_id: u64,
    pub category: u32,
    pub category_prob: f64,
    pub norm: f64,
}

/// Rows sorted by ascending category click probability. The category
/// probability of a position scores its own history item, with the
/// request's query, as a fresh impression.
pub fn inspect_request(
    trained: &Trained,
    rec: &RequestRecord,
    steps: usize,
) -> Result<Vec<InspectRow>> {
    if rec.history.is_empty() {
        return Err(Error::Input(format!(
            "request {} has an empty history",
            rec.request_id
        )));
    }
    let scorer = trained.scorer(steps)?;
    let d = scorer.interest(&[rec])?;
    let (hist, _) = truncate_history(&rec.history, trained.cfg.encoder.max_n);
    let dm = trained.model.d_model();
    let d2 = d.clone().reshape(&[hist.len(), dm])?;
    let norms = crate::model::inspect_interest(&d2);
    let mut g = Graph::new(&trained.store);
    let dv = g.constant(d);
    let probes: Vec<BehaviorToken> = hist
        .iter()
        .map(|t| BehaviorToken {
            side: crate::encoder::SideInfo {
                view_time: 0.0,
                engagement: crate::encoder::Engagement::Impressed,
                ..t.side
            },
            timestamp: rec.timestamp,
            ..t.clone()
        })
        .collect();
    let refs: Vec<&BehaviorToken> = probes.iter().collect();
    let t_enc = trained.model.encoder.encode_items(&mut g, &refs)?;
    let z = trained
        .model
        .score_logits(&mut g, dv, t_enc, &vec![0; hist.len()])?;
    let mut rows: Vec<InspectRow> = hist
        .iter()
        .zip(g.value(z).data())
        .zip(norms)
        .enumerate()
        .map(|(i, ((tok, &z), norm))| InspectRow {
            position: i,
            item_id: tok.item_id,
            category: tok.side.category,
            category_prob: crate::numerics::sigmoid(z),
            norm,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.category_prob
            .total_cmp(&b.category_prob)
            .then(a.position.cmp(&b.position))
    });
    Ok(rows)
}

/// An ablation axis and the values it sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub values: Vec<String>,
}

impl Axis {
    /// `name` alone takes the standard sweep; `name=a,b,c` picks values.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, values) = match spec.split_once('=') {
            Some((n, v)) => (
                n.trim(),
                v.split(',').map(|s| s.trim().to_string()).collect(),
            ),
            None => (spec.trim(), Self::standard(spec.trim())?),
        };
        let axis = Self {
            name: name.to_string(),
            values,
        };
        let probe = TrainConfig::default();
        for v in &axis.values {
            axis.apply(&probe, v)?;
        }
        if axis.values.is_empty() {
            return arg_err(format!("axis {name} has no values"));
        }
        Ok(axis)
    }

    pub fn standard(name: &str) -> Result<Vec<String>> {
        let v: &[&str] = match name {
            "conditioning" => &["additive", "concat", "cross", "none"],
            "gate" => &["profile", "learnt", "none"],
            "noise" => &["nonoise", "default", "noise2000"],
            "depth" => &["2", "4", "6", "8"],
            "lambda" => &["0", "0.01", "0.1", "1"],
            other => return arg_err(format!("unknown ablation axis '{other}'")),
        };
        Ok(v.iter().map(|s| s.to_string()).collect())
    }

    pub fn apply(&self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = *base;
        match self.name.as_str() {
            "conditioning" => cfg.model.conditioning = Conditioning::parse(value)?,
            "gate" => cfg.model.gate = GateMode::parse(value)?,
            "noise" => {
                cfg.diffusion = DiffusionConfig::from_profile(NoiseProfile::parse(value)?);
                cfg.eval_steps = cfg.eval_steps.min(cfg.diffusion.t_steps);
            }
            "depth" => {
                cfg.model.layers = value
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad depth '{value}'")))?;
                cfg.model.inject_after = None;
            }
            "lambda" => {
                cfg.loss.lambda = value
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad lambda '{value}'")))?;
            }
            other => return arg_err(format!("unknown ablation axis '{other}'")),
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub cell_id: usize,
    pub seed: u64,
    pub values: BTreeMap<String, String>,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

/// Cartesian product of axis values, in row-major order.
fn cell_values(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for c in &cells {
            for v in &axis.values {
                let mut c = c.clone();
                c.push((axis.name.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

/// Worker count from `DIFFRANK_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("DIFFRANK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// One train + eval per (cell, seed). Failed cells carry their error and
/// the matrix carries on.
pub fn run_ablation_matrix(
    train_data: &[RequestRecord],
    eval_data: &[RequestRecord],
    base: &TrainConfig,
    axes: &[Axis],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationCell>> {
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = axes.iter().find(|a| !seen.insert(a.name.as_str())) {
        return arg_err(format!("axis {} given twice", dup.name));
    }
    let seeds = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    let mut jobs = Vec::new();
    for values in cell_values(axes) {
        for &seed in &seeds {
            jobs.push((jobs.len(), seed, values.clone()));
        }
    }
    let run = |(cell_id, seed, values): &(usize, u64, Vec<(String, String)>)| -> AblationCell {
        let outcome = (|| {
            let mut cfg = TrainConfig {
                seed: *seed,
                ..*base
            };
            for (name, v) in values {
                let axis = Axis {
                    name: name.clone(),
                    values: vec![],
                };
                cfg = axis.apply(&cfg, v)?;
            }
            train(train_data, Some(eval_data), &cfg).map(|(_, r)| r)
        })();
        let (report, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => {
                log::warn!("ablation cell {cell_id} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        AblationCell {
            cell_id: *cell_id,
            seed: *seed,
            values: values.iter().cloned().collect(),
            report,
            error,
        }
    };
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return Ok(jobs.iter().map(run).collect());
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let cell = run(job);
                results
                    .lock()
                    .expect("no worker panics holding the lock")
                    .push(cell);
            });
        }
    });
    let mut cells = results.into_inner().expect("workers finished");
    cells.sort_by_key(|c| c.cell_id);
    Ok(cells)
}

/// Comparison table: cell id, seed, one column per axis, then results.
pub fn ablation_csv(cells: &[AblationCell], axes: &[Axis]) -> String {
    let mut out = String::from("cell_id,seed");
    for a in axes {
        out.push(',');
        out.push_str(&a.name);
    }
    out.push_str(",auc,gauc,loss_final,seconds,n_params,error\n");
    let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for c in cells {
        out.push_str(&format!("{},{}", c.cell_id, c.seed));
        for a in axes {
            out.push(',');
            out.push_str(c.values.get(&a.name).map_or("", String::as_str));
        }
        let r = c.report.as_ref();
        let m = r.and_then(|r| r.metrics);
        out.push_str(&format!(
            ",{},{},{},{},{},{}\n",
            num(m.map(|m| m.auc)),
            num(m.map(|m| m.gauc)),
            num(r.and_then(RunReport::final_loss)),
            num(r.map(|r| r.seconds)),
            r.map_or(String::new(), |r| r.n_params.to_string()),
            c.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ));
    }
    out
}

#[cfg(test)]
#[path = "trainer_tests.rs"]
mod tests;
