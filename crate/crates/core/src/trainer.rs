//! Objectives and the optimization loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triplet};
use crate::metrics::knowledge_f1;
use crate::kqa::{KqaItem, MetricReport};
use crate::model::{ContrastiveHead, Example, ItemForward, ModelConfig, Subgraphs, Surge};
use crate::retriever::{retrieval_metrics, CandidateSet, RetrievalMetrics};
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unsupervised,
    SemiSupervised,
    Contrastive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Unsupervised => "unsupervised",
            Mode::SemiSupervised => "semi_supervised",
            Mode::Contrastive => "contrastive",
        }
    }

    pub fn supervised(self) -> bool {
        self != Mode::Unsupervised
    }

    pub fn contrastive(self) -> bool {
        self == Mode::Contrastive
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::Unsupervised, Mode::SemiSupervised, Mode::Contrastive]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "mode",
                name: s.to_string(),
            })
    }
}

/// Checkpoint selection metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// KQA F1, or unigram F1 when there are no KQA items.
    Kqa,
    Mrr,
    Last,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kqa" => Ok(Selection::Kqa),
            "mrr" => Ok(Selection::Mrr),
            "last" => Ok(Selection::Last),
            _ => Err(Error::Unknown {
                kind: "selection metric",
                name: s.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_triplets: usize,
    pub k_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub clip_norm: f64,
    /// Condition on every `n`-subset instead of sampling when there are at
    /// most `exhaustive_limit` of them.
    pub exhaustive: bool,
    pub exhaustive_limit: usize,
    pub selection: Selection,
    /// Validation examples scored per epoch; 0 means all.
    pub eval_limit: usize,
    pub model: ModelConfig,
}

pub const REQUIRED_KEYS: [&str; 11] = [
    "n_triplets",
    "k_samples",
    "lr",
    "weight_decay",
    "warmup_ratio",
    "batch_size",
    "epochs",
    "max_hist_len",
    "max_know_len",
    "seed",
    "mode",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_triplets: 3,
            k_samples: 4,
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.06,
            batch_size: 24,
            epochs: 30,
            seed: 0,
            mode: Mode::Contrastive,
            clip_norm: 1.0,
            exhaustive: false,
            exhaustive_limit: 64,
            selection: Selection::Kqa,
            eval_limit: 0,
            model: ModelConfig::default(),
        }
    }
}

fn value<V: FromStr>(map: &BTreeMap<String, (usize, String)>, key: &str) -> Result<Option<V>> {
    match map.get(key) {
        None => Ok(None),
        Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
            line: *line,
            message: format!("bad value `{v}` for `{key}`"),
        }),
    }
}

impl TrainConfig {
    /// Flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }
        if let Some(k) = REQUIRED_KEYS.iter().find(|k| !map.contains_key(**k)) {
            return Err(Error::Invalid(format!("missing config key `{k}`")));
        }
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = value(&map, $key)? { $field = v; })*
            };
        }
        set! {
            "n_triplets" => c.n_triplets,
            "k_samples" => c.k_samples,
            "lr" => c.lr,
            "weight_decay" => c.weight_decay,
            "warmup_ratio" => c.warmup_ratio,
            "batch_size" => c.batch_size,
            "epochs" => c.epochs,
            "seed" => c.seed,
            "mode" => c.mode,
            "clip_norm" => c.clip_norm,
            "exhaustive" => c.exhaustive,
            "exhaustive_limit" => c.exhaustive_limit,
            "selection" => c.selection,
            "eval_limit" => c.eval_limit,
            "max_hist_len" => c.model.max_hist_len,
            "max_know_len" => c.model.max_know_len,
            "d_model" => c.model.d_model,
            "n_heads" => c.model.n_heads,
            "n_layers" => c.model.n_layers,
            "ffn_width" => c.model.ffn_width,
            "max_positions" => c.model.max_positions,
            "max_response_len" => c.model.max_response_len,
            "hops" => c.model.hops,
            "max_candidates" => c.model.max_candidates,
            "variant" => c.model.variant,
        }
        const KNOWN: [&str; 25] = [
            "n_triplets", "k_samples", "lr", "weight_decay", "warmup_ratio", "batch_size",
            "epochs", "seed", "mode", "clip_norm", "exhaustive", "exhaustive_limit",
            "selection", "eval_limit", "max_hist_len", "max_know_len", "d_model", "n_heads",
            "n_layers", "ffn_width", "max_positions", "max_response_len", "hops",
            "max_candidates", "variant",
        ];
        if let Some((k, (line, _))) = map.iter().find(|(k, _)| !KNOWN.contains(&k.as_str())) {
            return Err(Error::Parse {
                line: *line,
                message: format!("unknown key `{k}`"),
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.n_triplets == 0 || self.k_samples == 0 || self.batch_size == 0 {
            return bad("n_triplets, k_samples and batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1]");
        }
        if self.model.d_model % self.model.n_heads.max(1) != 0 || self.model.n_heads == 0 {
            return bad("d_model must be a multiple of n_heads");
        }
        if self.model.hops == 0 {
            return bad("hops must be at least 1");
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let sel = match self.selection {
            Selection::Kqa => "kqa",
            Selection::Mrr => "mrr",
            Selection::Last => "last",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("n_triplets", self.n_triplets.to_string()),
            ("k_samples", self.k_samples.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_hist_len", m.max_hist_len.to_string()),
            ("max_know_len", m.max_know_len.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.name().to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("exhaustive", self.exhaustive.to_string()),
            ("exhaustive_limit", self.exhaustive_limit.to_string()),
            ("selection", sel.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("ffn_width", m.ffn_width.to_string()),
            ("max_positions", m.max_positions.to_string()),
            ("max_response_len", m.max_response_len.to_string()),
            ("hops", m.hops.to_string()),
            ("max_candidates", m.max_candidates.to_string()),
            ("variant", m.variant.name().to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Learning rate for 0-based `step` out of `total`: linear warmup,
    /// then linear decay to zero.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup_ratio * total as f64).ceil() as usize;
        if step < warm {
            self.lr * (step + 1) as f64 / warm as f64
        } else {
            let rest = total.saturating_sub(warm).max(1);
            self.lr * (total.saturating_sub(step)) as f64 / rest as f64
        }
    }
}

/// `log Σ_j q_j p(y|x,Z_j)` with `q` the retriever's subgraph
/// probabilities renormalized over the given subgraphs.
pub fn loss_ret<T: Real>(g: &mut Graph<'_, T>, log_priors: &[Var], log_likelihoods: &[Var]) -> Result<Var> {
    if log_priors.is_empty() || log_priors.len() != log_likelihoods.len() {
        return Err(Error::Invalid("one prior per likelihood needed".into()));
    }
    let lp = g.concat_cols(log_priors)?;
    let q = g.log_softmax_rows(lp)?;
    let ll = g.concat_cols(log_likelihoods)?;
    let joint = g.add(q, ll)?;
    g.logsumexp_rows(joint)
}

/// Mean `log p(z*|x)` over gold candidates; `None` without any.
pub fn loss_sup<T: Real>(g: &mut Graph<'_, T>, log_probs: Var, gold: &[usize]) -> Result<Option<Var>> {
    if gold.is_empty() {
        return Ok(None);
    }
    let picked = g.select(log_probs, gold)?;
    let s = g.sum(picked);
    Ok(Some(g.scale(s, T::lit(1.0 / gold.len() as f64))))
}

/// Symmetric InfoNCE over cosine similarities divided by τ, averaged over
/// the batch. Each pair is `(graph vector, text vector)`.
pub fn loss_cont<T: Real>(g: &mut Graph<'_, T>, head: &ContrastiveHead, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Empty("contrastive batch".into()));
    }
    let b = pairs.len();
    let zs: Vec<Var> = pairs.iter().map(|p| p.0).collect();
    let hs: Vec<Var> = pairs.iter().map(|p| p.1).collect();
    let z = g.concat_rows(&zs)?;
    let h = g.concat_rows(&hs)?;
    let z = head.zeta.forward(g, z)?;
    let h = head.xi.forward(g, h)?;
    let z = g.normalize_rows(z);
    let h = g.normalize_rows(h);
    let sim = g.matmul_bt(z, h)?;
    let tau = head.temperature(g);
    let inv = g.recip(tau);
    let logits = g.scale_var(sim, inv)?;
    let targets: Vec<usize> = (0..b).collect();
    let ones = vec![T::one(); b];
    let texts = g.log_softmax_pick(logits, &targets, &ones)?;
    let lt = g.transpose(logits);
    let graphs = g.log_softmax_pick(lt, &targets, &ones)?;
    let both = g.add(texts, graphs)?;
    Ok(g.scale(both, T::lit(0.5 / b as f64)))
}

/// Loss terms of one batch as graph nodes. All are to be maximized;
/// `objective` is their sum.
#[derive(Clone, Debug)]
pub struct Objective {
    pub ret: Var,
    pub sup: Option<Var>,
    pub cont: Option<Var>,
    pub objective: Var,
    pub missing_gold: usize,
}

/// `ret + sup + cont`, skipping absent terms.
pub fn combine<T: Real>(g: &mut Graph<'_, T>, ret: Var, sup: Option<Var>, cont: Option<Var>) -> Result<Var> {
    let mut total = ret;
    for v in [sup, cont].into_iter().flatten() {
        total = g.add(total, v)?;
    }
    Ok(total)
}

/// Batch objective over already computed item forwards.
pub fn objective<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Surge,
    items: &[ItemForward],
    mode: Mode,
) -> Result<Objective> {
    if items.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let scale = T::lit(1.0 / items.len() as f64);
    let mut rets = Vec::new();
    let mut sups = Vec::new();
    let mut pairs = Vec::new();
    let mut missing = 0;
    for it in items {
        let lls: Vec<Var> = it.passes.iter().map(|p| p.log_likelihood).collect();
        let r = match it.log_probs {
            None => lls[0],
            Some(_) => loss_ret(g, &it.subgraph_log_probs, &lls)?,
        };
        rets.push(r);
        if let Some(lp) = it.log_probs {
            if let Some(s) = loss_sup(g, lp, &it.gold_indices)? {
                sups.push(s);
            }
        }
        missing += it.missing_gold;
        if let Some(p) = it.best_pass() {
            if let Some(z) = p.graph_vector {
                pairs.push((z, p.text_vector));
            }
        }
    }
    let mean = |g: &mut Graph<'_, T>, v: &[Var]| -> Result<Var> {
        let row = g.concat_cols(v)?;
        let s = g.sum(row);
        Ok(g.scale(s, scale))
    };
    let ret = mean(g, &rets)?;
    let sup = if mode.supervised() && !sups.is_empty() {
        Some(mean(g, &sups)?)
    } else {
        None
    };
    let cont = if mode.contrastive() && !pairs.is_empty() {
        Some(loss_cont(g, &model.contrastive, &pairs)?)
    } else {
        None
    };
    let objective = combine(g, ret, sup, cont)?;
    Ok(Objective {
        ret,
        sup,
        cont,
        objective,
        missing_gold: missing,
    })
}

/// Subgraph choice for one item during training.
pub fn subgraph_choice(config: &TrainConfig, ex: &Example, seed: u64) -> Subgraphs {
    if config.exhaustive
        && crate::retriever::binomial(ex.candidates.len(), config.n_triplets) <= config.exhaustive_limit
    {
        Subgraphs::Exhaustive
    } else {
        Subgraphs::Sample {
            k: config.k_samples,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ret: f64,
    pub sup: f64,
    pub cont: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub missing_gold: usize,
    pub valid: MetricReport,
    pub selected: bool,
}

impl EpochRecord {
    pub fn to_text(&self) -> String {
        format!(
            "epoch={} loss={:.6} l_ret={:.6} l_sup={:.6} l_cont={:.6} steps={} skipped={} missing_gold={} valid_mrr={:.4} valid_hits1={:.4} valid_kqa_em={:.4} valid_kqa_f1={:.4} valid_unigram_f1={:.4} selected={}",
            self.epoch,
            self.loss,
            self.ret,
            self.sup,
            self.cont,
            self.steps,
            self.skipped_steps,
            self.missing_gold,
            self.valid.mrr,
            self.valid.hits[0],
            self.valid.kqa_em,
            self.valid.kqa_f1,
            self.valid.unigram_f1,
            self.selected
        )
    }
}

/// Inputs of a training run.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub kg: &'a KnowledgeGraph,
    pub vocab: &'a Vocab,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub valid_dialogues: Vec<Dialogue>,
    pub valid_kqa: Vec<KqaItem>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Surge,
    pub best: ParamStore<f32>,
    pub last: ParamStore<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub aborted: bool,
}

/// Retrieval, generation and every metric over aligned examples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub retrieval: RetrievalMetrics,
    pub candidates: Vec<CandidateSet>,
    pub responses: Vec<String>,
}

pub fn evaluate<T: Real>(
    model: &Surge,
    params: &ParamStore<T>,
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    examples: &[Example],
    dialogues: &[Dialogue],
    kqa: &[KqaItem],
    n_triplets: usize,
) -> Result<Evaluation> {
    let mut candidates = Vec::with_capacity(examples.len());
    let mut responses = Vec::with_capacity(examples.len());
    for ex in examples {
        let (set, out) = model.respond(params, kg, ex, n_triplets)?;
        candidates.push(set);
        responses.push(vocab.decode(&out));
    }
    let retrieval = retrieval_metrics(&candidates);
    let report = MetricReport::compute(dialogues, &responses, kqa, Some(&retrieval))?;
    Ok(Evaluation {
        report,
        retrieval,
        candidates,
        responses,
    })
}

/// Each example's gold triplets with the tail swapped for a different tail
/// entity of the graph.
pub fn corrupted_tail_probes(kg: &KnowledgeGraph, examples: &[Example], seed: u64) -> Vec<Vec<Triplet>> {
    let mut tails: Vec<_> = kg.triplets().iter().map(|t| t.tail).collect();
    tails.sort_unstable();
    tails.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|ex| {
            ex.gold
                .iter()
                .map(|t| {
                    let others: Vec<_> = tails.iter().copied().filter(|&e| e != t.tail && e != t.head).collect();
                    let tail = *others.choose(&mut rng).unwrap_or(&t.tail);
                    Triplet::new(t.head, t.relation, tail)
                })
                .collect()
        })
        .collect()
}

/// Mean knowledge F1 of responses generated under `probes[i]` against the
/// probe triplets' text.
pub fn probe_knowledge_f1<T: Real>(
    model: &Surge,
    params: &ParamStore<T>,
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    examples: &[Example],
    probes: &[Vec<Triplet>],
) -> Result<f64> {
    if examples.len() != probes.len() || examples.is_empty() {
        return Err(Error::shape("probe_knowledge_f1", "one probe per example"));
    }
    let mut total = 0.0;
    for (ex, z) in examples.iter().zip(probes) {
        let out = vocab.decode(&model.generate(params, kg, ex, z)?);
        let text: Vec<String> = z.iter().map(|t| kg.triplet_text(t)).collect();
        total += knowledge_f1(&out, &text.join(" "));
    }
    Ok(total / examples.len() as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

fn selection_score(sel: Selection, r: &MetricReport) -> f64 {
    match sel {
        Selection::Kqa if r.kqa_items > 0 => r.kqa_f1,
        Selection::Kqa => r.unigram_f1,
        Selection::Mrr => r.mrr,
        Selection::Last => 0.0,
    }
}

/// Trains from a fresh seeded initialization. `on_epoch` sees every epoch
/// record with the current parameters.
pub fn train(
    config: &TrainConfig,
    data: &TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Surge::new(
        &mut store,
        config.model,
        data.vocab.len(),
        data.kg.relations().len(),
        &mut rng,
    )?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    })
    .without_decay([model.contrastive.log_tau]);
    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let eval_n = match config.eval_limit {
        0 => data.valid.len(),
        n => n.min(data.valid.len()),
    };
    let valid_ids: std::collections::HashSet<&str> =
        data.valid[..eval_n].iter().map(|e| e.id.as_str()).collect();
    let valid_dialogues: Vec<Dialogue> = data
        .valid_dialogues
        .iter()
        .filter(|d| valid_ids.contains(d.id.as_str()))
        .cloned()
        .collect();

    let mut best = store.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut step = 0;
    let mut bad_in_a_row = 0;
    let mut aborted = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=config.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.seed);
        epoch_rng.set_stream(epoch as u64);
        order.shuffle(&mut epoch_rng);
        let (mut loss_sum, mut ret_sum, mut sup_sum, mut cont_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut done, mut skipped, mut missing) = (0, 0, 0);
        for batch in order.chunks(config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| epoch_rng.gen()).collect();
            let lr = config.lr_at(step, total_steps);
            step += 1;
            let result = {
                let mut g = Graph::new(&store);
                let mut fwd = Vec::with_capacity(batch.len());
                for (&i, &seed) in batch.iter().zip(&seeds) {
                    let ex = &data.train[i];
                    let choice = subgraph_choice(config, ex, seed);
                    fwd.push(model.forward_item(&mut g, data.kg, ex, None, config.n_triplets, &choice)?);
                }
                let obj = objective(&mut g, &model, &fwd, config.mode)?;
                let neg = g.scale(obj.objective, -1.0);
                let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v) as f64);
                let parts = (
                    g.scalar(neg) as f64,
                    value(Some(obj.ret)),
                    value(obj.sup),
                    value(obj.cont),
                    obj.missing_gold,
                );
                let grads = if parts.0.is_finite() { Some(g.backward(neg)?) } else { None };
                (parts, grads)
            };
            let ((loss, ret, sup, cont, miss), grads) = result;
            missing += miss;
            store.zero_grad();
            let ok = match grads {
                Some(gr) => {
                    store.accumulate(&gr);
                    clip_grad_norm(&mut store, config.clip_norm).is_finite()
                }
                None => false,
            };
            if !ok {
                skipped += 1;
                bad_in_a_row += 1;
                log::warn!("epoch {epoch} step {step}: non-finite loss or gradient, step skipped");
                store.zero_grad();
                if bad_in_a_row >= 2 {
                    aborted = true;
                    break;
                }
                continue;
            }
            bad_in_a_row = 0;
            opt.step(&mut store, lr)?;
            model.contrastive.clamp(&mut store);
            store.zero_grad();
            loss_sum += loss;
            ret_sum += ret;
            sup_sum += sup;
            cont_sum += cont;
            done += 1;
        }
        let n = done.max(1) as f64;
        let eval = evaluate(
            &model,
            &store,
            data.kg,
            data.vocab,
            &data.valid[..eval_n],
            &valid_dialogues,
            &data.valid_kqa,
            config.n_triplets,
        )?;
        let score = selection_score(config.selection, &eval.report);
        let selected = config.selection == Selection::Last || score > best_score;
        if selected {
            best_score = score;
            best = store.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            ret: ret_sum / n,
            sup: sup_sum / n,
            cont: cont_sum / n,
            steps: done,
            skipped_steps: skipped,
            missing_gold: missing,
            valid: eval.report,
            selected,
        };
        log::info!("{}", record.to_text());
        on_epoch(&record, &store)?;
        log.push(record);
        if aborted {
            log::error!("training diverged in epoch {epoch}; keeping epoch {best_epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        last: store,
        best,
        best_epoch,
        log,
        aborted,
    })
}

/// Constant stand-ins for the retriever context of each example, taken
/// from the current parameters.
pub fn frozen_contexts<T: Real>(model: &Surge, params: &ParamStore<T>, examples: &[Example]) -> Result<Vec<Option<Tensor<T>>>> {
    examples
        .iter()
        .map(|ex| {
            if ex.candidates.is_empty() {
                return Ok(None);
            }
            let mut g = Graph::inference(params);
            let c = model.context(&mut g, ex)?;
            Ok(Some(g.value(c).clone()))
        })
        .collect()
}
