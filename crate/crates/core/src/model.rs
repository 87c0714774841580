//! The full model: shared encoder-decoder, retriever, graph perturbation
//! and contrastive projections, plus per-dialogue forward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::encoding::{build_sequence, embed_sequence, EncodingVariant, Limits, Perturbation};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Mention, Triplet, DEFAULT_MAX_CANDIDATES};
use crate::retriever::{
    enumerate_subgraphs, gold_flags, sample_subgraphs, CandidateSet, Retriever, SampledSubgraph,
};
use crate::seq::{decoder_io, sequence_log_likelihood, SeqConfig, SeqModel};
use crate::tensor::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::vocab::{TokenId, Vocab};

pub const MIN_TEMPERATURE: f64 = 1e-4;
pub const INIT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    pub variant: EncodingVariant,
    pub hops: usize,
    pub max_candidates: usize,
    pub max_hist_len: usize,
    pub max_know_len: usize,
    pub max_response_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_width: 128,
            max_positions: 512,
            variant: EncodingVariant::InvariantEfficient,
            hops: 1,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            max_hist_len: 256,
            max_know_len: 128,
            max_response_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn limits(&self) -> Limits {
        Limits {
            max_hist_len: self.max_hist_len,
            max_know_len: self.max_know_len,
            max_positions: self.max_positions,
        }
    }
}

/// ζ, ξ and the temperature of the graph-text objective.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveHead {
    pub zeta: Linear,
    pub xi: Linear,
    /// ln τ, 1 × 1.
    pub log_tau: ParamId,
}

impl ContrastiveHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            zeta: Linear::new(store, "cont.zeta", width, width, true, rng)?,
            xi: Linear::new(store, "cont.xi", width, width, true, rng)?,
            log_tau: store.filled("cont.log_tau", &[1, 1], INIT_TEMPERATURE.ln())?,
        })
    }

    /// τ = exp(ln τ), held at `MIN_TEMPERATURE` (without gradient) below it.
    pub fn temperature<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        let log_tau = g.param(self.log_tau);
        if g.scalar(log_tau).as_f64() < MIN_TEMPERATURE.ln() {
            g.constant(Tensor::scalar(T::lit(MIN_TEMPERATURE)))
        } else {
            g.exp(log_tau)
        }
    }

    pub fn tau<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.log_tau).data()[0].as_f64().exp().max(MIN_TEMPERATURE)
    }

    pub fn set_tau<T: Real>(&self, store: &mut ParamStore<T>, tau: f64) {
        store.get_mut(self.log_tau).data_mut()[0] = T::lit(tau.ln());
    }

    pub fn clamp<T: Real>(&self, store: &mut ParamStore<T>) {
        let floor = MIN_TEMPERATURE.ln();
        for v in store.get_mut(self.log_tau).data_mut() {
            if !(v.as_f64() >= floor) {
                *v = T::lit(floor);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Surge {
    pub config: ModelConfig,
    pub seq: SeqModel,
    pub perturbation: Perturbation,
    pub retriever: Retriever,
    pub contrastive: ContrastiveHead,
}

impl Surge {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: ModelConfig,
        vocab_size: usize,
        n_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d_model;
        let seq_config = SeqConfig {
            d_model: d,
            n_heads: config.n_heads,
            n_enc_layers: config.n_layers,
            n_dec_layers: config.n_layers,
            ffn_width: config.ffn_width,
            max_positions: config.max_positions,
            vocab_size,
        };
        Ok(Self {
            config,
            seq: SeqModel::new(store, seq_config, rng)?,
            perturbation: Perturbation::new(store, d, n_relations, rng)?,
            retriever: Retriever::new(store, d, n_relations, rng)?,
            contrastive: ContrastiveHead::new(store, d, rng)?,
        })
    }
}

/// A dialogue turned into ids, entity mentions and candidate triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub history: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub mentions: Vec<Mention>,
    pub candidates: Vec<Triplet>,
    pub gold: Vec<Triplet>,
}

pub fn prepare(
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    dialogue: &Dialogue,
    config: &ModelConfig,
) -> Result<Example> {
    let full = vocab.encode(&dialogue.history_text());
    let history = full[full.len().saturating_sub(config.max_hist_len)..].to_vec();
    let mentions = kg.link_entities(&history);
    let mut seeds: Vec<_> = Vec::new();
    for m in &mentions {
        if !seeds.contains(&m.entity) {
            seeds.push(m.entity);
        }
    }
    let candidates = if seeds.is_empty() {
        Vec::new()
    } else {
        kg.khop_candidates(&seeds, config.hops, config.max_candidates)?
    };
    let mut response = vocab.encode(&dialogue.response);
    response.truncate(config.max_response_len);
    Ok(Example {
        id: dialogue.id.clone(),
        history,
        response,
        mentions,
        candidates,
        gold: dialogue.gold(kg),
    })
}

/// How the subgraphs of one item are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Subgraphs {
    /// `k` samples from the retriever, seeded.
    Sample { k: usize, seed: u64 },
    /// Every `n`-subset of the candidates.
    Exhaustive,
    /// Fixed candidate index lists.
    Given(Vec<Vec<usize>>),
}

/// Generator outputs for one conditioned subgraph.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    /// `log p(y | x, Z)`, 1 × 1.
    pub log_likelihood: Var,
    /// Mean encoder state over the prefix rows (1 × d); `None` with no
    /// prefix.
    pub graph_vector: Option<Var>,
    /// Mean decoder state over the response steps (1 × d).
    pub text_vector: Var,
    pub prefix_len: usize,
}

/// Everything the losses need from one item.
#[derive(Clone, Debug)]
pub struct ItemForward {
    /// 1 × C, or `None` without candidates.
    pub log_probs: Option<Var>,
    pub subgraphs: Vec<SampledSubgraph>,
    pub passes: Vec<GeneratorPass>,
    /// `log p(Z_j|x)` per subgraph, each 1 × 1.
    pub subgraph_log_probs: Vec<Var>,
    pub gold_indices: Vec<usize>,
    pub missing_gold: usize,
}

impl ItemForward {
    /// The pass whose subgraph the retriever likes best; ties go to the
    /// first.
    pub fn best_pass(&self) -> Option<&GeneratorPass> {
        if self.subgraphs.is_empty() {
            return self.passes.first();
        }
        let mut best = 0;
        for (j, s) in self.subgraphs.iter().enumerate() {
            if s.log_prob > self.subgraphs[best].log_prob {
                best = j;
            }
        }
        self.passes.get(best)
    }
}

impl Surge {
    /// Encoder states of the history alone, the retriever's context.
    pub fn context<T: Real>(&self, g: &mut Graph<'_, T>, ex: &Example) -> Result<Var> {
        if ex.history.is_empty() {
            return Err(Error::Empty(format!("dialogue `{}` has no history", ex.id)));
        }
        let x = self.seq.embed(g, &ex.history)?;
        Ok(self.seq.encode(g, x, &vec![true; ex.history.len()])?.states)
    }

    /// `log p(z|x)` over the candidates, 1 × C.
    pub fn retrieval_log_probs<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        ex: &Example,
        context: Var,
    ) -> Result<Var> {
        let mask = vec![true; ex.history.len()];
        self.retriever
            .log_probs(g, &ex.candidates, context, &mask, &ex.mentions)
    }

    /// Teacher-forced pass over the response given `subgraph`.
    pub fn generator_pass<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        kg: &KnowledgeGraph,
        ex: &Example,
        subgraph: &[Triplet],
    ) -> Result<GeneratorPass> {
        let seq = build_sequence(kg, self.config.variant, &ex.history, subgraph, self.config.limits())?;
        if seq.tokens.is_empty() {
            return Err(Error::Empty(format!("dialogue `{}` has no input", ex.id)));
        }
        let (x, _) = embed_sequence(g, &self.seq, &self.perturbation, kg, &seq)?;
        let enc = self.seq.encode(g, x, &vec![true; seq.tokens.len()])?;
        let (inputs, targets) = decoder_io(&ex.response);
        let (logits, hidden) = self.seq.teacher_forced(g, &enc, &inputs)?;
        let log_likelihood = sequence_log_likelihood(g, logits, &targets, &vec![true; targets.len()])?;
        let graph_vector = if seq.prefix_len > 0 {
            let p = g.slice_rows(enc.states, 0, seq.prefix_len)?;
            Some(g.mean_rows(p)?)
        } else {
            None
        };
        let text_vector = g.mean_rows(hidden)?;
        Ok(GeneratorPass {
            log_likelihood,
            graph_vector,
            text_vector,
            prefix_len: seq.prefix_len,
        })
    }

    /// Retrieval plus one generator pass per chosen subgraph. `context` is
    /// the output of [`Surge::context`] or a constant standing in for it.
    pub fn forward_item<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        kg: &KnowledgeGraph,
        ex: &Example,
        context: Option<Var>,
        n_triplets: usize,
        choice: &Subgraphs,
    ) -> Result<ItemForward> {
        if ex.candidates.is_empty() {
            let pass = self.generator_pass(g, kg, ex, &[])?;
            return Ok(ItemForward {
                log_probs: None,
                subgraphs: Vec::new(),
                passes: vec![pass],
                subgraph_log_probs: Vec::new(),
                gold_indices: Vec::new(),
                missing_gold: ex.gold.len(),
            });
        }
        let context = match context {
            Some(c) => c,
            None => self.context(g, ex)?,
        };
        let lp = self.retrieval_log_probs(g, ex, context)?;
        let probs: Vec<f64> = g.value(lp).data().iter().map(|x| x.as_f64().exp()).collect();
        let subgraphs = match choice {
            Subgraphs::Sample { k, seed } => sample_subgraphs(&probs, n_triplets, *k, *seed),
            Subgraphs::Exhaustive => enumerate_subgraphs(&probs, n_triplets),
            Subgraphs::Given(sets) => sets
                .iter()
                .map(|idx| SampledSubgraph {
                    log_prob: idx.iter().map(|&i| probs[i].ln()).sum(),
                    indices: idx.clone(),
                })
                .collect(),
        };
        if subgraphs.is_empty() {
            return Err(Error::Empty("no subgraphs to condition on".into()));
        }
        let mut passes = Vec::with_capacity(subgraphs.len());
        let mut subgraph_log_probs = Vec::with_capacity(subgraphs.len());
        for s in &subgraphs {
            let z: Vec<Triplet> = s.indices.iter().map(|&i| ex.candidates[i]).collect();
            let picked = g.select(lp, &s.indices)?;
            subgraph_log_probs.push(g.sum(picked));
            passes.push(self.generator_pass(g, kg, ex, &z)?);
        }
        let gold_indices: Vec<usize> = ex
            .gold
            .iter()
            .filter_map(|t| ex.candidates.iter().position(|c| c == t))
            .collect();
        Ok(ItemForward {
            log_probs: Some(lp),
            missing_gold: ex.gold.len() - gold_indices.len(),
            gold_indices,
            subgraphs,
            passes,
            subgraph_log_probs,
        })
    }

    /// Scored candidates for `ex`.
    pub fn retrieve<T: Real>(&self, params: &ParamStore<T>, ex: &Example) -> Result<CandidateSet> {
        let gold = gold_flags(&ex.candidates, &ex.gold);
        if ex.candidates.is_empty() {
            return CandidateSet::new(Vec::new(), Vec::new(), gold);
        }
        let mut g = Graph::inference(params);
        let ctx = self.context(&mut g, ex)?;
        let mask = vec![true; ex.history.len()];
        let scores = self
            .retriever
            .scores(&mut g, &ex.candidates, ctx, &mask, &ex.mentions)?;
        let scores = g.value(scores).data().iter().map(|x| x.as_f64()).collect();
        CandidateSet::new(ex.candidates.clone(), scores, gold)
    }

    /// Greedy response conditioned on `subgraph`.
    pub fn generate<T: Real>(
        &self,
        params: &ParamStore<T>,
        kg: &KnowledgeGraph,
        ex: &Example,
        subgraph: &[Triplet],
    ) -> Result<Vec<TokenId>> {
        let mut g = Graph::inference(params);
        let seq = build_sequence(kg, self.config.variant, &ex.history, subgraph, self.config.limits())?;
        if seq.tokens.is_empty() {
            return Ok(Vec::new());
        }
        let (x, _) = embed_sequence(&mut g, &self.seq, &self.perturbation, kg, &seq)?;
        let enc = self.seq.encode(&mut g, x, &vec![true; seq.tokens.len()])?;
        self.seq.greedy_decode(&mut g, &enc, self.config.max_response_len)
    }

    /// Mean decoder state of the gold response given `subgraph`.
    pub fn text_vector<T: Real>(
        &self,
        params: &ParamStore<T>,
        kg: &KnowledgeGraph,
        ex: &Example,
        subgraph: &[Triplet],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::inference(params);
        let pass = self.generator_pass(&mut g, kg, ex, subgraph)?;
        Ok(g.value(pass.text_vector).data().iter().map(|x| x.as_f64()).collect())
    }

    /// Retrieval followed by generation with the top `n` triplets.
    pub fn respond<T: Real>(
        &self,
        params: &ParamStore<T>,
        kg: &KnowledgeGraph,
        ex: &Example,
        n_triplets: usize,
    ) -> Result<(CandidateSet, Vec<TokenId>)> {
        let set = self.retrieve(params, ex)?;
        let z = set.top(n_triplets);
        let out = self.generate(params, kg, ex, &z)?;
        Ok((set, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::load_kg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) const KG: &str = "Ada\tlikes\tBob\nAda\tknows\tCy\nAda\tlikes\tDee\nBob\tknows\tCy\nEve\tknows\tFay\n";

    fn fixture() -> (Vocab, KnowledgeGraph, Surge, ParamStore<f64>) {
        let vocab = Vocab::build([KG, "hello who does like ? she likes ."]);
        let kg = load_kg(KG, &vocab).unwrap();
        let mut store = ParamStore::new();
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ffn_width: 8,
            max_positions: 32,
            ..ModelConfig::default()
        };
        let model = Surge::new(
            &mut store,
            config,
            vocab.len(),
            kg.relations().len(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        (vocab, kg, model, store)
    }

    fn dialogue(history: &str, gold: &[[&str; 3]]) -> Dialogue {
        Dialogue {
            id: "t".into(),
            history: vec![history.into()],
            response: "she likes Bob .".into(),
            gold_triplets: gold.iter().map(|g| g.map(str::to_string)).collect(),
        }
    }

    #[test]
    fn prepare_links_and_collects_candidates() {
        let (vocab, kg, model, _) = fixture();
        let ex = prepare(&kg, &vocab, &dialogue("hello Ada", &[["Ada", "likes", "Bob"]]), &model.config).unwrap();
        assert_eq!(ex.mentions.len(), 1);
        assert_eq!(ex.candidates.len(), 3);
        assert_eq!(ex.gold, vec![kg.lookup("Ada", "likes", "Bob").unwrap()]);
        let none = prepare(&kg, &vocab, &dialogue("hello", &[]), &model.config).unwrap();
        assert!(none.candidates.is_empty());
    }

    #[test]
    fn history_is_cut_from_the_front() {
        let (vocab, kg, mut model, _) = fixture();
        model.config.max_hist_len = 2;
        let ex = prepare(&kg, &vocab, &dialogue("Ada hello who", &[]), &model.config).unwrap();
        assert_eq!(vocab.decode(&ex.history), "hello who");
        assert!(ex.candidates.is_empty());
    }

    #[test]
    fn forward_shapes() {
        let (vocab, kg, model, store) = fixture();
        let ex = prepare(&kg, &vocab, &dialogue("who does Ada like ?", &[["Ada", "likes", "Bob"]]), &model.config).unwrap();
        let mut g = Graph::new(&store);
        let out = model
            .forward_item(&mut g, &kg, &ex, None, 2, &Subgraphs::Sample { k: 4, seed: 3 })
            .unwrap();
        assert_eq!(out.passes.len(), 4);
        assert_eq!(out.gold_indices.len(), 1);
        let lp = g.value(out.log_probs.unwrap());
        let total: f64 = lp.data().iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for p in &out.passes {
            assert!(g.scalar(p.log_likelihood) < 0.0);
            assert!(p.graph_vector.is_some());
        }

        let ex = prepare(&kg, &vocab, &dialogue("hello", &[]), &model.config).unwrap();
        let out = model
            .forward_item(&mut g, &kg, &ex, None, 2, &Subgraphs::Exhaustive)
            .unwrap();
        assert_eq!(out.passes.len(), 1);
        assert!(out.passes[0].graph_vector.is_none());
    }

    #[test]
    fn respond_returns_known_tokens() {
        let (vocab, kg, model, store) = fixture();
        let ex = prepare(&kg, &vocab, &dialogue("who does Ada like ?", &[]), &model.config).unwrap();
        let (set, out) = model.respond(&store, &kg, &ex, 2).unwrap();
        assert_eq!(set.len(), 3);
        assert!(out.len() <= model.config.max_response_len);
        assert!(out.iter().all(|&t| (t as usize) < vocab.len()));
    }

    #[test]
    fn temperature_is_clamped() {
        let (_, _, model, mut store) = fixture();
        model.contrastive.set_tau(&mut store, 1e-6);
        {
            let mut g = Graph::new(&store);
            let t = model.contrastive.temperature(&mut g);
            assert_eq!(g.scalar(t), MIN_TEMPERATURE);
        }
        model.contrastive.clamp(&mut store);
        assert!((model.contrastive.tau(&store) - MIN_TEMPERATURE).abs() < 1e-18);
        store.get_mut(model.contrastive.log_tau).data_mut()[0] = f64::NAN;
        model.contrastive.clamp(&mut store);
        assert!((model.contrastive.tau(&store) - MIN_TEMPERATURE).abs() < 1e-18);
    }
}
