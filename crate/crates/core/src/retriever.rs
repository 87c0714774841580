//! Context-conditioned triplet scoring, subgraph sampling, ranking metrics
//! and the random and BM25 baselines.

use std::collections::HashMap;

use itertools::Itertools;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{ehgnn_edge_pass, gcn_node_pass, LocalGraph, MessagePassing, RELATION_WIDTH};
use crate::kg::{EntityId, Mention, Triplet};
use crate::tensor::nn::{Mlp, INIT_STD};
use crate::tensor::{softmax, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::vocab::TokenId;

/// Layer count of the node and edge passes.
pub const GNN_DEPTH: usize = 2;

#[derive(Clone, Debug)]
pub struct Retriever {
    pub pool: Mlp,
    pub gcn: MessagePassing,
    pub ehgnn: MessagePassing,
    /// One `RELATION_WIDTH` row per relation id, inverses included.
    pub relations: ParamId,
    pub triplet: Mlp,
    pub width: usize,
}

impl Retriever {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        width: usize,
        n_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            pool: Mlp::new(store, "ret.pool", width, width, 1, rng)?,
            gcn: MessagePassing::new(store, "ret.gcn", width, GNN_DEPTH, rng)?,
            ehgnn: MessagePassing::new(store, "ret.ehgnn", RELATION_WIDTH, GNN_DEPTH, rng)?,
            relations: store.normal("ret.rel", &[n_relations, RELATION_WIDTH], INIT_STD, rng)?,
            triplet: Mlp::new(
                store,
                "ret.triplet",
                2 * width + RELATION_WIDTH,
                width,
                width,
                rng,
            )?,
            width,
        })
    }

    /// Attention-pooled context vector `s(x)` (1 × d) and the weights α
    /// (1 × n). Masked positions get zero weight.
    pub fn context_embedding<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        states: Var,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let (n, _) = g.shape(states);
        if mask.len() != n {
            return Err(Error::shape("context_embedding", "mask length"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Empty("every context position is masked".into()));
        }
        let scores = self.pool.forward(g, states)?;
        let row = g.transpose(scores);
        let alpha = g.softmax_rows(row, Some(mask))?;
        let s = g.matmul(alpha, states)?;
        Ok((s, alpha))
    }

    /// `d(z)` for every edge of `graph`, in the graph's canonical order.
    pub fn triplet_embeddings<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        graph: &LocalGraph,
        node_init: Var,
    ) -> Result<Var> {
        let nodes = gcn_node_pass(g, &self.gcn, graph, node_init)?;
        let table = g.param(self.relations);
        let rel_idx: Vec<usize> = graph.edges.iter().map(|e| e.relation as usize).collect();
        let r0 = g.gather_rows(table, &rel_idx)?;
        let r = ehgnn_edge_pass(g, &self.ehgnn, graph, r0)?;
        let heads: Vec<usize> = graph.edges.iter().map(|e| e.head).collect();
        let tails: Vec<usize> = graph.edges.iter().map(|e| e.tail).collect();
        let h = g.gather_rows(nodes, &heads)?;
        let t = g.gather_rows(nodes, &tails)?;
        let cat = g.concat_cols(&[h, r, t])?;
        self.triplet.forward(g, cat)
    }

    /// Log-probabilities `log p(z|x)` over `candidates` (1 × C, in the given
    /// order). `states` are the context encoder rows; gradients are not
    /// passed back into them.
    pub fn log_probs<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        candidates: &[Triplet],
        states: Var,
        mask: &[bool],
        mentions: &[Mention],
    ) -> Result<Var> {
        let scores = self.scores(g, candidates, states, mask, mentions)?;
        g.log_softmax_rows(scores)
    }

    /// Inner products `d(z)ᵀ s(x)` (1 × C).
    pub fn scores<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        candidates: &[Triplet],
        states: Var,
        mask: &[bool],
        mentions: &[Mention],
    ) -> Result<Var> {
        if candidates.is_empty() {
            return Err(Error::Empty("no candidate triplets".into()));
        }
        let states = g.detach(states);
        let (s, _) = self.context_embedding(g, states, mask)?;
        let graph = LocalGraph::new(candidates);
        let init = entity_init(g.value(states), mentions, &graph.nodes);
        let init = g.constant(init);
        let d = self.triplet_embeddings(g, &graph, init)?;
        let order: Vec<usize> = candidates
            .iter()
            .map(|t| graph.triplets.binary_search(t).expect("candidate in graph"))
            .collect();
        let d = g.gather_rows(d, &order)?;
        g.matmul_bt(s, d)
    }
}

/// Initial node vectors: the mean encoder state over each entity's first
/// mention, or zeros when it is not mentioned.
pub fn entity_init<T: Real>(states: &Tensor<T>, mentions: &[Mention], nodes: &[EntityId]) -> Tensor<T> {
    let d = states.cols();
    let mut out = vec![T::zero(); nodes.len() * d];
    for (i, &e) in nodes.iter().enumerate() {
        let Some(m) = mentions.iter().filter(|m| m.entity == e).min_by_key(|m| m.start) else {
            continue;
        };
        let row = &mut out[i * d..(i + 1) * d];
        for p in m.start..m.end.min(states.rows()) {
            for (o, &x) in row.iter_mut().zip(states.row(p)) {
                *o += x;
            }
        }
        let len = T::lit((m.end.min(states.rows()) - m.start).max(1) as f64);
        row.iter_mut().for_each(|x| *x /= len);
    }
    Tensor::matrix(nodes.len(), d, out).expect("consistent shape")
}

/// Candidates with scores, normalized probabilities and optional gold flags.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub triplets: Vec<Triplet>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub gold: Vec<bool>,
}

impl CandidateSet {
    pub fn new(triplets: Vec<Triplet>, scores: Vec<f64>, gold: Vec<bool>) -> Result<Self> {
        if triplets.len() != scores.len() || triplets.len() != gold.len() {
            return Err(Error::shape("candidate_set", "length mismatch"));
        }
        let probs = softmax(&scores)?;
        Ok(Self {
            triplets,
            scores,
            probs,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Candidate indices by descending score; ties keep candidate order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }

    pub fn top(&self, n: usize) -> Vec<Triplet> {
        self.ranking()
            .into_iter()
            .take(n)
            .map(|i| self.triplets[i])
            .collect()
    }

    /// 1-based rank of the best-ranked gold candidate.
    pub fn gold_rank(&self) -> Option<usize> {
        self.ranking()
            .iter()
            .position(|&i| self.gold[i])
            .map(|p| p + 1)
    }
}

/// Gold flags for `candidates`.
pub fn gold_flags(candidates: &[Triplet], gold: &[Triplet]) -> Vec<bool> {
    candidates.iter().map(|t| gold.contains(t)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledSubgraph {
    /// Candidate indices in draw order.
    pub indices: Vec<usize>,
    /// `Σ log p(z_i|x)` over the drawn triplets.
    pub log_prob: f64,
}

/// Number of `n`-subsets of `c` items, saturating.
pub fn binomial(c: usize, n: usize) -> usize {
    if n > c {
        return 0;
    }
    let n = n.min(c - n);
    let mut acc: u128 = 1;
    for i in 0..n {
        acc = acc * (c - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// Every `n`-subset in lexicographic index order.
pub fn enumerate_subgraphs(probs: &[f64], n: usize) -> Vec<SampledSubgraph> {
    let n = n.min(probs.len());
    (0..probs.len())
        .combinations(n)
        .map(|indices| SampledSubgraph {
            log_prob: indices.iter().map(|&i| probs[i].ln()).sum(),
            indices,
        })
        .collect()
}

/// `k` subgraphs of `n` distinct candidates each, drawn one triplet at a
/// time from the probabilities renormalized over what is left.
pub fn sample_subgraphs(probs: &[f64], n: usize, k: usize, seed: u64) -> Vec<SampledSubgraph> {
    let n = if n > probs.len() {
        log::warn!("subgraph size {n} exceeds {} candidates", probs.len());
        probs.len()
    } else {
        n
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let mut remaining: Vec<usize> = (0..probs.len()).collect();
            let mut indices = Vec::with_capacity(n);
            for _ in 0..n {
                let pick = match WeightedIndex::new(remaining.iter().map(|&i| probs[i])) {
                    Ok(dist) => dist.sample(&mut rng),
                    Err(_) => 0,
                };
                indices.push(remaining.remove(pick));
            }
            SampledSubgraph {
                log_prob: indices.iter().map(|&i| probs[i].ln()).sum(),
                indices,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_5: f64,
    pub hits_at_10: f64,
    pub hits_at_100: f64,
    pub evaluated: usize,
    /// Examples without any gold candidate.
    pub skipped: usize,
}

pub fn retrieval_metrics(sets: &[CandidateSet]) -> RetrievalMetrics {
    let mut m = RetrievalMetrics::default();
    for set in sets {
        let Some(rank) = set.gold_rank() else {
            m.skipped += 1;
            continue;
        };
        m.evaluated += 1;
        m.mrr += 1.0 / rank as f64;
        let hit = |k: usize| if rank <= k { 1.0 } else { 0.0 };
        m.hits_at_1 += hit(1);
        m.hits_at_3 += hit(3);
        m.hits_at_5 += hit(5);
        m.hits_at_10 += hit(10);
        m.hits_at_100 += hit(100);
    }
    if m.evaluated > 0 {
        let n = m.evaluated as f64;
        for v in [
            &mut m.mrr,
            &mut m.hits_at_1,
            &mut m.hits_at_3,
            &mut m.hits_at_5,
            &mut m.hits_at_10,
            &mut m.hits_at_100,
        ] {
            *v /= n;
        }
    }
    m
}

/// Uniform random scores.
pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// BM25 of each document against `query`, with the candidates themselves as
/// the collection. IDF is `ln(1 + (N − df + 0.5)/(df + 0.5))`; every distinct
/// query token counts once.
pub fn bm25_scores(query: &[TokenId], docs: &[Vec<TokenId>]) -> Vec<f64> {
    let n = docs.len() as f64;
    if docs.is_empty() {
        return Vec::new();
    }
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let mut df: HashMap<TokenId, usize> = HashMap::new();
    for d in docs {
        for t in d.iter().unique() {
            *df.entry(*t).or_default() += 1;
        }
    }
    let terms: Vec<TokenId> = query.iter().copied().unique().collect();
    docs.iter()
        .map(|d| {
            let dl = d.len() as f64;
            terms
                .iter()
                .map(|q| {
                    let tf = d.iter().filter(|t| *t == q).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = df[q] as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn setup(width: usize, seed: u64) -> (ParamStore<f64>, Retriever) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Retriever::new(&mut s, width, 6, &mut rng).unwrap();
        (s, r)
    }

    fn rand_tensor(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn context_pooling() {
        let (s, r) = setup(4, 0);
        let mut g = Graph::new(&s);
        let x = rand_tensor(3, 4, 1);
        let xv = g.constant(x.clone());
        let (sv, alpha) = r.context_embedding(&mut g, xv, &[false, true, false]).unwrap();
        assert_eq!(g.value(sv).data(), x.row(1));
        assert_eq!(g.value(alpha).data(), &[0.0, 1.0, 0.0]);

        // Identical rows score identically: plain mean.
        let same = g.constant_matrix(2, 4, [x.row(0), x.row(0)].concat());
        let (sv, _) = r.context_embedding(&mut g, same, &[true, true]).unwrap();
        for (a, b) in g.value(sv).data().iter().zip(x.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(r.context_embedding(&mut g, xv, &[false; 3]).is_err());

        // Brute-force weighted sum.
        let (sv, alpha) = r.context_embedding(&mut g, xv, &[true; 3]).unwrap();
        let a = g.value(alpha).data().to_vec();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..4 {
            let want: f64 = (0..3).map(|i| a[i] * x.get(i, j)).sum();
            assert!((g.value(sv).get(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn entity_init_uses_first_mention() {
        let states = rand_tensor(5, 2, 3);
        let mentions = [
            Mention { entity: 7, start: 2, end: 4 },
            Mention { entity: 7, start: 0, end: 1 },
            Mention { entity: 9, start: 4, end: 5 },
        ];
        let init = entity_init(&states, &mentions, &[3, 7, 9]);
        assert_eq!(init.row(0), &[0.0, 0.0]);
        assert_eq!(init.row(1), states.row(0));
        assert_eq!(init.row(2), states.row(4));
        let only = [Mention { entity: 7, start: 2, end: 4 }];
        let init = entity_init(&states, &only, &[7]);
        for j in 0..2 {
            assert!((init.get(0, j) - (states.get(2, j) + states.get(3, j)) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_inputs_give_bias_path() {
        let (mut s, r) = setup(3, 1);
        s.get_mut(r.relations).data_mut().fill(0.0);
        let graph = LocalGraph::new(&[Triplet::new(0, 1, 1)]);
        let mut g = Graph::new(&s);
        let init = g.constant(Tensor::zeros(&[2, 3]));
        let d = r.triplet_embeddings(&mut g, &graph, init).unwrap();
        let got = g.value(d).data().to_vec();
        // With zero inputs each pass outputs ReLU of its biases, which start
        // at zero, so the MLP sees zeros.
        let zero = g.constant(Tensor::zeros(&[1, 2 * 3 + RELATION_WIDTH]));
        let want = r.triplet.forward(&mut g, zero).unwrap();
        assert_eq!(got, g.value(want).data());
    }

    #[test]
    fn automorphic_triplets_embed_equally() {
        // a → c ← b with both edges of the same relation; a and b are
        // interchangeable.
        let (s, r) = setup(3, 2);
        let graph = LocalGraph::new(&[Triplet::new(0, 1, 2), Triplet::new(1, 1, 2)]);
        let mut g = Graph::new(&s);
        let row = [0.3, -0.2, 0.9];
        let init = g.constant_matrix(3, 3, [row, row, [0.0; 3]].concat());
        let d = r.triplet_embeddings(&mut g, &graph, init).unwrap();
        assert_eq!(g.value(d).row(0), g.value(d).row(1));
    }

    #[test]
    fn scores_follow_triplets_not_positions() {
        let (s, r) = setup(4, 3);
        let cands = vec![
            Triplet::new(0, 0, 1),
            Triplet::new(0, 2, 2),
            Triplet::new(3, 1, 0),
            Triplet::new(2, 3, 1),
        ];
        let states = rand_tensor(3, 4, 5);
        let mentions = [Mention { entity: 0, start: 1, end: 2 }];
        let run = |c: &[Triplet]| {
            let mut g = Graph::new(&s);
            let st = g.constant(states.clone());
            let lp = r.log_probs(&mut g, c, st, &[true; 3], &mentions).unwrap();
            g.value(lp).data().to_vec()
        };
        let a = run(&cands);
        let rev: Vec<Triplet> = cands.iter().rev().copied().collect();
        let b = run(&rev);
        for i in 0..4 {
            assert_eq!(a[i], b[3 - i]);
        }
        assert!((a.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retriever_gradients_check() {
        let (mut s, r) = setup(4, 4);
        for id in s.ids().collect::<Vec<_>>() {
            s.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 5.0);
        }
        let cands = vec![Triplet::new(0, 0, 1), Triplet::new(1, 2, 2), Triplet::new(3, 1, 0)];
        let states = rand_tensor(4, 4, 6);
        let mentions = [Mention { entity: 0, start: 0, end: 2 }, Mention { entity: 2, start: 3, end: 4 }];
        let report = grad_check(
            &mut s,
            |g| {
                let st = g.constant(states.clone());
                let lp = r.log_probs(g, &cands, st, &[true; 4], &mentions)?;
                let w = g.constant_matrix(1, 3, vec![0.5, -1.0, 2.0]);
                let y = g.mul(lp, w)?;
                Ok(g.sum(y))
            },
            1e-6,
            16,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn distribution_examples() {
        let t = |i| Triplet::new(i, 0, i + 1);
        let c = CandidateSet::new(vec![t(0), t(1)], vec![0.0, 0.0], vec![false; 2]).unwrap();
        assert_eq!(c.probs, vec![0.5, 0.5]);
        let c = CandidateSet::new(vec![t(0), t(1)], vec![2f64.ln(), 0.0], vec![false; 2]).unwrap();
        assert!((c.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(CandidateSet::new(vec![], vec![], vec![]).is_err());

        let scores: Vec<f64> = (0..16).map(|i| ((i * 5 % 7) as f64).sin() * 3.0).collect();
        let c = CandidateSet::new((0..16).map(t).collect(), scores.clone(), vec![false; 16]).unwrap();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for (p, s) in c.probs.iter().zip(&scores) {
            assert!((p - s.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn metric_examples() {
        let t = |i| Triplet::new(i, 0, i + 1);
        let set = |gold: usize| {
            CandidateSet::new(
                (0..5).map(t).collect(),
                vec![5.0, 4.0, 3.0, 2.0, 1.0],
                (0..5).map(|i| i == gold).collect(),
            )
            .unwrap()
        };
        let m = retrieval_metrics(&[set(0)]);
        assert_eq!((m.mrr, m.hits_at_1, m.hits_at_100), (1.0, 1.0, 1.0));
        let m = retrieval_metrics(&[set(2)]);
        assert!((m.mrr - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.hits_at_1, m.hits_at_3), (0.0, 1.0));
        let m = retrieval_metrics(&[set(9), set(0)]);
        assert_eq!((m.evaluated, m.skipped), (1, 1));

        // Ties go to candidate order.
        let tie = CandidateSet::new(vec![t(0), t(1)], vec![1.0, 1.0], vec![false, true]).unwrap();
        assert_eq!(tie.gold_rank(), Some(2));
    }

    #[test]
    fn random_scorer_hits_one_in_c() {
        let c = 8;
        let sets: Vec<CandidateSet> = (0..4000)
            .map(|seed| {
                CandidateSet::new(
                    (0..c as u32).map(|i| Triplet::new(i, 0, i + 1)).collect(),
                    random_scores(c, seed),
                    (0..c).map(|i| i == 3).collect(),
                )
                .unwrap()
            })
            .collect();
        let m = retrieval_metrics(&sets);
        assert!((m.hits_at_1 - 1.0 / c as f64).abs() < 0.02, "{}", m.hits_at_1);
    }

    #[test]
    fn sampling_examples() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        for s in sample_subgraphs(&probs, 4, 3, 1) {
            let mut idx = s.indices.clone();
            idx.sort();
            assert_eq!(idx, vec![0, 1, 2, 3]);
        }
        let all = enumerate_subgraphs(&probs, 1);
        assert_eq!(all.iter().map(|s| s.indices[0]).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(enumerate_subgraphs(&probs, 2).len(), binomial(4, 2));
        assert_eq!(sample_subgraphs(&probs, 3, 5, 9), sample_subgraphs(&probs, 3, 5, 9));
        // n beyond the candidate count is clamped.
        assert_eq!(sample_subgraphs(&probs, 9, 1, 0)[0].indices.len(), 4);
        let s = &sample_subgraphs(&probs, 2, 1, 4)[0];
        let want: f64 = s.indices.iter().map(|&i| probs[i].ln()).sum();
        assert_eq!(s.log_prob, want);
    }

    #[test]
    fn single_draw_frequencies_match_probabilities() {
        // Chi-squared goodness of fit at 10k draws, 3 degrees of freedom;
        // 16.27 is the 0.001 critical value.
        let probs = [0.1, 0.2, 0.3, 0.4];
        let draws = sample_subgraphs(&probs, 1, 10_000, 12);
        let mut counts = [0usize; 4];
        for d in &draws {
            counts[d.indices[0]] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| {
                let e = p * 10_000.0;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 16.27, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn bm25_examples() {
        // Collection of three documents, query {1, 2}.
        let docs = vec![vec![1, 2, 3], vec![1, 4], vec![5, 6, 7, 8]];
        let s = bm25_scores(&[1, 2], &docs);
        assert_eq!(s[2], 0.0);
        let avgdl = 9.0 / 3.0;
        let idf = |df: f64| (1.0 + (3.0 - df + 0.5) / (df + 0.5)).ln();
        let term = |tf: f64, dl: f64| tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * dl / avgdl));
        let d0 = idf(2.0) * term(1.0, 3.0) + idf(1.0) * term(1.0, 3.0);
        let d1 = idf(2.0) * term(1.0, 2.0);
        assert!((s[0] - d0).abs() < 1e-12);
        assert!((s[1] - d1).abs() < 1e-12);

        let twins = bm25_scores(&[1, 9], &[vec![1, 9, 2], vec![1, 9, 2], vec![3]]);
        assert_eq!(twins[0], twins[1]);
    }

    proptest! {
        #[test]
        fn sampled_subgraphs_are_distinct(
            weights in prop::collection::vec(0.01f64..1.0, 1..10),
            n in 1usize..5,
            seed in 0u64..1000,
        ) {
            let z: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
            for s in sample_subgraphs(&probs, n, 4, seed) {
                let unique: std::collections::HashSet<_> = s.indices.iter().collect();
                prop_assert_eq!(unique.len(), s.indices.len());
                prop_assert_eq!(s.indices.len(), n.min(probs.len()));
            }
        }

        #[test]
        fn masked_candidate_keeps_ratios(
            scores in prop::collection::vec(-5.0f64..5.0, 2..8),
        ) {
            let p = softmax(&scores).unwrap();
            let mut with = scores.clone();
            with.push(f64::NEG_INFINITY);
            let q = softmax(&with).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(q[scores.len()], 0.0);
            for i in 1..scores.len() {
                prop_assert!((p[i] / p[0] - q[i] / q[0]).abs() < 1e-9 * (p[i] / p[0]).max(1.0));
            }
        }
    }
}
