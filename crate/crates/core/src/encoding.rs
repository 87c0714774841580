//! Turning a subgraph plus dialogue history into encoder input.
//!
//! Four layouts are supported. `Naive` writes each triplet as given;
//! `InvariantFull` writes the sorted inverse-closed triplet set;
//! `EntityOnly` writes the sorted unique entities; `InvariantEfficient`
//! writes the same entities and then shifts each entity's embedding rows
//! with an affine transform predicted from the inverse-closed graph.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{LocalGraph, Rgnn, RELATION_WIDTH};
use crate::kg::{EntityId, KnowledgeGraph, Triplet};
use crate::seq::SeqModel;
use crate::tensor::nn::{Mlp, INIT_STD};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingVariant {
    Naive,
    InvariantFull,
    EntityOnly,
    InvariantEfficient,
}

impl EncodingVariant {
    pub const ALL: [EncodingVariant; 4] = [
        EncodingVariant::Naive,
        EncodingVariant::InvariantFull,
        EncodingVariant::EntityOnly,
        EncodingVariant::InvariantEfficient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncodingVariant::Naive => "naive",
            EncodingVariant::InvariantFull => "invariant_full",
            EncodingVariant::EntityOnly => "entity_only",
            EncodingVariant::InvariantEfficient => "invariant_efficient",
        }
    }

    pub fn perturbed(self) -> bool {
        self == EncodingVariant::InvariantEfficient
    }
}

impl FromStr for EncodingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "encoding variant",
                name: s.to_string(),
            })
    }
}

/// Sorted by head, relation and tail surfaces, ties by ids; duplicates
/// removed.
pub fn sort_triplets(kg: &KnowledgeGraph, z: &[Triplet]) -> Vec<Triplet> {
    let mut v: Vec<Triplet> = z.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    v.sort_by(|a, b| {
        kg.surfaces(a)
            .cmp(&kg.surfaces(b))
            .then_with(|| a.cmp(b))
    });
    v
}

/// `Z ∪ {(t, ~r, h)}`, as an id-sorted set.
pub fn inv_closure(kg: &KnowledgeGraph, z: &[Triplet]) -> Vec<Triplet> {
    z.iter()
        .flat_map(|t| [*t, kg.invert(t)])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Unique heads and tails sorted by surface, then id.
pub fn ent(kg: &KnowledgeGraph, z: &[Triplet]) -> Vec<EntityId> {
    let mut v: Vec<EntityId> = z
        .iter()
        .flat_map(|t| [t.head, t.tail])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    v.sort_by(|&a, &b| kg.entity(a).surface.cmp(&kg.entity(b).surface).then(a.cmp(&b)));
    v
}

/// An entity's rows in the prefix, `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefixSpan {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub variant: EncodingVariant,
    /// Prefix tokens followed by history tokens.
    pub tokens: Vec<TokenId>,
    pub prefix_len: usize,
    /// Entity spans of the prefix; only filled for the entity layouts.
    pub spans: Vec<PrefixSpan>,
    /// The subgraph the prefix was built from.
    pub subgraph: Vec<Triplet>,
}

impl EncodedSequence {
    pub fn history(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_hist_len: usize,
    pub max_know_len: usize,
    pub max_positions: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_hist_len: 256,
            max_know_len: 128,
            max_positions: 512,
        }
    }
}

fn triplet_prefix(kg: &KnowledgeGraph, ordered: &[Triplet], max_know_len: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    for t in ordered {
        let toks = kg.triplet_tokens(t);
        if out.len() + toks.len() > max_know_len {
            break;
        }
        out.extend(toks);
    }
    out
}

/// Builds the token layout. For `Naive`, `z` is used in the given order.
/// History keeps its most recent tokens; the entity prefix is never cut.
pub fn build_sequence(
    kg: &KnowledgeGraph,
    variant: EncodingVariant,
    history: &[TokenId],
    z: &[Triplet],
    limits: Limits,
) -> Result<EncodedSequence> {
    let mut spans = Vec::new();
    let prefix = match variant {
        EncodingVariant::Naive => triplet_prefix(kg, z, limits.max_know_len),
        EncodingVariant::InvariantFull => {
            let closed = sort_triplets(kg, &inv_closure(kg, z));
            triplet_prefix(kg, &closed, limits.max_know_len)
        }
        EncodingVariant::EntityOnly | EncodingVariant::InvariantEfficient => {
            let mut p = Vec::new();
            for e in ent(kg, z) {
                let toks = &kg.entity(e).tokens;
                spans.push(PrefixSpan {
                    entity: e,
                    start: p.len(),
                    end: p.len() + toks.len(),
                });
                p.extend_from_slice(toks);
            }
            p
        }
    };
    if prefix.len() > limits.max_positions {
        return Err(Error::Invalid(format!(
            "knowledge prefix of {} tokens exceeds {} positions",
            prefix.len(),
            limits.max_positions
        )));
    }
    let room = limits
        .max_hist_len
        .min(limits.max_positions - prefix.len());
    let hist = &history[history.len().saturating_sub(room)..];
    let prefix_len = prefix.len();
    let mut tokens = prefix;
    tokens.extend_from_slice(hist);
    Ok(EncodedSequence {
        variant,
        tokens,
        prefix_len,
        spans,
        subgraph: z.to_vec(),
    })
}

/// Per-entity affine shift of prefix rows, `(1 + γ)·x + δ`, with γ and δ
/// read off a relation-aware pass over the inverse-closed subgraph.
#[derive(Clone, Copy, Debug)]
pub struct Perturbation {
    pub rgnn: Rgnn,
    /// One `RELATION_WIDTH` row per relation id.
    pub relations: ParamId,
    pub gamma: Mlp,
    pub delta: Mlp,
}

/// Graph-side values of one perturbation, one row per prefix entity.
#[derive(Clone, Debug)]
pub struct PerturbationOutput {
    pub entities: Vec<EntityId>,
    pub eta: Var,
    pub gamma: Var,
    pub delta: Var,
}

impl Perturbation {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        width: usize,
        n_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            rgnn: Rgnn::new(store, "enc.rgnn", width, rng)?,
            relations: store.normal("enc.rel", &[n_relations, RELATION_WIDTH], INIT_STD, rng)?,
            gamma: Mlp::with_zero_output(store, "enc.gamma", width, width, width, rng)?,
            delta: Mlp::with_zero_output(store, "enc.delta", width, width, width, rng)?,
        })
    }

    /// Replaces the prefix rows of `x` (token embeddings, no positions yet).
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        kg: &KnowledgeGraph,
        seq: &EncodedSequence,
        x: Var,
    ) -> Result<(Var, PerturbationOutput)> {
        let closed = inv_closure(kg, &seq.subgraph);
        let graph = LocalGraph::with_nodes(&closed, &[]);
        let (rows, width) = g.shape(x);
        let m = graph.nodes.len();
        if let Some(e) = graph
            .nodes
            .iter()
            .find(|e| !seq.spans.iter().any(|s| s.entity == **e))
        {
            return Err(Error::Invalid(format!(
                "entity `{}` has no prefix rows",
                kg.entity(*e).surface
            )));
        }

        // f(a): mean of each entity's prefix rows, in graph node order.
        let mut avg = vec![T::zero(); m * rows];
        let mut row_owner = vec![0usize; seq.prefix_len];
        for (i, &e) in graph.nodes.iter().enumerate() {
            let span = seq.spans.iter().find(|s| s.entity == e).expect("checked");
            let w = T::one() / T::lit((span.end - span.start) as f64);
            for r in span.start..span.end {
                avg[i * rows + r] = w;
                row_owner[r] = i;
            }
        }
        let avg = g.constant_matrix(m, rows, avg);
        let f = g.matmul(avg, x)?;
        let rel = g.param(self.relations);
        let eta = self.rgnn.forward(g, &graph, f, rel)?;
        let gamma = self.gamma.forward(g, eta)?;
        let delta = self.delta.forward(g, eta)?;

        let prefix = g.slice_rows(x, 0, seq.prefix_len)?;
        let gr = g.gather_rows(gamma, &row_owner)?;
        let dr = g.gather_rows(delta, &row_owner)?;
        let scaled = g.mul(gr, prefix)?;
        let shifted = g.add(prefix, scaled)?;
        let shifted = g.add(shifted, dr)?;
        let out = if rows > seq.prefix_len {
            let hist = g.slice_rows(x, seq.prefix_len, rows - seq.prefix_len)?;
            g.concat_rows(&[shifted, hist])?
        } else {
            shifted
        };
        debug_assert_eq!(g.shape(out), (rows, width));
        Ok((
            out,
            PerturbationOutput {
                entities: graph.nodes.clone(),
                eta,
                gamma,
                delta,
            },
        ))
    }
}

/// Embeds `seq` with positions, perturbing the prefix for the
/// `InvariantEfficient` layout.
pub fn embed_sequence<T: Real>(
    g: &mut Graph<'_, T>,
    model: &SeqModel,
    perturbation: &Perturbation,
    kg: &KnowledgeGraph,
    seq: &EncodedSequence,
) -> Result<(Var, Option<PerturbationOutput>)> {
    let x = model.embed_tokens(g, &seq.tokens)?;
    let (x, out) = if seq.variant.perturbed() && seq.prefix_len > 0 {
        let (x, out) = perturbation.apply(g, kg, seq, x)?;
        (x, Some(out))
    } else {
        (x, None)
    };
    Ok((model.add_positions(g, x)?, out))
}

/// Prefix tokens and per-entity γ/δ norms as text.
pub fn debug_dump<T: Real>(
    g: &Graph<'_, T>,
    kg: &KnowledgeGraph,
    vocab: &crate::vocab::Vocab,
    seq: &EncodedSequence,
    out: Option<&PerturbationOutput>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "prefix\t{}",
        vocab.decode(&seq.tokens[..seq.prefix_len])
    );
    if let Some(out) = out {
        let norm = |v: &[T]| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        for (i, &e) in out.entities.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}\tgamma={:.6}\tdelta={:.6}",
                kg.entity(e).surface,
                norm(g.value(out.gamma).row(i)),
                norm(g.value(out.delta).row(i))
            );
        }
    }
    s
}
