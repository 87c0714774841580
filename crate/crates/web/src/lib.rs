//! Browser bindings: graph encodings, BM25 candidate ranking and response
//! metrics. Each export takes plain strings and returns JSON.

use serde::Serialize;
use surge::encoding::{build_sequence, EncodingVariant, Limits};
use surge::kg::{load_kg, KnowledgeGraph, Triplet, DEFAULT_MAX_CANDIDATES};
use surge::metrics::{knowledge_f1, surface_metrics};
use surge::retriever::bm25_scores;
use surge::vocab::Vocab;
use wasm_bindgen::prelude::*;

type Out<T> = std::result::Result<T, String>;

fn graph(kg_tsv: &str, extra: &[&str]) -> Out<(Vocab, KnowledgeGraph)> {
    let vocab = Vocab::build(std::iter::once(kg_tsv).chain(extra.iter().copied()));
    let kg = load_kg(kg_tsv, &vocab).map_err(|e| e.to_string())?;
    Ok((vocab, kg))
}

/// `head<TAB>relation<TAB>tail` lines; a `~relation` names the inverse edge.
fn parse_subgraph(kg: &KnowledgeGraph, text: &str) -> Out<Vec<Triplet>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').map(str::trim).collect();
            match f.as_slice() {
                [h, r, t] => kg
                    .lookup(h, r, t)
                    .ok_or_else(|| format!("line {}: unknown entity or relation", i + 1)),
                _ => Err(format!("line {}: expected three tab-separated fields", i + 1)),
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct PrefixView {
    pub variant: &'static str,
    pub prefix: Vec<String>,
    pub prefix_len: usize,
    pub history_len: usize,
}

pub fn encode_views(kg_tsv: &str, history: &str, subgraph: &str) -> Out<Vec<PrefixView>> {
    let (vocab, kg) = graph(kg_tsv, &[history])?;
    let z = parse_subgraph(&kg, subgraph)?;
    let hist = vocab.encode(history);
    EncodingVariant::ALL
        .iter()
        .map(|&v| {
            let seq = build_sequence(&kg, v, &hist, &z, Limits::default()).map_err(|e| e.to_string())?;
            Ok(PrefixView {
                variant: v.name(),
                prefix: seq.tokens[..seq.prefix_len]
                    .iter()
                    .map(|&t| vocab.token(t).to_string())
                    .collect(),
                prefix_len: seq.prefix_len,
                history_len: seq.tokens.len() - seq.prefix_len,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Ranked {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct Ranking {
    pub mentions: Vec<String>,
    pub candidates: Vec<Ranked>,
}

/// Links entities in `history`, gathers their one-hop triplets and orders
/// them by BM25 against the history.
pub fn bm25_ranking(kg_tsv: &str, history: &str) -> Out<Ranking> {
    let (vocab, kg) = graph(kg_tsv, &[history])?;
    let tokens = vocab.encode(history);
    let mentions = kg.link_entities(&tokens);
    let seeds: Vec<_> = mentions.iter().map(|m| m.entity).collect();
    let cands = kg
        .khop_candidates(&seeds, 1, DEFAULT_MAX_CANDIDATES)
        .map_err(|e| e.to_string())?;
    let docs: Vec<_> = cands.iter().map(|t| kg.triplet_tokens(t)).collect();
    let scores = bm25_scores(&tokens, &docs);
    let mut candidates: Vec<Ranked> = cands
        .iter()
        .zip(scores)
        .map(|(t, score)| {
            let (h, r, tl) = kg.surfaces(t);
            Ranked {
                head: h.into(),
                relation: r.into(),
                tail: tl.into(),
                score,
            }
        })
        .collect();
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(Ranking {
        mentions: mentions.iter().map(|m| kg.entity(m.entity).surface.clone()).collect(),
        candidates,
    })
}

#[derive(Debug, Serialize)]
pub struct Scores {
    pub bleu: [f64; 4],
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub unigram_f1: f64,
    pub knowledge_f1: f64,
}

pub fn response_scores(response: &str, reference: &str, knowledge: &str) -> Scores {
    let m = surface_metrics(&[response.to_string()], &[reference.to_string()]);
    Scores {
        bleu: m.bleu,
        rouge_1: m.rouge_1,
        rouge_2: m.rouge_2,
        rouge_l: m.rouge_l,
        unigram_f1: m.unigram_f1,
        knowledge_f1: knowledge_f1(response, knowledge),
    }
}

fn to_js<T: Serialize>(r: Out<T>) -> std::result::Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn encode(kg_tsv: &str, history: &str, subgraph: &str) -> std::result::Result<String, JsValue> {
    to_js(encode_views(kg_tsv, history, subgraph))
}

#[wasm_bindgen]
pub fn rank(kg_tsv: &str, history: &str) -> std::result::Result<String, JsValue> {
    to_js(bm25_ranking(kg_tsv, history))
}

#[wasm_bindgen]
pub fn score(response: &str, reference: &str, knowledge: &str) -> std::result::Result<String, JsValue> {
    to_js(Ok(response_scores(response, reference, knowledge)))
}
