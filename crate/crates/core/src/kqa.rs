//! Knowledge-verifying QA: questions built from a dialogue's gold response
//! and the graph, answered by finding a candidate inside a response.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::metrics::{knowledge_f1, normalize, surface_metrics, token_f1};
use crate::retriever::RetrievalMetrics;
use crate::vocab::{words, Vocab};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KqaItem {
    pub dialogue: String,
    pub context: String,
    pub head: String,
    pub relation: String,
    pub candidates: Vec<String>,
    pub answer: String,
    /// The gold response the item was built from.
    pub response: String,
}

impl KqaItem {
    /// Question and every candidate, space separated.
    pub fn knowledge_text(&self) -> String {
        let mut s = format!("{} {}", self.head, self.relation);
        for c in &self.candidates {
            s.push(' ');
            s.push_str(c);
        }
        s
    }
}

fn linked(kg: &KnowledgeGraph, vocab: &Vocab, text: &str) -> Vec<EntityId> {
    let mut seen = BTreeSet::new();
    kg.link_entities(&vocab.encode(text))
        .into_iter()
        .map(|m| m.entity)
        .filter(|e| seen.insert(*e))
        .collect()
}

/// One item per dialogue and graph triplet whose head is mentioned in the
/// history and whose tail is mentioned in the response.
pub fn synthesize_kqa(dialogues: &[Dialogue], kg: &KnowledgeGraph, vocab: &Vocab) -> Vec<KqaItem> {
    let mut out = Vec::new();
    for d in dialogues {
        let context = d.history_text();
        let heads = linked(kg, vocab, &context);
        let tails: BTreeSet<EntityId> = linked(kg, vocab, &d.response).into_iter().collect();
        for h in heads {
            for &i in kg.out_edges(h) {
                let t = kg.triplets()[i];
                if !tails.contains(&t.tail) {
                    continue;
                }
                let candidates = kg
                    .out_edges(h)
                    .iter()
                    .map(|&j| kg.triplets()[j])
                    .filter(|c| c.relation == t.relation)
                    .map(|c| kg.entity(c.tail).surface.clone())
                    .collect();
                out.push(KqaItem {
                    dialogue: d.id.clone(),
                    context: context.clone(),
                    head: kg.entity(h).surface.clone(),
                    relation: kg.relation(t.relation).surface.clone(),
                    candidates,
                    answer: kg.entity(t.tail).surface.clone(),
                    response: d.response.clone(),
                });
            }
        }
    }
    out
}

/// `text` with every linked entity mention removed, remaining words
/// space-joined.
pub fn delete_entity_mentions(kg: &KnowledgeGraph, vocab: &Vocab, text: &str) -> String {
    let ws = words(text);
    let ids: Vec<_> = ws.iter().map(|w| vocab.id(w)).collect();
    let mut keep = vec![true; ws.len()];
    for m in kg.link_entities(&ids) {
        keep[m.start..m.end].iter_mut().for_each(|k| *k = false);
    }
    ws.iter()
        .zip(keep)
        .filter_map(|(w, k)| k.then_some(*w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Copies of each item with the answer swapped for every other candidate,
/// rewriting the response to match.
pub fn augment(items: &[KqaItem]) -> Vec<KqaItem> {
    let mut out = Vec::new();
    for item in items {
        if !item.response.contains(&item.answer) {
            continue;
        }
        for c in item.candidates.iter().filter(|c| **c != item.answer) {
            out.push(KqaItem {
                response: item.response.replace(&item.answer, c),
                answer: c.clone(),
                ..item.clone()
            });
        }
    }
    out
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// The longest candidate found in `response`, matching case-insensitively
/// on words. Equal lengths go to the earlier candidate.
pub fn extractive_answer<'a>(item: &'a KqaItem, response: &str) -> Option<&'a str> {
    let words = normalize(response);
    let mut best: Option<(usize, &str)> = None;
    for c in &item.candidates {
        let cw = normalize(c);
        if contains_seq(&words, &cw) && best.map_or(true, |(n, _)| cw.len() > n) {
            best = Some((cw.len(), c));
        }
    }
    best.map(|(_, c)| c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KqaScores {
    pub em: f64,
    pub f1: f64,
}

pub fn kqa_scores(items: &[KqaItem], responses: &[String]) -> Result<KqaScores> {
    if items.len() != responses.len() {
        return Err(Error::Invalid(format!(
            "{} items but {} responses",
            items.len(),
            responses.len()
        )));
    }
    if items.is_empty() {
        return Ok(KqaScores::default());
    }
    let (mut em, mut f1) = (0.0, 0.0);
    for (item, r) in items.iter().zip(responses) {
        let gold = normalize(&item.answer);
        if let Some(a) = extractive_answer(item, r) {
            let a = normalize(a);
            if a == gold {
                em += 1.0;
            }
            f1 += token_f1(&a, &gold);
        }
    }
    let n = items.len() as f64;
    Ok(KqaScores {
        em: 100.0 * em / n,
        f1: 100.0 * f1 / n,
    })
}

/// Best unigram F1 of the response against any single candidate.
pub fn entity_f1(item: &KqaItem, response: &str) -> f64 {
    let r = normalize(response);
    item.candidates
        .iter()
        .map(|c| 100.0 * token_f1(&r, &normalize(c)))
        .fold(0.0, f64::max)
}

pub fn string_match(item: &KqaItem, response: &str) -> bool {
    extractive_answer(item, response).is_some()
}

pub fn parse_items(text: &str) -> Result<Vec<KqaItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn items_to_text(items: &[KqaItem]) -> Result<String> {
    let mut out = String::new();
    for i in items {
        out.push_str(&serde_json::to_string(i)?);
        out.push('\n');
    }
    Ok(out)
}

/// Every reported number. Percentages except `distinct_*`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub examples: usize,
    pub kqa_items: usize,
    pub kqa_em: f64,
    pub kqa_f1: f64,
    pub knowledge_f1: f64,
    pub entity_f1: f64,
    pub string_match: f64,
    pub bleu: [f64; 4],
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub unigram_f1: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub mrr: f64,
    pub hits: [f64; 5],
}

pub const HITS_AT: [usize; 5] = [1, 3, 5, 10, 100];

impl MetricReport {
    /// `dialogues` and `responses` are aligned; KQA items are matched to
    /// responses through their dialogue id.
    pub fn compute(
        dialogues: &[Dialogue],
        responses: &[String],
        items: &[KqaItem],
        retrieval: Option<&RetrievalMetrics>,
    ) -> Result<Self> {
        if dialogues.len() != responses.len() {
            return Err(Error::Invalid(format!(
                "{} dialogues but {} responses",
                dialogues.len(),
                responses.len()
            )));
        }
        let by_id: std::collections::HashMap<&str, &String> = dialogues
            .iter()
            .zip(responses)
            .map(|(d, r)| (d.id.as_str(), r))
            .collect();
        let mut kept = Vec::new();
        let mut kept_responses = Vec::new();
        for it in items {
            if let Some(r) = by_id.get(it.dialogue.as_str()) {
                kept.push(it.clone());
                kept_responses.push((*r).clone());
            }
        }
        let kqa = kqa_scores(&kept, &kept_responses)?;
        let n = kept.len().max(1) as f64;
        let mean = |f: &dyn Fn(&KqaItem, &str) -> f64| {
            kept.iter()
                .zip(&kept_responses)
                .map(|(i, r)| f(i, r))
                .sum::<f64>()
                / n
        };
        let refs: Vec<String> = dialogues.iter().map(|d| d.response.clone()).collect();
        let s = surface_metrics(responses, &refs);
        let (mrr, hits) = match retrieval {
            Some(m) => (
                100.0 * m.mrr,
                [m.hits_at_1, m.hits_at_3, m.hits_at_5, m.hits_at_10, m.hits_at_100].map(|h| 100.0 * h),
            ),
            None => (0.0, [0.0; 5]),
        };
        Ok(Self {
            examples: dialogues.len(),
            kqa_items: kept.len(),
            kqa_em: kqa.em,
            kqa_f1: kqa.f1,
            knowledge_f1: mean(&|i, r| knowledge_f1(r, &i.knowledge_text())),
            entity_f1: mean(&entity_f1),
            string_match: mean(&|i, r| if string_match(i, r) { 100.0 } else { 0.0 }),
            bleu: s.bleu,
            rouge_1: s.rouge_1,
            rouge_2: s.rouge_2,
            rouge_l: s.rouge_l,
            unigram_f1: s.unigram_f1,
            distinct_1: s.distinct_1,
            distinct_2: s.distinct_2,
            mrr,
            hits,
        })
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: f64| {
            let _ = writeln!(s, "{k} = {v:.4}");
        };
        put("kqa_em", self.kqa_em);
        put("kqa_f1", self.kqa_f1);
        put("knowledge_f1", self.knowledge_f1);
        put("entity_f1", self.entity_f1);
        put("string_match", self.string_match);
        for (i, b) in self.bleu.iter().enumerate() {
            put(&format!("bleu_{}", i + 1), *b);
        }
        put("rouge_1", self.rouge_1);
        put("rouge_2", self.rouge_2);
        put("rouge_l", self.rouge_l);
        put("unigram_f1", self.unigram_f1);
        put("distinct_1", self.distinct_1);
        put("distinct_2", self.distinct_2);
        put("mrr", self.mrr);
        for (k, h) in HITS_AT.iter().zip(self.hits) {
            put(&format!("hits@{k}"), h);
        }
        let _ = writeln!(s, "examples = {}", self.examples);
        let _ = writeln!(s, "kqa_items = {}", self.kqa_items);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::load_kg;
    use proptest::prelude::*;

    const KG: &str = "Moby Dick; The Whale\twritten_by\tHerman Melville\n\
                      Moby Dick; The Whale\twritten_by\tNorman Corwin\n\
                      Moby Dick; The Whale\twritten_by\tRay Bradbury\n\
                      Moby Dick; The Whale\tgenre\tAdventure\n\
                      Herman Melville\tborn_in\tNew York\n";

    fn dialogue(history: &str, response: &str) -> Dialogue {
        Dialogue {
            id: "d0".into(),
            history: vec![history.into()],
            response: response.into(),
            gold_triplets: vec![],
        }
    }

    fn fixture(d: &[Dialogue]) -> (KnowledgeGraph, Vocab) {
        let mut texts = vec![KG.to_string()];
        for x in d {
            texts.push(x.history_text());
            texts.push(x.response.clone());
        }
        let vocab = Vocab::build(texts.iter().map(String::as_str));
        (load_kg(KG, &vocab).unwrap(), vocab)
    }

    #[test]
    fn deleting_mentions_drops_every_entity() {
        let d = dialogue("tell me about Moby Dick; The Whale", "Herman Melville wrote Moby Dick; The Whale .");
        let (kg, vocab) = fixture(&[d]);
        let r = delete_entity_mentions(&kg, &vocab, "Herman Melville wrote Moby Dick; The Whale .");
        assert_eq!(r, "wrote .");
        assert_eq!(delete_entity_mentions(&kg, &vocab, "no names here"), "no names here");
    }

    fn moby() -> KqaItem {
        let d = [dialogue(
            "Do you like Moby Dick; The Whale ?",
            "Yes, it was written by Herman Melville.",
        )];
        let (kg, vocab) = fixture(&d);
        let items = synthesize_kqa(&d, &kg, &vocab);
        assert_eq!(items.len(), 1);
        items.into_iter().next().unwrap()
    }

    #[test]
    fn synthesizes_the_moby_dick_item() {
        let item = moby();
        assert_eq!(item.head, "Moby Dick; The Whale");
        assert_eq!(item.relation, "written_by");
        assert_eq!(item.answer, "Herman Melville");
        assert_eq!(item.candidates, vec!["Herman Melville", "Norman Corwin", "Ray Bradbury"]);
    }

    #[test]
    fn no_entity_in_response_gives_no_item() {
        let d = [dialogue("Do you like Moby Dick; The Whale ?", "Yes, a classic.")];
        let (kg, vocab) = fixture(&d);
        assert!(synthesize_kqa(&d, &kg, &vocab).is_empty());
    }

    #[test]
    fn augmentation_rewrites_answer() {
        let aug = augment(&[moby()]);
        assert_eq!(aug.len(), 2);
        let ray = aug.iter().find(|i| i.answer == "Ray Bradbury").unwrap();
        assert_eq!(ray.response, "Yes, it was written by Ray Bradbury.");
        let resp: Vec<String> = aug.iter().map(|i| i.response.clone()).collect();
        let s = kqa_scores(&aug, &resp).unwrap();
        assert_eq!(s.em, 100.0);
    }

    #[test]
    fn extraction_examples() {
        let item = moby();
        assert_eq!(
            extractive_answer(&item, "Moby Dick was written by Herman Melville."),
            Some("Herman Melville")
        );
        assert_eq!(extractive_answer(&item, "I do not know."), None);
        assert_eq!(extractive_answer(&item, "HERMAN melville!"), Some("Herman Melville"));

        let two = KqaItem {
            candidates: vec!["Ray".into(), "Ray Bradbury".into()],
            ..item
        };
        assert_eq!(extractive_answer(&two, "Ray or Ray Bradbury"), Some("Ray Bradbury"));
    }

    #[test]
    fn partial_answer_f1() {
        let item = KqaItem {
            candidates: vec!["Herman".into(), "Herman Melville".into()],
            ..moby()
        };
        let s = kqa_scores(&[item], &["Herman wrote it".into()]).unwrap();
        assert_eq!(s.em, 0.0);
        assert!((s.f1 - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn table_style_metrics() {
        let item = moby();
        assert!(string_match(&item, "by Norman Corwin"));
        assert!(!string_match(&item, "nobody"));
        assert!((entity_f1(&item, "Ray Bradbury") - 100.0).abs() < 1e-9);
        assert_eq!(
            item.knowledge_text(),
            "Moby Dick; The Whale written_by Herman Melville Norman Corwin Ray Bradbury"
        );
    }

    #[test]
    fn report_has_every_key() {
        let d = [dialogue("Moby Dick; The Whale", "written by Herman Melville")];
        let (kg, vocab) = fixture(&d);
        let items = synthesize_kqa(&d, &kg, &vocab);
        let r = MetricReport::compute(&d, &[d[0].response.clone()], &items, None).unwrap();
        assert_eq!(r.kqa_em, 100.0);
        let text = r.to_text();
        for k in [
            "kqa_em", "kqa_f1", "knowledge_f1", "entity_f1", "string_match", "bleu_1", "bleu_4",
            "rouge_1", "rouge_2", "rouge_l", "unigram_f1", "distinct_1", "distinct_2", "mrr",
            "hits@1", "hits@10",
        ] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k} = "))), "{k}");
        }
    }

    #[test]
    fn items_round_trip() {
        let items = vec![moby()];
        assert_eq!(parse_items(&items_to_text(&items).unwrap()).unwrap(), items);
    }

    proptest! {
        #[test]
        fn em_never_exceeds_f1(resp in prop::collection::vec("(Herman|Melville|Ray|Bradbury|Norman|by|x)", 0..8)) {
            let item = moby();
            let r = resp.join(" ");
            let s = kqa_scores(&[item.clone()], &[r.clone()]).unwrap();
            prop_assert!(s.em <= s.f1 + 1e-9 && s.f1 <= 100.0);
            if string_match(&item, &r) {
                prop_assert!(entity_f1(&item, &r) > 0.0);
            }
        }
    }
}
