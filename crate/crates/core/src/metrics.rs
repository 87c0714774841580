//! Text overlap metrics. Scores are percentages except Distinct, which is a
//! ratio.

use std::collections::HashMap;
use std::hash::Hash;

/// Lowercased words with punctuation treated as whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn counts<K: Eq + Hash + Clone>(items: impl IntoIterator<Item = K>) -> HashMap<K, usize> {
    let mut m = HashMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Vec<Vec<&str>> {
    if n == 0 || tokens.len() < n {
        return Vec::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect()
}

fn overlap<K: Eq + Hash + Clone>(a: &HashMap<K, usize>, b: &HashMap<K, usize>) -> usize {
    a.iter()
        .map(|(k, &c)| c.min(b.get(k).copied().unwrap_or(0)))
        .sum()
}

fn f1_from(common: usize, pred: usize, gold: usize) -> f64 {
    if common == 0 || pred == 0 || gold == 0 {
        return 0.0;
    }
    let p = common as f64 / pred as f64;
    let r = common as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

/// Multiset unigram F1 in [0, 1].
pub fn token_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let a = counts(pred.iter().map(AsRef::as_ref));
    let b = counts(gold.iter().map(AsRef::as_ref));
    f1_from(overlap(&a, &b), pred.len(), gold.len())
}

/// Unigram F1 between a response and a knowledge string, in percent.
pub fn knowledge_f1(response: &str, knowledge: &str) -> f64 {
    100.0 * token_f1(&normalize(response), &normalize(knowledge))
}

/// Corpus BLEU with uniform weights up to `max_n` and the usual brevity
/// penalty. A zero n-gram precision makes the score zero.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    let (hyp_len, ref_len): (usize, usize) = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| (h.len(), r.len()))
        .fold((0, 0), |(a, b), (h, r)| (a + h, b + r));
    if hyp_len == 0 || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut clipped, mut total) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let hc = counts(ngrams(h, n));
            let rc = counts(ngrams(r, n));
            clipped += overlap(&hc, &rc);
            total += hc.values().sum::<usize>();
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

/// ROUGE-n F1 for one pair, in [0, 1].
pub fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> f64 {
    let h = counts(ngrams(hyp, n));
    let r = counts(ngrams(reference, n));
    f1_from(
        overlap(&h, &r),
        h.values().sum(),
        r.values().sum(),
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F1 for one pair, in [0, 1].
pub fn rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    f1_from(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Unique n-grams over total n-grams across all texts.
pub fn distinct_n(texts: &[Vec<String>], n: usize) -> f64 {
    let all: Vec<Vec<&str>> = texts.iter().flat_map(|t| ngrams(t, n)).collect();
    if all.is_empty() {
        return 0.0;
    }
    let unique: std::collections::HashSet<_> = all.iter().collect();
    unique.len() as f64 / all.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurfaceMetrics {
    pub bleu: [f64; 4],
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub unigram_f1: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

pub fn surface_metrics(generated: &[String], references: &[String]) -> SurfaceMetrics {
    let hyps: Vec<Vec<String>> = generated.iter().map(|s| normalize(s)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|s| normalize(s)).collect();
    let n = hyps.len().min(refs.len());
    let mean = |f: &dyn Fn(&[String], &[String]) -> f64| {
        if n == 0 {
            0.0
        } else {
            100.0 * (0..n).map(|i| f(&hyps[i], &refs[i])).sum::<f64>() / n as f64
        }
    };
    SurfaceMetrics {
        bleu: [1, 2, 3, 4].map(|k| corpus_bleu(&hyps[..n], &refs[..n], k)),
        rouge_1: mean(&|h, r| rouge_n(h, r, 1)),
        rouge_2: mean(&|h, r| rouge_n(h, r, 2)),
        rouge_l: mean(&|h, r| rouge_l(h, r)),
        unigram_f1: mean(&|h, r| token_f1(h, r)),
        distinct_1: distinct_n(&hyps, 1),
        distinct_2: distinct_n(&hyps, 2),
    }
}
