//! Seeded toy graphs and templated dialogues. Each response states exactly
//! one triplet of the head entity named in the history; every head also
//! carries `distractor_degree` other edges.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Relation names and the word a user says when asking about them.
pub const RELATIONS: [(&str, &str); 12] = [
    ("written_by", "author"),
    ("directed_by", "director"),
    ("produced_by", "producer"),
    ("composed_by", "composer"),
    ("located_in", "place"),
    ("born_in", "hometown"),
    ("member_of", "band"),
    ("married_to", "spouse"),
    ("owned_by", "owner"),
    ("has_genre", "style"),
    ("plays_for", "team"),
    ("studied_at", "school"),
];

const SYLLABLES: [&str; 16] = [
    "ka", "zo", "ri", "mu", "ve", "lo", "ta", "ne", "xi", "bu", "sa", "de", "fo", "gi", "pe", "ru",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    /// First utterance; `{HEAD}` slot.
    pub openers: Vec<String>,
    /// Second utterance; `{CUE}` slot.
    pub questions: Vec<String>,
    /// `{HEAD}`, `{RELATION-PHRASE}` and `{TAIL}` slots.
    pub responses: Vec<String>,
}

impl Default for Templates {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            openers: v(&[
                "have you heard about {HEAD} ?",
                "i really like {HEAD} .",
                "tell me something about {HEAD} .",
            ]),
            questions: v(&[
                "what can you say about its {CUE} ?",
                "any idea about the {CUE} ?",
                "i want to know the {CUE} .",
            ]),
            responses: v(&[
                "{HEAD} {RELATION-PHRASE} {TAIL} .",
                "sure , {HEAD} {RELATION-PHRASE} {TAIL} .",
            ]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triplets: usize,
    pub n_dialogues: usize,
    pub distractor_degree: usize,
    pub templates: Templates,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 160,
            n_relations: 12,
            n_triplets: 800,
            n_dialogues: 500,
            distractor_degree: 7,
            templates: Templates::default(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn edges_per_head(&self) -> usize {
        self.distractor_degree + 1
    }

    pub fn n_heads(&self) -> usize {
        self.n_triplets / self.edges_per_head()
    }

    pub fn validate(&self) -> Result<()> {
        let per = self.edges_per_head();
        let fail = |m: String| Err(Error::Invalid(m));
        if self.n_relations == 0 || self.n_relations > RELATIONS.len() {
            return fail(format!("n_relations must be in 1..={}", RELATIONS.len()));
        }
        if per > self.n_relations {
            return fail(format!(
                "{per} edges per head need at least {per} relations"
            ));
        }
        if self.n_triplets == 0 || self.n_triplets % per != 0 {
            return fail(format!("n_triplets must be a positive multiple of {per}"));
        }
        if self.n_triplets < self.n_dialogues {
            return fail("n_triplets must be at least n_dialogues".into());
        }
        let heads = self.n_heads();
        if self.n_entities < heads + per {
            return fail(format!(
                "{} entities cannot hold {heads} heads and {per} distinct tails",
                self.n_entities
            ));
        }
        if self.n_entities > SYLLABLES.len().pow(4) {
            return fail("too many entities for the name generator".into());
        }
        let t = &self.templates;
        if t.openers.is_empty() || t.questions.is_empty() || t.responses.is_empty() {
            return fail("every template list needs at least one entry".into());
        }
        if !t.openers.iter().all(|s| s.contains("{HEAD}"))
            || !t.questions.iter().all(|s| s.contains("{CUE}"))
            || !t
                .responses
                .iter()
                .all(|s| ["{HEAD}", "{RELATION-PHRASE}", "{TAIL}"].iter().all(|k| s.contains(k)))
        {
            return fail("template missing a slot".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthData {
    pub kg_text: String,
    pub dialogues: Vec<Dialogue>,
    pub vocab: Vocab,
}

fn name(i: usize) -> String {
    let mut s = String::new();
    let mut x = i;
    let len = if i < SYLLABLES.len().pow(3) { 3 } else { 4 };
    for _ in 0..len {
        s.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    let mut c = s.chars();
    let first = c.next().expect("non-empty").to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

pub fn phrase(relation: &str) -> String {
    relation.replace('_', " ")
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = SYLLABLES.len().pow(3).max(config.n_entities);
    let names: Vec<String> = index::sample(&mut rng, pool, config.n_entities)
        .into_iter()
        .map(name)
        .collect();
    let n_heads = config.n_heads();
    let (heads, tails) = names.split_at(n_heads);
    let per = config.edges_per_head();

    let mut edges: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n_heads);
    let mut kg_text = String::new();
    for head in heads {
        let rels = index::sample(&mut rng, config.n_relations, per).into_vec();
        let ts = index::sample(&mut rng, tails.len(), per).into_vec();
        let e: Vec<(usize, usize)> = rels.into_iter().zip(ts).collect();
        for &(r, t) in &e {
            kg_text.push_str(&format!("{head}\t{}\t{}\n", RELATIONS[r].0, tails[t]));
        }
        edges.push(e);
    }

    let tpl = &config.templates;
    let mut dialogues = Vec::with_capacity(config.n_dialogues);
    for i in 0..config.n_dialogues {
        let h = i % n_heads;
        let &(r, t) = edges[h].choose(&mut rng).expect("non-empty");
        let (rel, cue) = RELATIONS[r];
        let opener = tpl.openers[rng.gen_range(0..tpl.openers.len())].replace("{HEAD}", &heads[h]);
        let question = tpl.questions[rng.gen_range(0..tpl.questions.len())].replace("{CUE}", cue);
        let response = tpl.responses[rng.gen_range(0..tpl.responses.len())]
            .replace("{HEAD}", &heads[h])
            .replace("{RELATION-PHRASE}", &phrase(rel))
            .replace("{TAIL}", &tails[t]);
        dialogues.push(Dialogue {
            id: format!("syn-{}-{i:05}", config.seed),
            history: vec![opener, question],
            response,
            gold_triplets: vec![[heads[h].clone(), rel.to_string(), tails[t].clone()]],
        });
    }

    let mut texts = vec![kg_text.clone()];
    for d in &dialogues {
        texts.push(d.history_text());
        texts.push(d.response.clone());
    }
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    Ok(SynthData {
        kg_text,
        dialogues,
        vocab,
    })
}
