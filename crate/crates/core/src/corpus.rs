//! Dialogue corpus: one JSON object per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{load_kg, KnowledgeGraph, Triplet};
use crate::vocab::Vocab;

pub const KG_FILE: &str = "kg.tsv";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub history: Vec<String>,
    pub response: String,
    #[serde(default)]
    pub gold_triplets: Vec<[String; 3]>,
}

impl Dialogue {
    /// Utterances joined with single spaces.
    pub fn history_text(&self) -> String {
        self.history.join(" ")
    }

    /// Gold triplets resolved against `kg`; unknown ones are dropped.
    pub fn gold(&self, kg: &KnowledgeGraph) -> Vec<Triplet> {
        self.gold_triplets
            .iter()
            .filter_map(|[h, r, t]| kg.lookup(h, r, t))
            .collect()
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<Dialogue>> {
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

pub fn corpus_to_text(dialogues: &[Dialogue]) -> Result<String> {
    let mut out = String::new();
    for d in dialogues {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Unknown {
                kind: "split",
                name: s.into(),
            }),
        }
    }
}

/// 70/15/15 by a hash of the dialogue id.
pub fn split_of(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    match bucket {
        0..=69 => Split::Train,
        70..=84 => Split::Valid,
        _ => Split::Test,
    }
}

pub fn select(dialogues: &[Dialogue], split: Split) -> Vec<Dialogue> {
    dialogues
        .iter()
        .filter(|d| split_of(&d.id) == split)
        .cloned()
        .collect()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A data directory: graph, vocabulary and dialogues.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kg: KnowledgeGraph,
    pub vocab: Vocab,
    pub dialogues: Vec<Dialogue>,
    /// Files read, in a fixed order.
    pub inputs: Vec<PathBuf>,
}

impl Dataset {
    /// Reads `kg.tsv` (or the file `kg`), `vocab.txt` and `corpus.jsonl` from `dir`.
    /// Without a vocabulary file one is built from the graph and corpus.
    pub fn load(dir: &Path, kg: Option<&Path>) -> Result<Self> {
        let kg_path = kg.map_or_else(|| dir.join(KG_FILE), Path::to_path_buf);
        let corpus_path = dir.join(CORPUS_FILE);
        let vocab_path = dir.join(VOCAB_FILE);
        let kg_text = read_text(&kg_path)?;
        let dialogues = parse_corpus(&read_text(&corpus_path)?)?;
        let mut inputs = vec![kg_path, corpus_path];
        let vocab = if vocab_path.exists() {
            let v = Vocab::parse(&read_text(&vocab_path)?)?;
            inputs.push(vocab_path);
            v
        } else {
            let mut texts = vec![kg_text.clone()];
            for d in &dialogues {
                texts.push(d.history_text());
                texts.push(d.response.clone());
            }
            Vocab::build(texts.iter().map(String::as_str))
        };
        let kg = load_kg(&kg_text, &vocab)?;
        Ok(Self {
            kg,
            vocab,
            dialogues,
            inputs,
        })
    }

    pub fn split(&self, split: Split) -> Vec<Dialogue> {
        select(&self.dialogues, split)
    }
}
