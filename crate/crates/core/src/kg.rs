//! Immutable multi-relational knowledge graph with inverse relations.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, UNK};

pub type EntityId = u32;
pub type RelationId = u32;

/// Default cap on the size of a k-hop candidate list.
pub const DEFAULT_MAX_CANDIDATES: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    pub surface: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub id: RelationId,
    pub surface: String,
    pub inverse_id: RelationId,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// An entity occurrence in a token sequence, `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mention {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    /// Number of relations read from the file; ids at or above this are
    /// inverses.
    n_original: usize,
    triplets: Vec<Triplet>,
    triplet_ids: HashMap<Triplet, usize>,
    out_index: Vec<Vec<usize>>,
    in_index: Vec<Vec<usize>>,
    entity_by_surface: HashMap<String, EntityId>,
    relation_by_surface: HashMap<String, RelationId>,
    surface_index: HashMap<Vec<TokenId>, EntityId>,
    longest_surface: usize,
}

/// Splits a triples file into surface triples, validating the layout.
pub fn parse_triples(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected head<TAB>relation<TAB>tail, got `{line}`"),
            });
        }
        if fields[1].starts_with('~') {
            return Err(Error::Parse {
                line: i + 1,
                message: "relation names starting with `~` are reserved for inverses".into(),
            });
        }
        out.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
        ));
    }
    if out.is_empty() {
        return Err(Error::Empty("triples file has no triplets".into()));
    }
    Ok(out)
}

pub fn load_kg(text: &str, vocab: &Vocab) -> Result<KnowledgeGraph> {
    KnowledgeGraph::from_triples(&parse_triples(text)?, vocab)
}

/// Token ids of an entity or relation surface. Never empty: a surface with
/// no word characters maps to `[UNK]`.
pub fn tokenize_symbol(surface: &str, vocab: &Vocab) -> Vec<TokenId> {
    let ids = vocab.encode(surface);
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

impl KnowledgeGraph {
    pub fn from_triples(triples: &[(String, String, String)], vocab: &Vocab) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::Empty("no triplets".into()));
        }
        let mut entity_by_surface: HashMap<String, EntityId> = HashMap::new();
        let mut entities = Vec::new();
        let mut rel_names: Vec<String> = Vec::new();
        let mut rel_lookup: HashMap<String, RelationId> = HashMap::new();
        let mut raw = Vec::with_capacity(triples.len());

        let mut entity = |s: &str, entities: &mut Vec<Entity>| -> EntityId {
            if let Some(&id) = entity_by_surface.get(s) {
                return id;
            }
            let id = entities.len() as EntityId;
            entities.push(Entity {
                id,
                surface: s.to_string(),
                tokens: tokenize_symbol(s, vocab),
            });
            entity_by_surface.insert(s.to_string(), id);
            id
        };
        for (h, r, t) in triples {
            if h.is_empty() || r.is_empty() || t.is_empty() {
                return Err(Error::Invalid("empty surface in triplet".into()));
            }
            let hid = entity(h, &mut entities);
            let tid = entity(t, &mut entities);
            let rid = *rel_lookup.entry(r.clone()).or_insert_with(|| {
                rel_names.push(r.clone());
                (rel_names.len() - 1) as RelationId
            });
            raw.push(Triplet::new(hid, rid, tid));
        }
        drop(entity);

        let n = rel_names.len();
        let mut relations = Vec::with_capacity(2 * n);
        for (i, name) in rel_names.iter().enumerate() {
            relations.push(Relation {
                id: i as RelationId,
                surface: name.clone(),
                inverse_id: (i + n) as RelationId,
                tokens: tokenize_symbol(name, vocab),
            });
        }
        for (i, name) in rel_names.iter().enumerate() {
            let surface = format!("~{name}");
            relations.push(Relation {
                id: (i + n) as RelationId,
                tokens: tokenize_symbol(&surface, vocab),
                surface,
                inverse_id: i as RelationId,
            });
        }
        let relation_by_surface = relations
            .iter()
            .map(|r| (r.surface.clone(), r.id))
            .collect();

        let mut triplet_ids = HashMap::new();
        let mut triplets = Vec::new();
        for t in raw {
            triplet_ids.entry(t).or_insert_with(|| {
                triplets.push(t);
                triplets.len() - 1
            });
        }
        let mut out_index = vec![Vec::new(); entities.len()];
        let mut in_index = vec![Vec::new(); entities.len()];
        for (i, t) in triplets.iter().enumerate() {
            out_index[t.head as usize].push(i);
            in_index[t.tail as usize].push(i);
        }

        // Surfaces containing unknown words cannot be matched reliably and
        // are left out of the linker.
        let mut surface_index = HashMap::new();
        let mut longest_surface = 0;
        for e in &entities {
            if e.tokens.contains(&UNK) {
                continue;
            }
            surface_index.entry(e.tokens.clone()).or_insert(e.id);
            longest_surface = longest_surface.max(e.tokens.len());
        }

        Ok(Self {
            entities,
            relations,
            n_original: n,
            triplets,
            triplet_ids,
            out_index,
            in_index,
            entity_by_surface,
            relation_by_surface,
            surface_index,
            longest_surface,
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id as usize]
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id as usize]
    }

    pub fn num_original_relations(&self) -> usize {
        self.n_original
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        r as usize >= self.n_original
    }

    pub fn entity_id(&self, surface: &str) -> Option<EntityId> {
        self.entity_by_surface.get(surface).copied()
    }

    pub fn relation_id(&self, surface: &str) -> Option<RelationId> {
        self.relation_by_surface.get(surface).copied()
    }

    pub fn triplet_id(&self, t: &Triplet) -> Option<usize> {
        self.triplet_ids.get(t).copied()
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.triplet_ids.contains_key(t)
    }

    /// Resolves a surface triple against the graph.
    pub fn lookup(&self, head: &str, relation: &str, tail: &str) -> Option<Triplet> {
        Some(Triplet::new(
            self.entity_id(head)?,
            self.relation_id(relation)?,
            self.entity_id(tail)?,
        ))
    }

    pub fn out_edges(&self, e: EntityId) -> &[usize] {
        &self.out_index[e as usize]
    }

    pub fn in_edges(&self, e: EntityId) -> &[usize] {
        &self.in_index[e as usize]
    }

    pub fn surface_index(&self) -> &HashMap<Vec<TokenId>, EntityId> {
        &self.surface_index
    }

    /// `(h, r, t) → (t, ~r, h)`
    pub fn invert(&self, t: &Triplet) -> Triplet {
        Triplet::new(t.tail, self.relation(t.relation).inverse_id, t.head)
    }

    pub fn surfaces(&self, t: &Triplet) -> (&str, &str, &str) {
        (
            &self.entity(t.head).surface,
            &self.relation(t.relation).surface,
            &self.entity(t.tail).surface,
        )
    }

    /// Head, relation and tail tokens concatenated.
    pub fn triplet_tokens(&self, t: &Triplet) -> Vec<TokenId> {
        let mut v = self.entity(t.head).tokens.clone();
        v.extend_from_slice(&self.relation(t.relation).tokens);
        v.extend_from_slice(&self.entity(t.tail).tokens);
        v
    }

    pub fn triplet_text(&self, t: &Triplet) -> String {
        let (h, r, t) = self.surfaces(t);
        format!("{h} {r} {t}")
    }

    /// Exact token matches, scanning left to right and taking the longest
    /// surface at each position.
    pub fn link_entities(&self, tokens: &[TokenId]) -> Vec<Mention> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest_surface.min(tokens.len() - i);
            let found = (1..=max).rev().find_map(|len| {
                self.surface_index
                    .get(&tokens[i..i + len])
                    .map(|&e| (e, len))
            });
            match found {
                Some((entity, len)) => {
                    out.push(Mention {
                        entity,
                        start: i,
                        end: i + len,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Triplets touching any entity reachable from `seeds` in `k - 1`
    /// undirected expansion steps, sorted by id triple and capped at
    /// `max_candidates`.
    pub fn khop_candidates(
        &self,
        seeds: &[EntityId],
        k: usize,
        max_candidates: usize,
    ) -> Result<Vec<Triplet>> {
        if k == 0 {
            return Err(Error::Invalid("hop count must be at least 1".into()));
        }
        if let Some(s) = seeds.iter().find(|&&s| s as usize >= self.entities.len()) {
            return Err(Error::Unknown {
                kind: "entity",
                name: s.to_string(),
            });
        }
        let mut reached: HashSet<EntityId> = seeds.iter().copied().collect();
        let mut frontier: Vec<EntityId> = reached.iter().copied().collect();
        for _ in 1..k {
            let mut next = Vec::new();
            for &e in &frontier {
                for &ti in self.out_edges(e).iter().chain(self.in_edges(e)) {
                    let t = self.triplets[ti];
                    for x in [t.head, t.tail] {
                        if reached.insert(x) {
                            next.push(x);
                        }
                    }
                }
            }
            frontier = next;
        }
        let mut set = BTreeSet::new();
        for &e in &reached {
            for &ti in self.out_edges(e).iter().chain(self.in_edges(e)) {
                set.insert(self.triplets[ti]);
            }
        }
        Ok(set.into_iter().take(max_candidates).collect())
    }

    /// Rebuilds both adjacency indices by a linear scan and compares.
    pub fn check_indices(&self) -> bool {
        let mut out = vec![BTreeSet::new(); self.entities.len()];
        let mut inn = vec![BTreeSet::new(); self.entities.len()];
        for (i, t) in self.triplets.iter().enumerate() {
            out[t.head as usize].insert(i);
            inn[t.tail as usize].insert(i);
        }
        let same = |idx: &[Vec<usize>], want: &[BTreeSet<usize>]| {
            idx.iter().zip(want).all(|(a, b)| {
                a.len() == b.len() && a.iter().copied().collect::<BTreeSet<_>>() == *b
            })
        };
        let unique = self.triplets.iter().collect::<HashSet<_>>().len() == self.triplets.len();
        unique && same(&self.out_index, &out) && same(&self.in_index, &inn)
    }

    /// Triples-file text for the original (non-inverse) triplets.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.triplets {
            let (h, r, t) = self.surfaces(t);
            s.push_str(&format!("{h}\t{r}\t{t}\n"));
        }
        s
    }
}
