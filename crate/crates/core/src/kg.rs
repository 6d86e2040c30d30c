//! Knowledge graph storage, capped 1-hop subgraph sampling, synonym sampling
//! and edge linearization.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index of a concept inside a [`KnowledgeGraph`].
pub type NodeIx = usize;
/// Dense index of a relation type.
pub type RelIx = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub head: NodeIx,
    pub rel: RelIx,
    pub tail: NodeIx,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleRecord {
    pub head: String,
    pub rel: String,
    pub tail: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynonymRecord {
    pub id: String,
    pub names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationNameRecord {
    pub rel: String,
    pub name: String,
}

/// Concepts with synonym sets, typed directed edges and relation surface
/// forms. Immutable once built.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    ids: Vec<String>,
    index: HashMap<String, NodeIx>,
    synonyms: Vec<Vec<String>>,
    rel_ids: Vec<String>,
    rel_names: Vec<String>,
    rel_index: HashMap<String, RelIx>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
}

/// A center concept and a capped sample of its incoming edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub center: NodeIx,
    pub edges: Vec<Edge>,
}

impl Subgraph {
    /// Distinct neighbor ids in first-appearance order; the center is not
    /// included.
    pub fn neighbors(&self) -> Vec<NodeIx> {
        let mut seen = HashSet::new();
        self.edges
            .iter()
            .map(|e| e.head)
            .filter(|h| seen.insert(*h))
            .collect()
    }
}

/// Structured form of a linearized subgraph, rendered by `Display`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linearization {
    pub center_name: String,
    /// `(source name, relation name, center name)` per edge.
    pub edges: Vec<(String, String, String)>,
}

impl fmt::Display for Linearization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[CLS] {} [SEP]", self.center_name)?;
        for (u, r, v) in &self.edges {
            write!(f, " {u} {r} {v} [SEP]")?;
        }
        Ok(())
    }
}

fn read_records<T: for<'de> Deserialize<'de>>(
    reader: impl BufRead,
    source_name: &str,
) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

impl KnowledgeGraph {
    /// Parses triples, synonyms and optional relation names from line
    /// records. Duplicate triples are dropped.
    pub fn load(
        triples: impl BufRead,
        synonyms: impl BufRead,
        relation_names: Option<impl BufRead>,
    ) -> Result<Self> {
        let syn = read_records::<SynonymRecord>(synonyms, "synonyms")?;
        let mut ids = Vec::with_capacity(syn.len());
        let mut names = Vec::with_capacity(syn.len());
        let mut index = HashMap::new();
        for (line, rec) in syn {
            if rec.names.is_empty() {
                return Err(Error::Parse {
                    source_name: "synonyms".into(),
                    line,
                    message: format!("concept `{}` has no names", rec.id),
                });
            }
            if index.insert(rec.id.clone(), ids.len()).is_some() {
                return Err(Error::Parse {
                    source_name: "synonyms".into(),
                    line,
                    message: format!("duplicate concept `{}`", rec.id),
                });
            }
            ids.push(rec.id);
            names.push(rec.names);
        }

        let mut rel_ids: Vec<String> = Vec::new();
        let mut rel_index: HashMap<String, RelIx> = HashMap::new();
        let mut rel_names: Vec<String> = Vec::new();
        let mut intern_rel = |r: &str, rel_ids: &mut Vec<String>, rel_names: &mut Vec<String>| {
            *rel_index.entry(r.to_string()).or_insert_with(|| {
                rel_ids.push(r.to_string());
                rel_names.push(r.to_string());
                rel_ids.len() - 1
            })
        };

        if let Some(reader) = relation_names {
            for (_, rec) in read_records::<RelationNameRecord>(reader, "relations")? {
                let ix = intern_rel(&rec.rel, &mut rel_ids, &mut rel_names);
                rel_names[ix] = rec.name;
            }
        }

        let mut edges = Vec::new();
        let mut seen = HashSet::new();
        for (line, rec) in read_records::<TripleRecord>(triples, "triples")? {
            let lookup = |id: &str| {
                index.get(id).copied().ok_or_else(|| {
                    Error::Integrity(format!(
                        "triples line {line}: concept `{id}` has no synonym entry"
                    ))
                })
            };
            let head = lookup(&rec.head)?;
            let tail = lookup(&rec.tail)?;
            let rel = intern_rel(&rec.rel, &mut rel_ids, &mut rel_names);
            let edge = Edge { head, rel, tail };
            if seen.insert(edge) {
                edges.push(edge);
            }
        }
        Ok(Self::assemble(ids, index, names, rel_ids, rel_names, edges))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let rel_path = dir.join("relations.jsonl");
        let rel = if rel_path.exists() {
            Some(open(&rel_path)?)
        } else {
            None
        };
        Self::load(
            open(&dir.join("triples.jsonl"))?,
            open(&dir.join("synonyms.jsonl"))?,
            rel,
        )
    }

    fn assemble(
        ids: Vec<String>,
        index: HashMap<String, NodeIx>,
        synonyms: Vec<Vec<String>>,
        rel_ids: Vec<String>,
        rel_names: Vec<String>,
        edges: Vec<Edge>,
    ) -> Self {
        let mut incoming = vec![Vec::new(); ids.len()];
        for (i, e) in edges.iter().enumerate() {
            incoming[e.tail].push(i);
        }
        let rel_index = rel_ids
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        Self {
            ids,
            index,
            synonyms,
            rel_ids,
            rel_names,
            rel_index,
            edges,
            incoming,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_relations(&self) -> usize {
        self.rel_ids.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn id(&self, v: NodeIx) -> &str {
        &self.ids[v]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn node(&self, id: &str) -> Result<NodeIx> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownConcept(id.to_string()))
    }

    pub fn synonyms(&self, v: NodeIx) -> &[String] {
        &self.synonyms[v]
    }

    pub fn relation_id(&self, r: RelIx) -> &str {
        &self.rel_ids[r]
    }

    pub fn relation_name(&self, r: RelIx) -> &str {
        &self.rel_names[r]
    }

    pub fn relation(&self, id: &str) -> Option<RelIx> {
        self.rel_index.get(id).copied()
    }

    pub fn indegree(&self, v: NodeIx) -> usize {
        self.incoming[v].len()
    }

    pub fn incoming(&self, v: NodeIx) -> impl Iterator<Item = &Edge> {
        self.incoming[v].iter().map(move |&i| &self.edges[i])
    }

    fn check(&self, v: NodeIx) -> Result<()> {
        if v < self.ids.len() {
            Ok(())
        } else {
            Err(Error::UnknownConcept(format!("#{v}")))
        }
    }

    /// All incoming edges of `v` when there are at most `max_neighbors`,
    /// otherwise a uniform sample of exactly that many, in draw order.
    pub fn local_subgraph<R: Rng>(
        &self,
        v: NodeIx,
        max_neighbors: usize,
        rng: &mut R,
    ) -> Result<Subgraph> {
        self.check(v)?;
        let inc = &self.incoming[v];
        let edges = if inc.len() <= max_neighbors {
            inc.iter().map(|&i| self.edges[i]).collect()
        } else {
            index::sample(rng, inc.len(), max_neighbors)
                .into_iter()
                .map(|j| self.edges[inc[j]])
                .collect()
        };
        Ok(Subgraph { center: v, edges })
    }

    pub fn sample_synonym<R: Rng>(&self, v: NodeIx, rng: &mut R) -> Result<&str> {
        self.check(v)?;
        let names = &self.synonyms[v];
        Ok(&names[rng.gen_range(0..names.len())])
    }

    /// Samples names for a linearized subgraph: one center name, reused in
    /// every edge, then one source name per edge in subgraph order.
    pub fn linearization<R: Rng>(&self, sg: &Subgraph, rng: &mut R) -> Result<Linearization> {
        let center_name = self.sample_synonym(sg.center, rng)?.to_string();
        let mut edges = Vec::with_capacity(sg.edges.len());
        for e in &sg.edges {
            if e.tail != sg.center {
                return Err(Error::InvalidInput(format!(
                    "edge tail {} does not match center {}",
                    e.tail, sg.center
                )));
            }
            let u = self.sample_synonym(e.head, rng)?.to_string();
            edges.push((u, self.relation_name(e.rel).to_string(), center_name.clone()));
        }
        Ok(Linearization { center_name, edges })
    }

    /// `"[CLS] s_v [SEP] s_u r s_v [SEP] ..."` for the subgraph.
    pub fn linearize<R: Rng>(&self, sg: &Subgraph, rng: &mut R) -> Result<String> {
        Ok(self.linearization(sg, rng)?.to_string())
    }
}
