//! Synthetic knowledge graph and annotated corpus.
//!
//! Concept names are made of pseudo-words unique to one name, so the only
//! way to relate two names of the same concept is through the text and the
//! graph. Sentences verbalize graph edges through templates, which makes
//! masked tokens predictable from graph structure.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSentence, EvalMention, Mention};
use crate::error::{Error, Result};
use crate::kg::{RelationNameRecord, SynonymRecord, TripleRecord};
use crate::rng::SeededRng;

const RELATION_PHRASES: [&str; 10] = [
    "treats",
    "causes",
    "prevents",
    "inhibits",
    "is associated with",
    "interacts with",
    "is a risk factor for",
    "diagnoses",
    "regulates",
    "is part of",
];

const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn default_templates() -> Vec<String> {
    [
        "{subj} {rel} {obj} in most patients",
        "recent studies show that {subj} {rel} {obj}",
        "{subj} {rel} {obj} according to clinical reports",
        "it is well known that {subj} {rel} {obj}",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Generator parameters. Ranges are inclusive `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub concepts: usize,
    pub relations: usize,
    pub synonyms_per_concept: [usize; 2],
    pub words_per_name: [usize; 2],
    /// Incoming edges per node.
    pub edges_per_node: [usize; 2],
    pub sentences_per_concept: [usize; 2],
    /// Probability that a corpus mention gets a typo or inflection.
    pub noise_rate: f64,
    /// Text-only aliases per concept: used as corpus mentions but absent
    /// from the graph's synonym lists; they become the eval mentions.
    pub text_aliases: usize,
    pub heldout_sentences_per_concept: usize,
    pub templates: Vec<String>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            concepts: 200,
            relations: 6,
            synonyms_per_concept: [2, 3],
            words_per_name: [1, 2],
            edges_per_node: [1, 5],
            sentences_per_concept: [4, 6],
            noise_rate: 0.05,
            text_aliases: 1,
            heldout_sentences_per_concept: 1,
            templates: default_templates(),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let ranges = [
            ("synonyms_per_concept", self.synonyms_per_concept),
            ("words_per_name", self.words_per_name),
            ("edges_per_node", self.edges_per_node),
            ("sentences_per_concept", self.sentences_per_concept),
        ];
        for (name, [lo, hi]) in ranges {
            if lo > hi {
                return bad(format!("{name}: min {lo} exceeds max {hi}"));
            }
            if lo == 0 {
                return bad(format!("{name}: minimum must be at least 1"));
            }
        }
        if self.relations == 0 {
            return bad("0 relations cannot realize the requested edges".into());
        }
        if self.concepts < 2 {
            return bad("at least 2 concepts are needed to form edges".into());
        }
        let max_in = (self.concepts - 1) * self.relations;
        if self.edges_per_node[0] > max_in {
            return bad(format!(
                "edges_per_node min {} exceeds the {max_in} distinct incoming edges possible",
                self.edges_per_node[0]
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if self.templates.is_empty() {
            return bad("no sentence templates".into());
        }
        for t in &self.templates {
            let toks: Vec<&str> = t.split_whitespace().collect();
            for slot in ["{subj}", "{rel}", "{obj}"] {
                if toks.iter().filter(|w| **w == slot).count() != 1 {
                    return bad(format!("template `{t}` must contain {slot} exactly once"));
                }
            }
        }
        Ok(())
    }
}

/// Generated files, serialized as line records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedData {
    pub triples: String,
    pub synonyms: String,
    pub relations: String,
    pub corpus: String,
    pub heldout_corpus: String,
    pub eval_mentions: String,
    pub summary: GenerationSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerationSummary {
    pub nodes: usize,
    pub edges: usize,
    pub relations: usize,
    pub sentences: usize,
    pub mentions: usize,
    pub heldout_sentences: usize,
    pub eval_mentions: usize,
}

impl GeneratedData {
    pub const FILES: [&'static str; 6] = [
        "triples.jsonl",
        "synonyms.jsonl",
        "relations.jsonl",
        "corpus.jsonl",
        "heldout_corpus.jsonl",
        "eval_mentions.jsonl",
    ];

    pub fn files(&self) -> [(&'static str, &str); 6] {
        [
            (Self::FILES[0], &self.triples),
            (Self::FILES[1], &self.synonyms),
            (Self::FILES[2], &self.relations),
            (Self::FILES[3], &self.corpus),
            (Self::FILES[4], &self.heldout_corpus),
            (Self::FILES[5], &self.eval_mentions),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in self.files() {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

struct WordSource {
    used: HashSet<String>,
}

impl WordSource {
    fn new(reserved: impl IntoIterator<Item = String>) -> Self {
        Self {
            used: reserved.into_iter().collect(),
        }
    }

    fn fresh(&mut self, rng: &mut SeededRng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if rng.gen_bool(0.5) {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn name(&mut self, words: [usize; 2], rng: &mut SeededRng) -> String {
        let n = rng.gen_range(words[0]..=words[1]);
        (0..n).map(|_| self.fresh(rng)).collect::<Vec<_>>().join(" ")
    }
}

fn perturb(form: &str, rng: &mut SeededRng) -> String {
    let mut words: Vec<String> = form.split_whitespace().map(str::to_string).collect();
    let i = rng.gen_range(0..words.len());
    let w = &mut words[i];
    if w.len() >= 4 && rng.gen_bool(0.5) {
        let mut chars: Vec<char> = w.chars().collect();
        let j = rng.gen_range(1..chars.len() - 2);
        chars.swap(j, j + 1);
        *w = chars.into_iter().collect();
    } else {
        w.push('s');
    }
    words.join(" ")
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

struct Generated {
    ids: Vec<String>,
    names: Vec<Vec<String>>,
    aliases: Vec<Vec<String>>,
    rel_names: Vec<String>,
    edges: Vec<(usize, usize, usize)>,
}

impl Generated {
    fn text_forms(&self, v: usize) -> Vec<&String> {
        self.names[v].iter().chain(&self.aliases[v]).collect()
    }

    fn sentence(
        &self,
        spec: &GeneratorSpec,
        edge: (usize, usize, usize),
        rng: &mut SeededRng,
    ) -> AnnotatedSentence {
        let (h, r, t) = edge;
        let template = spec.templates.choose(rng).expect("templates validated");
        let surface = |v: usize, rng: &mut SeededRng| {
            let form = (*self.text_forms(v).choose(rng).expect("concept has names")).clone();
            if spec.noise_rate > 0.0 && rng.gen_bool(spec.noise_rate) {
                perturb(&form, rng)
            } else {
                form
            }
        };
        let subj = surface(h, rng);
        let obj = surface(t, rng);
        let mut tokens = Vec::new();
        let mut mentions = Vec::new();
        for slot in template.split_whitespace() {
            match slot {
                "{subj}" | "{obj}" => {
                    let (text, v) = if slot == "{subj}" { (&subj, h) } else { (&obj, t) };
                    let start = tokens.len();
                    tokens.extend(text.split_whitespace().map(str::to_string));
                    mentions.push(Mention(start, tokens.len(), self.ids[v].clone()));
                }
                "{rel}" => tokens.extend(self.rel_names[r].split_whitespace().map(str::to_string)),
                w => tokens.push(w.to_string()),
            }
        }
        AnnotatedSentence { tokens, mentions }
    }
}

/// Runs the generator. Output is a pure function of `(spec, rng state)`.
pub fn generate(spec: &GeneratorSpec, rng: &mut SeededRng) -> Result<GeneratedData> {
    spec.validate()?;
    let reserved = spec
        .templates
        .iter()
        .flat_map(|t| t.split_whitespace())
        .chain(RELATION_PHRASES.iter().flat_map(|p| p.split_whitespace()))
        .map(str::to_string);
    let mut words = WordSource::new(reserved);

    let rel_names: Vec<String> = (0..spec.relations)
        .map(|r| match RELATION_PHRASES.get(r) {
            Some(p) => p.to_string(),
            None => format!("relates via {}", words.fresh(rng)),
        })
        .collect();

    let n = spec.concepts;
    let width = n.to_string().len().max(4);
    let ids: Vec<String> = (0..n).map(|i| format!("C{i:0width$}")).collect();
    let mut names = Vec::with_capacity(n);
    let mut aliases = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(spec.synonyms_per_concept[0]..=spec.synonyms_per_concept[1]);
        names.push((0..k).map(|_| words.name(spec.words_per_name, rng)).collect::<Vec<_>>());
        aliases.push(
            (0..spec.text_aliases)
                .map(|_| words.name(spec.words_per_name, rng))
                .collect::<Vec<_>>(),
        );
    }

    let max_in = (n - 1) * spec.relations;
    let mut edges = Vec::new();
    for tail in 0..n {
        let k = rng
            .gen_range(spec.edges_per_node[0]..=spec.edges_per_node[1])
            .min(max_in);
        let mut chosen = BTreeSet::new();
        let mut order = Vec::with_capacity(k);
        while order.len() < k {
            let mut head = rng.gen_range(0..n - 1);
            if head >= tail {
                head += 1;
            }
            let rel = rng.gen_range(0..spec.relations);
            if chosen.insert((head, rel)) {
                order.push((head, rel, tail));
            }
        }
        edges.extend(order);
    }

    let g = Generated {
        ids,
        names,
        aliases,
        rel_names,
        edges,
    };

    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &(h, _, t)) in g.edges.iter().enumerate() {
        incident[t].push(i);
        incident[h].push(i);
    }

    let mut corpus = Vec::new();
    let mut heldout = Vec::new();
    for v in 0..n {
        let k = rng.gen_range(spec.sentences_per_concept[0]..=spec.sentences_per_concept[1]);
        for _ in 0..k {
            let e = g.edges[*incident[v].choose(rng).expect("every node has an edge")];
            corpus.push(g.sentence(spec, e, rng));
        }
        for _ in 0..spec.heldout_sentences_per_concept {
            let e = g.edges[*incident[v].choose(rng).expect("every node has an edge")];
            heldout.push(g.sentence(spec, e, rng));
        }
    }

    let all_names: HashSet<&String> = g.names.iter().flatten().collect();
    let mut eval = Vec::new();
    for v in 0..n {
        if g.aliases[v].is_empty() {
            // Without aliases, fall back to a perturbed name that is not
            // itself a dictionary entry.
            let base = g.names[v].choose(rng).expect("concept has names");
            let mut form = perturb(base, rng);
            while all_names.contains(&form) {
                form = perturb(base, rng);
            }
            eval.push(EvalMention {
                mention: form,
                gold: g.ids[v].clone(),
            });
        } else {
            for a in &g.aliases[v] {
                eval.push(EvalMention {
                    mention: a.clone(),
                    gold: g.ids[v].clone(),
                });
            }
        }
    }

    let triples: Vec<TripleRecord> = g
        .edges
        .iter()
        .map(|&(h, r, t)| TripleRecord {
            head: g.ids[h].clone(),
            rel: format!("R{r}"),
            tail: g.ids[t].clone(),
        })
        .collect();
    let synonyms: Vec<SynonymRecord> = (0..n)
        .map(|v| SynonymRecord {
            id: g.ids[v].clone(),
            names: g.names[v].clone(),
        })
        .collect();
    let relations: Vec<RelationNameRecord> = g
        .rel_names
        .iter()
        .enumerate()
        .map(|(r, name)| RelationNameRecord {
            rel: format!("R{r}"),
            name: name.clone(),
        })
        .collect();

    let summary = GenerationSummary {
        nodes: n,
        edges: g.edges.len(),
        relations: spec.relations,
        sentences: corpus.len(),
        mentions: corpus.iter().map(|s| s.mentions.len()).sum(),
        heldout_sentences: heldout.len(),
        eval_mentions: eval.len(),
    };

    Ok(GeneratedData {
        triples: jsonl(&triples),
        synonyms: jsonl(&synonyms),
        relations: jsonl(&relations),
        corpus: jsonl(&corpus),
        heldout_corpus: jsonl(&heldout),
        eval_mentions: jsonl(&eval),
        summary,
    })
}
