use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive, 1-based token span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn single(i: usize) -> Self {
        Span { start: i, end: i }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// 1-based token indices in the span.
    pub fn tokens(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    /// Number of tokens strictly between two disjoint spans, plus one.
    pub fn distance(&self, other: &Span) -> usize {
        if self.end < other.start {
            other.start - self.end
        } else if other.end < self.start {
            self.start - other.end
        } else {
            0
        }
    }
}

/// An auxiliary third entity for ternary relations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxEntity {
    pub span: Span,
    pub kind: String,
}

/// Form and annotation of the synthetic root that joins multi-sentence
/// instances into one tree.
pub const DOC_ROOT_FORM: &str = "<DOC>";
pub const DOC_ROOT_DEPREL: &str = "doc";

/// One annotated example. Token indices are 1-based; `head[i] == 0` marks
/// the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub ner: Vec<String>,
    pub head: Vec<usize>,
    pub deprel: Vec<String>,
    pub subj: Span,
    pub obj: Span,
    pub subj_type: String,
    pub obj_type: String,
    pub aux: Option<AuxEntity>,
    pub relation: String,
    /// How many sentences were joined under a document root (1 for ordinary
    /// sentence-level instances).
    pub sentences: usize,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All entity spans: subject, object, then the auxiliary entity if any.
    pub fn entity_spans(&self) -> Vec<Span> {
        let mut spans = vec![self.subj, self.obj];
        if let Some(aux) = &self.aux {
            spans.push(aux.span);
        }
        spans
    }

    /// Tokens between the subject and object spans (see [`Span::distance`]).
    pub fn entity_distance(&self) -> usize {
        self.subj.distance(&self.obj)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Instance(format!("{}: no tokens", self.id)));
        }
        for (name, len) in [
            ("pos", self.pos.len()),
            ("ner", self.ner.len()),
            ("head", self.head.len()),
            ("deprel", self.deprel.len()),
        ] {
            if len != n {
                return Err(Error::Instance(format!(
                    "{}: {name} has {len} entries for {n} tokens",
                    self.id
                )));
            }
        }
        let spans = self.entity_spans();
        for s in &spans {
            if s.start < 1 || s.start > s.end || s.end > n {
                return Err(Error::Instance(format!(
                    "{}: span {}-{} outside 1..={n}",
                    self.id, s.start, s.end
                )));
            }
        }
        for (i, a) in spans.iter().enumerate() {
            for b in &spans[i + 1..] {
                if a.overlaps(b) {
                    return Err(Error::Instance(format!(
                        "{}: spans {}-{} and {}-{} overlap",
                        self.id, a.start, a.end, b.start, b.end
                    )));
                }
            }
        }
        check_tree(&self.head).map_err(|m| Error::Instance(format!("{}: {m}", self.id)))
    }

    /// Joins a dependency forest into one tree by appending a document root
    /// and attaching every sentence root to it. No-op for a single root.
    pub fn join_sentences(&mut self) {
        let roots: Vec<usize> = (0..self.head.len()).filter(|&i| self.head[i] == 0).collect();
        if roots.len() <= 1 {
            return;
        }
        let doc = self.tokens.len() + 1;
        for r in &roots {
            self.head[*r] = doc;
            self.deprel[*r] = DOC_ROOT_DEPREL.to_string();
        }
        self.tokens.push(DOC_ROOT_FORM.to_string());
        self.pos.push("-".to_string());
        self.ner.push("O".to_string());
        self.head.push(0);
        self.deprel.push("root".to_string());
        self.sentences = roots.len();
    }
}

/// Verifies that 1-based `head` describes a single rooted tree, returning a
/// message naming the offending tokens otherwise.
pub fn check_tree(head: &[usize]) -> std::result::Result<(), String> {
    let n = head.len();
    if let Some(i) = head.iter().position(|&h| h > n) {
        return Err(format!("token {} has head {} outside 0..={n}", i + 1, head[i]));
    }
    if let Some(i) = (0..n).find(|&i| head[i] == i + 1) {
        return Err(format!("token {} is its own head", i + 1));
    }
    let roots: Vec<usize> = (0..n).filter(|&i| head[i] == 0).map(|i| i + 1).collect();
    // 0 = unvisited, 1 = on current walk, 2 = known to reach the root
    let mut state = vec![0u8; n + 1];
    for start in 1..=n {
        let mut walk = Vec::new();
        let mut cur = start;
        while cur != 0 && state[cur] == 0 {
            state[cur] = 1;
            walk.push(cur);
            cur = head[cur - 1];
        }
        if cur != 0 && state[cur] == 1 {
            let pos = walk.iter().position(|&t| t == cur).expect("cycle member on walk");
            let mut cycle = walk[pos..].to_vec();
            cycle.sort_unstable();
            let names: Vec<String> = cycle.iter().map(|t| t.to_string()).collect();
            return Err(format!("heads form a cycle through tokens {}", names.join(", ")));
        }
        for t in walk {
            state[t] = 2;
        }
    }
    match roots.len() {
        1 => Ok(()),
        0 => Err("no token has head 0".to_string()),
        _ => Err(format!(
            "{} tokens have head 0 ({:?}); declare sentences= to join them",
            roots.len(),
            roots
        )),
    }
}
