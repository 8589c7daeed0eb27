//! Word, tag and label vocabularies, and entity masking.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::instance::Instance;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<PAD>";
const UNK_TOKEN: &str = "<UNK>";
/// Entity type used for mask ids when a type was never seen in training.
const UNKNOWN_TYPE: &str = "<UNK>";

/// Which entity a masked token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityRole {
    Subj,
    Obj,
    Aux,
}

impl EntityRole {
    fn tag(self) -> &'static str {
        match self {
            EntityRole::Subj => "SUBJ",
            EntityRole::Obj => "OBJ",
            EntityRole::Aux => "ENT3",
        }
    }
}

/// Word vocabulary with reserved padding, unknown and masked-entity ids.
///
/// Layout: `0 = <PAD>`, `1 = <UNK>`, then one `<ROLE:TYPE>` id per entity
/// role and type, then ordinary words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(with = "mask_entries")]
    mask_ids: BTreeMap<(EntityRole, String), usize>,
    first_word: usize,
}

/// Mask ids serialized as a list of `((role, type), id)` entries, since
/// JSON maps need string keys.
mod mask_entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    use super::EntityRole;

    type Map = BTreeMap<(EntityRole, String), usize>;

    pub fn serialize<S: Serializer>(m: &Map, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Map, D::Error> {
        let entries: Vec<((EntityRole, String), usize)> = Deserialize::deserialize(d)?;
        Ok(entries.into_iter().collect())
    }
}

impl Vocab {
    /// Builds from training instances. Entity tokens are always masked, so
    /// only tokens outside entity spans are counted; words seen fewer than
    /// `min_count` times map to `<UNK>`.
    pub fn build(instances: &[Instance], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut types: BTreeSet<String> = BTreeSet::new();
        for inst in instances {
            let spans = inst.entity_spans();
            for (i, tok) in inst.tokens.iter().enumerate() {
                if !spans.iter().any(|s| s.contains(i + 1)) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
            types.insert(inst.subj_type.clone());
            types.insert(inst.obj_type.clone());
            if let Some(aux) = &inst.aux {
                types.insert(aux.kind.clone());
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_parts(
            types.into_iter().collect(),
            words.into_iter().map(|(w, _)| w.to_string()).collect(),
        )
    }

    /// Vocabulary from an explicit entity-type list and word list.
    pub fn from_parts(entity_types: Vec<String>, words: Vec<String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut mask_ids = BTreeMap::new();
        let mut types = entity_types;
        types.retain(|t| t != UNKNOWN_TYPE);
        types.push(UNKNOWN_TYPE.to_string());
        for role in [EntityRole::Subj, EntityRole::Obj, EntityRole::Aux] {
            for t in &types {
                mask_ids.insert((role, t.clone()), all.len());
                all.push(format!("<{}:{}>", role.tag(), t));
            }
        }
        let first_word = all.len();
        for w in words {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let mut v = Vocab {
            words: all,
            index: HashMap::new(),
            mask_ids,
            first_word,
        };
        v.rebuild_index();
        v
    }

    /// Restores the lookup map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .skip(self.first_word)
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Ordinary word ids, excluding the reserved ones.
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        self.first_word..self.words.len()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Id of an ordinary word, `UNK` if absent.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn mask_id(&self, role: EntityRole, kind: &str) -> usize {
        self.mask_ids
            .get(&(role, kind.to_string()))
            .or_else(|| self.mask_ids.get(&(role, UNKNOWN_TYPE.to_string())))
            .copied()
            .expect("unknown-type mask id is always present")
    }

    pub fn is_mask_id(&self, id: usize) -> bool {
        id > UNK && id < self.first_word
    }

    /// Token ids with every entity token replaced by its role/type mask.
    pub fn mask_entities(&self, inst: &Instance) -> Vec<usize> {
        let aux = inst.aux.as_ref();
        inst.tokens
            .iter()
            .enumerate()
            .map(|(k, tok)| {
                let i = k + 1;
                if inst.subj.contains(i) {
                    self.mask_id(EntityRole::Subj, &inst.subj_type)
                } else if inst.obj.contains(i) {
                    self.mask_id(EntityRole::Obj, &inst.obj_type)
                } else if let Some(a) = aux.filter(|a| a.span.contains(i)) {
                    self.mask_id(EntityRole::Aux, &a.kind)
                } else {
                    self.lookup(tok)
                }
            })
            .collect()
    }
}

/// A closed tag set (POS or NER) with `0` reserved for unseen tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagVocab {
    tags: Vec<String>,
}

impl TagVocab {
    pub fn build<'a>(tags: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = tags.into_iter().collect();
        let mut all = vec![UNK_TOKEN.to_string()];
        all.extend(set.into_iter().filter(|t| *t != UNK_TOKEN).map(String::from));
        TagVocab { tags: all }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn lookup(&self, tag: &str) -> usize {
        // Tag sets are small and sorted after the reserved entry.
        self.tags[1..]
            .binary_search_by(|t| t.as_str().cmp(tag))
            .map(|i| i + 1)
            .unwrap_or(0)
    }
}

/// Relation labels; the negative class, when present, is id 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
    negative: Option<usize>,
}

impl LabelSet {
    /// Sorted labels from the corpus, with `negative` first if it occurs.
    pub fn build(instances: &[Instance], negative: &str) -> Self {
        let set: BTreeSet<&str> = instances.iter().map(|i| i.relation.as_str()).collect();
        Self::from_labels(set, negative)
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>, negative: &str) -> Self {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        let mut out = Vec::new();
        let has_neg = set.contains(negative);
        if has_neg {
            out.push(negative.to_string());
        }
        out.extend(set.into_iter().filter(|l| *l != negative).map(String::from));
        LabelSet {
            labels: out,
            negative: has_neg.then_some(0),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn negative(&self) -> Option<usize> {
        self.negative
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }

    /// Fails with the list of labels this set does not know.
    pub fn check_covers(&self, instances: &[Instance]) -> Result<()> {
        let unknown: BTreeSet<&str> = instances
            .iter()
            .map(|i| i.relation.as_str())
            .filter(|l| self.id(l).is_none())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "corpus has labels unknown to the model: {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )))
        }
    }
}
