//! Seeded generator of toy relation-extraction corpora.
//!
//! Each sentence has a subject and an object entity governed by a neutral
//! root verb. The relation label is a deterministic function of a single
//! trigger word whose tree attachment is controlled by [`TriggerPlacement`].
//! All other tokens are filler words arranged in right-branching distractor
//! chains; some of them can be replaced by trigger words of other relations
//! ("decoys") that sit at least two hops away from the entity path.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::instance::{Instance, Span};
use crate::error::{Error, Result};

pub const NEGATIVE_LABEL: &str = "no_relation";

/// Where the relation-bearing trigger word attaches in the tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriggerPlacement {
    /// On the path between subject and verb.
    OnPath,
    /// Dependent of the verb: one hop off the entity path.
    OneHop,
    /// Inside a side clause, `far_hops` edges off the entity path.
    Far,
}

impl TriggerPlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "on_path" | "on-path" => Ok(TriggerPlacement::OnPath),
            "one_hop" | "one-hop" => Ok(TriggerPlacement::OneHop),
            "far" | "off_path" | "off-path" => Ok(TriggerPlacement::Far),
            other => Err(Error::config(format!("unknown trigger placement {other:?}"))),
        }
    }
}

impl fmt::Display for TriggerPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TriggerPlacement::OnPath => "on_path",
            TriggerPlacement::OneHop => "one_hop",
            TriggerPlacement::Far => "far",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Number of positive relation labels.
    pub relations: usize,
    pub instances: usize,
    /// Fraction of instances labelled [`NEGATIVE_LABEL`] (neutral trigger).
    pub negative_fraction: f64,
    /// Distinct filler words.
    pub vocab_size: usize,
    /// Distinct trigger words per relation.
    pub triggers_per_relation: usize,
    /// Sentence length, uniform over `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Entity distance (see [`Span::distance`]), uniform over the feasible
    /// part of `min_distance..=max_distance`.
    pub min_distance: usize,
    pub max_distance: usize,
    pub placement: TriggerPlacement,
    /// Tree distance of a [`TriggerPlacement::Far`] trigger from the path.
    pub far_hops: usize,
    /// Decoy trigger words inserted per sentence.
    pub decoys: usize,
    /// Longest distractor chain.
    pub max_chain: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            relations: 3,
            instances: 200,
            negative_fraction: 0.0,
            vocab_size: 60,
            triggers_per_relation: 2,
            min_len: 8,
            max_len: 20,
            min_distance: 3,
            max_distance: 10,
            placement: TriggerPlacement::OnPath,
            far_hops: 2,
            decoys: 0,
            max_chain: 4,
        }
    }
}

impl SyntheticConfig {
    /// Parses `key=value` lines (blank lines and `#` comments ignored) on
    /// top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = SyntheticConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", no + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "relations" => self.relations = num(key, value)?,
            "instances" => self.instances = num(key, value)?,
            "negative_fraction" => self.negative_fraction = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "triggers_per_relation" => self.triggers_per_relation = num(key, value)?,
            "min_len" => self.min_len = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "min_distance" => self.min_distance = num(key, value)?,
            "max_distance" => self.max_distance = num(key, value)?,
            "placement" => self.placement = TriggerPlacement::parse(value)?,
            "far_hops" => self.far_hops = num(key, value)?,
            "decoys" => self.decoys = num(key, value)?,
            "max_chain" => self.max_chain = num(key, value)?,
            other => return Err(Error::config(format!("unknown synthetic key {other:?}"))),
        }
        Ok(())
    }

    /// Tokens needed between the entities: the verb, plus the trigger when
    /// it sits on the path.
    fn middle_need(&self) -> usize {
        match self.placement {
            TriggerPlacement::OnPath => 2,
            _ => 1,
        }
    }

    /// Non-entity tokens every sentence needs.
    fn structural_tokens(&self) -> usize {
        match self.placement {
            TriggerPlacement::OnPath | TriggerPlacement::OneHop => 2,
            TriggerPlacement::Far => 1 + self.far_hops,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.relations == 0 || self.instances == 0 || self.vocab_size == 0 || self.triggers_per_relation == 0 {
            return bad("relations, instances, vocab_size and triggers_per_relation must be positive".into());
        }
        if !(0.0..1.0).contains(&self.negative_fraction) {
            return bad(format!("negative_fraction {} outside [0, 1)", self.negative_fraction));
        }
        if self.min_len > self.max_len || self.min_distance > self.max_distance {
            return bad("min_len/min_distance exceed their maxima".into());
        }
        if self.placement == TriggerPlacement::Far && self.far_hops < 2 {
            return bad("far_hops must be at least 2".into());
        }
        if self.max_chain == 0 {
            return bad("max_chain must be positive".into());
        }
        // Worst case: two-token entities at the smallest feasible distance.
        let min_gap = self.min_distance.max(self.middle_need() + 1);
        let need = 4 + (min_gap - 1).max(self.structural_tokens()) + self.decoys;
        if self.min_len < need {
            return bad(format!(
                "min_len {} cannot fit entities at distance {} plus {} structural tokens and {} decoys (need {need})",
                self.min_len,
                self.min_distance,
                self.structural_tokens(),
                self.decoys
            ));
        }
        if self.max_distance < self.middle_need() + 1 {
            return bad(format!(
                "max_distance must be at least {} for this placement",
                self.middle_need() + 1
            ));
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.relations).map(|r| format!("rel{r}")).collect();
        if self.negative_fraction > 0.0 {
            out.push(NEGATIVE_LABEL.to_string());
        }
        out
    }
}

/// Trigger word `j` of relation `r`.
pub fn trigger_word(r: usize, j: usize) -> String {
    format!("trg{r}_{j}")
}

fn neutral_trigger(j: usize) -> String {
    format!("nil_{j}")
}

const POS_TAGS: [&str; 6] = ["NN", "JJ", "RB", "VB", "IN", "DT"];
const SUBJ_TYPES: [&str; 2] = ["PER", "ORG"];
const OBJ_TYPES: [&str; 3] = ["LOC", "ORG", "DATE"];
const VERBS: usize = 4;

/// Deterministic POS tag for a word, so tags carry no label information.
fn pos_of(word: &str) -> &'static str {
    let h = word.bytes().fold(7u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32));
    POS_TAGS[h as usize % POS_TAGS.len()]
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Free,
    Entity,
    Taken,
}

/// Generates `cfg.instances` instances; identical for identical seeds.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.instances)
        .map(|k| generate_one(cfg, k, &mut rng))
        .collect()
}

fn generate_one(cfg: &SyntheticConfig, k: usize, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let subj_len = rng.gen_range(1..=2);
    let obj_len = rng.gen_range(1..=2);
    let max_gap_fit = len - subj_len - obj_len + 1;
    let lo = cfg.min_distance.max(cfg.middle_need() + 1);
    let hi = cfg.max_distance.min(max_gap_fit);
    if lo > hi {
        return Err(Error::config(format!(
            "sentence of {len} tokens cannot hold entity distance {lo}"
        )));
    }
    let gap = rng.gen_range(lo..=hi);
    let span_block = subj_len + obj_len + gap - 1;
    let first = rng.gen_range(1..=len - span_block + 1);
    let subj_first = rng.gen_bool(0.5);
    let (a_len, b_len) = if subj_first { (subj_len, obj_len) } else { (obj_len, subj_len) };
    let a = Span::new(first, first + a_len - 1);
    let b_start = a.end + gap;
    let b = Span::new(b_start, b_start + b_len - 1);
    let (subj, obj) = if subj_first { (a, b) } else { (b, a) };

    let mut slots = vec![Slot::Free; len + 1];
    slots[0] = Slot::Taken;
    for i in subj.tokens().chain(obj.tokens()) {
        slots[i] = Slot::Entity;
    }
    let middle: Vec<usize> = (a.end + 1..b.start).collect();
    let take = |slots: &mut Vec<Slot>, pool: &[usize], rng: &mut ChaCha8Rng| -> Result<usize> {
        let free: Vec<usize> = pool.iter().copied().filter(|&i| slots[i] == Slot::Free).collect();
        let &p = free
            .choose(rng)
            .ok_or_else(|| Error::config("sentence too short for its structure"))?;
        slots[p] = Slot::Taken;
        Ok(p)
    };
    let everywhere: Vec<usize> = (1..=len).collect();

    let mut words = vec![String::new(); len + 1];
    let mut head = vec![usize::MAX; len + 1];
    let mut deprel = vec![String::new(); len + 1];

    // entity internals: first token of a two-token span is a compound of the last
    let subj_head = subj.end;
    let obj_head = obj.end;
    for s in [subj, obj] {
        for i in s.tokens() {
            words[i] = format!("ent{}", rng.gen_range(0..50));
            if i != s.end {
                head[i] = s.end;
                deprel[i] = "compound".into();
            }
        }
    }

    let verb = take(&mut slots, &middle, rng)?;
    words[verb] = format!("verb{}", rng.gen_range(0..VERBS));
    head[verb] = 0;
    deprel[verb] = "root".into();
    head[obj_head] = verb;
    deprel[obj_head] = "obj".into();

    let negative = cfg.negative_fraction > 0.0 && rng.gen_bool(cfg.negative_fraction);
    let relation = if negative { cfg.relations } else { rng.gen_range(0..cfg.relations) };
    let j = rng.gen_range(0..cfg.triggers_per_relation);
    let trigger_text = if negative { neutral_trigger(j) } else { trigger_word(relation, j) };

    // node distance from the entity path, for placing decoys
    let mut hops = vec![usize::MAX; len + 1];
    for i in subj.tokens().chain(obj.tokens()) {
        hops[i] = 0;
    }
    hops[verb] = 0;

    let trigger = match cfg.placement {
        TriggerPlacement::OnPath => {
            let t = take(&mut slots, &middle, rng)?;
            head[subj_head] = t;
            deprel[subj_head] = "nsubj".into();
            head[t] = verb;
            deprel[t] = "xcomp".into();
            hops[t] = 0;
            t
        }
        TriggerPlacement::OneHop => {
            head[subj_head] = verb;
            deprel[subj_head] = "nsubj".into();
            let t = take(&mut slots, &everywhere, rng)?;
            head[t] = verb;
            deprel[t] = "advmod".into();
            hops[t] = 1;
            t
        }
        TriggerPlacement::Far => {
            head[subj_head] = verb;
            deprel[subj_head] = "nsubj".into();
            let mut parent = verb;
            for h in 1..cfg.far_hops {
                let c = take(&mut slots, &everywhere, rng)?;
                words[c] = format!("w{}", rng.gen_range(0..cfg.vocab_size));
                head[c] = parent;
                deprel[c] = if h == 1 { "ccomp" } else { "dep" }.into();
                hops[c] = h;
                parent = c;
            }
            let t = take(&mut slots, &everywhere, rng)?;
            head[t] = parent;
            deprel[t] = "advmod".into();
            hops[t] = cfg.far_hops;
            t
        }
    };
    words[trigger] = trigger_text;
    for i in subj.tokens().chain(obj.tokens()) {
        hops[i] = 0;
    }

    // Distractor chains over the remaining positions, in linear order.
    let rest: Vec<usize> = (1..=len).filter(|&i| slots[i] == Slot::Free).collect();
    let anchors_base = vec![verb, subj_head, obj_head];
    let mut deep: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < rest.len() {
        let chain_len = rng.gen_range(1..=cfg.max_chain).min(rest.len() - i);
        let anchor = *anchors_base.choose(rng).expect("anchors");
        let mut parent = anchor;
        for &p in &rest[i..i + chain_len] {
            words[p] = format!("w{}", rng.gen_range(0..cfg.vocab_size));
            head[p] = parent;
            deprel[p] = "dep".into();
            hops[p] = hops[parent] + 1;
            if hops[p] >= 2 {
                deep.push(p);
            }
            parent = p;
        }
        i += chain_len;
    }

    // Decoys: other relations' triggers at ≥ 2 hops. When too few deep
    // filler tokens exist, the deepest available fillers are used.
    if cfg.decoys > 0 && cfg.relations > 1 {
        let mut candidates = deep.clone();
        if candidates.len() < cfg.decoys {
            let mut shallow: Vec<usize> = rest.iter().copied().filter(|p| !deep.contains(p)).collect();
            shallow.sort_by_key(|&p| std::cmp::Reverse(hops[p]));
            candidates.extend(shallow);
        }
        candidates.shuffle(rng);
        for &p in candidates.iter().take(cfg.decoys) {
            let mut r = rng.gen_range(0..cfg.relations - 1);
            if !negative && r >= relation {
                r += 1;
            }
            words[p] = trigger_word(r, rng.gen_range(0..cfg.triggers_per_relation));
        }
    }

    let subj_type = SUBJ_TYPES[rng.gen_range(0..SUBJ_TYPES.len())].to_string();
    let obj_type = OBJ_TYPES[rng.gen_range(0..OBJ_TYPES.len())].to_string();
    let mut ner = vec!["O".to_string(); len];
    let mut pos = Vec::with_capacity(len);
    for i in 1..=len {
        if subj.contains(i) {
            ner[i - 1] = subj_type.clone();
            pos.push("NNP".to_string());
        } else if obj.contains(i) {
            ner[i - 1] = obj_type.clone();
            pos.push("NNP".to_string());
        } else {
            pos.push(pos_of(&words[i]).to_string());
        }
    }
    let labels = cfg.label_names();
    let inst = Instance {
        id: format!("syn{k}"),
        tokens: words[1..].to_vec(),
        pos,
        ner,
        head: head[1..].to_vec(),
        deprel: deprel[1..].to_vec(),
        subj,
        obj,
        subj_type,
        obj_type,
        aux: None,
        relation: labels[relation].clone(),
        sentences: 1,
    };
    inst.validate()?;
    Ok(inst)
}

/// Count of instances per label, for reports.
pub fn label_histogram(instances: &[Instance]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for i in instances {
        *out.entry(i.relation.clone()).or_default() += 1;
    }
    out
}
