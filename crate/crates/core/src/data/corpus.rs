//! Tab-separated corpus blocks.
//!
//! Each instance is a header line followed by one line per token and a
//! blank separator line:
//!
//! ```text
//! # id=s1 subj=1-1 obj=3-3 relation=per:city subj_type=PER obj_type=LOC
//! 1	John	NNP	PER	2	nsubj
//! 2	visited	VBD	O	0	root
//! 3	Paris	NNP	LOC	2	obj
//! ```
//!
//! Token columns are index, form, POS, NER, head (0 = root) and dependency
//! label. Header keys: `id`, `subj`, `obj`, `relation` (required);
//! `subj_type`, `obj_type` (default: NER tag of the span's first token);
//! `ent3`, `ent3_type` (ternary instances); `sentences` (number of
//! sentence roots to join under a document root).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::instance::{AuxEntity, Instance, Span};

const COLUMNS: usize = 6;

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn write_corpus(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_corpus(instances)).map_err(|e| Error::io(path, e))
}

struct Block<'a> {
    header: (usize, &'a str),
    rows: Vec<(usize, &'a str)>,
}

pub fn parse_corpus(text: &str, source: &str) -> Result<Vec<Instance>> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut blocks: Vec<Block> = Vec::new();
    let mut current: Option<Block> = None;
    for (no, raw) in text.lines().enumerate() {
        let no = no + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            current = Some(Block {
                header: (no, rest),
                rows: Vec::new(),
            });
        } else {
            match current.as_mut() {
                Some(b) => b.rows.push((no, line)),
                None => return Err(err(no, "token line before any '#' header".into())),
            }
        }
    }
    if let Some(b) = current.take() {
        blocks.push(b);
    }

    let mut out = Vec::with_capacity(blocks.len());
    for (k, block) in blocks.into_iter().enumerate() {
        out.push(parse_block(block, k, &err)?);
    }
    Ok(out)
}

fn parse_span(v: &str) -> Option<Span> {
    let (a, b) = v.split_once('-').unwrap_or((v, v));
    Some(Span::new(a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_block(block: Block, ordinal: usize, err: &impl Fn(usize, String) -> Error) -> Result<Instance> {
    let (hline, header) = block.header;
    let mut id = None;
    let mut subj = None;
    let mut obj = None;
    let mut relation = None;
    let mut subj_type = None;
    let mut obj_type = None;
    let mut ent3 = None;
    let mut ent3_type = None;
    let mut sentences = 1usize;
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(hline, format!("header field {field:?} is not key=value")))?;
        let bad_span = || err(hline, format!("bad span {value:?} for {key}"));
        match key {
            "id" => id = Some(value.to_string()),
            "subj" => subj = Some(parse_span(value).ok_or_else(bad_span)?),
            "obj" => obj = Some(parse_span(value).ok_or_else(bad_span)?),
            "ent3" => ent3 = Some(parse_span(value).ok_or_else(bad_span)?),
            "relation" => relation = Some(value.to_string()),
            "subj_type" => subj_type = Some(value.to_string()),
            "obj_type" => obj_type = Some(value.to_string()),
            "ent3_type" => ent3_type = Some(value.to_string()),
            "sentences" => {
                sentences = value
                    .parse()
                    .ok()
                    .filter(|&s| s >= 1)
                    .ok_or_else(|| err(hline, format!("bad sentence count {value:?}")))?
            }
            other => return Err(err(hline, format!("unknown header key {other:?}"))),
        }
    }
    let missing = |k: &str| err(hline, format!("header lacks {k}="));
    let subj = subj.ok_or_else(|| missing("subj"))?;
    let obj = obj.ok_or_else(|| missing("obj"))?;
    let relation = relation.ok_or_else(|| missing("relation"))?;
    let id = id.unwrap_or_else(|| format!("#{}", ordinal + 1));

    if block.rows.is_empty() {
        return Err(err(hline, "instance has no tokens".into()));
    }
    let n = block.rows.len();
    let mut inst = Instance {
        id,
        tokens: Vec::with_capacity(n),
        pos: Vec::with_capacity(n),
        ner: Vec::with_capacity(n),
        head: Vec::with_capacity(n),
        deprel: Vec::with_capacity(n),
        subj,
        obj,
        subj_type: String::new(),
        obj_type: String::new(),
        aux: None,
        relation,
        sentences,
    };
    for (k, &(no, line)) in block.rows.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != COLUMNS {
            return Err(err(
                no,
                format!("expected {COLUMNS} tab-separated columns, found {}", cols.len()),
            ));
        }
        let index: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| err(no, format!("bad token index {:?}", cols[0])))?;
        if index != k + 1 {
            return Err(err(no, format!("token index {index}, expected {}", k + 1)));
        }
        let head: usize = cols[4]
            .trim()
            .parse()
            .map_err(|_| err(no, format!("bad head {:?}", cols[4])))?;
        if head > n {
            return Err(err(no, format!("head {head} outside 0..={n}")));
        }
        inst.tokens.push(cols[1].to_string());
        inst.pos.push(cols[2].to_string());
        inst.ner.push(cols[3].to_string());
        inst.head.push(head);
        inst.deprel.push(cols[5].to_string());
    }
    for (name, s) in [("subj", subj), ("obj", obj)]
        .into_iter()
        .chain(ent3.map(|s| ("ent3", s)))
    {
        if s.start < 1 || s.start > s.end || s.end > n {
            return Err(err(
                hline,
                format!("{name} span {}-{} out of range 1..={n}", s.start, s.end),
            ));
        }
    }
    inst.subj_type = subj_type.unwrap_or_else(|| inst.ner[subj.start - 1].clone());
    inst.obj_type = obj_type.unwrap_or_else(|| inst.ner[obj.start - 1].clone());
    inst.aux = ent3.map(|span| AuxEntity {
        kind: ent3_type.unwrap_or_else(|| inst.ner[span.start - 1].clone()),
        span,
    });

    let roots = inst.head.iter().filter(|&&h| h == 0).count();
    if roots > 1 {
        if roots != sentences {
            return Err(err(
                hline,
                format!("{roots} root tokens but sentences={sentences}"),
            ));
        }
        inst.join_sentences();
    }
    inst.validate().map_err(|e| {
        let msg = match e {
            Error::Instance(m) => m,
            other => other.to_string(),
        };
        err(hline, msg)
    })?;
    Ok(inst)
}

fn span_str(s: Span) -> String {
    format!("{}-{}", s.start, s.end)
}

/// Writes instances in the block format read by [`parse_corpus`].
pub fn serialize_corpus(instances: &[Instance]) -> String {
    let mut out = String::new();
    for inst in instances {
        write!(
            out,
            "# id={} subj={} obj={} relation={} subj_type={} obj_type={}",
            inst.id,
            span_str(inst.subj),
            span_str(inst.obj),
            inst.relation,
            inst.subj_type,
            inst.obj_type
        )
        .unwrap();
        if let Some(aux) = &inst.aux {
            write!(out, " ent3={} ent3_type={}", span_str(aux.span), aux.kind).unwrap();
        }
        if inst.sentences > 1 {
            write!(out, " sentences={}", inst.sentences).unwrap();
        }
        out.push('\n');
        for i in 0..inst.len() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                i + 1,
                inst.tokens[i],
                inst.pos[i],
                inst.ner[i],
                inst.head[i],
                inst.deprel[i]
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}
