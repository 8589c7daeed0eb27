//! Precision/recall/F1 with negative-class exclusion, plus bucketed
//! breakdowns by sentence length and entity distance.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::Metric;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Prf {
    pub fn from_counts(correct: usize, guessed: usize, gold: usize) -> Self {
        let precision = ratio(correct, guessed);
        let recall = ratio(correct, gold);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// Pooled counts. `correct` counts right predictions of a positive gold
/// label, `guessed` positive predictions, `gold` positive gold labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub total: usize,
    pub exact: usize,
    pub correct: usize,
    pub guessed: usize,
    pub gold: usize,
}

impl Counts {
    pub fn add(&mut self, pred: usize, gold: usize, negative: Option<usize>) {
        let pos = |l: usize| Some(l) != negative;
        self.total += 1;
        self.exact += usize::from(pred == gold);
        self.guessed += usize::from(pos(pred));
        self.gold += usize::from(pos(gold));
        self.correct += usize::from(pred == gold && pos(gold));
    }

    pub fn merge(&mut self, o: &Counts) {
        self.total += o.total;
        self.exact += o.exact;
        self.correct += o.correct;
        self.guessed += o.guessed;
        self.gold += o.gold;
    }

    pub fn micro(&self) -> Prf {
        Prf::from_counts(self.correct, self.guessed, self.gold)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.exact, self.total)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Scores {
    pub counts: Counts,
    pub micro: Prf,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl Scores {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::MicroF1 => self.micro.f1,
            Metric::MacroF1 => self.macro_f1,
            Metric::Accuracy => self.accuracy,
        }
    }
}

fn check_lengths(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Micro P/R/F1 where the negative label never counts as a hit.
pub fn micro_prf(pred: &[usize], gold: &[usize], negative: Option<usize>) -> Result<Prf> {
    check_lengths(pred, gold)?;
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gold) {
        c.add(p, g, negative);
    }
    Ok(c.micro())
}

/// Mean per-class F1 over the positive labels occurring in gold or
/// predictions.
pub fn macro_f1(pred: &[usize], gold: &[usize], negative: Option<usize>) -> Result<f64> {
    check_lengths(pred, gold)?;
    let classes: BTreeSet<usize> = pred
        .iter()
        .chain(gold)
        .copied()
        .filter(|&l| Some(l) != negative)
        .collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in &classes {
        let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count();
        let guessed = pred.iter().filter(|&&p| p == c).count();
        let actual = gold.iter().filter(|&&g| g == c).count();
        total += Prf::from_counts(tp, guessed, actual).f1;
    }
    Ok(total / classes.len() as f64)
}

pub fn score(pred: &[usize], gold: &[usize], negative: Option<usize>) -> Result<Scores> {
    check_lengths(pred, gold)?;
    let mut counts = Counts::default();
    for (&p, &g) in pred.iter().zip(gold) {
        counts.add(p, g, negative);
    }
    Ok(Scores {
        counts,
        micro: counts.micro(),
        macro_f1: macro_f1(pred, gold, negative)?,
        accuracy: counts.accuracy(),
    })
}

/// Half-open-left interval `(lo, hi]`; `hi = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, x: usize) -> bool {
        x > self.lo && self.hi.map_or(true, |h| x <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("({},{}]", self.lo, h),
            None => format!("({},inf)", self.lo),
        }
    }
}

fn buckets(edges: &[usize]) -> Vec<Bucket> {
    let mut out: Vec<Bucket> = edges
        .windows(2)
        .map(|w| Bucket {
            lo: w[0],
            hi: Some(w[1]),
        })
        .collect();
    out.push(Bucket {
        lo: *edges.last().expect("edges"),
        hi: None,
    });
    out
}

pub fn length_buckets() -> Vec<Bucket> {
    buckets(&[0, 25, 50])
}

pub fn distance_buckets() -> Vec<Bucket> {
    buckets(&[0, 10, 15, 20, 25, 30, 35])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketRow {
    pub breakdown: &'static str,
    pub bucket: String,
    pub scores: Option<Scores>,
}

/// Scores for one evaluation run with its breakdowns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub overall: Scores,
    pub rows: Vec<BucketRow>,
}

/// One scored item: predicted and gold label, sentence length and entity
/// distance.
#[derive(Clone, Copy, Debug)]
pub struct Item {
    pub pred: usize,
    pub gold: usize,
    pub len: usize,
    pub distance: usize,
}

pub fn report(items: &[Item], negative: Option<usize>) -> Result<Report> {
    let pred: Vec<usize> = items.iter().map(|i| i.pred).collect();
    let gold: Vec<usize> = items.iter().map(|i| i.gold).collect();
    let overall = score(&pred, &gold, negative)?;
    let mut rows = Vec::new();
    let breakdowns: [(&'static str, Vec<Bucket>, fn(&Item) -> usize); 2] = [
        ("length", length_buckets(), |i| i.len),
        ("distance", distance_buckets(), |i| i.distance),
    ];
    for (name, bs, key) in breakdowns {
        for b in bs {
            let sel: Vec<&Item> = items.iter().filter(|i| b.contains(key(i))).collect();
            let scores = if sel.is_empty() {
                None
            } else {
                let p: Vec<usize> = sel.iter().map(|i| i.pred).collect();
                let g: Vec<usize> = sel.iter().map(|i| i.gold).collect();
                Some(score(&p, &g, negative)?)
            };
            rows.push(BucketRow {
                breakdown: name,
                bucket: b.label(),
                scores,
            });
        }
    }
    Ok(Report { overall, rows })
}

impl Report {
    /// Aligned table for people.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:<10} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}", "breakdown", "bucket", "n", "P", "R", "F1", "macroF1", "acc").unwrap();
        let mut line = |b: &str, k: &str, sc: Option<&Scores>| match sc {
            Some(sc) => writeln!(
                s,
                "{:<10} {:<10} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                b, k, sc.counts.total, sc.micro.precision, sc.micro.recall, sc.micro.f1, sc.macro_f1, sc.accuracy
            )
            .unwrap(),
            None => writeln!(s, "{:<10} {:<10} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}", b, k, 0, "-", "-", "-", "-", "-").unwrap(),
        };
        line("overall", "all", Some(&self.overall));
        for r in &self.rows {
            line(r.breakdown, &r.bucket, r.scores.as_ref());
        }
        s
    }

    /// Tab-separated rows: breakdown, bucket, n, correct, guessed, gold,
    /// precision, recall, f1, macro_f1, accuracy.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("breakdown\tbucket\tn\tcorrect\tguessed\tgold\tprecision\trecall\tf1\tmacro_f1\taccuracy\n");
        let mut line = |b: &str, k: &str, sc: &Scores| {
            let c = sc.counts;
            writeln!(
                s,
                "{b}\t{k}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.total, c.correct, c.guessed, c.gold, sc.micro.precision, sc.micro.recall, sc.micro.f1, sc.macro_f1, sc.accuracy
            )
            .unwrap()
        };
        line("overall", "all", &self.overall);
        for r in &self.rows {
            match &r.scores {
                Some(sc) => line(r.breakdown, &r.bucket, sc),
                None => line(r.breakdown, &r.bucket, &Scores::default()),
            }
        }
        s
    }
}
