//! Pre-trained word vectors in whitespace-separated text format.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the uniform initialization for rows without a vector.
pub const MISSING_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub found: usize,
    pub total: usize,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.found as f64 / self.total as f64
        }
    }
}

/// Builds a `vocab.len() × dim` word table. Ordinary words found in the
/// file get their vector; every other row except padding is drawn from
/// U(−0.1, 0.1).
pub fn load_pretrained<R: Rng>(
    reader: impl BufRead,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<(Tensor, Coverage)> {
    let mut table = random_table(vocab, dim, rng);
    let mut seen = vec![false; vocab.len()];
    for (no, line) in reader.lines().enumerate() {
        let no = no + 1;
        let line = line.map_err(|e| Error::VectorFormat {
            line: no,
            message: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::VectorFormat {
                line: no,
                message: format!("bad number: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::VectorFormat {
                line: no,
                message: format!("vector has {} values, expected {dim}", values.len()),
            });
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.lookup(token);
        table.row_mut(id).copy_from_slice(&values);
        seen[id] = true;
    }
    let words = vocab.word_ids();
    let coverage = Coverage {
        found: words.clone().filter(|&i| seen[i]).count(),
        total: words.len(),
    };
    Ok((table, coverage))
}

/// Loads from a file; if the file is absent and `allow_random` is set, the
/// whole table is random and coverage is zero.
pub fn load_pretrained_file<R: Rng>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    allow_random: bool,
    rng: &mut R,
) -> Result<(Tensor, Coverage)> {
    match std::fs::File::open(path) {
        Ok(f) => load_pretrained(BufReader::new(f), vocab, dim, rng),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && allow_random => {
            log::warn!("{} not found; using random word vectors", path.display());
            let table = random_table(vocab, dim, rng);
            Ok((
                table,
                Coverage {
                    found: 0,
                    total: vocab.word_ids().len(),
                },
            ))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

fn random_table<R: Rng>(vocab: &Vocab, dim: usize, rng: &mut R) -> Tensor {
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    for r in 0..vocab.len() {
        if r == PAD {
            continue;
        }
        for v in table.row_mut(r) {
            *v = rng.gen_range(-MISSING_INIT..MISSING_INIT);
        }
    }
    table
}
