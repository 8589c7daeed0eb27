//! Minibatch SGD with learning-rate decay, gradient clipping, per-epoch
//! dev evaluation and best-model retention; evaluation and the data-size
//! study built on top.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Schedule};
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::metrics::{self, Item, Report, Scores};
use crate::model::{Example, Featurizer, Model, Prediction};
use crate::nn::Mode;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{NormStats, Tape, Tensor};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch objective (cross-entropy plus weight penalty).
    pub loss: f64,
    pub dev_metric: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} dev_f1={:.6} lr={:.6}",
            self.epoch, self.loss, self.dev_metric, self.lr
        )
    }
}

/// Snapshot of the best parameters seen so far.
#[derive(Clone, Debug)]
pub struct Best {
    pub epoch: usize,
    pub metric: f64,
    pub store: ParamStore,
    pub norm_stats: BTreeMap<String, NormStats>,
}

/// All mutable training state: parameters, running statistics, the
/// session RNG, schedule position and the best snapshot.
#[derive(Clone, Debug)]
pub struct Session {
    pub model: Model,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub best: Option<Best>,
    pub history: Vec<EpochLog>,
}

/// Clips `grads` to global norm `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `θ ← θ − lr·g` for every parameter with a gradient.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (id, g) in grads.iter() {
        store.value_mut(id).axpy(-lr, g);
    }
}

impl Session {
    /// Initializes a model from the config seed; the same RNG then drives
    /// shuffling and dropout.
    pub fn new(config: &ModelConfig, features: Featurizer, word_table: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config, features, word_table, &mut rng)?;
        Ok(Session {
            model,
            rng,
            epoch: 0,
            lr: config.lr,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// One pass over `train` followed by dev evaluation.
    pub fn run_epoch(&mut self, train: &[Example], dev: &[Example]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Usage("empty training corpus".into()));
        }
        let cfg = self.config().clone();
        let lr = match cfg.schedule {
            Schedule::Epoch => cfg.epoch_lr(self.epoch),
            Schedule::Plateau => self.lr,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut last_max_grad = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let out = self.model.net.forward(
                &mut tape,
                &self.model.store,
                &batch,
                Mode::Train,
                &self.model.norm_stats,
                &mut self.rng,
            )?;
            let loss = out.loss.ok_or_else(|| Error::Usage("training example without a label".into()))?;
            let value = tape.value(loss).data()[0];
            let diag = |what: &str, g: f64| {
                Error::Numerical(format!(
                    "{what} at epoch {} batch {} (max |grad| {g:e})",
                    self.epoch + 1,
                    b + 1
                ))
            };
            if !value.is_finite() {
                return Err(diag("non-finite loss", last_max_grad));
            }
            tape.backward(loss)?;
            let mut grads = Gradients::new(&self.model.store);
            tape.export_param_grads(&self.model.store, &mut grads);
            let max_grad = grads.max_abs();
            if !max_grad.is_finite() {
                return Err(diag("non-finite gradient", max_grad));
            }
            last_max_grad = max_grad;
            clip_global_norm(&mut grads, cfg.clip_norm);
            sgd_step(&mut self.model.store, &grads, lr);
            if let Some((_, p)) = self.model.store.iter().find(|(_, p)| !p.value.all_finite()) {
                return Err(diag(&format!("non-finite parameter {}", p.name), max_grad));
            }
            self.model.update_norm_stats(&out.observed);
            loss_sum += value;
            batches += 1;
        }
        let dev_metric = if dev.is_empty() {
            0.0
        } else {
            evaluate_examples(&self.model, dev)?.metric(cfg.metric)
        };
        self.epoch += 1;
        let improved = self.best.as_ref().map_or(true, |b| dev_metric > b.metric);
        if improved {
            self.best = Some(Best {
                epoch: self.epoch,
                metric: dev_metric,
                store: self.model.store.clone(),
                norm_stats: self.model.norm_stats.clone(),
            });
        }
        if cfg.schedule == Schedule::Plateau && !improved {
            self.lr *= cfg.decay;
        }
        let log = EpochLog {
            epoch: self.epoch,
            loss: loss_sum / batches as f64,
            dev_metric,
            lr,
        };
        log::info!("{log}");
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains until `config.epochs` epochs are complete or `on_epoch`
    /// returns `true`.
    pub fn train(
        &mut self,
        train: &[Example],
        dev: &[Example],
        on_epoch: &mut dyn FnMut(&Session, &EpochLog) -> bool,
    ) -> Result<()> {
        while self.epoch < self.config().epochs {
            let log = self.run_epoch(train, dev)?;
            if on_epoch(self, &log) {
                break;
            }
        }
        Ok(())
    }

    /// The model with the best dev parameters (the current ones if no
    /// epoch has finished).
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.store = b.store.clone();
            m.norm_stats = b.norm_stats.clone();
        }
        m
    }

    /// The training log as text, one line per epoch.
    pub fn log_text(&self) -> String {
        self.history.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Builds vocabularies from `train` and featurizes both corpora.
pub fn prepare(config: &ModelConfig, train: &[Instance], dev: &[Instance]) -> Result<(Featurizer, Vec<Example>, Vec<Example>)> {
    let features = Featurizer::build(train, config);
    features.labels.check_covers(dev)?;
    let tr = features.featurize_all(train, config.pruning, true)?;
    let dv = features.featurize_all(dev, config.pruning, true)?;
    Ok((features, tr, dv))
}

/// Trains from scratch for `config.epochs` epochs and returns the session.
pub fn train(config: &ModelConfig, train: &[Instance], dev: &[Instance], word_table: Option<Tensor>) -> Result<Session> {
    let (features, tr, dv) = prepare(config, train, dev)?;
    let mut session = Session::new(config, features, word_table)?;
    session.train(&tr, &dv, &mut |_, _| false)?;
    Ok(session)
}

fn items(preds: &[Prediction], examples: &[Example]) -> Result<Vec<Item>> {
    preds
        .iter()
        .zip(examples)
        .map(|(p, e)| {
            let gold = e
                .label
                .ok_or_else(|| Error::Usage(format!("instance {} has no known gold label", e.id)))?;
            Ok(Item {
                pred: p.label,
                gold,
                len: e.len(),
                distance: e.entity_distance,
            })
        })
        .collect()
}

/// Overall scores of `model` on labelled examples.
pub fn evaluate_examples(model: &Model, examples: &[Example]) -> Result<Scores> {
    let preds = model.predict(examples, false)?;
    let pred: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let gold: Vec<usize> = items(&preds, examples)?.iter().map(|i| i.gold).collect();
    metrics::score(&pred, &gold, model.features.labels.negative())
}

/// Scores with length and distance breakdowns. Unknown gold labels are a
/// usage error listing them.
pub fn evaluate(model: &Model, corpus: &[Instance]) -> Result<Report> {
    model.features.labels.check_covers(corpus)?;
    let examples = model.featurize(corpus, true)?;
    let preds = model.predict(&examples, false)?;
    metrics::report(&items(&preds, &examples)?, model.features.labels.negative())
}

/// Nested subsamples: one seeded shuffle, then the first `⌈f·n⌉` indices
/// for each fraction, returned in corpus order.
pub fn nested_subsamples(n: usize, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    fractions
        .iter()
        .map(|&f| {
            let k = ((f * n as f64).ceil() as usize).min(n);
            let mut idx = perm[..k].to_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizePoint {
    pub fraction: f64,
    pub train_size: usize,
    pub best_epoch: usize,
    pub dev_metric: f64,
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Trains once per fraction of `train` and reports the best dev metric of
/// each run. Fractions missing a label of the full corpus are skipped with
/// a warning.
pub fn data_size_study(
    config: &ModelConfig,
    train: &[Instance],
    dev: &[Instance],
    fractions: &[f64],
    sample_seed: u64,
) -> Result<Vec<SizePoint>> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Usage(format!("fraction {f} outside (0, 1]")));
        }
    }
    let all_labels: std::collections::BTreeSet<&str> = train.iter().map(|i| i.relation.as_str()).collect();
    let mut out = Vec::new();
    for (f, idx) in fractions.iter().zip(nested_subsamples(train.len(), fractions, sample_seed)) {
        let subset: Vec<Instance> = idx.iter().map(|&i| train[i].clone()).collect();
        let labels: std::collections::BTreeSet<&str> = subset.iter().map(|i| i.relation.as_str()).collect();
        if labels != all_labels {
            let missing: Vec<&str> = all_labels.difference(&labels).copied().collect();
            log::warn!("fraction {f}: subsample lacks labels {missing:?}; skipped");
            continue;
        }
        let session = self::train(config, &subset, dev, None)?;
        let best = session.best.as_ref().expect("at least one epoch");
        out.push(SizePoint {
            fraction: *f,
            train_size: subset.len(),
            best_epoch: best.epoch,
            dev_metric: best.metric,
        });
    }
    Ok(out)
}

pub fn format_size_curve(points: &[SizePoint]) -> String {
    let mut s = String::from("fraction\ttrain_size\tbest_epoch\tdev_metric\n");
    for p in points {
        s.push_str(&format!("{}\t{}\t{}\t{:.6}\n", p.fraction, p.train_size, p.best_epoch, p.dev_metric));
    }
    s
}
