//! The full relation classifier: embeddings, BiLSTM + GCN encoder,
//! relative-position self-attention, entity-aware attention and softmax.

pub mod attention;
pub mod encoder;
pub mod head;

pub use attention::{format_matrix, parse_matrix};
pub(crate) mod registry;

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::config::{AttentionInput, ModelConfig};
use crate::data::{position_rows, Instance, LabelSet, Span, TagVocab, Vocab, POSITION_ROWS};
use crate::error::{Error, Result};
use crate::graph::{DepTree, Pruning};
use crate::nn::{dropout, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{NormStats, Tape, Tensor, Var};

use attention::{initial_stats, AttentionParams};
use encoder::{bilstm, gcn_layer, set_forget_bias, GcnLayer, LstmParams};
use head::{attend, entity_attention, pool_entity, pool_sentence, ClassifierParams, EntityAttentionParams};
use registry::{Creator, Init, Registry, Resolver};

/// An instance turned into the integer features and graph the network reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub words: Vec<usize>,
    pub ner: Vec<usize>,
    pub pos: Vec<usize>,
    pub subj_pos: Vec<usize>,
    pub obj_pos: Vec<usize>,
    pub subj: Span,
    pub obj: Span,
    /// Row-normalized `Ã` of the pruned tree.
    pub adj: Tensor,
    /// Tokens kept by pruning.
    pub keep: Vec<bool>,
    pub label: Option<usize>,
    pub entity_distance: usize,
}

impl Example {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Vocabularies and the label set, fixed at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub vocab: Vocab,
    pub ner: TagVocab,
    pub pos: TagVocab,
    pub labels: LabelSet,
}

impl Featurizer {
    pub fn build(train: &[Instance], config: &ModelConfig) -> Self {
        Featurizer {
            vocab: Vocab::build(train, config.min_count),
            ner: TagVocab::build(train.iter().flat_map(|i| i.ner.iter().map(String::as_str))),
            pos: TagVocab::build(train.iter().flat_map(|i| i.pos.iter().map(String::as_str))),
            labels: LabelSet::build(train, &config.negative_label),
        }
    }

    /// Masks entities, looks up tags and prunes the tree. Instances whose
    /// relation is not in the label set get `label = None` when
    /// `require_label` is false and are an error otherwise.
    pub fn featurize(&self, inst: &Instance, pruning: Pruning, require_label: bool) -> Result<Example> {
        inst.validate()?;
        let tree = DepTree::from_instance(inst)?;
        let mut spans = vec![inst.subj, inst.obj];
        if let Some(aux) = &inst.aux {
            spans.push(aux.span);
        }
        let pg = tree.prune(&spans, pruning);
        let label = match self.labels.id(&inst.relation) {
            Some(l) => Some(l),
            None if require_label => {
                return Err(Error::Usage(format!(
                    "instance {} has unknown label {:?}",
                    inst.id, inst.relation
                )))
            }
            None => None,
        };
        let n = inst.len();
        Ok(Example {
            id: inst.id.clone(),
            words: self.vocab.mask_entities(inst),
            ner: inst.ner.iter().map(|t| self.ner.lookup(t)).collect(),
            pos: inst.pos.iter().map(|t| self.pos.lookup(t)).collect(),
            subj_pos: position_rows(n, inst.subj),
            obj_pos: position_rows(n, inst.obj),
            subj: inst.subj,
            obj: inst.obj,
            adj: pg.adjacency().normalized(),
            keep: pg.keep_mask(),
            label,
            entity_distance: inst.entity_distance(),
        })
    }

    pub fn featurize_all(&self, insts: &[Instance], pruning: Pruning, require_label: bool) -> Result<Vec<Example>> {
        insts.iter().map(|i| self.featurize(i, pruning, require_label)).collect()
    }
}

/// Table sizes the parameter layout depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sizes {
    pub words: usize,
    pub ner: usize,
    pub pos: usize,
    pub labels: usize,
}

impl Sizes {
    pub fn of(f: &Featurizer) -> Self {
        Sizes {
            words: f.vocab.len(),
            ner: f.ner.len(),
            pos: f.pos.len(),
            labels: f.labels.len(),
        }
    }
}

/// Parameter handles plus the configuration that wires them together.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub word: ParamId,
    pub ner: ParamId,
    pub pos: ParamId,
    pub position: ParamId,
    pub lstm: Option<(LstmParams, LstmParams)>,
    pub proj: Option<ParamId>,
    pub gcn: Vec<GcnLayer>,
    pub attention: Option<AttentionParams>,
    pub entity: Option<EntityAttentionParams>,
    pub classifier: ClassifierParams,
}

/// Per-sentence results of a forward pass.
pub struct SentenceOutput {
    /// `1 × |labels|` class distribution.
    pub probs: Var,
    /// Per-head `n × n` self-attention matrices (empty when the branch is
    /// ablated).
    pub attention: Vec<Var>,
    /// `1 × n` entity-aware weights.
    pub alpha: Option<Var>,
}

pub struct BatchOutput {
    /// Mean cross-entropy plus the weight penalty; present when every
    /// example is labelled.
    pub loss: Option<Var>,
    /// Mean cross-entropy alone.
    pub data_loss: Option<f64>,
    pub sentences: Vec<SentenceOutput>,
    pub observed: Vec<(String, NormStats)>,
}

impl Network {
    fn declare(reg: &mut dyn Registry, cfg: &ModelConfig, sizes: Sizes) -> Result<Self> {
        cfg.validate()?;
        let e = Init::Uniform(cfg.embed_init);
        let word = reg.embedding("emb.word", sizes.words, cfg.d_word, e)?;
        let ner = reg.embedding("emb.ner", sizes.ner, cfg.d_ner, e)?;
        let pos = reg.embedding("emb.pos", sizes.pos, cfg.d_pos, e)?;
        let position = reg.embedding("emb.position", POSITION_ROWS, cfg.d_p, e)?;
        let d_in = cfg.d_in();
        let d_g0 = 2 * cfg.d_h;
        let (lstm, proj) = if cfg.ablations.no_bilstm {
            (None, Some(reg.weight("proj.w", d_in, d_g0)?))
        } else {
            (
                Some((
                    LstmParams::declare(reg, "lstm.fwd", d_in, cfg.d_h)?,
                    LstmParams::declare(reg, "lstm.bwd", d_in, cfg.d_h)?,
                )),
                None,
            )
        };
        let mut gcn = Vec::with_capacity(cfg.gcn_layers);
        let mut width = d_g0;
        for l in 0..cfg.gcn_layers {
            gcn.push(GcnLayer {
                w: reg.weight(&format!("gcn.{l}.w"), width, cfg.d_gcn)?,
                b: reg.bias(&format!("gcn.{l}.b"), cfg.d_gcn, 0.0)?,
            });
            width = cfg.d_gcn;
        }
        let d_g = width;
        let ab = cfg.ablations;
        let use_attention = !ab.no_entity_aware && !ab.no_self_attention;
        let attention = if use_attention {
            let d_model = match cfg.attention_input {
                AttentionInput::Embeddings => d_in,
                AttentionInput::Bilstm => d_g0,
            };
            Some(AttentionParams::declare(reg, cfg, d_model)?)
        } else {
            None
        };
        let d_u = cfg.d_gcn;
        let entity = if ab.no_entity_aware {
            None
        } else {
            Some(EntityAttentionParams {
                ws: if use_attention {
                    Some(reg.weight("head.ws", cfg.d_attn, d_u)?)
                } else {
                    None
                },
                wg: reg.weight("head.wg", d_g, d_u)?,
                wp: reg.weight("head.wp", 2 * cfg.d_p, d_u)?,
                v: reg.weight("head.v", d_u, 1)?,
            })
        };
        let (ffn, d_c) = if ab.no_entity_pools_ffnn {
            (None, d_g)
        } else {
            (
                Some((
                    reg.weight("head.ffn.w", 3 * d_g, cfg.d_ffn)?,
                    reg.bias("head.ffn.b", cfg.d_ffn, 0.0)?,
                )),
                cfg.d_ffn,
            )
        };
        let classifier = ClassifierParams {
            ffn,
            w: reg.weight("head.out.w", d_c, sizes.labels)?,
            b: reg.bias("head.out.b", sizes.labels, 0.0)?,
        };
        Ok(Network {
            config: cfg.clone(),
            word,
            ner,
            pos,
            position,
            lstm,
            proj,
            gcn,
            attention,
            entity,
            classifier,
        })
    }

    /// Registers freshly initialized parameters in `store`.
    pub fn init<R: Rng>(cfg: &ModelConfig, sizes: Sizes, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let net = Self::declare(&mut Creator { store, rng }, cfg, sizes)?;
        if let Some((f, b)) = &net.lstm {
            set_forget_bias(store, f, 1.0);
            set_forget_bias(store, b, 1.0);
        }
        Ok(net)
    }

    /// Finds the parameters of `cfg`'s layout in an existing store.
    pub fn resolve(cfg: &ModelConfig, sizes: Sizes, store: &ParamStore) -> Result<Self> {
        Self::declare(&mut Resolver { store }, cfg, sizes)
    }

    /// Names of the normalization layers with running statistics.
    pub fn norm_layers(&self) -> Vec<(String, usize)> {
        match &self.attention {
            Some(a) => a.norm_names().into_iter().map(|n| (n, self.config.d_attn)).collect(),
            None => Vec::new(),
        }
    }

    pub fn initial_norm_stats(&self) -> BTreeMap<String, NormStats> {
        self.norm_layers()
            .into_iter()
            .map(|(n, w)| (n, initial_stats(w)))
            .collect()
    }

    /// Runs a batch. In training mode dropout draws from `rng` and
    /// normalization uses batch statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&Example],
        mode: Mode,
        running: &BTreeMap<String, NormStats>,
        rng: &mut dyn RngCore,
    ) -> Result<BatchOutput> {
        let cfg = &self.config;
        let d_attn = cfg.d_attn;
        let mut xs = Vec::with_capacity(batch.len());
        let mut poss = Vec::with_capacity(batch.len());
        let mut gs = Vec::with_capacity(batch.len());
        let mut attn_in = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.is_empty() {
                return Err(Error::Instance(format!("instance {} has no tokens", ex.id)));
            }
            let w = tape.gather_param(store, self.word, &ex.words)?;
            let nr = tape.gather_param(store, self.ner, &ex.ner)?;
            let ps = tape.gather_param(store, self.pos, &ex.pos)?;
            let p_s = tape.gather_param(store, self.position, &ex.subj_pos)?;
            let p_o = tape.gather_param(store, self.position, &ex.obj_pos)?;
            let p = tape.concat_cols(&[p_s, p_o])?;
            let x = if cfg.position_in_input {
                tape.concat_cols(&[w, nr, ps, p])?
            } else {
                tape.concat_cols(&[w, nr, ps])?
            };
            let x = dropout(tape, x, cfg.dropout, mode, rng)?;
            let g0 = match (&self.lstm, self.proj) {
                (Some((f, b)), _) => bilstm(tape, store, x, f, b)?,
                (None, Some(w)) => {
                    let w = tape.param(store, w);
                    tape.matmul(x, w)?
                }
                (None, None) => unreachable!("encoder has neither BiLSTM nor projection"),
            };
            let adj = tape.constant(ex.adj.clone());
            let mut g = g0;
            for layer in &self.gcn {
                g = gcn_layer(tape, store, g, adj, layer)?;
            }
            xs.push(x);
            poss.push(p);
            gs.push(g);
            attn_in.push(match cfg.attention_input {
                AttentionInput::Embeddings => x,
                AttentionInput::Bilstm => g0,
            });
        }

        let lookup = |name: &str| running.get(name).cloned().unwrap_or_else(|| initial_stats(d_attn));
        let attn = match &self.attention {
            Some(p) => Some(attention::self_attention_layer(tape, store, &attn_in, p, mode, &lookup)?),
            None => None,
        };

        let mut sentences = Vec::with_capacity(batch.len());
        let mut all_probs = Vec::with_capacity(batch.len());
        for (k, ex) in batch.iter().enumerate() {
            let g = gs[k];
            let g_sent = pool_sentence(tape, g, &ex.keep)?;
            let (g_hat, alpha) = match &self.entity {
                Some(ep) => {
                    let s = attn.as_ref().map(|a| a.states[k]);
                    let mask = if cfg.mask_pruned_attention { Some(ex.keep.as_slice()) } else { None };
                    let alpha = entity_attention(tape, store, s, g_sent, poss[k], ep, mask)?;
                    (attend(tape, alpha, g)?, Some(alpha))
                }
                None => (g_sent, None),
            };
            let feat = match self.classifier.ffn {
                Some((w, b)) => {
                    let g_s = pool_entity(tape, g, ex.subj)?;
                    let g_o = pool_entity(tape, g, ex.obj)?;
                    let cat = tape.concat_cols(&[g_hat, g_s, g_o])?;
                    let w = tape.param(store, w);
                    let b = tape.param(store, b);
                    let h = tape.matmul(cat, w)?;
                    let h = tape.add(h, b)?;
                    tape.relu(h)?
                }
                None => g_hat,
            };
            let feat = dropout(tape, feat, cfg.dropout, mode, rng)?;
            let w = tape.param(store, self.classifier.w);
            let b = tape.param(store, self.classifier.b);
            let logits = tape.matmul(feat, w)?;
            let logits = tape.add(logits, b)?;
            let probs = tape.softmax_rows(logits)?;
            all_probs.push(probs);
            sentences.push(SentenceOutput {
                probs,
                attention: attn.as_ref().map(|a| a.probs[k].clone()).unwrap_or_default(),
                alpha,
            });
        }

        let gold: Option<Vec<usize>> = batch.iter().map(|e| e.label).collect();
        let (loss, data_loss) = match gold {
            Some(gold) if !batch.is_empty() => {
                let stacked = if all_probs.len() == 1 { all_probs[0] } else { tape.concat_rows(&all_probs)? };
                let nll = tape.neg_log_pick(stacked, &gold)?;
                let mean = tape.scale(nll, 1.0 / batch.len() as f64)?;
                let data_loss = tape.value(mean).data()[0];
                let mut loss = mean;
                if cfg.beta > 0.0 {
                    let mut penalty: Option<Var> = None;
                    for (id, p) in store.iter() {
                        if p.kind != ParamKind::Weight {
                            continue;
                        }
                        let v = tape.param(store, id);
                        let sq = tape.sum_squares(v)?;
                        penalty = Some(match penalty {
                            Some(acc) => tape.add(acc, sq)?,
                            None => sq,
                        });
                    }
                    if let Some(pen) = penalty {
                        let pen = tape.scale(pen, cfg.beta)?;
                        loss = tape.add(loss, pen)?;
                    }
                }
                (Some(loss), Some(data_loss))
            }
            _ => (None, None),
        };
        Ok(BatchOutput {
            loss,
            data_loss,
            sentences,
            observed: attn.map(|a| a.observed).unwrap_or_default(),
        })
    }
}

/// A trainable model: network layout, parameter values, running
/// normalization statistics and the vocabularies.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
    pub features: Featurizer,
    pub norm_stats: BTreeMap<String, NormStats>,
}

/// One classified instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    pub gold: Option<usize>,
    /// Per-head self-attention matrices, when requested.
    pub attention: Vec<Tensor>,
    pub alpha: Option<Vec<f64>>,
}

impl Prediction {
    pub fn probability(&self) -> f64 {
        self.probs[self.label]
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Fresh model. `word_table`, when given, replaces the random word
    /// embeddings (it must be `|vocab| × d_word`).
    pub fn new<R: Rng>(
        config: &ModelConfig,
        features: Featurizer,
        word_table: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::init(config, Sizes::of(&features), &mut store, rng)?;
        if let Some(t) = word_table {
            let slot = store.value_mut(net.word);
            if t.shape() != slot.shape() {
                return Err(Error::Dimension {
                    op: "word table",
                    left: t.shape().to_vec(),
                    right: slot.shape().to_vec(),
                });
            }
            *slot = t;
        }
        let norm_stats = net.initial_norm_stats();
        Ok(Model {
            net,
            store,
            features,
            norm_stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn featurize(&self, insts: &[Instance], require_label: bool) -> Result<Vec<Example>> {
        self.features.featurize_all(insts, self.config().pruning, require_label)
    }

    /// Inference-mode predictions, computed in batches of the configured
    /// size. Attention matrices are kept only when `keep_attention` is set.
    pub fn predict(&self, examples: &[Example], keep_attention: bool) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(examples.len());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for chunk in examples.chunks(self.config().batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut tape = Tape::new();
            let res = self
                .net
                .forward(&mut tape, &self.store, &refs, Mode::Eval, &self.norm_stats, &mut rng)?;
            for (ex, s) in chunk.iter().zip(&res.sentences) {
                let probs = tape.value(s.probs).data().to_vec();
                if !probs.iter().all(|p| p.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite probabilities for {}", ex.id)));
                }
                out.push(Prediction {
                    id: ex.id.clone(),
                    label: argmax(&probs),
                    probs,
                    gold: ex.label,
                    attention: if keep_attention {
                        s.attention.iter().map(|&a| tape.value(a).clone()).collect()
                    } else {
                        Vec::new()
                    },
                    alpha: s.alpha.map(|a| tape.value(a).data().to_vec()),
                });
            }
        }
        Ok(out)
    }

    /// Blends batch statistics into the running ones with the configured
    /// momentum.
    pub fn update_norm_stats(&mut self, observed: &[(String, NormStats)]) {
        let m = self.config().norm_momentum;
        for (name, obs) in observed {
            let run = self
                .norm_stats
                .entry(name.clone())
                .or_insert_with(|| initial_stats(obs.mean.len()));
            for (r, o) in run.mean.iter_mut().zip(&obs.mean) {
                *r = (1.0 - m) * *r + m * o;
            }
            for (r, o) in run.var.iter_mut().zip(&obs.var) {
                *r = (1.0 - m) * *r + m * o;
            }
        }
    }
}
