use relgraph::checkpoint::Checkpoint;
use relgraph::config::{ModelConfig, Schedule};
use relgraph::data::{generate_synthetic, Instance, SyntheticConfig};
use relgraph::train::{self, data_size_study, evaluate, nested_subsamples, prepare, Session};
use relgraph::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_word: 8,
        d_ner: 2,
        d_pos: 2,
        d_p: 2,
        d_h: 6,
        d_attn: 6,
        heads: 2,
        d_gcn: 6,
        d_ffn: 6,
        epochs: 3,
        ..ModelConfig::desk()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<Instance> {
    let syn = SyntheticConfig {
        instances: n,
        negative_fraction: 0.2,
        max_len: 12,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&syn, seed).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = ModelConfig { lr: 0.0, ..tiny() };
    let data = corpus(30, 1);
    let (f, tr, dv) = prepare(&cfg, &data[..20], &data[20..]).unwrap();
    let mut s = Session::new(&cfg, f, None).unwrap();
    let before = s.model.store.clone();
    s.train(&tr, &dv, &mut |_, _| false).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(s.model.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn same_seed_same_trajectory_different_seed_different() {
    let data = corpus(40, 2);
    let a = train::train(&tiny(), &data[..30], &data[30..], None).unwrap();
    let b = train::train(&tiny(), &data[..30], &data[30..], None).unwrap();
    assert_eq!(a.history, b.history);
    let c = train::train(&ModelConfig { seed: 9, ..tiny() }, &data[..30], &data[30..], None).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn epoch_learning_rate_is_exact_power() {
    let cfg = ModelConfig { epochs: 5, ..tiny() };
    let data = corpus(25, 3);
    let s = train::train(&cfg, &data[..15], &data[15..], None).unwrap();
    for (e, log) in s.history.iter().enumerate() {
        assert_eq!(log.lr, cfg.lr * cfg.decay.powi(e as i32));
        assert_eq!(log.lr, cfg.epoch_lr(e));
    }
    let defaults = ModelConfig::default();
    assert_eq!(defaults.epoch_lr(3), 0.3 * 0.9f64.powi(3));
}

#[test]
fn plateau_schedule_decays_only_without_improvement() {
    let cfg = ModelConfig {
        schedule: Schedule::Plateau,
        epochs: 6,
        ..tiny()
    };
    let data = corpus(30, 4);
    let s = train::train(&cfg, &data[..20], &data[20..], None).unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut lr = cfg.lr;
    for log in &s.history {
        assert_eq!(log.lr, lr);
        if log.dev_metric > best {
            best = log.dev_metric;
        } else {
            lr *= cfg.decay;
        }
    }
}

#[test]
fn log_lines_have_the_fixed_format() {
    let data = corpus(20, 5);
    let s = train::train(&ModelConfig { epochs: 2, ..tiny() }, &data[..15], &data[15..], None).unwrap();
    let text = s.log_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let keys: Vec<&str> = l.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
        assert_eq!(keys, ["epoch", "loss", "dev_f1", "lr"]);
        assert!(l.starts_with(&format!("epoch={} ", i + 1)));
    }
}

#[test]
fn best_model_is_the_best_dev_epoch() {
    let cfg = ModelConfig { epochs: 6, ..tiny() };
    let data = corpus(40, 6);
    let (f, tr, dv) = prepare(&cfg, &data[..30], &data[30..]).unwrap();
    let mut s = Session::new(&cfg, f, None).unwrap();
    s.train(&tr, &dv, &mut |_, _| false).unwrap();
    let best = s.best.as_ref().unwrap();
    let top = s.history.iter().map(|l| l.dev_metric).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.metric, top);
    let first_top = s.history.iter().find(|l| l.dev_metric == top).unwrap().epoch;
    assert_eq!(best.epoch, first_top);
    let rescored = train::evaluate_examples(&s.best_model(), &dv).unwrap();
    assert_eq!(rescored.micro.f1, top);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let cfg = ModelConfig {
        lr: 1e300,
        clip_norm: 0.0,
        ..tiny()
    };
    let data = corpus(30, 7);
    let err = train::train(&cfg, &data[..20], &data[20..], None).unwrap_err();
    match err {
        Error::Numerical(msg) => {
            assert!(msg.contains("epoch") && msg.contains("batch") && msg.contains("max |grad|"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn subsamples_are_nested() {
    let fr = [0.2, 0.4, 0.6, 0.8, 1.0];
    let s = nested_subsamples(101, &fr, 3);
    for w in s.windows(2) {
        assert!(w[0].iter().all(|i| w[1].contains(i)));
        assert!(w[0].len() < w[1].len());
    }
    assert_eq!(s[0].len(), 21);
    assert_eq!(s[4], (0..101).collect::<Vec<_>>());
}

#[test]
fn full_fraction_equals_plain_training() {
    let cfg = ModelConfig { epochs: 2, ..tiny() };
    let data = corpus(40, 8);
    let (tr, dv) = data.split_at(30);
    let curve = data_size_study(&cfg, tr, dv, &[1.0], 11).unwrap();
    let plain = train::train(&cfg, tr, dv, None).unwrap();
    let best = plain.best.as_ref().unwrap();
    assert_eq!(curve.len(), 1);
    assert_eq!(curve[0].train_size, 30);
    assert_eq!(curve[0].best_epoch, best.epoch);
    assert_eq!(curve[0].dev_metric, best.metric);
    let table = train::format_size_curve(&curve);
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn fraction_missing_a_label_is_skipped() {
    let cfg = ModelConfig { epochs: 1, ..tiny() };
    let data = corpus(40, 9);
    let curve = data_size_study(&cfg, &data[..30], &data[30..], &[0.05, 1.0], 1).unwrap();
    assert_eq!(curve.len(), 1);
    assert_eq!(curve[0].fraction, 1.0);
    assert!(data_size_study(&cfg, &data[..30], &data[30..], &[0.0], 1).is_err());
}

#[test]
fn breakdown_rows_partition_the_overall_counts() {
    let cfg = ModelConfig { epochs: 2, ..tiny() };
    let data = corpus(60, 10);
    let s = train::train(&cfg, &data[..40], &data[40..], None).unwrap();
    let report = evaluate(&s.best_model(), &data[40..]).unwrap();
    for name in ["length", "distance"] {
        let mut sum = relgraph::metrics::Counts::default();
        for r in report.rows.iter().filter(|r| r.breakdown == name) {
            if let Some(sc) = &r.scores {
                sum.merge(&sc.counts);
            }
        }
        assert_eq!(sum, report.overall.counts, "{name}");
    }
}

#[test]
fn unknown_gold_labels_are_a_usage_error() {
    let cfg = ModelConfig { epochs: 1, ..tiny() };
    let data = corpus(30, 11);
    let s = train::train(&cfg, &data[..20], &data[20..], None).unwrap();
    let mut odd = data[25].clone();
    odd.relation = "per:unheard_of".into();
    match evaluate(&s.best_model(), &[odd]) {
        Err(Error::Usage(msg)) => assert!(msg.contains("per:unheard_of"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

fn session_bytes(seed: u64) -> (Session, Vec<u8>) {
    let cfg = ModelConfig { seed, ..tiny() };
    let data = corpus(30, 12);
    let s = train::train(&cfg, &data[..20], &data[20..], None).unwrap();
    let mut bytes = Vec::new();
    Checkpoint::from_session(&s).write_to(&mut bytes).unwrap();
    (s, bytes)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (s, bytes) = session_bytes(1);
    let ck = Checkpoint::read_from(&bytes[..]).unwrap();
    assert_eq!(ck.epoch, s.epoch);
    assert_eq!(ck.lr, s.lr);
    assert_eq!(ck.best_metric, s.best.as_ref().map(|b| b.metric));
    assert_eq!(ck.rng.as_ref(), Some(&s.rng));
    assert_eq!(ck.model.config(), s.config());
    let best = s.best_model();
    for ((_, a), (_, b)) in best.store.iter().zip(ck.model.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.kind, b.kind);
        let bits = |t: &relgraph::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(best.norm_stats, ck.model.norm_stats);
    let mut again = Vec::new();
    ck.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::read_from(&bytes[..]).unwrap().save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(Checkpoint::load(&path).is_ok());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (_, bytes) = session_bytes(2);
    let text_end = bytes.iter().position(|&b| b == b'\n').unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let err = Checkpoint::read_from(&bad_magic[..]).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");

    let mut bad_version = b"RELGRAPH-CKPT 99".to_vec();
    bad_version.extend_from_slice(&bytes[text_end..]);
    let err = Checkpoint::read_from(&bad_version[..]).unwrap_err();
    assert!(err.to_string().contains("version 99"), "{err}");

    let truncated = &bytes[..bytes.len() - 8];
    assert!(matches!(Checkpoint::read_from(truncated), Err(Error::Checkpoint(_))));

    assert!(matches!(Checkpoint::load("/nonexistent/m.ckpt"), Err(Error::Io { .. })));
}
