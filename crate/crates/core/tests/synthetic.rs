use std::collections::BTreeMap;

use relgraph::data::{generate_synthetic, Instance, SyntheticConfig, TriggerPlacement, NEGATIVE_LABEL};
use relgraph::graph::{DepTree, Pruning};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Relation read off the trigger words found among `nodes`; the negative
/// label when there is none.
fn trigger_lookup(inst: &Instance, nodes: impl IntoIterator<Item = usize>) -> String {
    for i in nodes {
        let w = &inst.tokens[i - 1];
        if let Some(rest) = w.strip_prefix("trg") {
            let r: usize = rest.split('_').next().unwrap().parse().unwrap();
            return format!("rel{r}");
        }
    }
    NEGATIVE_LABEL.to_string()
}

fn corpus(placement: TriggerPlacement, seed: u64) -> Vec<Instance> {
    let syn = SyntheticConfig {
        instances: 300,
        negative_fraction: 0.2,
        placement,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&syn, seed).unwrap()
}

#[test]
fn bag_of_sdp_words_is_perfect_when_triggers_are_on_the_path() {
    for seed in [1, 7, 11] {
        for inst in corpus(TriggerPlacement::OnPath, seed) {
            let tree = DepTree::from_instance(&inst).unwrap();
            let sdp = tree.sdp_nodes(inst.subj, inst.obj);
            assert_eq!(trigger_lookup(&inst, sdp), inst.relation, "{}", inst.id);
        }
    }
}

#[test]
fn off_path_triggers_need_the_right_pruning_radius() {
    for inst in corpus(TriggerPlacement::OneHop, 3) {
        let tree = DepTree::from_instance(&inst).unwrap();
        let spans = inst.entity_spans();
        let k0 = tree.prune(&spans, Pruning::Hops(0)).kept_nodes;
        let k1 = tree.prune(&spans, Pruning::Hops(1)).kept_nodes;
        if inst.relation != NEGATIVE_LABEL {
            assert_eq!(trigger_lookup(&inst, k0), NEGATIVE_LABEL, "{}", inst.id);
        }
        assert_eq!(trigger_lookup(&inst, k1), inst.relation, "{}", inst.id);
    }
    let syn = SyntheticConfig {
        instances: 300,
        placement: TriggerPlacement::Far,
        far_hops: 2,
        ..SyntheticConfig::default()
    };
    for inst in generate_synthetic(&syn, 3).unwrap() {
        let tree = DepTree::from_instance(&inst).unwrap();
        let spans = inst.entity_spans();
        let k1 = tree.prune(&spans, Pruning::Hops(1)).kept_nodes;
        let k2 = tree.prune(&spans, Pruning::Hops(2)).kept_nodes;
        assert_eq!(trigger_lookup(&inst, k1), NEGATIVE_LABEL, "{}", inst.id);
        assert_eq!(trigger_lookup(&inst, k2), inst.relation, "{}", inst.id);
    }
}

#[test]
fn sentence_lengths_follow_the_requested_uniform_distribution() {
    let syn = SyntheticConfig {
        instances: 3000,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&syn, 5).unwrap();
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for inst in &data {
        *hist.entry(inst.len()).or_default() += 1;
    }
    let bins = syn.max_len - syn.min_len + 1;
    assert_eq!(hist.len(), bins);
    let expected = data.len() as f64 / bins as f64;
    let stat: f64 = hist.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat:.2}, p {p:.4}");
}

#[test]
fn every_instance_is_valid_and_labels_are_balanced_enough() {
    let data = corpus(TriggerPlacement::OnPath, 9);
    for inst in &data {
        inst.validate().unwrap();
        assert!(inst.entity_distance() >= 3 && inst.entity_distance() <= 10);
    }
    let hist = relgraph::data::synthetic::label_histogram(&data);
    assert_eq!(hist.len(), 4);
    assert!(hist.values().all(|&c| c >= 30), "{hist:?}");
}
