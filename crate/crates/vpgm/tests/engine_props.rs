//! Property tests for the per-question aggregation rule.

use proptest::prelude::*;

use vpgm::engine::{vpgm_expectation, SampleMeta, SampleRecord};
use vpgm::prompt::ParsedReply;

fn sample(index: usize, matched: Option<usize>, final_prob: f64) -> SampleRecord {
    SampleRecord {
        index,
        reply: ParsedReply {
            answer_label: matched.map(|m| format!("L{m}")).unwrap_or_default(),
            latent_probs: Default::default(),
            final_prob,
            verbalized_confidence: None,
            partial: false,
            warnings: Vec::new(),
            raw_text: String::new(),
        },
        matched_option: matched,
        meta: SampleMeta::default(),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

prop_compose! {
    fn arb_samples(k: usize)(
        raw in prop::collection::vec((0..k, 0.0f64..=1.0), 1..12)
    ) -> Vec<SampleRecord> {
        raw.into_iter()
            .enumerate()
            .map(|(i, (label, p))| sample(i, Some(label), p))
            .collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn masses_form_a_distribution(samples in arb_samples(4)) {
        let dist = vpgm_expectation(&samples, 4).unwrap();
        prop_assert_eq!(dist.len(), 4);
        for &mass in &dist {
            prop_assert!((0.0..=1.0).contains(&mass));
        }
        let total: f64 = dist.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "masses sum to {total}");
    }

    #[test]
    fn sample_order_does_not_matter(samples in arb_samples(3), rotate in 0usize..12) {
        let baseline = vpgm_expectation(&samples, 3).unwrap();
        let mut rotated = samples.clone();
        rotated.rotate_left(rotate % samples.len().max(1));
        let shuffled = vpgm_expectation(&rotated, 3).unwrap();
        for (a, b) in baseline.iter().zip(&shuffled) {
            prop_assert!(close(*a, *b), "{a} vs {b}");
        }
    }

    #[test]
    fn duplicating_every_sample_changes_nothing(samples in arb_samples(3)) {
        let baseline = vpgm_expectation(&samples, 3).unwrap();
        let doubled: Vec<SampleRecord> =
            samples.iter().chain(&samples).cloned().collect();
        let dist = vpgm_expectation(&doubled, 3).unwrap();
        for (a, b) in baseline.iter().zip(&dist) {
            prop_assert!(close(*a, *b), "{a} vs {b}");
        }
    }

    #[test]
    fn label_relabeling_is_equivariant(samples in arb_samples(3), shift in 0usize..3) {
        // Relabel every option by a cyclic shift; the mass vector must shift
        // the same way.
        let baseline = vpgm_expectation(&samples, 3).unwrap();
        let relabeled: Vec<SampleRecord> = samples
            .iter()
            .map(|s| sample(s.index, s.matched_option.map(|m| (m + shift) % 3), s.reply.final_prob))
            .collect();
        let shifted = vpgm_expectation(&relabeled, 3).unwrap();
        for label in 0..3 {
            prop_assert!(
                close(baseline[label], shifted[(label + shift) % 3]),
                "label {label}: {} vs {}", baseline[label], shifted[(label + shift) % 3]
            );
        }
    }

    #[test]
    fn unanimous_samples_concentrate_the_verbalized_mass(
        p in 0.0f64..=1.0,
        label in 0usize..4,
        n in 1usize..10,
    ) {
        let samples: Vec<SampleRecord> =
            (0..n).map(|i| sample(i, Some(label), p)).collect();
        let dist = vpgm_expectation(&samples, 4).unwrap();
        prop_assert!(close(dist[label], p), "agreeing mass {} vs {p}", dist[label]);
        let residual = (1.0 - p) / 3.0;
        for (other, &mass) in dist.iter().enumerate() {
            if other != label {
                prop_assert!(close(mass, residual), "residual {mass} vs {residual}");
            }
        }
    }
}
