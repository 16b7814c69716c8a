use proptest::prelude::*;
use scenegraph_kt::data::{generate, zipf_weights, GeneratorConfig};
use scenegraph_kt::evaluation::{score_scene, Task};
use scenegraph_kt::geometry::{relative_spatial, BoundingBox};
use scenegraph_kt::training::{fit, init_model, TrainConfig};

#[test]
fn zipf_head_dwarfs_the_fortieth_relation() {
    let w = zipf_weights(50, 1.5);
    assert!(w[1] / w[40] >= 50.0, "{}", w[1] / w[40]);
    let data = generate(&GeneratorConfig::default()).unwrap();
    let counts: Vec<u64> = {
        let mut c = data.train_relation_counts();
        for s in &data.test {
            for t in &s.gt_triples {
                c[t.relation] += 1;
            }
        }
        c
    };
    let total: u64 = counts.iter().sum();
    assert!((18_000..=23_000).contains(&total), "{total}");
    let mut sorted = counts[1..].to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    assert!(sorted[0] >= 50 * sorted[39].max(1));
}

#[test]
fn full_model_loss_drops_within_five_epochs() {
    let data = generate(&GeneratorConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (_, log) = fit(&data, &cfg, |_| {}).unwrap();
    assert!(log[4].loss_total < log[0].loss_total, "{log:?}");
}

#[test]
fn reversed_pairs_get_different_distributions() {
    let data = generate(&GeneratorConfig {
        n_object_classes: 12,
        n_relations: 6,
        scenes: 20,
        d_v: 8,
        d_s: 4,
        n_scene_types: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        d_s: 4,
        ..TrainConfig::default()
    };
    let model = init_model(&data, &cfg).unwrap();
    let scene = &data.test[0];
    let cands = score_scene(&model, scene, Task::PredCls, None).unwrap().0;
    let pick = |s: usize, o: usize| -> Vec<f64> {
        cands
            .iter()
            .filter(|c| c.subject == s && c.object == o)
            .map(|c| c.predicate_prob)
            .collect()
    };
    assert_ne!(pick(0, 1), pick(1, 0));
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.01..50.0f64, 0.01..50.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn relative_spatial_is_asymmetric_unless_boxes_coincide(a in arb_box(), b in arb_box()) {
        let ab = relative_spatial(&a, &b);
        let ba = relative_spatial(&b, &a);
        prop_assert_eq!(ab == ba, a == b);
    }

    #[test]
    fn relative_area_ratios_invert(a in arb_box(), b in arb_box()) {
        let ab = relative_spatial(&a, &b);
        let ba = relative_spatial(&b, &a);
        prop_assert!((ab[4] * ba[4] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generation_is_a_function_of_the_seed(seed in 0u64..1000) {
        let cfg = GeneratorConfig {
            n_object_classes: 12,
            n_relations: 6,
            scenes: 10,
            d_v: 4,
            d_s: 4,
            n_scene_types: 3,
            seed,
            ..GeneratorConfig::default()
        };
        prop_assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
