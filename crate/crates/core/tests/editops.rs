use proptest::prelude::*;
use spaceedit::editops::{
    apply_primitive, apply_recipe, dataset_hash, load_dataset, manifest_lines, sample_recipe,
    synthesize_dataset, write_dataset, BaseSource, EditRecipe, OpKind, PrimitiveOp, Split,
    FAMILY_NAMES, TAG_VOCAB,
};
use spaceedit::Image;

fn image(seed: u64, w: usize, h: usize) -> Image {
    let mut s = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Image::from_fn(w, h, |_, _| {
        [0, 1, 2].map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
    })
}

fn op_strategy() -> impl Strategy<Value = PrimitiveOp> {
    prop_oneof![
        (-0.5f32..=0.5).prop_map(|delta| PrimitiveOp::Brightness { delta }),
        (0.5f32..=2.0).prop_map(|factor| PrimitiveOp::Contrast { factor }),
        (0.0f32..=2.0).prop_map(|factor| PrimitiveOp::Saturation { factor }),
        (-90.0f32..=90.0).prop_map(|degrees| PrimitiveOp::HueRotate { degrees }),
        (-1.0f32..=1.0, -1.0f32..=1.0)
            .prop_map(|(temperature, tint)| PrimitiveOp::WhiteBalance { temperature, tint }),
        (0.4f32..=2.5, 0.4f32..=2.5, 0.4f32..=2.5)
            .prop_map(|(red, green, blue)| PrimitiveOp::ChannelGamma { red, green, blue }),
        (0.0f32..360.0, 0.0f32..360.0, 0.0f32..=0.3).prop_map(
            |(shadow_hue, highlight_hue, strength)| PrimitiveOp::SplitTone {
                shadow_hue,
                highlight_hue,
                strength
            }
        ),
        (0.0f32..=0.6).prop_map(|strength| PrimitiveOp::Vignette { strength }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_recipe_is_a_fixed_point(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
        let im = image(seed, w, h);
        prop_assert_eq!(apply_recipe(&im, &EditRecipe::identity()).unwrap(), im.clone());
        for kind in OpKind::ALL {
            prop_assert_eq!(apply_primitive(&im, &kind.identity()).unwrap(), im.clone());
        }
    }

    #[test]
    fn recipe_is_a_left_fold(seed in any::<u64>(), ops in proptest::collection::vec(op_strategy(), 0..5)) {
        let im = image(seed, 9, 7);
        let folded = ops.iter().fold(im.clone(), |acc, op| apply_primitive(&acc, op).unwrap());
        let recipe = EditRecipe::from_ops(ops, None);
        prop_assert_eq!(apply_recipe(&im, &recipe).unwrap(), folded);
    }

    #[test]
    fn outputs_stay_in_unit_range(seed in any::<u64>(), op in op_strategy()) {
        let out = apply_primitive(&image(seed, 6, 6), &op).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn recipe_tags_come_from_the_vocabulary(seed in any::<u64>(), family in proptest::option::of(0u32..8)) {
        let r = sample_recipe(seed, family).unwrap();
        prop_assert!(r.tags.iter().all(|t| TAG_VOCAB.contains(&t.as_str())));
        prop_assert_eq!(&r.caption, &EditRecipe::from_ops(r.ops.clone(), r.family_id).caption);
        prop_assert!((1..=4).contains(&r.ops.len()));
    }
}

#[test]
fn thousand_samples_respect_ranges() {
    for seed in 0..1000u64 {
        let family = (seed % 3 != 0).then_some((seed % FAMILY_NAMES.len() as u64) as u32);
        let r = sample_recipe(seed, family).unwrap();
        r.validate().unwrap();
        for op in &r.ops {
            for p in op.params() {
                assert!(
                    p.value >= p.min && p.value <= p.max,
                    "{} = {} outside [{}, {}]",
                    p.name,
                    p.value,
                    p.min,
                    p.max
                );
            }
        }
    }
}

#[test]
fn recipe_sampling_is_deterministic_and_rejects_unknown_family() {
    assert_eq!(
        sample_recipe(7, Some(2)).unwrap(),
        sample_recipe(7, Some(2)).unwrap()
    );
    assert!(sample_recipe(7, Some(FAMILY_NAMES.len() as u32)).is_err());
}

#[test]
fn brightness_composes_additively() {
    let im = Image::filled(4, 4, [0.3, 0.4, 0.5]);
    let b = |d| PrimitiveOp::Brightness { delta: d };
    let twice = apply_recipe(&im, &EditRecipe::from_ops(vec![b(0.1), b(0.1)], None)).unwrap();
    let once = apply_recipe(&im, &EditRecipe::from_ops(vec![b(0.2)], None)).unwrap();
    assert!(twice
        .data()
        .iter()
        .zip(once.data())
        .all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn dataset_regeneration_is_bit_identical() {
    let a = synthesize_dataset(BaseSource::Procedural, 30, 11, 16).unwrap();
    let b = synthesize_dataset(BaseSource::Procedural, 30, 11, 16).unwrap();
    assert_eq!(manifest_lines(&a).unwrap(), manifest_lines(&b).unwrap());
    assert_eq!(dataset_hash(&a).unwrap(), dataset_hash(&b).unwrap());
    let c = synthesize_dataset(BaseSource::Procedural, 30, 12, 16).unwrap();
    assert_ne!(dataset_hash(&a).unwrap(), dataset_hash(&c).unwrap());
}

#[test]
fn every_after_image_reapplies_its_recipe() {
    for p in synthesize_dataset(BaseSource::Procedural, 40, 2, 16).unwrap() {
        let again = apply_recipe(&p.before, p.recipe.as_ref().unwrap()).unwrap();
        assert_eq!(again, p.after, "pair {}", p.id);
    }
}

#[test]
fn dataset_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthesize_dataset(BaseSource::Procedural, 20, 4, 16).unwrap();
    write_dataset(dir.path(), &pairs).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), pairs.len());
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(
            (&a.id, a.split, &a.before, &a.recipe),
            (&b.id, b.split, &b.before, &b.recipe)
        );
        assert_eq!(a.after.quantized(), b.after);
    }
}

#[test]
fn hundred_pairs_split_eighty_ten_ten() {
    let pairs = synthesize_dataset(BaseSource::Procedural, 100, 9, 8).unwrap();
    let count = |s| pairs.iter().filter(|p| p.split == s).count();
    assert_eq!(
        (count(Split::Train), count(Split::Val), count(Split::Test)),
        (80, 10, 10)
    );
}
