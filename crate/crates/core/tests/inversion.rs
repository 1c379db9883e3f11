mod common;

use common::{tiny_bundle, tiny_pairs, trained_tiny};
use proptest::prelude::*;
use spaceedit::generator::{LatentInput, StyleCode};
use spaceedit::inversion::{
    average_codes, interpolate_codes, invert_batch, invert_identity, InversionConfig,
};

fn quick() -> InversionConfig {
    InversionConfig {
        steps: 30,
        ..InversionConfig::default()
    }
}

#[test]
fn best_iterate_never_exceeds_the_start() {
    let b = trained_tiny();
    let pairs = tiny_pairs(20);
    let ins: Vec<_> = pairs.iter().take(3).map(|p| &p.before).collect();
    let tgs: Vec<_> = pairs.iter().take(3).map(|p| &p.after).collect();
    let res = invert_batch(&b, &ins, &tgs, &quick()).unwrap();
    for r in &res {
        assert_eq!(r.trace.len(), 30);
        let best = r.best_trace();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.final_error.is_finite());
    }
}

#[test]
fn inversion_is_deterministic_and_batch_independent() {
    let b = trained_tiny();
    let pairs = tiny_pairs(20);
    let ins: Vec<_> = pairs.iter().take(2).map(|p| &p.before).collect();
    let tgs: Vec<_> = pairs.iter().take(2).map(|p| &p.after).collect();
    let cfg = InversionConfig {
        optimize_noise: false,
        ..quick()
    };
    let a = invert_batch(&b, &ins, &tgs, &cfg).unwrap();
    let again = invert_batch(&b, &ins, &tgs, &cfg).unwrap();
    assert_eq!(a, again);
    let single = invert_batch(
        &b,
        &ins[..1],
        &tgs[..1],
        &InversionConfig {
            batch_size: 1,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(single[0].style.w.len(), 512);
}

#[test]
fn reported_error_matches_the_returned_code() {
    let b = trained_tiny();
    let p = &tiny_pairs(20)[0];
    let r = invert_identity(
        &b,
        &p.before,
        &InversionConfig {
            optimize_noise: false,
            ..quick()
        },
    )
    .unwrap();
    let out = b
        .generate(&p.before, &LatentInput::Style(r.style.clone()))
        .unwrap();
    let err = 255.0 * spaceedit::metrics::l1_error(&out, &p.before).unwrap();
    assert!(
        (err - r.final_error).abs() < 0.05,
        "{err} vs {}",
        r.final_error
    );
}

#[test]
fn bad_configs_are_rejected() {
    let b = trained_tiny();
    let p = &tiny_pairs(20)[0];
    assert!(invert_identity(
        &b,
        &p.before,
        &InversionConfig {
            steps: 0,
            ..quick()
        }
    )
    .is_err());
    let big = spaceedit::Image::filled(16, 16, [0.5; 3]);
    assert!(invert_identity(&b, &big, &quick()).is_err());
}

#[test]
fn average_code_renders() {
    let b = trained_tiny();
    let avg = average_codes(&[b.w_avg.clone(), b.w_avg.iter().map(|v| v + 1.0).collect()]).unwrap();
    assert!((avg[0] - b.w_avg[0] - 0.5).abs() < 1e-6);
    assert!(average_codes(&[]).is_err());
    let im = &tiny_pairs(20)[0].before;
    b.generate(im, &LatentInput::Style(StyleCode::new(avg)))
        .unwrap();
}

proptest! {
    #[test]
    fn interpolation_is_affine(w0 in proptest::collection::vec(-3.0f32..3.0, 8), w1 in proptest::collection::vec(-3.0f32..3.0, 8), alpha in 0.0f32..=1.0) {
        let mid = interpolate_codes(&w0, &w1, alpha).unwrap();
        for i in 0..8 {
            let want = (1.0 - alpha) * w0[i] + alpha * w1[i];
            prop_assert!((mid[i] - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
        prop_assert_eq!(interpolate_codes(&w0, &w1, 0.0).unwrap(), w0.clone());
        prop_assert_eq!(interpolate_codes(&w0, &w1, 1.0).unwrap(), w1.clone());
    }

    #[test]
    fn interpolation_rejects_mismatched_lengths(n in 1usize..8) {
        prop_assert!(interpolate_codes(&vec![0.0; n], &vec![0.0; n + 1], 0.5).is_err());
    }
}

#[test]
fn untrained_generators_are_refused() {
    let p = &tiny_pairs(20)[0];
    assert!(invert_identity(&tiny_bundle(), &p.before, &quick()).is_err());
}
