use proptest::prelude::*;
use spaceedit::editops::{mix_seed, synthesize_family_pairs, ImagePair};
use spaceedit::spacesearch::{
    cluster_report, customized_purity, knn_query, random_assignments, recipe_param_index,
    spherical_kmeans, spherical_kmeans_restarts, CodeIndex,
};

fn index_of(points: &[Vec<f32>]) -> CodeIndex {
    let mut index = CodeIndex::default();
    for (i, p) in points.iter().enumerate() {
        index
            .insert(format!("e{i:03}"), format!("p{i:03}"), p, vec![])
            .unwrap();
    }
    index
}

fn points() -> impl Strategy<Value = Vec<Vec<f32>>> {
    (2usize..6)
        .prop_flat_map(|d| {
            proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, d), 4..40)
        })
        .prop_filter("nonzero", |ps| {
            ps.iter().all(|p| p.iter().any(|v| v.abs() > 1e-3))
        })
}

fn tags(n: usize, seed: u64) -> Vec<Vec<String>> {
    let vocab = ["a", "b", "c"];
    (0..n)
        .map(|i| {
            vocab
                .iter()
                .enumerate()
                .filter(|(j, _)| (seed >> ((i * 3 + j) % 60)) & 1 == 1)
                .map(|(_, t)| t.to_string())
                .collect()
        })
        .collect()
}

/// Whether some tag's highest per-cluster count is shared by two clusters.
fn count_tie(assign: &[Option<usize>], tags: &[Vec<String>], k: usize) -> bool {
    ["a", "b", "c"].iter().any(|t| {
        let mut counts = vec![0usize; k];
        for (a, ts) in assign.iter().zip(tags) {
            if ts.iter().any(|x| x == t) {
                counts[a.unwrap()] += 1;
            }
        }
        let best = *counts.iter().max().unwrap();
        best > 0 && counts.iter().filter(|&&c| c == best).count() > 1
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kmeans_objective_never_increases(ps in points(), k in 1usize..5, seed in any::<u64>()) {
        let index = index_of(&ps);
        let c = spherical_kmeans(&index, k.min(ps.len()), seed, 50).unwrap();
        prop_assert!(c.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{:?}", c.objective_trace);
        prop_assert_eq!(c.assignments.len(), ps.len());
        prop_assert!(c.assignments.iter().all(|&a| a < k.min(ps.len())));
    }

    #[test]
    fn knn_is_scale_invariant(ps in points(), s in 0.1f32..10.0) {
        let index = index_of(&ps);
        let q = ps[0].clone();
        let q2: Vec<f32> = q.iter().map(|v| v * s).collect();
        let a: Vec<String> = knn_query(&index, &q, ps.len()).unwrap().into_iter().map(|n| n.id).collect();
        let b: Vec<String> = knn_query(&index, &q2, ps.len()).unwrap().into_iter().map(|n| n.id).collect();
        prop_assert_eq!(&a[0], "e000");
        prop_assert_eq!(a, b);
    }

    #[test]
    fn purity_ignores_cluster_labels(n in 2usize..30, k in 1usize..6, seed in any::<u64>(), shift in 1usize..6) {
        let assign: Vec<Option<usize>> = random_assignments(n, k, seed).into_iter().map(Some).collect();
        let relabeled: Vec<Option<usize>> = assign.iter().map(|a| a.map(|c| (c + shift) % k)).collect();
        let t = tags(n, seed | 1);
        prop_assume!(t.iter().any(|x| !x.is_empty()));
        // the tie rule follows cluster numbering, so only tie-free cases are invariant
        prop_assume!(!count_tie(&assign, &t, k));
        let p = customized_purity(&assign, &t, &["a", "b", "c"]).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p, customized_purity(&relabeled, &t, &["a", "b", "c"]).unwrap());
    }

    #[test]
    fn single_tagged_pure_clusters_score_one(sizes in proptest::collection::vec(1usize..6, 1..3), seed in any::<u64>()) {
        let vocab = ["a", "b", "c"];
        let mut samples: Vec<(usize, String)> = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            samples.extend((0..n).map(|_| (c, vocab[c].to_string())));
        }
        // shuffle deterministically so order plays no role
        let order = random_assignments(samples.len(), samples.len(), seed);
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.sort_by_key(|&i| (order[i], i));
        let assign: Vec<Option<usize>> = idx.iter().map(|&i| Some(samples[i].0)).collect();
        let tags: Vec<Vec<String>> = idx.iter().map(|&i| vec![samples[i].1.clone()]).collect();
        prop_assert_eq!(customized_purity(&assign, &tags, &vocab).unwrap(), 1.0);
    }
}

#[test]
fn pure_distinct_clusters_score_one() {
    let t: Vec<Vec<String>> = ["a", "a", "b", "c", "c"]
        .iter()
        .map(|s| vec![s.to_string()])
        .collect();
    let a = [Some(0), Some(0), Some(1), Some(2), Some(2)];
    assert_eq!(customized_purity(&a, &t, &["a", "b", "c"]).unwrap(), 1.0);
}

#[test]
fn index_roundtrips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codes.jsonl");
    let mut index = index_of(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]);
    index.meta.bundle_hash = "h".into();
    index.meta.inversion_resolution = 32;
    index.save(&path).unwrap();
    let back = CodeIndex::load(&path).unwrap();
    assert_eq!(back, index);
    let n: f32 = back.entries[0].w_unit.iter().map(|v| v * v).sum();
    assert!((n - 1.0).abs() < 1e-6);
    assert!(index.clone().insert("z", "z", &[0.0, 0.0], vec![]).is_err());
}

#[test]
fn knn_checks_k_and_ties_by_id() {
    let index = index_of(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]);
    let nn = knn_query(&index, &[1.0, 0.0], 2).unwrap();
    assert_eq!(
        nn.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(),
        ["e000", "e001"]
    );
    assert!(knn_query(&index, &[1.0, 0.0], 4).is_err());
    assert!(knn_query(&CodeIndex::default(), &[1.0, 0.0], 1).is_err());
}

#[test]
fn recipe_parameters_cluster_by_family() {
    let pairs = synthesize_family_pairs(10, 3, 8).unwrap();
    let refs: Vec<&ImagePair> = pairs.iter().collect();
    let index = recipe_param_index(&refs).unwrap();
    let c = spherical_kmeans(&index, 8, 0, 100).unwrap();
    let report = cluster_report(&index, &c, &spaceedit::editops::TAG_VOCAB, 3, 2).unwrap();
    assert_eq!(report.clusters.len(), 8);
    assert_eq!(report.clusters.iter().map(|s| s.size).sum::<usize>(), 80);
    assert!(report
        .clusters
        .iter()
        .all(|s| s.exemplars.len() <= 2 && s.tags.len() <= 3));
    let best = spherical_kmeans_restarts(&index, 8, 0, 100, 5).unwrap();
    for r in 0..5 {
        assert!(
            best.inertia
                <= spherical_kmeans(&index, 8, mix_seed(0, r), 100)
                    .unwrap()
                    .inertia
        );
    }
    assert!(spherical_kmeans_restarts(&index, 8, 0, 100, 0).is_err());
    assert!(spherical_kmeans(&index, 0, 0, 10).is_err());
    assert!(spherical_kmeans(&index, 81, 0, 10).is_err());
}
