mod common;

use common::*;
use mvdistill::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, Stage};
use mvdistill::dataset::{batch_indices, BatchPlan};
use mvdistill::losses::*;
use mvdistill::metrics::{clustering_accuracy, evaluate};
use mvdistill::network::{ema_update, init_params, softmax_rows, student_probs, ModelShape};
use mvdistill::pseudolabel::*;
use mvdistill::trainer::TrainConfig;
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn counts(k: usize, max: usize) -> impl Strategy<Value = Array2<usize>> {
    prop::collection::vec(0..=max, k * k).prop_map(move |v| Array2::from_shape_vec((k, k), v).unwrap())
}

fn label_pair() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2usize..=6, 1usize..60).prop_flat_map(|(k, n)| {
        (
            Just(k),
            prop::collection::vec(0..k, n),
            prop::collection::vec(0..k, n),
        )
    })
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_matches_exhaustive_search(c in (2usize..=6).prop_flat_map(|k| counts(k, 12))) {
        let got = hungarian_align(&ContingencyMatrix { counts: c.clone() }).unwrap();
        prop_assert_eq!(got, brute_force_align(&c));
    }

    #[test]
    fn accuracy_matches_exhaustive_search((k, pred, truth) in label_pair()) {
        let acc = clustering_accuracy(&pred, &truth, k).unwrap();
        prop_assert_eq!(acc, brute_force_accuracy(&pred, &truth, k));
    }

    #[test]
    fn purity_bounds_accuracy((k, pred, truth) in label_pair()) {
        let r = evaluate(&pred, &truth, k).unwrap();
        prop_assert!(r.pur >= r.acc);
        prop_assert!((0.0..=1.0).contains(&r.nmi));
        if r.is_one_to_one() {
            prop_assert_eq!(r.pur, r.acc);
        }
    }

    #[test]
    fn metrics_ignore_cluster_names(
        (k, pred, truth) in label_pair(),
        shuffle in prop::collection::vec(any::<u32>(), 6),
    ) {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.sort_by_key(|&i| shuffle[i]);
        let renamed: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let a = evaluate(&pred, &truth, k).unwrap();
        let b = evaluate(&renamed, &truth, k).unwrap();
        prop_assert_eq!(a.acc, b.acc);
        prop_assert_eq!(a.pur, b.pur);
        prop_assert!((a.nmi - b.nmi).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(m in matrix(5, 7, -700.0, 700.0)) {
        for row in softmax_rows(&m).rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn ema_is_affine(seed in 0u64..1000, mu in 0.0f64..=1.0) {
        let shape = ModelShape { view_dims: vec![2, 2], k: 2, latent_dim: 3, head_dim: 2, encoder_hidden: vec![3], head_hidden: 4 };
        let a = init_params(&shape, seed).unwrap().heads.student;
        let b = init_params(&shape, seed + 1).unwrap().heads.student;
        let mut t = a.clone();
        ema_update(&mut t, &b, mu).unwrap();
        for ((x, y), z) in a.tensors().concat().iter().zip(b.tensors().concat()).zip(t.tensors().concat()) {
            prop_assert_eq!(z.to_bits(), (mu * x + (1.0 - mu) * y).to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn kmeans_objective_never_increases(
        x in (4usize..40, 1usize..5).prop_flat_map(|(n, d)| matrix(n, d, -10.0, 10.0)),
        k in 2usize..5,
        seed in any::<u64>(),
    ) {
        prop_assume!(x.nrows() >= k);
        let r = kmeans(&x, k, seed, 100, 0.0).unwrap();
        for w in r.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", r.objective_history);
        }
        let again = kmeans(&x, k, seed, 100, 0.0).unwrap();
        prop_assert_eq!(&r.assignments, &again.assignments);
        prop_assert!(r.assignments.iter().all(|&a| a < k));
    }

    #[test]
    fn student_probs_are_distributions(seed in 0u64..500, z in matrix(6, 4, -50.0, 50.0)) {
        let shape = ModelShape { view_dims: vec![2, 3], k: 3, latent_dim: 4, head_dim: 3, encoder_hidden: vec![5], head_hidden: 6 };
        let params = init_params(&shape, seed).unwrap();
        let y = student_probs(&params.heads, z.view()).unwrap();
        for row in y.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn contrastive_is_order_and_scale_invariant(
        a in matrix(6, 3, 0.1, 2.0),
        b in matrix(6, 3, 0.1, 2.0),
        order in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        scale in 0.01f64..100.0,
    ) {
        let views = vec![a.clone(), b.clone()];
        let base = teacher_contrastive_loss(&views, 1.0, false).unwrap();
        let permuted = vec![a.select(Axis(0), &order), b.select(Axis(0), &order)];
        prop_assert!((teacher_contrastive_loss(&permuted, 1.0, false).unwrap() - base).abs() < 1e-10);
        let scaled = vec![&a * scale, &b * scale];
        prop_assert!((teacher_contrastive_loss(&scaled, 1.0, false).unwrap() - base).abs() < 1e-10);
        let y = vec![softmax_rows(&a), softmax_rows(&b)];
        let ys = vec![y[0].select(Axis(0), &order), y[1].select(Axis(0), &order)];
        prop_assert!((student_contrastive_loss(&y, 0.5, false).unwrap() - student_contrastive_loss(&ys, 0.5, false).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn iic_is_bounded(z in (2usize..6).prop_flat_map(|d| (matrix(8, d, -5.0, 5.0), matrix(8, d, -5.0, 5.0)))) {
        let d = z.0.ncols() as f64;
        let loss = iic_mi_loss(&[z.0, z.1]).unwrap();
        prop_assert!(loss <= 1e-12);
        prop_assert!(loss >= -d.ln() - 1e-12);
    }

    #[test]
    fn distillation_shrinks_toward_the_target(
        dark in matrix(4, 3, -3.0, 3.0),
        logits in matrix(4, 3, -3.0, 3.0),
    ) {
        let dark = softmax_rows(&dark);
        let y0 = softmax_rows(&logits);
        let u = [1.0 / 3.0; 3];
        let q = distillation_targets(&dark, 0.1, &u).unwrap();
        let at = |t: f64| {
            let y = &y0 * (1.0 - t) + &q * t;
            self_distillation_loss(&[dark.clone()], &[y], 0.1, &u, KlSign::Forward).unwrap()
        };
        let mut prev = at(0.0);
        for i in 1..=10 {
            let cur = at(i as f64 / 10.0);
            prop_assert!(cur <= prev + 1e-12);
            prev = cur;
        }
        prop_assert!(prev.abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_match_nearest_neighbour_scan(
        t0 in matrix(20, 4, -3.0, 3.0),
        t1 in matrix(20, 4, -3.0, 3.0),
        c in matrix(3, 8, -3.0, 3.0),
    ) {
        let labels = assign_pseudo_labels(&[t0.clone(), t1.clone()], &c).unwrap();
        for (v, t) in [t0, t1].iter().enumerate() {
            let block: Vec<Vec<f64>> = c.rows().into_iter().map(|r| r.iter().skip(4 * v).take(4).copied().collect()).collect();
            for (n, row) in t.rows().into_iter().enumerate() {
                prop_assert_eq!(labels[v][n], nearest_brute_force(&row.to_vec(), &block));
            }
        }
    }

    #[test]
    fn dark_targets_permute_and_restore(
        t in matrix(10, 2, -3.0, 3.0),
        c in matrix(4, 2, -3.0, 3.0),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let id = vec![vec![0, 1, 2, 3]];
        let base = dark_knowledge(&[t.clone()], &c, &id, DarkMode::Soft, 1.0).unwrap();
        let moved = dark_knowledge(&[t.clone()], &c, &[perm.clone()], DarkMode::Soft, 1.0).unwrap();
        for row in moved[0].rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
        let restored = moved[0].select(Axis(1), &invert(&perm));
        prop_assert_eq!(&restored, &base[0]);
    }

    #[test]
    fn alignment_composes_away_relabelling(
        t in matrix(24, 2, -4.0, 4.0),
        c in matrix(3, 2, -4.0, 4.0),
        student in prop::collection::vec(0usize..3, 24),
        pi in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let views = [t];
        let pipeline = |centroids: &Array2<f64>| {
            let pseudo = assign_pseudo_labels(&views, centroids).unwrap();
            let cont = contingency(&student, &pseudo[0], 3).unwrap();
            let perm = hungarian_align(&cont).unwrap();
            (optimal_alignments(&cont.counts), dark_knowledge(&views, centroids, &[perm], DarkMode::Soft, 1.0).unwrap())
        };
        // Centroid m becomes centroid pi[m].
        let relabelled = c.select(Axis(0), &invert(&pi));
        let (unique, a) = pipeline(&c);
        prop_assume!(unique == 1);
        let (_, b) = pipeline(&relabelled);
        // Softmax sums the relabelled columns in another order; allow rounding.
        prop_assert!(a[0].iter().zip(b[0].iter()).all(|(x, y)| (x - y).abs() <= 1e-12), "{:?} vs {:?}", a, b);
    }

    #[test]
    fn batches_partition_the_samples(n in 2usize..300, bs in 2usize..130, seed in any::<u64>(), epoch in 0usize..5) {
        let plan = BatchPlan { batch_size: bs, shuffle_seed: seed, drop_last: false };
        let batches = batch_indices(n, &plan, epoch).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() >= 2));
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, latent in 2usize..5, hidden in 1usize..5) {
        let config = TrainConfig { latent_dim: latent, head_dim: 2, head_hidden: hidden, encoder_hidden: vec![hidden], ..TrainConfig::default() };
        let params = init_params(&config.model_shape(&[3, 2], 2), seed).unwrap();
        let ckpt = Checkpoint::new(config, params, Stage::Finetuned);
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap(), ckpt);
    }
}
