use proptest::prelude::*;

use vaquita::sampler::{
    select_frames_test, select_frames_train, uniform_indices, FrameEmbeddingSet, QueryEmbedding,
};
use vaquita::vqta::{self, DType};
use vaquita::{Tape, Tensor};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn nonzero_rows(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-5.0f64..5.0, dim)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        1..=max_len,
    )
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(6, 9)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v).unwrap();
        let out = tape.value(s);
        let (r, _) = out.dims2().unwrap();
        for i in 0..r {
            let row = out.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(x in matrix(5, 8)) {
        let (_, c) = x.dims2().unwrap();
        prop_assume!(c >= 2);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[c]));
        let b = tape.constant(Tensor::zeros(&[c]));
        let y = tape.layer_norm(v, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        for i in 0..out.shape()[0] {
            let mean = out.row(i).iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_is_associative(a in 1usize..5, b in 1usize..5, c in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = vaquita::params::component_rng(seed, 0);
        let x = Tensor::randn(&[a, b], 1.0, &mut rng);
        let y = Tensor::randn(&[b, c], 1.0, &mut rng);
        let z = Tensor::randn(&[c, d], 1.0, &mut rng);
        let left = x.matmul(&y).unwrap().matmul(&z).unwrap();
        let right = x.matmul(&y.matmul(&z).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn vqta_round_trip(
        shape in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
        wide in any::<bool>(),
    ) {
        let mut rng = vaquita::params::component_rng(seed, 1);
        let mut t = Tensor::randn(&shape, 1e3, &mut rng);
        let dtype = if wide { DType::F64 } else { DType::F32 };
        if !wide {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let (back, got) = vqta::decode(&vqta::encode(&t, dtype).unwrap()).unwrap();
        prop_assert_eq!(got, dtype);
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn uniform_grid_is_strictly_increasing(len in 1usize..200, k in 1usize..200) {
        prop_assume!(k <= len);
        let idx = uniform_indices(len, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(idx[0], 0);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*idx.last().unwrap() < len);
    }

    #[test]
    fn test_plan_caps_at_video_length(len in 1usize..100, t in 1usize..120) {
        let plan = select_frames_test(len, t).unwrap();
        prop_assert_eq!(plan.all.len(), t.min(len));
        prop_assert!(plan.similarity.is_empty());
    }

    #[test]
    fn train_plan_is_invariant_to_power_of_two_scaling(
        rows in nonzero_rows(40, 3),
        q in prop::collection::vec(-5.0f64..5.0, 3).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        t in 2usize..12,
        shift in -8i32..8,
    ) {
        let set = FrameEmbeddingSet::from_rows(&rows).unwrap();
        let query = QueryEmbedding::new(q.clone()).unwrap();
        let plan = select_frames_train(&query, &set, t).unwrap();
        let scale = 2f64.powi(shift);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        let scaled_q = QueryEmbedding::new(q.iter().map(|x| x * 2f64.powi(-shift)).collect()).unwrap();
        let other = select_frames_train(&scaled_q, &FrameEmbeddingSet::from_rows(&scaled).unwrap(), t).unwrap();
        prop_assert_eq!(&plan, &other);
        prop_assert_eq!(plan.all.len(), t.min(rows.len()));
        prop_assert!(plan.all.windows(2).all(|w| w[0] < w[1]));
    }
}
