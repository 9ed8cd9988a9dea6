use proptest::prelude::*;

use revformer::analytics::count_params;
use revformer::checkpoint::{Checkpoint, RngState};
use revformer::config::RunConfig;
use revformer::kernels;
use revformer::rev::keep_scales;
use revformer::verify::vit_stack_inversion_error;
use revformer::zoo;
use revformer::Tensor;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    revformer::rng::normal::<f64>(&[rows, cols], 1.0, &mut revformer::rng::rng_from(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_inverts_concat(rows in 1usize..6, a in 1usize..9, b in 1usize..9, seed in any::<u64>()) {
        let (x, y) = (tensor(rows, a, seed), tensor(rows, b, seed ^ 1));
        let parts = kernels::split(&kernels::concat(&[&x, &y]).unwrap(), &[a, b]).unwrap();
        prop_assert!(parts[0].bit_eq(&x) && parts[1].bit_eq(&y));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, seed in any::<u64>()) {
        let s = kernels::softmax(&tensor(rows, cols, seed), 1).unwrap();
        for r in s.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_bits(bits in prop::collection::vec(any::<u64>(), 1..40), step in any::<u64>(), seed in any::<u64>()) {
        let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let ck = Checkpoint {
            config: "seed = 0\n".into(),
            step,
            rng: RngState { seed, counter: step },
            params: vec![("p".into(), Tensor::new(&[data.len()], data).unwrap())],
            optimizer: vec![],
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        prop_assert!(back == ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn reversible_stack_inverts(width in prop::sample::select(vec![16usize, 32, 64]), depth in 1usize..6, tokens in 1usize..10, seed in any::<u64>()) {
        prop_assert!(vit_stack_inversion_error::<f64>(width, depth, tokens, seed).unwrap() < 1e-10);
    }

    #[test]
    fn drop_path_scales_are_replayable(batch in 1usize..16, rate in 0.0f64..0.9, seed in any::<u64>()) {
        let a = keep_scales(batch, rate, seed);
        prop_assert_eq!(&a, &keep_scales(batch, rate, seed));
        let keep = 1.0 / (1.0 - rate);
        prop_assert!(a.iter().all(|&s| s == 0.0 || s == keep));
    }

    #[test]
    fn config_survives_toml(seed in any::<u64>(), steps in 1u64..10_000, lr in 1e-6f64..1.0) {
        let mut cfg = RunConfig::from_preset("rev_mvit_tiny").unwrap();
        cfg.seed = seed;
        cfg.train.steps = steps;
        cfg.train.lr = lr;
        prop_assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn params_are_affine_in_depth(depth in 1usize..20) {
        let base = zoo::preset("rev_vit_tiny").unwrap();
        let at = |d: usize| count_params(&base.resized(d, 32).unwrap()).unwrap() as i64;
        prop_assert_eq!(at(depth + 1) - at(depth), at(2) - at(1));
    }
}
