use mixlink::blocks::{NetworkSpec, Position};
use mixlink::kernels::{self, ConvGeometry};
use mixlink::topology::{eval_mixed, ConstantTransform, LinkPair, MixedLinkConfig, Transform};
use mixlink::{Mode, ParamStore, Session, Shape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, shape.numel()).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_is_linear_in_its_input(
        x in tensor(Shape::new(2, 3, 5, 5)),
        y in tensor(Shape::new(2, 3, 5, 5)),
        k in tensor(Shape::new(4, 3, 3, 3)),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let g = ConvGeometry { stride, pad };
        let mut mix = x.scale(a);
        mix.add_assign(&y.scale(b));
        let lhs = kernels::conv2d(&mix, &k, g).unwrap();
        let mut rhs = kernels::conv2d(&x, &k, g).unwrap().scale(a);
        rhs.add_assign(&kernels::conv2d(&y, &k, g).unwrap().scale(b));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn concat_splits_back_exactly(ca in 1usize..5, cb in 1usize..5, seed in any::<u64>()) {
        let a = Tensor::from_fn(Shape::new(2, ca, 3, 3), |[n, c, h, w]| (seed % 97) as f64 + (n * 1000 + c * 100 + h * 10 + w) as f64);
        let b = a.map(|v| -v).channel_range(0, ca.min(cb)).unwrap();
        let cat = kernels::channel_concat(&a, &b).unwrap();
        prop_assert!(cat.channel_range(0, ca).unwrap().bit_eq(&a));
        prop_assert!(cat.channel_range(ca, b.shape().c()).unwrap().bit_eq(&b));
    }

    #[test]
    fn adding_zeros_anywhere_is_identity(base in tensor(Shape::new(1, 6, 2, 2)), len in 1usize..6, off in 0usize..6) {
        prop_assume!(off + len <= 6);
        let zero = Tensor::zeros(Shape::new(1, len, 2, 2));
        prop_assert!(kernels::channel_add_at(&base, &zero, off).unwrap().bit_eq(&base));
    }

    #[test]
    fn relu_is_idempotent_and_nonnegative(x in tensor(Shape::new(1, 2, 3, 3))) {
        let once = kernels::relu(&x);
        prop_assert!(kernels::relu(&once).bit_eq(&once));
        prop_assert!(once.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_rows_are_distributions(logits in tensor(Shape::new(3, 5, 1, 1)), label in 0usize..5) {
        let p = kernels::softmax(&logits);
        for n in 0..3 {
            let row: f64 = (0..5).map(|c| p.data()[n * 5 + c]).sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
        }
        prop_assert!(kernels::softmax_cross_entropy(&logits, &[label; 3]).unwrap() >= 0.0);
    }

    #[test]
    fn mixed_blocks_follow_the_width_law(
        width in 1usize..12,
        k1 in 0usize..6,
        k2 in 0usize..6,
        layers in 1usize..6,
        fixed in any::<bool>(),
    ) {
        prop_assume!(k1 + k2 > 0 && k1 <= width);
        let position = if fixed { Position::Fixed } else { Position::Unfixed };
        let cfg = MixedLinkConfig::new(k1, k2, position).unwrap();
        let inner = ConstantTransform { out: k1, value: 1.0 };
        let outer = ConstantTransform { out: k2, value: 2.0 };
        let pair: LinkPair<'_> = (
            (k1 > 0).then_some(&inner as &dyn Transform),
            (k2 > 0).then_some(&outer as &dyn Transform),
        );
        let pairs = vec![pair; layers];
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(Tensor::zeros(Shape::new(1, width, 2, 2)));
        let t = eval_mixed(&mut s, &pairs, x, &cfg).unwrap();
        prop_assert_eq!(s.graph.shape(t.embedding()).c(), width + layers * k2);
        prop_assert_eq!(cfg.width_after(width, layers), width + layers * k2);
        // Every inner link adds k1 ones somewhere; outer links add k2 twos.
        let total: f64 = s.value(t.embedding()).sum();
        prop_assert!((total - 4.0 * (layers * (k1 + 2 * k2)) as f64).abs() < 1e-9);
    }

    #[test]
    fn cifar_specs_round_trip_through_json(
        n in 1usize..20,
        k1 in 1usize..16,
        k2 in 1usize..16,
        fixed in any::<bool>(),
        m in 1usize..5,
    ) {
        let position = if fixed { Position::Fixed } else { Position::Unfixed };
        let spec = NetworkSpec::cifar(6 * n + 4, k1, k2, position, m, 0.5, 10);
        prop_assume!(spec.is_ok());
        let spec = spec.unwrap();
        let back: NetworkSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        prop_assert_eq!(back, spec);
    }
}
