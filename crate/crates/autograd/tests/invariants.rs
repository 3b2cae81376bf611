use m3l_autograd::{patchify, unpatchify, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn image(b: usize, h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0..5.0f64, b * h * w * c).prop_map(move |d| Tensor::new(&[b, h, w, c], d).unwrap())
}

proptest! {
    #[test]
    fn unpatchify_inverts_patchify(
        (x, p) in (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(b, p, gh, gw, c)| (image(b, p * gh, p * gw, c), Just(p)))
    ) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let patches = patchify(&x, p).unwrap();
        prop_assert_eq!(patches.shape(), &[x.shape()[0], (h / p) * (w / p), p * p * x.shape()[3]][..]);
        prop_assert_eq!(unpatchify(&patches, p, h, w).unwrap(), x);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, data in prop::collection::vec(-50.0..50.0f64, 1..9)) {
        let d = data.len();
        let x = Tensor::new(&[rows, d], data.iter().cycle().take(rows * d).copied().collect()).unwrap();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let v = g.constant(x);
        let s = g.softmax(v);
        for row in g.value(s).data().chunks(d) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
