use circuit_reuse::numeric::gradcheck::{check_all_ops, gradcheck, OpFn};
use circuit_reuse::numeric::{SeedTree, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let reports = check_all_ops(100, 2024, 1e-5).unwrap();
    assert!(reports.len() >= 20);
    for r in &reports {
        assert!(
            r.max_rel_err <= 1e-4,
            "{} worst relative error {:e}",
            r.name,
            r.max_rel_err
        );
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mlp: Box<OpFn> = Box::new(|t, x| {
        let h1 = t.matmul(x[0], x[1])?;
        let h1 = t.add_row(h1, x[2])?;
        let h1 = t.gelu(h1);
        let h2 = t.matmul(h1, x[3])?;
        let h2 = t.gelu(h2);
        let out = t.matmul(h2, x[4])?;
        t.cross_entropy(out, &[0, 2, 1])
    });
    for trial in 0..10u64 {
        let s = SeedTree::new(trial);
        let r = |label: &str, shape: &[usize]| Tensor::randn(shape, 0.7, &mut s.child(label).rng());
        let inputs = vec![
            r("x", &[3, 5]),
            r("w1", &[5, 6]),
            r("b1", &[6]),
            r("w2", &[6, 4]),
            r("w3", &[4, 3]),
        ];
        let err = gradcheck(&inputs, mlp.as_ref(), 1e-5, &s).unwrap();
        assert!(err <= 1e-4, "trial {trial}: {err:e}");
    }
}
