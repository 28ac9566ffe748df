use latentmem::tensor::gradcheck::{check, op_suite, DEFAULT_STEP};
use latentmem::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(n in 1usize..9, k in 1usize..9, m in 1usize..9, seed in 0u64..1000) {
        let (a, b) = (random(&[n, k], seed), random(&[k, m], seed + 1));
        let tape = Tape::new();
        let c = tape.matmul(tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        let got = tape.value(c);
        prop_assert_eq!(got.shape(), &[n, m]);
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..12, seed in 0u64..1000) {
        let tape = Tape::new();
        let s = tape.value(tape.softmax_lastdim(tape.constant(random(&[r, c], seed).map(|v| 30.0 * v))));
        for i in 0..r {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slices_reassemble(r in 1usize..8, c in 2usize..8, cut in 1usize..7, seed in 0u64..1000) {
        let cut = cut.min(c - 1);
        let x = random(&[r, c], seed);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let left = tape.slice_cols(v, 0, cut).unwrap();
        let right = tape.slice_cols(v, cut, c - cut).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        prop_assert!(tape.value(back).bit_eq(&x));
        let t = tape.transpose(tape.transpose(v).unwrap()).unwrap();
        prop_assert!(tape.value(t).bit_eq(&x));
    }

    #[test]
    fn gradient_of_weighted_sum_is_the_weights(n in 1usize..20, seed in 0u64..1000) {
        let (x, w) = (random(&[n], seed), random(&[n], seed + 7));
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let loss = tape.sum(tape.mul(xv, tape.constant(w.clone())).unwrap());
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.get(xv).unwrap().bit_eq(&w));
    }

    #[test]
    fn gradients_accumulate_over_reuse(n in 1usize..10, seed in 0u64..1000) {
        // d/dx sum(x*x) through two uses of the same leaf is 2x
        let x = random(&[n], seed);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = tape.sum(tape.mul(xv, xv).unwrap());
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.get(xv).unwrap().bit_eq(&x.map(|v| 2.0 * v)));
    }
}

#[test]
fn op_suite_is_within_tolerance() {
    let checks = op_suite(11).unwrap();
    assert!(checks.len() >= 15, "only {} ops checked", checks.len());
    for c in checks {
        assert!(c.max_rel_error < 1e-4, "{}: {:e}", c.name, c.max_rel_error);
    }
}

#[test]
fn composite_graph_passes_finite_differences() {
    let inputs = [random(&[3, 4], 1), random(&[4, 5], 2), random(&[5], 3), random(&[5], 4)];
    let c = check("composite", &inputs, DEFAULT_STEP, |tape, v| {
        let h = tape.gelu(tape.matmul(v[0], v[1])?);
        let n = tape.layer_norm(h, v[2], v[3], 1e-5)?;
        let p = tape.softmax_causal(tape.matmul(n, tape.transpose(n)?)?, 0);
        Ok(tape.mean(tape.mul(p, p)?))
    })
    .unwrap();
    assert!(c.max_rel_error < 1e-5, "{:e}", c.max_rel_error);
}

#[test]
fn shape_errors_name_both_operands() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    assert!(tape.add(a, tape.constant(Tensor::zeros(&[3, 2]))).is_err());
}
