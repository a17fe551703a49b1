use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twoinone::numerics::{finite_diff_check, Graph, NamedTensors, Tape, Tensor, Var};
use twoinone::Result;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, tape.value(out).shape(), -1.0, 1.0);
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check<F>(inputs: NamedTensors, seed: u64, op: F)
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + 'static,
{
    let mut g = Graph::new(move |tape, v| {
        let out = op(tape, v)?;
        weighted_sum(tape, out, seed)
    });
    let report = finite_diff_check(&mut g, &inputs, STEP, TOL).unwrap();
    assert!(
        report.passed,
        "max rel err {} at {:?}",
        report.max_rel_err, report.worst
    );
    assert!(report.checked > 0);
}

fn one(name: &str, t: Tensor) -> NamedTensors {
    BTreeMap::from([(name.to_string(), t)])
}

fn two(a: Tensor, b: Tensor) -> NamedTensors {
    BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn elementwise_binary(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[r, c], -2.0, 2.0);
        let b = random(&mut rng, &[r, c], -2.0, 2.0);
        check(two(a.clone(), b.clone()), seed, |t, v| t.add(v["a"], v["b"]));
        check(two(a.clone(), b.clone()), seed, |t, v| t.sub(v["a"], v["b"]));
        check(two(a, b), seed, |t, v| t.mul(v["a"], v["b"]));
    }

    #[test]
    fn scalar_broadcast(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[r, c], -2.0, 2.0);
        let s = Tensor::scalar(rng.gen_range(-2.0..2.0));
        check(two(a.clone(), s.clone()), seed, |t, v| t.mul(v["a"], v["b"]));
        check(two(a.clone(), s), seed, |t, v| t.sub(v["a"], v["b"]));
        check(one("a", a.clone()), seed, |t, v| t.add_scalar(v["a"], 0.7));
        check(one("a", a), seed, |t, v| t.scale(v["a"], -1.3));
    }

    #[test]
    fn products(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k], -1.0, 1.0);
        let b = random(&mut rng, &[k, n], -1.0, 1.0);
        let bt = random(&mut rng, &[n, k], -1.0, 1.0);
        check(two(a.clone(), b), seed, |t, v| t.matmul(v["a"], v["b"]));
        check(two(a, bt), seed, |t, v| t.matmul_nt(v["a"], v["b"]));
    }

    #[test]
    fn row_bias(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[r, c], -1.0, 1.0);
        let b = random(&mut rng, &[c], -1.0, 1.0);
        check(two(x, b), seed, |t, v| t.add_row_bias(v["a"], v["b"]));
    }

    #[test]
    fn smooth_unary(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[r, c], -2.0, 2.0);
        let pos = random(&mut rng, &[r, c], 0.1, 3.0);
        check(one("a", x.clone()), seed, |t, v| t.tanh(v["a"]));
        check(one("a", x.clone()), seed, |t, v| t.gelu(v["a"]));
        check(one("a", x), seed, |t, v| t.square(v["a"]));
        check(one("a", pos), seed, |t, v| t.sqrt(v["a"]));
    }

    #[test]
    fn softmax_with_and_without_mask(r in 1usize..4, c in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[r, c], -2.0, 2.0);
        check(one("a", x.clone()), seed, |t, v| t.softmax_rows(v["a"], None));
        let mut mask: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.3)).collect();
        mask[0] = false;
        check(one("a", x), seed, move |t, v| t.softmax_rows(v["a"], Some(&mask)));
    }

    // two columns normalise to about ±1, which leaves input gradients at the rounding floor
    #[test]
    fn layer_norm(r in 1usize..4, c in 3usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = BTreeMap::from([
            ("x".to_string(), random(&mut rng, &[r, c], -2.0, 2.0)),
            ("g".to_string(), random(&mut rng, &[c], 0.5, 1.5)),
            ("b".to_string(), random(&mut rng, &[c], -0.5, 0.5)),
        ]);
        check(inputs, seed, |t, v| t.layer_norm_rows(v["x"], v["g"], v["b"], 1e-5));
    }

    #[test]
    fn indexing(r in 2usize..6, c in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[r, c], -1.0, 1.0);
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..r)).collect();
        let rows: Vec<usize> = (0..2).map(|_| rng.gen_range(0..r)).collect();
        let start = rng.gen_range(0..c - 1);
        check(one("a", x.clone()), seed, move |t, v| t.gather_rows(v["a"], &ids));
        check(one("a", x.clone()), seed, move |t, v| t.select_rows(v["a"], &rows));
        check(one("a", x.clone()), seed, move |t, v| t.slice_cols(v["a"], start, c - start));
        let y = random(&mut rng, &[r, 2], -1.0, 1.0);
        check(two(x, y), seed, |t, v| t.concat_cols(&[v["a"], v["b"]]));
    }

    #[test]
    fn reductions(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[r, c], -2.0, 2.0);
        check(one("a", x.clone()), seed, |t, v| t.sum(v["a"]));
        check(one("a", x.clone()), seed, |t, v| t.max(v["a"]));
        check(one("a", x.clone()), seed, |t, v| t.relu(v["a"]));
        let mask: Vec<f64> = (0..r * c).map(|i| (i % 2) as f64).collect();
        check(one("a", x), seed, move |t, v| t.mask_mul(v["a"], mask.clone()));
    }
}

#[test]
fn max_tie_is_excluded() {
    let mut g = Graph::new(|t, v| t.max(v["a"]));
    let inputs = one("a", Tensor::vector(vec![1.0, 1.0, 0.0]));
    let report = finite_diff_check(&mut g, &inputs, STEP, TOL).unwrap();
    assert!(report.passed);
    assert!(report.excluded >= 1);
}

#[test]
fn relu_kink_is_excluded() {
    let mut g = Graph::new(|t, v| {
        let r = t.relu(v["a"])?;
        t.sum(r)
    });
    let inputs = one("a", Tensor::vector(vec![0.0, 2.0]));
    let report = finite_diff_check(&mut g, &inputs, STEP, TOL).unwrap();
    assert!(report.passed);
    assert_eq!(report.excluded, 1);
}
