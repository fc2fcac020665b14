use proptest::prelude::*;
use puma_nn::gradcheck;
use puma_nn::{Checkpoint, Graph, NnError, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Inputs kept away from zero so kinked ops are differentiable at every probe point.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts `y` against a fixed random tensor so every output entry matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_grad<F>(store: &mut ParamStore<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let report = gradcheck::check(store, STEP, 64, f).unwrap();
    for (name, rel, norm) in &report.entries {
        assert!(*rel < TOL, "{name}: relative error {rel:e}");
        assert!(*norm > 0.0, "{name}: zero analytic gradient");
    }
}

fn store_with(inputs: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in inputs {
        s.add(n, t.clone()).unwrap();
    }
    s
}

macro_rules! unary_check {
    ($name:ident, $method:ident, $away:expr) => {
        #[test]
        fn $name() {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x = if $away { random_away_from_zero(&mut rng, &[3, 4]) } else { random(&mut rng, &[3, 4], 1.5) };
            let mut s = store_with(&[("x", x)]);
            assert_grad(&mut s, |g, s| {
                let x = g.param(s, s.id("x")?);
                let y = g.$method(x);
                probe(g, y, 5)
            });
        }
    };
}

unary_check!(grad_exp, exp, false);
unary_check!(grad_tanh, tanh, false);
unary_check!(grad_sigmoid, sigmoid, false);
unary_check!(grad_elu, elu, true);
unary_check!(grad_relu, relu, true);
unary_check!(grad_square, square, false);
unary_check!(grad_softmax, softmax, false);
unary_check!(grad_sum_last, sum_last, false);

#[test]
fn grad_sum_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = store_with(&[("x", random(&mut rng, &[2, 5], 1.0))]);
    assert_grad(&mut s, |g, s| {
        let x = g.param(s, s.id("x")?);
        let sq = g.square(x);
        let a = g.sum(sq);
        let b = g.mean(x);
        let b = g.scale(b, 3.0);
        g.add(a, b)
    });
}

#[test]
fn grad_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[4, 3], 1.0);
    let b = random_away_from_zero(&mut rng, &[4, 3]);
    let mut s = store_with(&[("a", a), ("b", b)]);
    assert_grad(&mut s, |g, s| {
        let a = g.param(s, s.id("a")?);
        let b = g.param(s, s.id("b")?);
        let x = g.add(a, b)?;
        let y = g.sub(a, b)?;
        let z = g.mul(x, y)?;
        let z = g.add_scalar(z, 0.3);
        probe(g, z, 3)
    });
}

#[test]
fn grad_minimum_and_clamp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Separate the two operands so no probe crosses the kink.
    let a = random(&mut rng, &[12], 1.0);
    let b = Tensor::new(&[12], a.data().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 0.5 } else { v - 0.5 }).collect()).unwrap();
    let c = Tensor::from_f64(&[6], &[-2.0, -0.5, 0.2, 0.7, 1.9, 3.0]).unwrap();
    let mut s = store_with(&[("a", a), ("b", b), ("c", c)]);
    assert_grad(&mut s, |g, s| {
        let a = g.param(s, s.id("a")?);
        let b = g.param(s, s.id("b")?);
        let c = g.param(s, s.id("c")?);
        let m = g.minimum(a, b)?;
        let cl = g.clamp(c, -1.0, 1.0);
        let p = probe(g, m, 1)?;
        let q = probe(g, cl, 2)?;
        g.add(p, q)
    });
}

#[test]
fn grad_matmul_and_row_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = store_with(&[
        ("a", random(&mut rng, &[2, 3, 4], 1.0)),
        ("b", random(&mut rng, &[4, 5], 1.0)),
        ("r", random(&mut rng, &[5], 1.0)),
        ("m", random(&mut rng, &[5], 1.0)),
    ]);
    assert_grad(&mut s, |g, s| {
        let a = g.param(s, s.id("a")?);
        let b = g.param(s, s.id("b")?);
        let r = g.param(s, s.id("r")?);
        let m = g.param(s, s.id("m")?);
        let y = g.matmul(a, b)?;
        let y = g.add_row(y, r)?;
        let y = g.mul_row(y, m)?;
        probe(g, y, 9)
    });
}

#[test]
fn grad_slice_concat_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = store_with(&[("a", random(&mut rng, &[2, 3, 4], 1.0)), ("b", random(&mut rng, &[2, 2, 4], 1.0))]);
    assert_grad(&mut s, |g, s| {
        let a = g.param(s, s.id("a")?);
        let b = g.param(s, s.id("b")?);
        let c = g.concat(&[a, b], 1)?;
        let d = g.slice(c, 1, 1, 4)?;
        let e = g.slice(d, 2, 1, 3)?;
        let f = g.reshape(e, &[2, 6])?;
        let sq = g.square(f);
        probe(g, sq, 4)
    });
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = store_with(&[
        ("x", random(&mut rng, &[2, 2, 7, 6], 1.0)),
        ("w", random(&mut rng, &[3, 2, 3, 3], 0.5)),
        ("b", random(&mut rng, &[3], 0.5)),
    ]);
    assert_grad(&mut s, |g, s| {
        let x = g.param(s, s.id("x")?);
        let w = g.param(s, s.id("w")?);
        let b = g.param(s, s.id("b")?);
        let y = g.conv2d(x, w, b, 2, 1)?;
        assert_eq!(g.shape(y), &[2, 3, 4, 3]);
        probe(g, y, 8)
    });
}

#[test]
fn grad_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = store_with(&[
        ("q", random(&mut rng, &[2, 5, 8], 1.0)),
        ("k", random(&mut rng, &[2, 5, 8], 1.0)),
        ("v", random(&mut rng, &[2, 5, 8], 1.0)),
    ]);
    assert_grad(&mut s, |g, s| {
        let q = g.param(s, s.id("q")?);
        let k = g.param(s, s.id("k")?);
        let v = g.param(s, s.id("v")?);
        let y = g.scaled_dot_attention(q, k, v, 2)?;
        probe(g, y, 10)
    });
}

#[test]
fn grad_gru_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = store_with(&[
        ("x", random(&mut rng, &[3, 4], 1.0)),
        ("h", random(&mut rng, &[3, 5], 1.0)),
        ("wi", random(&mut rng, &[4, 15], 0.7)),
        ("wh", random(&mut rng, &[5, 15], 0.7)),
        ("bi", random(&mut rng, &[15], 0.3)),
        ("bh", random(&mut rng, &[15], 0.3)),
    ]);
    assert_grad(&mut s, |g, s| {
        let ids = ["x", "h", "wi", "wh", "bi", "bh"].map(|n| s.id(n).unwrap());
        let [x, h, wi, wh, bi, bh] = ids.map(|id| g.param(s, id));
        let y = g.gru_cell(x, h, wi, wh, bi, bh)?;
        probe(g, y, 12)
    });
}

#[test]
fn matmul_identity_and_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random(&mut rng, &[3, 4], 2.0);
    let b = random(&mut rng, &[4, 2], 2.0);
    let mut s = ParamStore::new();
    let ia = s.add("a", a.clone()).unwrap();
    let ib = s.add("b", b.clone()).unwrap();
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let va = g.param(&s, ia);
    let prod = g.matmul(eye, va).unwrap();
    assert_eq!(g.value(prod), &a);

    // d/dA sum(A B) = 1 * B^T: every row of the gradient equals the row sums of B.
    let vb = g.param(&s, ib);
    let ab = g.matmul(va, vb).unwrap();
    let total = g.sum(ab);
    g.backward(total).unwrap();
    let ga = g.grad(va).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let expected: f64 = b.row(p).iter().sum();
            assert_eq!(ga[i * 4 + p], expected);
        }
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, NnError::ShapeMismatch { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(g.add(a, b).unwrap_err().to_string().contains("[4, 5]"));
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2]));
    assert!(g.backward(a).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("w", Tensor::full(&[2], 2.0)).unwrap();
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2], 3.0));
    let w = g.param(&s, id);
    let y = g.mul(c, w).unwrap();
    let y = g.sum(y);
    g.backward(y).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(w).unwrap(), &[3.0, 3.0]);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f32>::new();
    let mlp = puma_nn::Mlp::new(&mut store, "net", &[6, 8, 3], puma_nn::Activation::Elu, puma_nn::Init::Scaled(1.0), &mut rng).unwrap();
    let x = Tensor::<f32>::new(&[2, 6], (0..12).map(|i| i as f32 * 0.1 - 0.5).collect()).unwrap();
    let forward = |s: &ParamStore<f32>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mlp.forward(&mut g, s, xv).unwrap();
        g.value(y).clone()
    };
    let before = forward(&store);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut ckpt = Checkpoint::new();
    ckpt.push_params(&store);
    ckpt.save(&path).unwrap();

    let mut fresh = store.clone();
    for id in fresh.ids().collect::<Vec<_>>() {
        fresh.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Checkpoint::load(&path).unwrap().load_params(&mut fresh).unwrap();
    let after = forward(&fresh);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3, 4], values).unwrap());
        let y = g.softmax(x);
        for r in 0..3 {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
