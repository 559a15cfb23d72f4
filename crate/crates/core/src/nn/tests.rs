use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{central_difference, compare_gradients};

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn concat_of_three_and_five() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let b = t.constant(Tensor::matrix(1, 5, vec![4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = t.concat_cols(&[a, b]).unwrap();
    assert_eq!(t.value(c).shape(), &[1, 8]);
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn relu_values() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = t.relu(a);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, c) = (5, 7, 3);
    let x = rand_tensor(&[h, w, c], &mut rng);
    let mut k = Tensor::zeros(&[3, 3, c, c]);
    for ch in 0..c {
        // center tap (1,1), in=ch, out=ch
        k.data_mut()[((1 * 3 + 1) * c + ch) * c + ch] = 1.0;
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k);
    let bv = t.constant(Tensor::zeros(&[c]));
    let y = t.conv3x3(xv, kv, bv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(t.matmul(a, b).is_err());
    let c = t.constant(Tensor::zeros(&[3]));
    assert!(t.add(a, c).is_err());
}

#[test]
fn linear_loss_gradient_is_input() {
    let mut t = Tape::new();
    let x = Tensor::from_vec(vec![0.5, -2.0, 3.25]);
    let w = t.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let xv = t.constant(x.clone());
    let p = t.mul(w, xv).unwrap();
    let loss = t.sum(p);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap(), x.data());
    assert!(t.grad(xv).is_none());
}

#[test]
fn detached_tensor_gets_no_gradient() {
    let mut t = Tape::new();
    let w = t.param(Tensor::from_vec(vec![1.0, 2.0]));
    let d = t.detach(w);
    let e = t.exp(d);
    let f = t.add(e, w).unwrap();
    let loss = t.sum(f);
    t.backward(loss).unwrap();
    assert!(t.grad(d).is_none());
    assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_needs_scalar() {
    let mut t = Tape::new();
    let w = t.param(Tensor::from_vec(vec![1.0, 2.0]));
    let e = t.exp(w);
    assert!(matches!(t.backward(e), Err(crate::Error::Contract(_))));
}

fn mlp_loss(store: &ParamStore, mlp: &Mlp, x: &Tensor, target: &Tensor) -> (Tape, Bound, Var) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, &bound, xv).unwrap();
    let yt = tape.tanh(y);
    let loss = tape.l1_to(yt, target).unwrap();
    (tape, bound, loss)
}

fn check_mlp(store: &ParamStore, mlp: &Mlp, x: &Tensor, target: &Tensor) {
    let (mut tape, bound, loss) = mlp_loss(store, mlp, x, target);
    tape.backward(loss).unwrap();
    for id in store.ids() {
        let analytic = tape.grad(bound.var(id)).unwrap().to_vec();
        let base = store.get(id).data().to_vec();
        let numeric = central_difference(&base, 1e-6, |p| {
            let mut s = store.clone();
            s.get_mut(id).data_mut().copy_from_slice(p);
            let (tape, _, loss) = mlp_loss(&s, mlp, x, target);
            tape.value(loss).item()
        });
        let r = compare_gradients(&analytic, &numeric, 1e-4, 1e-10);
        assert!(r.passed(), "{}: {r:?}", store.name(id));
    }
}

#[test]
fn two_layer_mlp_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 3], Activation::Relu, &mut rng);
    for id in store.ids() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_tensor(&shape, &mut rng);
    }
    let x = rand_tensor(&[5, 4], &mut rng);
    let target = rand_tensor(&[5, 3], &mut rng);
    check_mlp(&store, &mlp, &x, &target);
}

#[test]
fn zero_init_last_layer_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[4, 8, 8, 3], Activation::Relu, &mut rng);
    let before: Vec<Tensor> = mlp.layers[..2]
        .iter()
        .flat_map(|l| [store.get(l.weight).clone(), store.get(l.bias).clone()])
        .collect();
    zero_init_last_layer(&mlp, &mut store);
    let after: Vec<Tensor> = mlp.layers[..2]
        .iter()
        .flat_map(|l| [store.get(l.weight).clone(), store.get(l.bias).clone()])
        .collect();
    assert_eq!(before, after);

    let x = rand_tensor(&[7, 4], &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, &bound, xv).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let target = rand_tensor(&[7, 3], &mut rng);
    check_mlp(&store, &mlp, &x, &target);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::from_vec(vec![0.3, -1.2]));
    let mut st = AdamState::new(&store, DEFAULT_LR);
    let before = store.clone();
    adam_step(&mut store, &[(id, &[0.0, 0.0])], &mut st);
    assert_eq!(store, before);
}

#[test]
fn adam_first_step_closed_form() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::from_vec(vec![1.0, 1.0, 1.0]));
    let mut st = AdamState::new(&store, 1e-4);
    let g = [0.5, -3.0, 1e-3];
    adam_step(&mut store, &[(id, &g)], &mut st);
    for (k, &gk) in g.iter().enumerate() {
        // m̂ = g, v̂ = g² after bias correction at t = 1
        let m_hat = (0.1 * gk) / 0.1;
        let v_hat = (0.001 * gk * gk) / (1.0 - 0.999);
        let want = 1.0 - 1e-4 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((store.get(id).data()[k] - want).abs() < 1e-15);
        assert!(((1.0 - store.get(id).data()[k]) - 1e-4 * gk.signum()).abs() < 1e-8);
    }
}

fn train_run(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], Activation::Tanh, &mut rng);
    let x = rand_tensor(&[4, 3], &mut rng);
    let target = rand_tensor(&[4, 2], &mut rng);
    let mut st = AdamState::new(&store, 1e-2);
    for _ in 0..20 {
        let (mut tape, bound, loss) = mlp_loss(&store, &mlp, &x, &target);
        tape.backward(loss).unwrap();
        let grads: Vec<(ParamId, Vec<f64>)> = store
            .ids()
            .map(|id| (id, tape.grad(bound.var(id)).unwrap().to_vec()))
            .collect();
        let refs: Vec<(ParamId, &[f64])> = grads.iter().map(|(i, g)| (*i, g.as_slice())).collect();
        adam_step(&mut store, &refs, &mut st);
    }
    store
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    let a = train_run(99);
    let b = train_run(99);
    let ids: Vec<ParamId> = a.ids().collect();
    assert_eq!(a.fingerprint(&ids), b.fingerprint(&ids));
    assert_eq!(a, b);
}
