use rand::Rng;
use saddle_core::nn::{build_spec, Model, ModelParams, Preset};
use saddle_core::seed;
use saddle_core::tensor::{ops, Padding};
use saddle_core::{Tape, Tensor, Var};

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random(shape: &[usize], lo: f64, hi: f64, s: u64) -> Tensor {
    let mut rng = seed::stream(s, &[]);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

/// Values away from zero by at least 0.1, random sign.
fn away_from_zero(shape: &[usize], s: u64) -> Tensor {
    let mut rng = seed::stream(s, &[]);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

fn with(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Compares tape gradients of a scalar graph with central differences for
/// every element of every input; returns the largest relative error.
fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.var(x.clone())).collect();
        let root = build(&mut t, &vs);
        t.value(root).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).unwrap();
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k] = with(x, i, x.data()[i] + H);
            minus[k] = with(x, i, x.data()[i] - H);
            let num = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[i], num));
        }
    }
    worst
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any tensor into a scalar with
/// a non-uniform upstream gradient.
fn weigh(t: &mut Tape, out: Var, s: u64) -> Var {
    let r = random(t.value(out).shape(), -1.0, 1.0, s);
    let rv = t.constant(r);
    let m = t.mul(out, rv).unwrap();
    t.sum(m)
}

#[test]
fn affine_gradients() {
    let ins = [random(&[3, 4], -1.0, 1.0, 1), random(&[4, 5], -1.0, 1.0, 2), random(&[5], -1.0, 1.0, 3)];
    let e = check(&ins, |t, v| {
        let o = t.affine(v[0], v[1], v[2]).unwrap();
        weigh(t, o, 9)
    });
    assert!(e < 1e-6, "affine rel err {e}");
}

#[test]
fn conv_gradients_same_and_valid() {
    for (pad, s) in [(Padding::Same, 10), (Padding::Valid, 20)] {
        let ins = [
            random(&[2, 5, 5, 2], -1.0, 1.0, s),
            random(&[3, 3, 2, 3], -1.0, 1.0, s + 1),
            random(&[3], -1.0, 1.0, s + 2),
        ];
        let e = check(&ins, |t, v| {
            let o = t.conv2d(v[0], v[1], v[2], pad).unwrap();
            weigh(t, o, s + 3)
        });
        assert!(e < 1e-6, "{pad:?} conv rel err {e}");
    }
}

#[test]
fn maxpool_and_relu_gradients() {
    let x = away_from_zero(&[2, 4, 4, 2], 30);
    let e = check(&[x.clone()], |t, v| {
        let o = t.maxpool2(v[0]).unwrap();
        weigh(t, o, 31)
    });
    assert!(e < 1e-6, "maxpool rel err {e}");
    let e = check(&[x], |t, v| {
        let o = t.relu(v[0]);
        weigh(t, o, 32)
    });
    assert!(e < 1e-6, "relu rel err {e}");
}

#[test]
fn standardize_gradient() {
    let x = random(&[2, 3, 3, 2], 0.0, 1.0, 40);
    let e = check(&[x], |t, v| {
        let o = t.standardize(v[0]).unwrap();
        weigh(t, o, 41)
    });
    assert!(e < 1e-5, "standardize rel err {e}");
}

#[test]
fn xent_gradients_mean_and_sum() {
    let z = random(&[3, 4], -2.0, 2.0, 50);
    let labels = [1, 3, 0];
    let e = check(&[z.clone()], |t, v| t.softmax_xent(v[0], &labels).unwrap());
    assert!(e < 1e-6, "mean xent rel err {e}");
    let e = check(&[z], |t, v| t.softmax_xent_sum(v[0], &labels).unwrap());
    assert!(e < 1e-6, "sum xent rel err {e}");
}

#[test]
fn cw_margin_gradient_away_from_ties_and_clip() {
    let z = Tensor::new(vec![2, 3], vec![1.0, 0.2, -0.5, -1.0, 3.0, 0.5]).unwrap();
    let labels = [0, 2];
    // first row active (margin -0.8 < 1), second row clipped (2.5 ≥ 1)
    let e = check(&[z], |t, v| t.cw_margin_sum(v[0], &labels, 1.0).unwrap());
    assert!(e < 1e-6, "cw rel err {e}");
}

#[test]
fn backward_is_linear() {
    let x = random(&[2, 6], -1.0, 1.0, 60);
    let w = random(&[6, 4], -1.0, 1.0, 61);
    let b = random(&[4], -1.0, 1.0, 62);
    let labels = [2, 0];
    let grads = |a: f64, c: f64| {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.var(x.clone()), t.var(w.clone()), t.var(b.clone()));
        let z = t.affine(xv, wv, bv).unwrap();
        let l1 = t.softmax_xent(z, &labels).unwrap();
        let r = t.relu(z);
        let l2 = t.sum(r);
        let s1 = t.scale(l1, a).unwrap();
        let s2 = t.scale(l2, c).unwrap();
        let root = t.add(s1, s2).unwrap();
        let g = t.backward(root).unwrap();
        [xv, wv, bv].map(|v| g.get(v).unwrap())
    };
    let (a, c) = (0.7, -1.3);
    let combo = grads(a, c);
    let g1 = grads(1.0, 0.0);
    let g2 = grads(0.0, 1.0);
    for k in 0..3 {
        for i in 0..combo[k].len() {
            let want = a * g1[k].data()[i] + c * g2[k].data()[i];
            assert!((combo[k].data()[i] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn root_must_be_scalar() {
    let mut t = Tape::new();
    let x = t.var(Tensor::zeros(&[2, 2]));
    assert!(t.backward(x).is_err());
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let x = random(&[3, 2], -1.0, 1.0, 70);
    let mut t = Tape::new();
    let v = t.var(x.clone());
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq);
    let root = t.scale(s, 0.5).unwrap();
    let g = t.backward(root).unwrap().get(v).unwrap();
    assert_eq!(g.data(), x.data());
}

#[test]
fn xent_is_shift_invariant_and_saturates() {
    let z = random(&[4, 10], -3.0, 3.0, 80);
    let labels = [0, 3, 9, 5];
    let base = ops::xent_rows(&z, &labels).unwrap();
    let shifted = ops::xent_rows(&z.map(|v| v + 123.4).unwrap(), &labels).unwrap();
    for (a, b) in base.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-10);
    }
    let sat = Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
    assert!(ops::xent_rows(&sat, &[0]).unwrap()[0] < 1e-20);
}

/// Full conv-pool-relu-affine-xent network: sampled parameter and input
/// coordinates against central differences.
#[test]
fn full_network_gradients() {
    let spec = build_spec(Preset::MnistCapacity, 1).unwrap();
    let model = Model::init(spec.clone(), 3).unwrap();
    let x = random(&[2, 28, 28, 1], 0.0, 1.0, 90);
    let labels = [4, 7];
    let (_, pgrads) = model.param_gradient(&x, &labels).unwrap();

    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let pv = model.params_on(&mut tape, false);
    let z = model.record(&mut tape, xv, &pv).unwrap();
    let root = tape.softmax_xent(z, &labels).unwrap();
    let xg = tape.backward(root).unwrap().get(xv).unwrap();

    let loss_with = |params: &ModelParams, x: &Tensor| Model::new(spec.clone(), params.clone()).unwrap().loss(x, &labels).unwrap();
    let mut rng = seed::stream(91, &[]);
    let groups = model.params.tensors.len() + 1;
    let mut worst: f64 = 0.0;
    for probe in 0..36 {
        let g = probe % groups;
        if g == groups - 1 {
            let i = rng.random_range(0..x.len());
            let v = x.data()[i];
            let num = (loss_with(&model.params, &with(&x, i, v + H)) - loss_with(&model.params, &with(&x, i, v - H))) / (2.0 * H);
            worst = worst.max(rel_err(xg.data()[i], num));
        } else {
            let t = &model.params.tensors[g];
            let i = rng.random_range(0..t.len());
            let v = t.data()[i];
            let mut p = model.params.clone();
            p.tensors[g] = with(t, i, v + H);
            let up = loss_with(&p, &x);
            p.tensors[g] = with(t, i, v - H);
            let down = loss_with(&p, &x);
            worst = worst.max(rel_err(pgrads[g].data()[i], (up - down) / (2.0 * H)));
        }
    }
    assert!(worst < 1e-4, "network rel err {worst}");
}
