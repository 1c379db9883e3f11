use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spaceedit_tensor::{Graph, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.5..2.0))
}

/// Compare analytic and central-difference gradients of
/// `sum(f(inputs) * probe)` for every input element.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let build = |inputs: &[Tensor<f64>], probe: Option<&Tensor<f64>>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out, probe.cloned())
    };
    let (g0, _, out0, _) = build(&inputs, None);
    let probe = rand_tensor(&mut rng, g0.shape(out0));
    let loss_of = |inputs: &[Tensor<f64>]| {
        let (mut g, _, out, _) = build(inputs, None);
        let p = g.constant(probe.clone());
        let m = g.mul(out, p);
        let l = g.sum_all(m);
        g.value(l).item()
    };
    let (mut g, vars, out, _) = build(&inputs, None);
    let p = g.constant(probe.clone());
    let m = g.mul(out, p);
    let l = g.sum_all(m);
    let grads = g.backward(l);
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient missing").clone();
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-5,
                "input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn broadcast_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    let c = positive_tensor(&mut rng, &[2, 1, 4]);
    check(vec![a, c], |g, v| g.div(v[0], v[1]));
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let p = positive_tensor(&mut rng, &[3, 5]);
    check(vec![a.clone()], |g, v| g.exp(v[0]));
    check(vec![a.clone()], |g, v| g.tanh(v[0]));
    check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![a.clone()], |g, v| g.softplus(v[0]));
    check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.neg(v[0]));
    check(vec![a.clone()], |g, v| g.scale(v[0], 3.0));
    check(vec![a], |g, v| g.shift(v[0], 3.0));
    check(vec![p.clone()], |g, v| g.log(v[0]));
    check(vec![p.clone()], |g, v| g.sqrt(v[0]));
    check(vec![p.clone()], |g, v| g.rsqrt(v[0]));
    check(vec![p], |g, v| g.powf(v[0], 1.7));
}

#[test]
fn reductions_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    check(vec![a.clone()], |g, v| g.sum_keepdim(v[0], &[1]));
    check(vec![a.clone()], |g, v| g.mean_keepdim(v[0], &[0, 2]));
    check(vec![a.clone()], |g, v| g.sum_all(v[0]));
    check(vec![a.clone()], |g, v| g.reshape(v[0], vec![6, 4]));
    check(vec![a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(vec![a.clone()], |g, v| g.narrow(v[0], 2, 1, 2));
    check(vec![a.clone()], |g, v| g.log_softmax(v[0]));
    let b = rand_tensor(&mut rng, &[2, 5, 4]);
    check(vec![a, b], |g, v| g.concat(&[v[0], v[1]], 1));
}

#[test]
fn matmul_all_transpose_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    check(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    let at = rand_tensor(&mut rng, &[4, 3]);
    let bt = rand_tensor(&mut rng, &[5, 4]);
    check(vec![at.clone(), b], |g, v| {
        g.matmul_t(v[0], true, v[1], false)
    });
    check(vec![a, bt.clone()], |g, v| {
        g.matmul_t(v[0], false, v[1], true)
    });
    check(vec![at, bt], |g, v| g.matmul_t(v[0], true, v[1], true));
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let w3 = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let w1 = rand_tensor(&mut rng, &[5, 3, 1, 1]);
    check(vec![x.clone(), w3], |g, v| g.conv2d(v[0], v[1], 1));
    check(vec![x.clone(), w1], |g, v| g.conv2d(v[0], v[1], 0));
    check(vec![x.clone()], |g, v| g.avg_pool2(v[0]));
    check(vec![x], |g, v| g.upsample2(v[0]));
}

/// Direct nested-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (b, ci, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let ho = h + 2 * pad + 1 - kh;
    let wo = wd + 2 * pad + 1 - kw;
    let mut out = Tensor::zeros(vec![b, co, ho, wo]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (k, pad) in [(3, 1), (1, 0), (3, 0), (5, 2)] {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 5]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, pad);
        let expected = conv_oracle(&x, &w, pad);
        assert!(
            g.value(y).max_abs_diff(&expected) < 1e-12,
            "k={k} pad={pad}"
        );
    }
}

#[test]
fn shared_nodes_accumulate() {
    // d/dx (x*x + x) = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]));
    let sq = g.mul(x, x);
    let s = g.add(sq, x);
    let l = g.sum_all(s);
    let grads = g.backward(l);
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::from_f64(vec![2], &[1.0, 2.0]));
    let x = g.variable(Tensor::from_f64(vec![2], &[3.0, 4.0]));
    let y = g.mul(c, x);
    let l = g.sum_all(y);
    let grads = g.backward(l);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}
