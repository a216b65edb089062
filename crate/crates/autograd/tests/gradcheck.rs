//! Central finite differences against the analytic backward pass of every op.

use std::sync::Arc;

use fsaug_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks `d/d inputs sum(f(inputs) * probe)` against central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |vals: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
        let out = f(&g, &vars);
        let shape = out.shape();
        let probe = probe.cloned().unwrap_or_else(|| Tensor::full(&shape, 1.0));
        let loss = out.mul(g.constant(probe.clone())).sum();
        let grads = g.backward(loss);
        let gs = vars.iter().map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect();
        (loss.value().item(), gs, probe)
    };
    let (_, _, shape_probe) = eval(&inputs, None);
    let probe = random(&mut rng, shape_probe.shape());
    let (_, analytic, _) = eval(&inputs, Some(&probe));
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(err < 1e-5, "input {i} element {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise() {
    let mut r = rng();
    let (a, b) = (random(&mut r, &[3, 4]), random(&mut r, &[3, 4]));
    check(vec![a.clone(), b.clone()], |_, v| v[0].mul(v[1]).add(v[0]).sub(v[1].square()));
    check(vec![a.clone()], |_, v| v[0].tanh().scale(1.7).add_scalar(0.3));
    check(vec![a.map(|x| x * 10.0)], |_, v| v[0].softplus());
    check(vec![a.clone()], |_, v| v[0].leaky_relu(0.2).neg());
    check(vec![a], |_, v| v[0].mean().reshape(&[1]));
}

#[test]
fn matmul_and_bias() {
    let mut r = rng();
    let (a, b, c) = (random(&mut r, &[3, 5]), random(&mut r, &[5, 2]), random(&mut r, &[2]));
    check(vec![a, b, c], |_, v| v[0].matmul(v[1]).add_bias(v[2]));
}

#[test]
fn conv_and_resampling() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 6, 5]);
    let w3 = random(&mut r, &[4, 3, 3, 3]);
    let w1 = random(&mut r, &[2, 3, 1, 1]);
    let bias = random(&mut r, &[4]);
    check(vec![x.clone(), w3, bias], |_, v| v[0].conv2d(v[1]).add_channel_bias(v[2]));
    check(vec![x.clone(), w1], |_, v| v[0].conv2d(v[1]));
    check(vec![x.clone()], |_, v| v[0].upsample2x());
    check(vec![x.clone()], |_, v| v[0].avg_pool2x());
    check(vec![x], |_, v| v[0].sum_spatial().scale(0.5));
}

#[test]
fn normalization_and_modulation() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 4, 4]);
    let s = random(&mut r, &[2, 3]);
    let t = random(&mut r, &[2, 3]);
    check(vec![x.clone()], |_, v| v[0].instance_norm(1e-5));
    check(vec![x, s, t], |_, v| v[0].instance_norm(1e-5).modulate(v[1], v[2]));
}

#[test]
fn indexing_ops() {
    let mut r = rng();
    let table = random(&mut r, &[5, 3]);
    let other = random(&mut r, &[4, 2]);
    check(vec![table.clone(), other], |_, v| v[0].gather_rows(&[4, 1, 1, 0]).concat_cols(v[1]).slice_cols(1, 3));
    check(vec![table.clone()], |_, v| v[0].sum_cols());
    check(vec![table.clone()], |_, v| v[0].broadcast_batch(3));
    let map = Arc::new(vec![Some(3), None, Some(3), Some(14), Some(0), None]);
    check(vec![table], move |_, v| v[0].gather_elements(&[2, 3], map.clone()));
}

#[test]
fn cross_entropy_with_soft_targets() {
    let mut r = rng();
    let logits = random(&mut r, &[4, 3]);
    let target = Tensor::new(&[4, 3], vec![1.0, 0.0, 0.0, 0.3, 0.7, 0.0, 0.0, 0.0, 1.0, 0.5, 0.25, 0.25]);
    check(vec![logits], move |_, v| v[0].scale(3.0).softmax_cross_entropy(&target));
}

#[test]
fn unselected_rows_get_exact_zero_gradient() {
    let g = Graph::<f32>::new();
    let table = g.param(Arc::new(Tensor::full(&[4, 2], 0.5)));
    let loss = table.gather_rows(&[2, 3, 2]).square().sum();
    let grads = g.backward(loss);
    let d = grads.wrt(table).unwrap();
    assert!(d.data()[..4].iter().all(|v| v.to_bits() == 0));
    assert_eq!(d.data()[4], 2.0);
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2], 1.0));
    let p = g.param(Arc::new(Tensor::full(&[2], 2.0)));
    let loss = c.mul(p).sum();
    let grads = g.backward(loss);
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(p).unwrap().data(), &[1.0, 1.0]);
}
