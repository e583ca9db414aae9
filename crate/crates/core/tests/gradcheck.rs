mod common;

use common::*;
use pill::graph::{Segments, Var};
use pill::Graph;
use pill::training::{StageKind, TrainStageSpec};
use pill::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Loss `sum(build(inputs) * R)` for a fixed random `R`.
fn weighted_loss(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, grad: bool) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad).unwrap()).collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let weights = random(&shape, &mut ChaCha8Rng::seed_from_u64(99));
    let w = g.constant(weights).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss).item();
    if !grad {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect())
}

fn check(op: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let (_, grads) = weighted_loss(&inputs, &build, true);
    for (k, grad) in grads.iter().enumerate() {
        let grad = grad.as_ref().unwrap_or_else(|| panic!("{op}: input {k} has no gradient"));
        for i in 0..inputs[k].numel() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += H;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= H;
            let numeric = (weighted_loss(&up, &build, false).0 - weighted_loss(&down, &build, false).0) / (2.0 * H);
            let e = rel_err(grad[i], numeric);
            assert!(e < 1e-6, "{op}: input {k}[{i}] analytic {} numeric {numeric}", grad[i]);
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn dense_ops() {
    let mut r = rng();
    check("matmul", vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)], |g, v| g.matmul(v[0], v[1]).unwrap());
    check("matmul_nt", vec![random(&[3, 4], &mut r), random(&[5, 4], &mut r)], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    check("add", vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)], |g, v| g.add(v[0], v[1]).unwrap());
    check("mul", vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)], |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", vec![random(&[2, 3], &mut r)], |g, v| g.scale(v[0], -1.7).unwrap());
    check("add_bias", vec![random(&[3, 4], &mut r), random(&[4], &mut r)], |g, v| g.add_bias(v[0], v[1]).unwrap());
}

#[test]
fn nonlinearities() {
    let mut r = rng();
    check("silu", vec![random(&[3, 4], &mut r)], |g, v| g.silu(v[0]).unwrap());
    check("tanh", vec![random(&[3, 4], &mut r)], |g, v| g.tanh(v[0]).unwrap());
    check("rmsnorm", vec![random(&[3, 6], &mut r), random(&[6], &mut r)], |g, v| g.rmsnorm(v[0], v[1]).unwrap());
    check("softmax", vec![random(&[3, 5], &mut r)], |g, v| g.softmax_lastdim(v[0]).unwrap());
    check("cross_entropy", vec![random(&[4, 5], &mut r)], |g, v| {
        g.cross_entropy(v[0], &[1, 4, 0, 2], &[true, false, true, true]).unwrap()
    });
}

#[test]
fn row_routing_ops() {
    let mut r = rng();
    check("gather_rows", vec![random(&[5, 3], &mut r)], |g, v| g.gather_rows(v[0], &[4, 1, 4, 0]).unwrap());
    check("merge_rows", vec![random(&[2, 3], &mut r), random(&[3, 3], &mut r)], |g, v| {
        g.merge_rows(Some(v[0]), Some(v[1]), &[false, true, true, false, false]).unwrap()
    });
    check("select_rows", vec![random(&[4, 3], &mut r), random(&[4, 3], &mut r)], |g, v| {
        g.select_rows(v[0], v[1], &[true, false, false, true]).unwrap()
    });
}

#[test]
fn sequence_ops() {
    let mut r = rng();
    let segs = Segments::from_lengths(&[3, 4]);
    let positions = segs.positions();
    let mask = [false, true, true, true, true, false, false];
    check("rope", vec![random(&[7, 8], &mut r)], |g, v| g.rope(v[0], &positions, 2).unwrap());
    check("segment_mean_rows", vec![random(&[7, 4], &mut r)], |g, v| {
        g.segment_mean_rows(v[0], &mask, &segs).unwrap()
    });
    check("gate_rows", vec![random(&[7, 4], &mut r), random(&[2, 2], &mut r)], |g, v| {
        g.gate_rows(v[0], v[1], &mask, &segs, 2).unwrap()
    });
    check(
        "causal_attention",
        vec![random(&[7, 4], &mut r), random(&[7, 4], &mut r), random(&[7, 4], &mut r)],
        |g, v| g.causal_attention(v[0], v[1], v[2], &segs, 2).unwrap(),
    );
}

#[test]
fn base_transformer_gradients() {
    let mut model = tiny_model(21, false);
    let mut r = rng();
    let cfg = *model.config();
    let (a, b) = (random_text(&cfg, 7, &mut r), random_text(&cfg, 5, &mut r));
    let spec = TrainStageSpec::empty(StageKind::Base);
    let (worst, at, n) = model_gradcheck(&mut model, &spec, &[&a, &b], H);
    assert_eq!(n, model.store().total_scalars());
    assert!(worst < 1e-4, "worst rel err {worst} at {at}");
}
