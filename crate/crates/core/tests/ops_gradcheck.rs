//! Every differentiable primitive against central differences
//! (step 1e-5, max relative error < 1e-5).

use objslot::gradcheck::grad_check;
use objslot::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Contract an arbitrary-shape output to a scalar with fixed random weights so
/// that every output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(rnd(&g.shape(y).to_vec(), 999));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = grad_check(
        |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y)
        },
        inputs,
        STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{name}: {:?}", report.max_rel_err);
}

#[test]
fn matmul_sum_grad_against_differences() {
    let report = grad_check(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        },
        &[rnd(&[3, 3], 1), rnd(&[3, 3], 2)],
        STEP,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.max_rel_err);
}

#[test]
fn binary_ops_with_broadcast() {
    let a = rnd(&[2, 3, 4], 3);
    let b = rnd(&[3, 1], 4);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    let denom = rnd(&[4], 5).map(|x| x + 2.0);
    check("div", &[a.clone(), denom], |g, v| g.div(v[0], v[1]));
    check("scale", &[a.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
    check("add_scalar", &[a], |g, v| Ok(g.add_scalar(v[0], 0.3)));
}

#[test]
fn unary_ops() {
    let x = rnd(&[3, 5], 6);
    check("sigmoid", &[x.clone()], |g, v| Ok(g.sigmoid(v[0])));
    check("tanh", &[x.clone()], |g, v| Ok(g.tanh(v[0])));
    check("gelu", &[x.clone()], |g, v| Ok(g.gelu(v[0])));
    check("exp", &[x.clone()], |g, v| Ok(g.exp(v[0])));
    check("square", &[x.clone()], |g, v| Ok(g.square(v[0])));
    // keep away from the kink at 0
    let shifted = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check("relu", &[shifted], |g, v| Ok(g.relu(v[0])));
    let pos = x.map(|v| v.abs() + 0.5);
    check("log", &[pos], |g, v| g.log(v[0]));
}

#[test]
fn matmul_variants() {
    check("matmul batched lhs", &[rnd(&[2, 3, 4], 7), rnd(&[4, 5], 8)], |g, v| {
        g.matmul(v[0], v[1])
    });
    check("bmm", &[rnd(&[2, 3, 4], 9), rnd(&[2, 4, 2], 10)], |g, v| g.bmm(v[0], v[1]));
}

#[test]
fn layout_ops() {
    let x = rnd(&[2, 3, 4], 11);
    check("permute", &[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check("transpose", &[x.clone()], |g, v| g.transpose(v[0], 1, 2));
    check("reshape", &[x.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check("broadcast_to", &[rnd(&[3, 1], 12)], |g, v| g.broadcast_to(v[0], &[2, 3, 4]));
    check("concat", &[x.clone(), rnd(&[2, 1, 4], 13)], |g, v| g.concat(&[v[0], v[1]], 1));
    check("narrow", &[x.clone()], |g, v| g.narrow(v[0], 2, 1, 2));
    check("index_select", &[x], |g, v| g.index_select(v[0], 1, &[2, 0, 2]));
}

#[test]
fn normalisation_ops() {
    let x = rnd(&[4, 5], 14);
    check("softmax axis 0", &[x.clone()], |g, v| g.softmax(v[0], 0));
    check("softmax axis 1", &[x.clone()], |g, v| g.softmax(v[0], 1));
    check("log_softmax", &[x.clone()], |g, v| g.log_softmax(v[0], 1));
    check(
        "layer_norm",
        &[rnd(&[2, 8], 15), rnd(&[8], 16), rnd(&[8], 17)],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn reductions() {
    let x = rnd(&[3, 4, 2], 18);
    check("sum_axis", &[x.clone()], |g, v| g.sum_axis(v[0], 1));
    check("mean_axis", &[x.clone()], |g, v| g.mean_axis(v[0], 0));
    check("mean", &[x.clone()], |g, v| Ok(g.mean(v[0])));
    check("l2_norm", &[x.clone()], |g, v| g.l2_norm(v[0], 2));
    check("cosine", &[x.clone(), rnd(&[3, 4, 2], 19)], |g, v| {
        g.cosine_similarity(v[0], v[1], 1)
    });
    check("cross_entropy", &[rnd(&[3, 5], 20)], |g, v| g.cross_entropy(v[0], &[0, 4, 2]));
}

#[test]
fn temporal_conv_grads() {
    check(
        "temporal_conv",
        &[rnd(&[3, 2, 4], 21), rnd(&[3, 4], 22), rnd(&[4], 23)],
        |g, v| g.temporal_conv(v[0], v[1], v[2]),
    );
    check(
        "temporal_conv T=1",
        &[rnd(&[1, 2, 4], 24), rnd(&[3, 4], 25), rnd(&[4], 26)],
        |g, v| g.temporal_conv(v[0], v[1], v[2]),
    );
}

#[test]
fn gru_cell_grads() {
    use objslot::layers::{gru_cell, GruVars};
    let d = 4;
    let mut inputs = vec![rnd(&[3, d], 30), rnd(&[3, d], 31)];
    for i in 0..6 {
        inputs.push(rnd(&[d, d], 40 + i));
    }
    for i in 0..3 {
        inputs.push(rnd(&[d], 50 + i));
    }
    let report = grad_check(
        |g, v| {
            let w = GruVars {
                w_z: v[2],
                w_r: v[3],
                w_n: v[4],
                u_z: v[5],
                u_r: v[6],
                u_n: v[7],
                b_z: v[8],
                b_r: v[9],
                b_n: v[10],
            };
            let h = gru_cell(g, v[0], v[1], &w)?;
            Ok(g.sum(h))
        },
        &inputs,
        STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.max_rel_err);
}

#[test]
fn softmax_columns_sum_to_one_and_are_deterministic() {
    let x = rnd(&[4, 5], 60);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.softmax(v, 0).unwrap();
    let y = g.value(y).clone();
    for j in 0..5 {
        let s: f64 = (0..4).map(|i| y.get(&[i, j])).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((0..4).all(|i| (0.0..=1.0).contains(&y.get(&[i, j]))));
    }
    let mut g2 = Graph::new();
    let v2 = g2.constant(x);
    let y2 = g2.softmax(v2, 0).unwrap();
    assert_eq!(g2.value(y2).data(), y.data());
}
