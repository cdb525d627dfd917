use oilad_core::autodiff::{gradcheck, AutodiffError, Graph, Tensor, Var};
use oilad_core::policy::{PolicyConfig, TransformerPolicy};
use oilad_core::rng;
use oilad_core::training::{action_loss_rows, spearman_loss_graph, state_values_graph, TrainError};
use rand::Rng;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

type Build = fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>;

fn rand_tensor(r: &mut rng::Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in [0.5, 2] and random sign.
fn away_from_zero(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = r.gen_range(0.5..2.0);
            if r.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn check(name: &str, seed: u64, inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>) {
    let res = gradcheck::<AutodiffError, _>(inputs, H, seed, build).unwrap();
    assert!(res.max_rel_error < TOL, "{name} seed {seed}: relative error {:.3e}", res.max_rel_error);
}

#[test]
fn elementwise_binary_ops_with_broadcasting() {
    let ops: [(&str, Build); 4] = [
        ("add", |g, v| g.add(v[0], v[1])),
        ("sub", |g, v| g.sub(v[0], v[1])),
        ("mul", |g, v| g.mul(v[0], v[1])),
        ("div", |g, v| g.div(v[0], v[1])),
    ];
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 1);
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        let a = rand_tensor(&mut r, m, n, -2.0, 2.0);
        for rhs_shape in [[m, n], [1, 1], [1, n], [m, 1]] {
            let b = away_from_zero(&mut r, rhs_shape[0], rhs_shape[1]);
            for (name, op) in ops {
                check(name, seed, &[a.clone(), b.clone()], op);
            }
        }
    }
}

#[test]
fn unary_ops() {
    let ops: [(&str, Build, f64, f64); 7] = [
        ("scale", |g, v| g.scale(v[0], -1.7), -3.0, 3.0),
        ("add_scalar", |g, v| g.add_scalar(v[0], 0.3), -3.0, 3.0),
        ("log", |g, v| g.log(v[0]), 0.2, 3.0),
        ("exp", |g, v| g.exp(v[0]), -2.0, 2.0),
        ("sqrt", |g, v| g.sqrt(v[0]), 0.2, 3.0),
        ("tanh", |g, v| g.tanh(v[0]), -3.0, 3.0),
        ("gelu", |g, v| g.gelu(v[0]), -3.0, 3.0),
    ];
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 2);
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        for (name, op, lo, hi) in ops {
            check(name, seed, &[rand_tensor(&mut r, m, n, lo, hi)], op);
        }
    }
}

#[test]
fn matrix_and_reduction_ops() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 3);
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let a = rand_tensor(&mut r, m, k, -1.5, 1.5);
        let b = rand_tensor(&mut r, k, n, -1.5, 1.5);
        check("matmul", seed, &[a.clone(), b], |g, v| g.matmul(v[0], v[1]));
        check("transpose", seed, &[a.clone()], |g, v| g.transpose(v[0]));
        check("sum", seed, &[a.clone()], |g, v| g.sum(v[0]));
        check("mean", seed, &[a.clone()], |g, v| g.mean(v[0]));
        check("row_sum", seed, &[a.clone()], |g, v| g.row_sum(v[0]));
        let idx: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..m)).collect();
        check("gather_rows", seed, &[a.clone()], |g, v| g.gather_rows(v[0], &idx));
        let cols: Vec<usize> = (0..m).map(|_| r.gen_range(0..k)).collect();
        check("pick_per_row", seed, &[a.clone()], |g, v| g.pick_per_row(v[0], &cols));
        let c = rand_tensor(&mut r, m, n, -1.0, 1.0);
        check("concat_cols", seed, &[a.clone(), c], |g, v| g.concat_cols(&[v[0], v[1]]));
        let start = r.gen_range(0..k);
        let len = r.gen_range(1..=k - start);
        check("slice_cols", seed, &[a], |g, v| g.slice_cols(v[0], start, len));
    }
}

#[test]
fn softmax_family_layer_norm_and_dropout() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 4);
        let (m, n) = (r.gen_range(1..5), r.gen_range(2..6));
        let a = rand_tensor(&mut r, m, n, -2.0, 2.0);
        check("row_softmax", seed, &[a.clone()], |g, v| g.row_softmax(v[0]));
        check("row_log_softmax", seed, &[a.clone()], |g, v| g.row_log_softmax(v[0]));
        let sq = rand_tensor(&mut r, n, n, -2.0, 2.0);
        check("causal_softmax", seed, &[sq], |g, v| g.causal_softmax(v[0]));
        let gain = rand_tensor(&mut r, 1, n, 0.5, 1.5);
        let bias = rand_tensor(&mut r, 1, n, -0.5, 0.5);
        check("layer_norm", seed, &[a.clone(), gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        check("dropout(train)", seed, &[a.clone()], |g, v| g.dropout(v[0], 0.3, seed, true));
        check("dropout(eval)", seed, &[a], |g, v| g.dropout(v[0], 0.3, seed, false));
    }
}

#[test]
fn soft_rank_vjp() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 5);
        let t = r.gen_range(2..12);
        let x = rand_tensor(&mut r, t, 1, -3.0, 3.0);
        let eps = [0.1, 0.5, 1.0, 3.0][seed as usize % 4];
        check("soft_rank", seed, &[x.clone()], |g, v| g.soft_rank(v[0], eps));
        check("soft_rank(row)", seed, &[x.clone()], |g, v| {
            let row = g.transpose(v[0])?;
            g.soft_rank(row, eps)
        });
    }
}

fn tiny_model(seed: u64, dropout: f64) -> TransformerPolicy {
    let cfg = PolicyConfig {
        state_dim: 3,
        action_count: 4,
        embed_dim: 8,
        layer_count: 1 + (seed % 2) as usize,
        head_count: 2,
        dropout,
        max_seq_len: 8,
        ffn_dim: 8,
    };
    TransformerPolicy::new(cfg, seed).unwrap()
}

#[test]
fn transformer_forward() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 6);
        let train = seed % 3 == 0;
        let model = tiny_model(seed, if train { 0.2 } else { 0.0 });
        let t = r.gen_range(1..7);
        let states = rand_tensor(&mut r, t, 3, 0.0, 1.0);
        let res = gradcheck::<TrainError, _>(model.params(), H, seed, |g, vars| {
            Ok(model.forward_graph(g, vars, &states, train, seed ^ 0x77)?)
        })
        .unwrap();
        assert!(res.max_rel_error < TOL, "transformer seed {seed}: {:.3e}", res.max_rel_error);
    }
}

#[test]
fn action_and_monotonicity_losses() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 7);
        let (t, na) = (r.gen_range(1..9), r.gen_range(2..6));
        let q = rand_tensor(&mut r, t, na, -3.0, 3.0);
        let actions: Vec<usize> = (0..t).map(|_| r.gen_range(0..na)).collect();
        let alpha = r.gen_range(0.0..0.3);
        let res = gradcheck::<TrainError, _>(&[q.clone()], H, seed, |g, v| {
            let rows = action_loss_rows(g, v[0], &actions, alpha)?;
            Ok(g.mean(rows)?)
        })
        .unwrap();
        assert!(res.max_rel_error < TOL, "action loss seed {seed}: {:.3e}", res.max_rel_error);

        let t = r.gen_range(2..12);
        let q = rand_tensor(&mut r, t, na, -3.0, 3.0);
        let strength = [0.1, 0.5, 1.0, 3.0][seed as usize % 4];
        let res = gradcheck::<TrainError, _>(&[q], H, seed, |g, v| {
            let values = state_values_graph(g, v[0])?;
            spearman_loss_graph(g, values, strength)
        })
        .unwrap();
        assert!(res.max_rel_error < TOL, "spearman loss seed {seed}: {:.3e}", res.max_rel_error);
    }
}

#[test]
fn end_to_end_losses_through_the_transformer() {
    for seed in 0..20 {
        let mut r = rng::stream(seed, 8);
        let model = tiny_model(seed, 0.0);
        let t = r.gen_range(2..7);
        let states = rand_tensor(&mut r, t, 3, 0.0, 1.0);
        let actions: Vec<usize> = (0..t).map(|_| r.gen_range(0..4)).collect();
        let res = gradcheck::<TrainError, _>(model.params(), H, seed, |g, vars| {
            let q = model.forward_graph(g, vars, &states, false, 0)?;
            let rows = action_loss_rows(g, q, &actions, 0.05)?;
            let a = g.mean(rows)?;
            let v = state_values_graph(g, q)?;
            let m = spearman_loss_graph(g, v, 1.0)?;
            Ok(g.add(a, m)?)
        })
        .unwrap();
        assert!(res.max_rel_error < TOL, "combined seed {seed}: {:.3e}", res.max_rel_error);
    }
}
