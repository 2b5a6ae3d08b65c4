//! Finite-difference cases for every tape operation and for the full
//! training objective.

use markovdt::numkernel::{finite_difference_check, FdConfig, FdReport, Tape, Tensor, Var};
use markovdt::seqmodel::{ForwardOptions, ModelConfig, ParamRole, PolicyModel, Window};
use markovdt::Result;
use rand::Rng;

type Scalar = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub point: Vec<Tensor>,
    f: Scalar,
}

impl OpCase {
    pub fn check(&self) -> FdReport {
        self.check_with(&FdConfig::default())
    }

    pub fn check_with(&self, cfg: &FdConfig) -> FdReport {
        finite_difference_check(&self.f, &self.point, cfg).unwrap()
    }
}

/// `sum(out ⊙ w)` with a fixed random `w`, so every output entry matters
/// with a different weight.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(&[r, c], 1.0, rng)
}

/// One randomly sized case per differentiable operation.
pub fn op_cases(rng: &mut impl Rng) -> Vec<OpCase> {
    let m = rng.random_range(1..5);
    let n = rng.random_range(2..5);
    let p = rng.random_range(1..4);
    let sq = rng.random_range(2..6);
    let w_mn = randn(rng, m, n);
    let w_mp = randn(rng, m, p);
    let w_sq = randn(rng, sq, sq);
    let w_m1 = randn(rng, m, 1);
    let w_cat_c = randn(rng, m, 2 * n);
    let w_cat_r = randn(rng, 2 * m, n);
    let idx: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..m)).collect();
    let w_gather = randn(rng, idx.len(), n);
    let j = rng.random_range(0..n);
    let positive = randn(rng, m, n).map(|v| v.abs() + 0.5);

    let mut cases: Vec<OpCase> = Vec::new();
    let mut case = |name, point: Vec<Tensor>, f: Scalar| cases.push(OpCase { name, point, f });
    {
        let w = w_mp.clone();
        case("matmul", vec![randn(rng, m, n), randn(rng, n, p)], Box::new(move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mp.clone();
        case("matmul_nt", vec![randn(rng, m, n), randn(rng, p, n)], Box::new(move |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("add", vec![randn(rng, m, n), randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.add(v[0], v[1])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("sub", vec![randn(rng, m, n), randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.sub(v[0], v[1])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("mul", vec![randn(rng, m, n), randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.mul(v[0], v[1])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("add_row", vec![randn(rng, m, n), randn(rng, 1, n)], Box::new(move |t, v| {
            let o = t.add_row(v[0], v[1])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("mul_col", vec![randn(rng, m, n), randn(rng, m, 1)], Box::new(move |t, v| {
            let o = t.mul_col(v[0], v[1])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        let c = rng.random_range(-2.0..2.0);
        case("scale", vec![randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.scale(v[0], c);
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_m1.clone();
        case("column", vec![randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.column(v[0], j)?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_cat_c.clone();
        case("concat_cols", vec![randn(rng, m, n), randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.concat_cols(&[v[0], v[1]])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_cat_r.clone();
        case("concat_rows", vec![randn(rng, m, n), randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.concat_rows(&[v[0], v[1]])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_gather.clone();
        case("gather_rows", vec![randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.gather_rows(v[0], &idx)?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_sq.clone();
        case("causal_softmax", vec![randn(rng, sq, sq)], Box::new(move |t, v| {
            let o = t.causal_softmax(v[0])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("softmax_rows", vec![randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.softmax_rows(v[0])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("layer_norm", vec![randn(rng, m, n), randn(rng, 1, n), randn(rng, 1, n)], Box::new(move |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2])?;
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("gelu", vec![randn(rng, m, n)], Box::new(move |t, v| {
            let o = t.gelu(v[0]);
            weighted(t, o, &w)
        }));
    }
    {
        let w = w_mn.clone();
        case("ln", vec![positive], Box::new(move |t, v| {
            let o = t.ln(v[0])?;
            weighted(t, o, &w)
        }));
    }
    {
        // Squared first so the reductions are not linear in the input.
        case("sum", vec![randn(rng, m, n)], Box::new(|t, v| {
            let s = t.mul(v[0], v[0])?;
            Ok(t.sum(s))
        }));
        case("mean", vec![randn(rng, m, n)], Box::new(|t, v| {
            let s = t.mul(v[0], v[0])?;
            Ok(t.mean(s))
        }));
    }
    cases
}

pub const OP_NAMES: usize = 19;

/// Random small architecture: layers, heads, width, gating and context all vary.
pub fn random_model_config(rng: &mut impl Rng) -> ModelConfig {
    let n_heads = rng.random_range(1..4);
    ModelConfig {
        n_layers: rng.random_range(1..3),
        n_heads,
        d_model: n_heads * rng.random_range(1..3),
        d_ff: rng.random_range(2..6),
        context_k: rng.random_range(1..4),
        max_timestep: 10,
        state_dim: rng.random_range(1..3),
        action_dim: rng.random_range(1..3),
        rtg_scale: 5.0,
        moa_enabled: rng.random_bool(0.7),
    }
}

pub fn random_window(rng: &mut impl Rng, cfg: &ModelConfig) -> Window {
    let steps = rng.random_range(1..=cfg.context_k);
    let start = rng.random_range(0..cfg.max_timestep - steps);
    Window {
        rtg: (0..steps).map(|_| rng.random_range(-5.0..5.0)).collect(),
        states: Tensor::randn(&[steps, cfg.state_dim], 1.0, rng),
        actions: Tensor::randn(&[steps, cfg.action_dim], 1.0, rng),
        timesteps: (start..start + steps).collect(),
    }
}

/// Checks the training objective `Σ‖a − â‖² + α · mean gate mass of the
/// penalized heads` against central differences in every trainable tensor.
pub fn full_loss_check(rng: &mut impl Rng, seed: u64) -> FdReport {
    let cfg = random_model_config(rng);
    let mut model = PolicyModel::new(cfg.clone(), seed).unwrap();
    // Zero-initialized gates would hide gate-weight gradient errors.
    for l in 0..cfg.n_layers {
        let name = format!("layer{l}.gate.w");
        if model.params().get(&name).is_some() {
            model.params_mut().set(&name, Tensor::randn(&[cfg.d_model, cfg.n_heads], 1.0, rng)).unwrap();
        }
    }
    let win = random_window(rng, &cfg);
    let alpha = rng.random_range(0.0..1.0);
    let penalized = rng.random_range(0..cfg.n_heads);
    let trainable: Vec<usize> = (0..model.params().len())
        .filter(|&i| model.params().roles()[i] != ParamRole::Buffer)
        .collect();
    let point: Vec<Tensor> = trainable.iter().map(|&i| model.params().tensors()[i].clone()).collect();
    let frozen = vec![false; model.params().len()];
    finite_difference_check(
        |tape, vars| {
            let mut bound = model.bind(tape, Some(&frozen));
            for (&i, &v) in trainable.iter().zip(vars) {
                bound[i] = v;
            }
            let f = model.forward_on_tape(tape, &bound, &win, &ForwardOptions::default())?;
            let target = tape.constant(win.actions.clone());
            let diff = tape.sub(f.actions, target)?;
            let sq = tape.mul(diff, diff)?;
            let mut loss = tape.sum(sq);
            if cfg.moa_enabled {
                let col = tape.column(f.gates[0], penalized)?;
                let mass = tape.mean(col);
                let pen = tape.scale(mass, alpha);
                loss = tape.add(loss, pen)?;
            }
            Ok(loss)
        },
        &point,
        &FdConfig::default(),
    )
    .unwrap()
}
