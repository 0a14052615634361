//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eend::attractors_ta::{CombinerKind, TaConfig};
use eend::encoder::EncoderConfig;
use eend::model::{AttractorKind, ModelConfig};
use eend::numerics::nn::{Activation, FeedForward, LayerNorm, Linear, LstmCell, MultiHeadAttention};
use eend::numerics::{grad_check, grad_check_inputs, Graph, Init, ParamStore, Tensor, Var};
use eend::Result;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Entries with magnitude in `[0.2, 2)` and random sign, away from kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.2..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// `sum(v ⊙ w)` for a fixed weight tensor, so every output entry
/// contributes a distinct direction to the checked gradient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(v, wv)?;
    Ok(g.sum(p))
}

type InputCheck = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>,
);

/// Max relative gradient error of every differentiable graph primitive,
/// with inputs drawn from `seed`.
pub fn primitive_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let w34 = uniform(&mut r, 3, 4, -1.0, 1.0);
    let w32 = uniform(&mut r, 3, 2, -1.0, 1.0);
    let w35 = uniform(&mut r, 3, 5, -1.0, 1.0);
    let w43 = uniform(&mut r, 4, 3, -1.0, 1.0);
    let w36 = uniform(&mut r, 3, 6, -1.0, 1.0);
    let mask = uniform(&mut r, 3, 4, -2.0, 2.0);


    let a34 = uniform(&mut r, 3, 4, -2.0, 2.0);
    let b34 = uniform(&mut r, 3, 4, -2.0, 2.0);
    let col3 = uniform(&mut r, 3, 1, -2.0, 2.0);

    let mut checks: Vec<InputCheck> = Vec::new();
    macro_rules! check {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            checks.push(($name, vec![$($t),*], Box::new($f)));
        };
    }
    {
        let w = w32.clone();
        check!("matmul", [a34.clone(), uniform(&mut r, 4, 2, -1.0, 1.0)], move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o, &w)
        });
    }
    for (ta, tb) in [(false, true), (true, false), (true, true)] {
        let (ad, bd) = match (ta, tb) {
            (false, true) => ((3, 4), (2, 4)),
            (true, false) => ((4, 3), (4, 2)),
            _ => ((4, 3), (2, 4)),
        };
        let w = w32.clone();
        let name = match (ta, tb) {
            (false, true) => "matmul_t(a, bT)",
            (true, false) => "matmul_t(aT, b)",
            _ => "matmul_t(aT, bT)",
        };
        check!(name, [uniform(&mut r, ad.0, ad.1, -1.0, 1.0), uniform(&mut r, bd.0, bd.1, -1.0, 1.0)], move |g, v| {
            let o = g.matmul_t(v[0], ta, v[1], tb)?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("add", [a34.clone(), b34.clone()], move |g, v| {
            let o = g.add(v[0], v[1])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("sub", [a34.clone(), b34.clone()], move |g, v| {
            let o = g.sub(v[0], v[1])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("mul", [a34.clone(), b34.clone()], move |g, v| {
            let o = g.mul(v[0], v[1])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("add_col", [a34.clone(), col3.clone()], move |g, v| {
            let o = g.add_col(v[0], v[1])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("mul_col", [a34.clone(), col3.clone()], move |g, v| {
            let o = g.mul_col(v[0], v[1])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("scale", [a34.clone()], move |g, v| {
            let o = g.scale(v[0], -1.7);
            weighted_sum(g, o, &w)
        });
    }
    {
        let (w, m) = (w34.clone(), mask.clone());
        check!("mul_const", [a34.clone()], move |g, v| {
            let o = g.mul_const(v[0], m.clone())?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("sigmoid", [a34.clone()], move |g, v| {
            let o = g.sigmoid(v[0]);
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("tanh", [a34.clone()], move |g, v| {
            let o = g.tanh(v[0]);
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("relu", [away_from_zero(&mut r, 3, 4)], move |g, v| {
            let o = g.relu(v[0]);
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("swish", [a34.clone()], move |g, v| {
            let o = g.swish(v[0]);
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w34.clone();
        check!("glu", [uniform(&mut r, 6, 4, -2.0, 2.0)], move |g, v| {
            let o = g.glu(v[0])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w35.clone();
        check!("softmax_rows", [uniform(&mut r, 3, 5, -2.0, 2.0)], move |g, v| {
            let o = g.softmax_rows(v[0]);
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w43.clone();
        check!(
            "layer_norm",
            [uniform(&mut r, 4, 3, -2.0, 2.0), uniform(&mut r, 4, 1, 0.5, 1.5), uniform(&mut r, 4, 1, -0.5, 0.5)],
            move |g, v| {
                let o = g.layer_norm(v[0], v[1], v[2], 1e-8)?;
                weighted_sum(g, o, &w)
            }
        );
    }
    {
        let w = w36.clone();
        check!(
            "depthwise_conv",
            [uniform(&mut r, 3, 6, -1.0, 1.0), uniform(&mut r, 3, 3, -1.0, 1.0), uniform(&mut r, 3, 1, -1.0, 1.0)],
            move |g, v| {
                let o = g.depthwise_conv(v[0], v[1], v[2])?;
                weighted_sum(g, o, &w)
            }
        );
    }
    {
        let w = uniform(&mut r, 2, 4, -1.0, 1.0);
        check!("slice_rows", [a34.clone()], move |g, v| {
            let o = g.slice_rows(v[0], 1, 2)?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w32.clone();
        check!("slice_cols", [a34.clone()], move |g, v| {
            let o = g.slice_cols(v[0], 2, 2)?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = uniform(&mut r, 6, 4, -1.0, 1.0);
        check!("concat_rows", [a34.clone(), b34.clone()], move |g, v| {
            let o = g.concat_rows(&[v[0], v[1]])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = uniform(&mut r, 3, 5, -1.0, 1.0);
        check!("concat_cols", [a34.clone(), col3.clone()], move |g, v| {
            let o = g.concat_cols(&[v[0], v[1]])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w35.clone();
        check!("select_cols", [a34.clone()], move |g, v| {
            let o = g.select_cols(v[0], &[3, 0, 0, 2, 1])?;
            weighted_sum(g, o, &w)
        });
    }
    {
        let w = w43.clone();
        check!("transpose", [a34.clone()], move |g, v| {
            let o = g.transpose(v[0]);
            weighted_sum(g, o, &w)
        });
    }
    check!("sum", [a34.clone()], |g, v| {
        let s = g.sum(v[0]);
        let sq = g.mul(s, s)?;
        Ok(sq)
    });
    check!("mean", [a34.clone()], |g, v| {
        let s = g.mean(v[0]);
        let sq = g.mul(s, s)?;
        Ok(sq)
    });
    {
        let (y, wt) = (binary(&mut r, 3, 4), uniform(&mut r, 3, 4, 0.5, 1.5));
        check!("bce", [uniform(&mut r, 3, 4, 0.05, 0.95)], move |g, v| {
            g.bce(v[0], y.clone(), Some(wt.clone()), 12.0)
        });
    }
    {
        let y = binary(&mut r, 3, 4);
        check!("bce_with_logits", [a34.clone()], move |g, v| {
            g.bce_with_logits(v[0], y.clone(), None, 12.0)
        });
    }

    let empty = ParamStore::<f64>::new();
    let mut out = Vec::new();
    for (name, inputs, f) in checks {
        let rep = grad_check_inputs(&empty, &inputs, |g, v| f(g, v), FD_EPS)?;
        out.push((name, rep.max_rel_error));
    }
    out.extend(layer_errors(seed)?);
    Ok(out)
}

/// Gradient errors of the parameterized layers, with respect to their
/// parameters.
pub fn layer_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed ^ 0x5eed);
    let x = uniform(&mut r, 4, 5, -1.0, 1.0);
    let w45 = uniform(&mut r, 4, 5, -1.0, 1.0);
    let w43 = uniform(&mut r, 4, 3, -1.0, 1.0);
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng(seed);
    let lin = Linear::new(&mut Init::new(&mut store, &mut init_rng).sub("lin"), 4, 4);
    let rep = grad_check(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let o = lin.forward(g, xv)?;
            weighted_sum(g, o, &w45)
        },
        FD_EPS,
    )?;
    out.push(("linear", rep.max_rel_error));

    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut Init::new(&mut store, &mut init_rng).sub("ln"), 4);
    let rep = grad_check(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let o = ln.forward(g, xv)?;
            weighted_sum(g, o, &w45)
        },
        FD_EPS,
    )?;
    out.push(("layer_norm module", rep.max_rel_error));

    let mut store = ParamStore::<f64>::new();
    let ff = FeedForward::new(&mut Init::new(&mut store, &mut init_rng).sub("ff"), 4, 6, Activation::Swish);
    let rep = grad_check(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let o = ff.forward(g, xv)?;
            weighted_sum(g, o, &w45)
        },
        FD_EPS,
    )?;
    out.push(("feed_forward", rep.max_rel_error));

    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut Init::new(&mut store, &mut init_rng).sub("mha"), 4, 2)?;
    let q = uniform(&mut r, 4, 3, -1.0, 1.0);
    let rep = grad_check(
        &mut store,
        |g| {
            let qv = g.constant(q.clone());
            let kv = g.constant(x.clone());
            let o = mha.forward(g, qv, kv, kv)?;
            weighted_sum(g, o, &w43)
        },
        FD_EPS,
    )?;
    out.push(("multi_head_attention", rep.max_rel_error));

    let mut store = ParamStore::<f64>::new();
    let lstm = LstmCell::new(&mut Init::new(&mut store, &mut init_rng).sub("lstm"), 4, 3);
    let w31 = uniform(&mut r, 3, 1, -1.0, 1.0);
    let rep = grad_check(
        &mut store,
        |g| {
            let mut h = g.constant(Tensor::zeros(&[3, 1]));
            let mut c = g.constant(Tensor::zeros(&[3, 1]));
            for t in 0..x.cols() {
                let xt = g.constant(Tensor::from_fn(4, 1, |i, _| x.get(i, t)));
                (h, c) = lstm.step(g, xt, h, c)?;
            }
            let hc = g.add(h, c)?;
            weighted_sum(g, hc, &w31)
        },
        FD_EPS,
    )?;
    out.push(("lstm_step", rep.max_rel_error));
    Ok(out)
}

/// Gradient-test sized model: `D = 8`, one encoder block, one decoder
/// block, two speakers, dropout off.
pub fn toy_model_config(kind: AttractorKind) -> ModelConfig {
    ModelConfig {
        attractor: kind,
        max_speakers: 2,
        encoder: EncoderConfig {
            input_dim: 5,
            num_blocks: 1,
            model_dim: 8,
            heads: 2,
            ff_dim: 16,
            conv_kernel: 3,
            use_csv_token: true,
        },
        ta: TaConfig {
            num_layers: 1,
            heads: 2,
            ff_dim: 16,
            combiner: CombinerKind::Amp(1.0),
        },
        eda_hard_cap: 5,
        eda_shuffle: true,
        dropout: 0.0,
    }
}

/// `T × S` labels where every speaker is active at least once.
pub fn toy_labels(rng: &mut ChaCha8Rng, t: usize, s: usize) -> Tensor<f64> {
    let mut y = binary(rng, t, s);
    for j in 0..s {
        y.set(j % t, j, 1.0);
    }
    y
}
