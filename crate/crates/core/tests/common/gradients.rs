//! Finite-difference checks of every tape primitive, the layer blocks and the
//! full model in both modes, all in 64-bit.

use corebert::attention::{fast_mha_tape, mha_tape, AnchorPlan, AttnVars};
use corebert::autograd::{KeyMask, Tape, Var};
use corebert::data::{MlmBatch, IGNORE};
use corebert::feedforward::{add_norm_tape, ffn_tape, FfnVars};
use corebert::gradcheck::{numeric_gradient, projection, relative_error, FD_STEP};
use corebert::model::{init_model, loss_and_grads, Mode, ModelConfig, ModelState, Pass};
use corebert::{Result, Rng, Tensor};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

/// One finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Scalar objective `Σ out ⊙ R` with a fixed random `R`.
fn objective(inputs: &[Tensor<f64>], build: &Build, trainable: bool) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(projection(&shape, 99));
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    Ok((tape, vars, loss))
}

/// Largest relative error over all inputs between tape and numeric gradients.
fn check(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let (mut tape, vars, loss) = objective(inputs, build, true).unwrap();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = numeric_gradient(
            &inputs[i],
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                let (tape, _, loss) = objective(&xs, build, false)?;
                Ok(tape.value(loss).data()[0])
            },
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn primitive(out: &mut Vec<GradCheck>, name: &'static str, inputs: &[Tensor<f64>], build: &Build) {
    out.push(GradCheck {
        name,
        error: check(inputs, build),
        tolerance: PRIMITIVE_TOL,
    });
}

fn matmul_variants(out: &mut Vec<GradCheck>) {
    primitive(out, "matmul", &[random(&[3, 4], 1), random(&[4, 5], 2)], &|t, v| {
        t.matmul(v[0], v[1])
    });
    primitive(out, "matmul a^T", &[random(&[4, 3], 3), random(&[4, 5], 4)], &|t, v| {
        t.matmul_ex(v[0], v[1], true, false)
    });
    primitive(out, "matmul b^T", &[random(&[3, 4], 5), random(&[5, 4], 6)], &|t, v| {
        t.matmul_ex(v[0], v[1], false, true)
    });
    primitive(
        out,
        "batched matmul",
        &[random(&[2, 3, 4], 7), random(&[2, 4, 3], 8)],
        &|t, v| t.matmul(v[0], v[1]),
    );
    primitive(
        out,
        "broadcast matmul",
        &[random(&[4, 3, 2], 9), random(&[2, 2, 5], 10)],
        &|t, v| t.matmul(v[0], v[1]),
    );
    primitive(out, "self product", &[random(&[3, 4], 11)], &|t, v| {
        t.matmul_ex(v[0], v[0], false, true)
    });
}

fn elementwise_ops(out: &mut Vec<GradCheck>) {
    let (a, b) = (random(&[3, 4], 12), random(&[3, 4], 13));
    primitive(out, "add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
    primitive(out, "add self", std::slice::from_ref(&a), &|t, v| t.add(v[0], v[0]));
    primitive(out, "mul", &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
    primitive(out, "scale", std::slice::from_ref(&a), &|t, v| Ok(t.scale(v[0], -2.5)));
    primitive(out, "row bias", &[random(&[2, 3, 4], 14), random(&[4], 15)], &|t, v| {
        t.add_row_bias(v[0], v[1])
    });
    // Keep inputs away from the kink.
    let away = Tensor::from_fn(&[3, 4], |i| {
        if i % 2 == 0 {
            0.3 + i as f64 * 0.1
        } else {
            -0.4 - i as f64 * 0.1
        }
    });
    primitive(out, "relu", &[away], &|t, v| Ok(t.relu(v[0])));
    primitive(out, "sum", &[a], &|t, v| Ok(t.sum(v[0])));
}

fn normalizations(out: &mut Vec<GradCheck>) {
    primitive(out, "softmax", &[random(&[3, 5], 16)], &|t, v| {
        t.softmax(v[0], 0.7, None)
    });
    primitive(out, "masked softmax", &[random(&[4, 3, 5], 17)], &|t, v| {
        let mask = KeyMask::new(
            vec![true, true, false, true, false, true, true, true, true, false],
            5,
            2,
        )?;
        t.softmax(v[0], 1.3, Some(&mask))
    });
    primitive(out, "l2 normalize", &[random(&[4, 3], 18)], &|t, v| {
        Ok(t.l2_normalize(v[0], 1e-12))
    });
    primitive(
        out,
        "layer norm",
        &[random(&[5, 6], 19), random(&[6], 20), random(&[6], 21)],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-12),
    );
    primitive(
        out,
        "add norm",
        &[
            random(&[4, 6], 22),
            random(&[4, 6], 23),
            random(&[6], 24),
            random(&[6], 25),
        ],
        &|t, v| add_norm_tape(t, v[0], v[1], v[2], v[3]),
    );
}

fn layout_ops(out: &mut Vec<GradCheck>) {
    let x = random(&[6, 4], 26);
    primitive(out, "split heads", std::slice::from_ref(&x), &|t, v| {
        t.split_heads(v[0], 3, 2)
    });
    primitive(out, "merge heads", &[random(&[4, 3, 2], 27)], &|t, v| {
        t.merge_heads(v[0], 3, 2)
    });
    primitive(out, "reshape", std::slice::from_ref(&x), &|t, v| {
        t.reshape(v[0], &[2, 3, 4])
    });
    primitive(
        out,
        "transpose",
        std::slice::from_ref(&x),
        &|t, v| Ok(t.transpose(v[0])),
    );
    primitive(out, "gather rows", std::slice::from_ref(&x), &|t, v| {
        t.gather_rows(v[0], vec![5, 0, 0, 3], &[2, 2, 4])
    });
    primitive(out, "sum groups", &[random(&[6, 2, 3], 28)], &|t, v| {
        t.sum_groups(v[0], 3)
    });
    primitive(out, "concat cols", &[x, random(&[6, 2], 29)], &|t, v| {
        t.concat_cols(&[v[0], v[1]])
    });
}

fn cross_entropy_gradient(out: &mut Vec<GradCheck>) {
    primitive(out, "cross entropy", &[random(&[4, 7], 30)], &|t, v| {
        t.cross_entropy(v[0], &[0, 6, 3, 3])
    });
}

fn attn_inputs(d: usize, seed: u64) -> Vec<Tensor<f64>> {
    let s = 1.0 / (d as f64).sqrt();
    let mut xs = vec![random(&[2 * 6, d], seed)];
    for k in 0..4 {
        xs.push(corebert::tensor::scale(&random(&[d, d], seed + 1 + k), s));
    }
    xs
}

fn toy_valid() -> Vec<bool> {
    let mut valid = vec![true; 12];
    valid[10] = false;
    valid[11] = false;
    valid
}

fn standard_attention_block(out: &mut Vec<GradCheck>) {
    primitive(out, "mha", &attn_inputs(8, 31), &|t, v| {
        let mask = KeyMask::new(toy_valid(), 6, 2)?;
        let w = AttnVars {
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
        };
        mha_tape(t, v[0], &w, 2, 6, &mask)
    });
}

fn fast_attention_block(out: &mut Vec<GradCheck>) {
    let plan = AnchorPlan::sample(&toy_valid(), 6, 2, 2, |s, h| Rng::derive(5, &[s as u64, h as u64])).unwrap();
    primitive(out, "fast mha", &attn_inputs(8, 36), &move |t, v| {
        let mask = KeyMask::new(toy_valid(), 6, 2)?;
        let w = AttnVars {
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
        };
        fast_mha_tape(t, v[0], &w, 2, 6, &mask, &plan).map(|tr| tr.out)
    });
}

fn feed_forward_blocks(out: &mut Vec<GradCheck>) {
    // Biases are offset so no pre-activation sits on the ReLU kink.
    let x = random(&[5, 8], 41);
    primitive(
        out,
        "ffn",
        &[
            x.clone(),
            random(&[8, 12], 42),
            random(&[12], 43),
            random(&[12, 8], 44),
            random(&[8], 45),
        ],
        &|t, v| {
            ffn_tape(
                t,
                v[0],
                &FfnVars::Standard {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                },
            )
        },
    );
    primitive(
        out,
        "factorized ffn",
        &[
            x,
            random(&[8, 2], 46),
            random(&[2, 12], 47),
            random(&[12, 2], 48),
            random(&[2, 8], 49),
            random(&[12], 50),
            random(&[8], 51),
        ],
        &|t, v| {
            let p = FfnVars::Factorized {
                w1a: v[1],
                w1b: v[2],
                w2a: v[3],
                w2b: v[4],
                b1: v[5],
                b2: v[6],
            };
            ffn_tape(t, v[0], &p)
        },
    );
}

fn toy_model(mode: Mode) -> (ModelState<f64>, MlmBatch) {
    let cfg = ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn_inner: Some(16),
        factor_rank: 2,
        anchors: 2,
        max_seq_len: 6,
        vocab_size: 11,
        mode,
        seed: 17,
    };
    let mut state: ModelState<f64> = init_model(&cfg, &mut Rng::new(3)).unwrap();
    // Larger weights than the training init so every path carries signal.
    let mut rng = Rng::new(4);
    for p in state.params_mut() {
        for v in p.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    let batch = MlmBatch {
        batch: 2,
        seq_len: 6,
        token_ids: vec![3, 7, 2, 9, 5, 4, 3, 2, 8, 4, 0, 0],
        labels: vec![
            IGNORE, IGNORE, 6, IGNORE, 5, IGNORE, IGNORE, 10, IGNORE, IGNORE, IGNORE, IGNORE,
        ],
        pad_mask: vec![
            false, false, false, false, false, false, false, false, false, false, true, true,
        ],
    };
    (state, batch)
}

fn model_gradient_error(mode: Mode) -> f64 {
    let (state, batch) = toy_model(mode);
    let pass = Pass::for_model(&state.config, 0);
    let analytic = loss_and_grads(&state, &batch, &pass).unwrap().grads;
    let mut worst: f64 = 0.0;
    assert_eq!(analytic.len(), state.named_params().len());
    for (i, grad) in analytic.iter().enumerate() {
        let base = state.named_params()[i].1.clone();
        let numeric = numeric_gradient(
            &base,
            |probe| {
                let mut s = state.clone();
                *s.params_mut()[i] = probe.clone();
                Ok(loss_and_grads(&s, &batch, &pass)?.loss)
            },
            FD_STEP,
        )
        .unwrap();
        let err = relative_error(grad, &numeric);
        assert!(err.is_finite(), "{}", state.named_params()[i].0);
        worst = worst.max(err);
    }
    worst
}

/// Every primitive and block check.
pub fn primitive_checks() -> Vec<GradCheck> {
    let mut out = Vec::new();
    matmul_variants(&mut out);
    elementwise_ops(&mut out);
    normalizations(&mut out);
    layout_ops(&mut out);
    cross_entropy_gradient(&mut out);
    standard_attention_block(&mut out);
    fast_attention_block(&mut out);
    feed_forward_blocks(&mut out);
    out
}

/// The two-layer toy model (`d=8`, `h=2`, vocab 11, `n=6`) in both modes.
pub fn model_checks() -> Vec<GradCheck> {
    [(Mode::Full, "full model"), (Mode::Relaxed, "relaxed model")]
        .into_iter()
        .map(|(mode, name)| GradCheck {
            name,
            error: model_gradient_error(mode),
            tolerance: MODEL_TOL,
        })
        .collect()
}
