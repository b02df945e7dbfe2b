//! Finite-difference gradient suites over primitives and small models, run
//! in `f64` with quantizers disabled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::{build_model, ArchSpec, Bindings, Mode, Model, ModelSpec, QuantPolicy};
use crate::tensor::gradcheck::{check, GradcheckConfig, GradcheckReport};
use crate::tensor::{Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(r ⊙ y)` for a fixed random `r`, turning any output into a scalar
/// with a generic upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(tape.shape(y), &mut rng));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Gradcheck of `model` restricted to the parameters whose names start with
/// `prefix` (all of them for `""`). `run` maps bindings and the constant
/// input to the output being checked.
pub fn model_gradcheck(
    name: &str,
    model: &Model<f64>,
    prefix: &str,
    input: &Tensor<f64>,
    cfg: &GradcheckConfig,
    run: impl Fn(&Model<f64>, &mut Tape<f64>, &Bindings, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let selected: Vec<usize> = (0..model.params().len())
        .filter(|&i| model.params()[i].name.starts_with(prefix))
        .collect();
    let inputs: Vec<Tensor<f64>> = selected
        .iter()
        .map(|&i| model.params()[i].value.clone())
        .collect();
    check(
        name,
        &inputs,
        |tape, vars| {
            let mut params = Vec::with_capacity(model.params().len());
            let mut next = vars.iter();
            for (i, p) in model.params().iter().enumerate() {
                if selected.binary_search(&i).is_ok() {
                    params.push(*next.next().expect("one var per selected param"));
                } else {
                    params.push(tape.constant(p.value.clone()));
                }
            }
            let bind = model.bind_params(tape, params)?;
            let x = tape.constant(input.clone());
            run(model, tape, &bind, x)
        },
        cfg,
    )
}

/// MLP (all parameters, cross-entropy loss), one residual block with a
/// projection shortcut and one transformer block on `[2, 3, 8]` with 2 heads.
pub fn model_suites(cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fp = QuantPolicy::full_precision();
    let mut out = Vec::new();

    let mlp: Model<f64> = build_model(
        &ModelSpec::new(
            ArchSpec::Mlp {
                dims: vec![6, 10, 8, 4],
            },
            fp.clone(),
        ),
        1,
    )?;
    let x = random(&[5, 6], &mut rng);
    let labels = [0, 3, 1, 2, 3];
    out.push(model_gradcheck("mlp", &mlp, "", &x, cfg, |m, t, b, x| {
        let o = m.forward(t, b, x, Mode::Train)?;
        t.softmax_cross_entropy(o.logits, &labels)
    })?);

    let resnet: Model<f64> = build_model(
        &ModelSpec::new(
            ArchSpec::MiniResnet {
                in_channels: 3,
                widths: vec![4, 6],
                blocks_per_stage: 1,
                classes: 3,
            },
            fp.clone(),
        ),
        2,
    )?;
    let x = random(&[2, 4, 6, 6], &mut rng);
    out.push(model_gradcheck(
        "mini_resnet.block",
        &resnet,
        "stage1.block0.",
        &x,
        cfg,
        |m, t, b, x| {
            let y = m.resnet_block_forward(t, b, 1, x)?;
            project(t, y, 11)
        },
    )?);

    let vit: Model<f64> = build_model(
        &ModelSpec::new(
            ArchSpec::MiniVit {
                in_channels: 1,
                image_size: 4,
                patch: 2,
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_hidden: 16,
                classes: 3,
            },
            fp,
        ),
        3,
    )?;
    // [N=2, T=3, D=8] as token rows
    let x = random(&[2 * 3, 8], &mut rng);
    out.push(model_gradcheck(
        "mini_vit.block",
        &vit,
        "block0.",
        &x,
        cfg,
        |m, t, b, x| {
            let y = m.vit_block_forward(t, b, 0, x, 2)?;
            project(t, y, 12)
        },
    )?);
    Ok(out)
}

/// One check per differentiable primitive.
pub fn primitive_suites(cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let seed = out.len() as u64 + 100;
        out.push(check(
            name,
            &inputs,
            |t, v| {
                let y = f(t, v)?;
                project(t, y, seed)
            },
            cfg,
        )?);
        Ok(())
    };
    run(
        "matmul",
        vec![random(&[3, 4], &mut rng), random(&[4, 5], &mut rng)],
        &|t, v| t.matmul(v[0], v[1]),
    )?;
    run(
        "add_rows",
        vec![random(&[4, 3], &mut rng), random(&[3], &mut rng)],
        &|t, v| t.add_rows(v[0], v[1]),
    )?;
    run(
        "mul",
        vec![random(&[2, 5], &mut rng), random(&[2, 5], &mut rng)],
        &|t, v| t.mul(v[0], v[1]),
    )?;
    run("relu", vec![random(&[3, 5], &mut rng)], &|t, v| {
        Ok(t.relu(v[0]))
    })?;
    run("gelu", vec![random(&[3, 5], &mut rng)], &|t, v| {
        Ok(t.gelu(v[0]))
    })?;
    run("mean_axis", vec![random(&[2, 3, 4], &mut rng)], &|t, v| {
        t.mean_axis(v[0], 1)
    })?;
    run(
        "conv2d",
        vec![
            random(&[2, 3, 5, 5], &mut rng),
            random(&[4, 3, 3, 3], &mut rng),
        ],
        &|t, v| t.conv2d(v[0], v[1], 2, 1),
    )?;
    run(
        "batch_norm",
        vec![
            random(&[3, 2, 3, 3], &mut rng),
            random(&[2], &mut rng),
            random(&[2], &mut rng),
        ],
        &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], None)?.0),
    )?;
    run(
        "layer_norm",
        vec![
            random(&[4, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6], &mut rng),
        ],
        &|t, v| t.layer_norm(v[0], v[1], v[2]),
    )?;
    run(
        "attention",
        vec![
            random(&[6, 4], &mut rng),
            random(&[6, 4], &mut rng),
            random(&[6, 4], &mut rng),
        ],
        &|t, v| t.attention(v[0], v[1], v[2], 2, 2),
    )?;
    run(
        "softmax_cross_entropy",
        vec![random(&[4, 3], &mut rng)],
        &|t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 1]),
    )?;
    let target = Tensor::from_fn(&[2, 3], |i| [0.2, 0.3, 0.5][i % 3]);
    run(
        "soft_target_kl",
        vec![random(&[2, 3], &mut rng)],
        &|t, v| t.soft_target_kl(v[0], &target),
    )?;
    run(
        "mse",
        vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)],
        &|t, v| t.mse(v[0], v[1]),
    )?;
    Ok(out)
}
