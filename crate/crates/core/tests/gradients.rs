//! Finite-difference checks of every tape op, every block and every preset
//! at f64.

use ctxmod_core::blocks::{self, SaParams};
use ctxmod_core::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use ctxmod_core::model::Model;
use ctxmod_core::spec::{preset, Activation, SaNorm, PRESETS};
use ctxmod_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const POINTS: usize = 24;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Weighted sum of `out` through a random MSE target, so every output
/// element carries a distinct upstream gradient.
fn loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let shape = tape.shape(out).to_vec();
    let target = rand_tensor(&mut rng, &shape, 1.0);
    tape.mse(out, &target)
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        samples: Some(POINTS),
        seed: 7,
        ..GradCheckConfig::default()
    };
    let r = grad_check(|t, v| f(t, v).and_then(|o| loss(t, o, 1)), inputs, &cfg).unwrap();
    assert!(r.checked >= 20, "{name}: only {} points checked ({} skipped)", r.checked, r.skipped);
    assert!(r.max_error < TOL, "{name}: max relative error {:e}", r.max_error);
    r
}

#[test]
fn tape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    check("conv2d", &[rand_tensor(r, &[2, 3, 7, 7], 1.0), rand_tensor(r, &[4, 3, 3, 3], 0.5), rand_tensor(r, &[4], 0.5)], |t, v| {
        t.conv2d(v[0], v[1], v[2])
    });
    check("maxpool2d", &[rand_tensor(r, &[2, 3, 7, 6], 1.0)], |t, v| t.maxpool2d(v[0]));
    check("relu", &[rand_tensor(r, &[40], 1.0)], |t, v| t.relu(v[0]));
    check("linear", &[rand_tensor(r, &[3, 4, 6], 1.0), rand_tensor(r, &[5, 6], 1.0), rand_tensor(r, &[5], 1.0)], |t, v| {
        t.linear(v[0], v[1], v[2])
    });
    check("bmm", &[rand_tensor(r, &[2, 3, 4], 1.0), rand_tensor(r, &[2, 4, 5], 1.0)], |t, v| t.bmm(v[0], v[1], false));
    check("bmm transposed", &[rand_tensor(r, &[2, 3, 4], 1.0), rand_tensor(r, &[2, 5, 4], 1.0)], |t, v| {
        t.bmm(v[0], v[1], true)
    });
    check("softmax_rows", &[rand_tensor(r, &[4, 7], 2.0)], |t, v| t.softmax_rows(v[0]));
    check("row_norm", &[rand_tensor(r, &[5, 6], 2.0)], |t, v| t.row_norm(v[0]));
    check("row_affine", &[rand_tensor(r, &[5, 6], 1.0), rand_tensor(r, &[6], 1.0), rand_tensor(r, &[6], 1.0)], |t, v| {
        t.row_affine(v[0], v[1], v[2])
    });
    check("add", &[rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[3, 4], 1.0)], |t, v| t.add(v[0], v[1]));
    check("affine", &[rand_tensor(r, &[30], 1.0)], |t, v| t.affine(v[0], -1.7, 0.3));
    check("reshape", &[rand_tensor(r, &[2, 3, 4], 1.0)], |t, v| t.reshape(v[0], &[6, 4]));
    check("swap_last2", &[rand_tensor(r, &[2, 3, 5], 1.0)], |t, v| t.swap_last2(v[0]));
    check("pick_spatial", &[rand_tensor(r, &[2, 3, 5, 5], 1.0)], |t, v| t.pick_spatial(v[0], 2, 3));
    check("sum", &[rand_tensor(r, &[25], 1.0)], |t, v| {
        let s = t.sum(v[0])?;
        t.reshape(s, &[1])
    });
}

#[test]
fn blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let r = &mut rng;
    for act in [Activation::Relu, Activation::Identity] {
        check("alpha", &[rand_tensor(r, &[2, 2, 14, 14], 1.0), rand_tensor(r, &[3, 2, 5, 5], 0.4), rand_tensor(r, &[3], 0.2)], |t, v| {
            blocks::alpha(t, v[0], v[1], v[2], act)
        });
        check("beta", &[rand_tensor(r, &[2, 3, 7, 7], 1.0), rand_tensor(r, &[3, 3, 3, 3], 0.4), rand_tensor(r, &[3], 0.2)], |t, v| {
            blocks::beta(t, v[0], v[1], v[2], act)
        });
    }
    let c = 4;
    for gamma in [false, true] {
        for norm in [SaNorm::None, SaNorm::Channel, SaNorm::ChannelAffine] {
            for residual in [false, true] {
                let mut inputs = vec![rand_tensor(r, &[2, c, 3, 3], 1.0)];
                for _ in 0..2 {
                    inputs.push(rand_tensor(r, &[5, c], 0.5));
                    inputs.push(rand_tensor(r, &[5], 0.5));
                }
                if gamma {
                    inputs.push(rand_tensor(r, &[5, c], 0.5));
                    inputs.push(rand_tensor(r, &[5], 0.5));
                    inputs.push(rand_tensor(r, &[c, 5], 0.5));
                    inputs.push(rand_tensor(r, &[c], 0.5));
                }
                if norm == SaNorm::ChannelAffine {
                    inputs.push(rand_tensor(r, &[c], 1.0));
                    inputs.push(rand_tensor(r, &[c], 1.0));
                }
                let name = format!("sa gamma={gamma} norm={norm:?} residual={residual}");
                check(&name, &inputs, |t, v| {
                    let mut i = 5;
                    let pair = |i: &mut usize| {
                        *i += 2;
                        (v[*i - 2], v[*i - 1])
                    };
                    let (value, output) = if gamma { (Some(pair(&mut i)), Some(pair(&mut i))) } else { (None, None) };
                    let affine = (norm == SaNorm::ChannelAffine).then(|| pair(&mut i));
                    let p = SaParams {
                        query: (v[1], v[2]),
                        key: (v[3], v[4]),
                        value,
                        output,
                        affine,
                    };
                    Ok(blocks::self_attention(t, v[0], &p, norm, residual)?.y)
                });
            }
        }
    }
    check("fcl", &[rand_tensor(r, &[2, 3, 3, 3], 1.0), rand_tensor(r, &[1, 27], 1.0), rand_tensor(r, &[1], 1.0)], |t, v| {
        blocks::fcl(t, v[0], v[1], v[2])
    });
    check("ctl", &[rand_tensor(r, &[2, 3, 3, 3], 1.0), rand_tensor(r, &[1, 3], 1.0), rand_tensor(r, &[1], 1.0)], |t, v| {
        blocks::ctl(t, v[0], v[1], v[2])
    });
}

/// Every preset end to end on two 50×50 images, gradients with respect to
/// the pixels and every parameter tensor.
#[test]
fn presets_end_to_end() {
    for (i, name) in PRESETS.iter().enumerate() {
        let spec = preset(name).unwrap();
        let model: Model<f64> = Model::<f32>::build(&spec, i as u64).unwrap().cast();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut inputs = vec![Tensor::new(&[2, 1, 50, 50], (0..5000).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()];
        inputs.extend(model.params().iter().map(|p| p.value.clone()));
        check(name, &inputs, |t, v| {
            let vars: Vec<Option<Var>> = v[1..].iter().copied().map(Some).collect();
            Ok(model.trace(t, &vars, v[0], 0)?.prediction)
        });
    }
}
