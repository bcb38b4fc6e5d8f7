use ctxmod_core::model::Model;
use ctxmod_core::param::Freeze;
use ctxmod_core::spec::{preset, ModelSpec};
use ctxmod_core::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 ^ seed) % 97) as f64 * 0.37 - 15.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[rows, cols], data), true).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Shifting every logit of a row leaves the softmax unchanged.
    #[test]
    fn softmax_is_shift_invariant(data in values(12), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[3, 4], data.clone()), false).unwrap();
        let b = tape.leaf(tensor(&[3, 4], data.iter().map(|v| v + shift).collect()), false).unwrap();
        let (sa, sb) = (tape.softmax_rows(a).unwrap(), tape.softmax_rows(b).unwrap());
        for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    /// Gradients are linear in the upstream signal: d(a·f + b·g) = a·df + b·dg.
    #[test]
    fn backward_is_linear(x in values(2 * 3 * 6 * 6), w in values(4 * 3 * 3 * 3), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let grad = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let xv = t.leaf(tensor(&[2, 3, 6, 6], x.clone()), true).unwrap();
            let wv = t.leaf(tensor(&[4, 3, 3, 3], w.iter().map(|v| v * 0.3).collect()), true).unwrap();
            let bv = t.constant(Tensor::zeros(&[4])).unwrap();
            let y = t.conv2d(xv, wv, bv).unwrap();
            let f = t.sum(y).unwrap();
            let sq = t.mse(y, &Tensor::zeros(&[2, 4, 4, 4])).unwrap();
            let fa = t.scale(f, ca).unwrap();
            let gb = t.scale(sq, cb).unwrap();
            let l = t.add(fa, gb).unwrap();
            t.backward(l).unwrap();
            t.grad(xv).unwrap().data().to_vec()
        };
        let (ga, gb, gab) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..ga.len() {
            let want = a * ga[i] + b * gb[i];
            prop_assert!((gab[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    /// The spec text format round-trips through parse.
    #[test]
    fn spec_text_round_trips(idx in 0usize..ctxmod_core::spec::PRESETS.len(), c in 1usize..40) {
        let s = preset(ctxmod_core::spec::PRESETS[idx]).unwrap().with_channels(c);
        prop_assert_eq!(ModelSpec::parse(&s.to_text()).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Same seed, same parameters and predictions, bit for bit.
    #[test]
    fn build_and_predict_are_deterministic(seed in any::<u64>(), idx in 0usize..4) {
        let spec = preset(["ff-CNN", "ff+sa-CNN", "rf-CNN", "rf+sa-CNN"][idx]).unwrap();
        let a = Model::<f32>::build(&spec, seed).unwrap();
        let b = Model::<f32>::build(&spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let img: Vec<f32> = (0..2500).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 1000.0).collect();
        let pa = a.predict(&img).unwrap();
        prop_assert_eq!(pa[0].to_bits(), b.predict(&img).unwrap()[0].to_bits());
    }

    /// rf-CNN ignores every pixel outside its 16×16 center support.
    #[test]
    fn center_readout_ignores_the_surround(seed in any::<u64>(), noise in values(2500)) {
        let m = Model::<f32>::build(&preset("rf-CNN").unwrap(), seed).unwrap();
        let base: Vec<f32> = (0..2500).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut pert = base.clone();
        for (i, v) in pert.iter_mut().enumerate() {
            let (r, c) = (i / 50, i % 50);
            if !((16..32).contains(&r) && (16..32).contains(&c)) {
                *v = noise[i] as f32;
            }
        }
        prop_assert_eq!(m.predict(&base).unwrap()[0].to_bits(), m.predict(&pert).unwrap()[0].to_bits());
    }
}

#[test]
fn freezing_a_block_marks_only_its_tensors() {
    let mut m = Model::<f32>::build(&preset("ff+sa-CNN").unwrap(), 1).unwrap();
    m.freeze_block(0);
    let frozen: Vec<&str> = m
        .params()
        .iter()
        .filter(|p| p.freeze == Freeze::Frozen)
        .map(|p| p.name.as_str())
        .collect();
    assert_eq!(frozen, ["alpha0.weight", "alpha0.bias"]);
    assert_eq!(m.frozen_prefix_len(), 1);
}
