use super::*;
use crate::numerics::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Graph) -> Result<T>) -> (Tape, T) {
    let mut tape = Tape::new();
    let out = {
        let mut g = Graph::new(&mut tape, store, Mode::Eval);
        f(&mut g).unwrap()
    };
    (tape, out)
}

/// Randomises every trainable entry so that no gradient is structurally tiny.
fn randomise(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        e.tensor.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.input(random(g.tape.shape(y), seed));
    let p = g.tape.mul(y, w)?;
    Ok(g.tape.sum_all(p))
}

#[test]
fn linear_examples() {
    let mut store = ParamStore::new();
    let p = LinearParams::new(&mut store, "fc", 3, 3, &mut rng(0));
    store.set(p.weight, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let x = random(&[2, 3], 1);
    let (tape, y) = eval(&store, |g| {
        let v = g.input(x.clone());
        linear(g, v, &p)
    });
    assert_eq!(tape.data(y), x.data());

    store.set(p.weight, &[0.0; 9]).unwrap();
    store.set(p.bias.unwrap(), &[0.5, -1.0, 2.0]).unwrap();
    let (tape, y) = eval(&store, |g| {
        let v = g.input(x.clone());
        linear(g, v, &p)
    });
    assert_eq!(tape.data(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    let mut store = ParamStore::new();
    let p = LinearParams::new(&mut store, "fc", 3, 2, &mut rng(5));
    store.set(p.bias.unwrap(), &[0.25, -0.5]).unwrap();
    let w = store.get(p.weight).data().to_vec();
    let (tape, y) = eval(&store, |g| {
        let v = g.input(Tensor::full(&[1, 1, 3], 1.0));
        linear(g, v, &p)
    });
    assert_eq!(tape.shape(y), &[1, 1, 2]);
    let row_sums = [w[0] + w[1] + w[2] + 0.25, w[3] + w[4] + w[5] - 0.5];
    for (a, b) in tape.data(y).iter().zip(row_sums) {
        assert!((a - b).abs() < 1e-15);
    }

    let (mut tape, mut store2) = (Tape::new(), ParamStore::new());
    let p = LinearParams::new(&mut store2, "fc", 4, 2, &mut rng(0));
    let mut g = Graph::new(&mut tape, &store2, Mode::Eval);
    let v = g.input(Tensor::zeros(&[2, 3]));
    assert!(linear(&mut g, v, &p).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::new();
    let p = NormParams::layer(&mut store, "ln", 2);
    let (tape, y) = eval(&store, |g| {
        let v = g.input(Tensor::new(&[2, 2], vec![4.0, 4.0, 1.0, 3.0]).unwrap());
        layer_norm(g, v, &p)
    });
    let y = tape.data(y);
    assert_eq!(&y[..2], &[0.0, 0.0]);
    assert!((y[2] + 1.0).abs() < 1e-4 && (y[3] - 1.0).abs() < 1e-4);

    // Zero mean, unit variance is a fixed point up to the epsilon scaling
    // 1/sqrt(1 + eps), i.e. a relative change of about 5e-6.
    let x = [1.5, -0.5, 0.5, -1.5];
    let var: f64 = x.iter().map(|v| v * v).sum::<f64>() / 4.0;
    let x: Vec<f64> = x.iter().map(|v| v / var.sqrt()).collect();
    let mut store = ParamStore::new();
    let p = NormParams::layer(&mut store, "ln", 4);
    let (tape, y) = eval(&store, |g| {
        let v = g.input(Tensor::new(&[4], x.clone()).unwrap());
        layer_norm(g, v, &p)
    });
    for (a, b) in tape.data(y).iter().zip(&x) {
        assert!((a - b).abs() < 1e-5);
        assert!((a - b / (1.0 + NORM_EPS).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_examples() {
    let mut store = ParamStore::new();
    let p = NormParams::batch(&mut store, "bn", 1);
    let x = random(&[3, 2, 2, 1], 3);
    let (tape, y) = eval(&store, |g| {
        let v = g.input(x.clone());
        batch_norm(g, v, &p)
    });
    for (a, b) in tape.data(y).iter().zip(x.data()) {
        assert!((a - b).abs() <= NORM_EPS * b.abs());
    }

    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Train { dropout: rng(0) });
    let v = g.input(Tensor::full(&[2, 2, 2, 1], 3.0));
    let y = batch_norm(&mut g, v, &p).unwrap();
    assert!(g.tape.data(y).iter().all(|&v| v == 0.0));

    let v = g.input(Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap());
    let y = batch_norm(&mut g, v, &p).unwrap();
    let expected = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert!((g.tape.data(y)[0] + expected).abs() < 1e-12);
    assert!((g.tape.data(y)[1] - expected).abs() < 1e-12);

    let single = g.input(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
    assert!(batch_norm(&mut g, single, &p).is_err());
}

#[test]
fn batch_norm_updates_running_stats_with_momentum() {
    let mut store = ParamStore::new();
    let p = NormParams::batch(&mut store, "bn", 2);
    let updates = {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, Mode::Train { dropout: rng(0) });
        let v = g.input(Tensor::new(&[2, 2], vec![1.0, 10.0, 3.0, 20.0]).unwrap());
        batch_norm(&mut g, v, &p).unwrap();
        g.finish().1
    };
    assert_eq!(updates.len(), 1);
    updates[0].apply(&mut store);
    let running = p.running.as_ref().unwrap();
    let mean = store.get(running.mean).data();
    let var = store.get(running.var).data();
    assert!((mean[0] - 0.2).abs() < 1e-15 && (mean[1] - 1.5).abs() < 1e-15);
    // unbiased batch variances 2 and 50
    assert!((var[0] - (0.9 + 0.2)).abs() < 1e-15 && (var[1] - (0.9 + 5.0)).abs() < 1e-12);
}

fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64]) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = k.shape()[3];
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.at(&[0, iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                        }
                    }
                }
                out[(y * w + xx) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_examples() {
    let mut store = ParamStore::new();
    let p = ConvParams::new(&mut store, "conv", 2, 2, true, &mut rng(0));
    let mut delta = vec![0.0; 36];
    for c in 0..2 {
        delta[(4 * 2 + c) * 2 + c] = 1.0;
    }
    store.set(p.kernel, &delta).unwrap();
    let x = random(&[1, 4, 3, 2], 2);
    let (tape, y) = eval(&store, |g| {
        let v = g.input(x.clone());
        conv3x3(g, v, &p)
    });
    assert_eq!(tape.data(y), x.data());

    store.set(p.kernel, &[0.0; 36]).unwrap();
    store.set(p.bias.unwrap(), &[1.5, -2.0]).unwrap();
    let (tape, y) = eval(&store, |g| {
        let v = g.input(x.clone());
        conv3x3(g, v, &p)
    });
    assert!(tape.data(y).chunks(2).all(|px| px == [1.5, -2.0]));

    let mut store = ParamStore::new();
    let p = ConvParams::new(&mut store, "avg", 1, 1, false, &mut rng(0));
    store.set(p.kernel, &[1.0 / 9.0; 9]).unwrap();
    let x = random(&[1, 3, 3, 1], 4);
    let (tape, y) = eval(&store, |g| {
        let v = g.input(x.clone());
        conv3x3(g, v, &p)
    });
    let mean = x.data().iter().sum::<f64>() / 9.0;
    assert!((tape.data(y)[4] - mean).abs() < 1e-15);
    assert!(Tensor::new(&[1, 0, 3, 1], vec![]).is_err());
}

#[test]
fn conv_matches_five_loop_oracle() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let p = ConvParams::new(&mut store, "conv", 3, 2, true, &mut rng(seed));
        store.set(p.bias.unwrap(), &[0.3, -0.7]).unwrap();
        let x = random(&[1, 6, 6, 3], seed + 10);
        let (tape, y) = eval(&store, |g| {
            let v = g.input(x.clone());
            conv3x3(g, v, &p)
        });
        let expected = naive_conv(&x, store.get(p.kernel), &[0.3, -0.7]);
        for (a, b) in tape.data(y).iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn gelu_and_dropout_examples() {
    let store = ParamStore::new();
    let x = random(&[4, 5], 1);
    let (tape, (y, z)) = eval(&store, |g| {
        let v = g.input(Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = gelu(g, v);
        let u = g.input(x.clone());
        let z = dropout(g, u, 0.1)?;
        Ok((y, z))
    });
    assert_eq!(tape.data(y)[0], 0.0);
    // 0.5·(1 + tanh(0.7978845608·1.044715))
    assert!((tape.data(y)[1] - 0.841_191_990_608_276_8).abs() < 1e-12);
    assert_eq!(tape.data(z), x.data());

    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Train { dropout: rng(0) });
    let v = g.input(Tensor::zeros(&[2]));
    assert!(dropout(&mut g, v, 1.0).is_err());
    assert!(dropout(&mut g, v, -0.1).is_err());
}

#[test]
fn dropout_keeps_ninety_percent_and_preserves_expectation() {
    let store = ParamStore::new();
    let n = 100_000;
    let x = Tensor::full(&[n], 1.0);
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Train { dropout: rng(11) });
    let v = g.input(x);
    let y = dropout(&mut g, v, 0.1).unwrap();
    let kept = g.tape.data(y).iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.9).abs() < 0.01, "kept {kept}");
    let mean = g.tape.data(y).iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");

    let input = random(&[500], 99);
    let input: Vec<f64> = input.data().iter().map(|v| v + 2.0).collect();
    let input_mean = input.iter().sum::<f64>() / input.len() as f64;
    let mut total = 0.0;
    for seed in 0..200 {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, Mode::Train { dropout: rng(seed) });
        let v = g.input(Tensor::new(&[500], input.clone()).unwrap());
        let y = dropout(&mut g, v, 0.1).unwrap();
        total += g.tape.data(y).iter().sum::<f64>() / 500.0;
    }
    let mean = total / 200.0;
    assert!((mean - input_mean).abs() < 0.02 * input_mean, "{mean} vs {input_mean}");
}

#[test]
fn cross_entropy_examples() {
    let store = ParamStore::new();
    let (tape, l) = eval(&store, |g| {
        let v = g.input(Tensor::full(&[3, 5], 0.7));
        cross_entropy(g, v, &[0, 4, 2])
    });
    assert!((tape.data(l)[0] - 5f64.ln()).abs() < 1e-14);
    let (tape, l) = eval(&store, |g| {
        let v = g.input(Tensor::new(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap());
        cross_entropy(g, v, &[0])
    });
    assert!(tape.data(l)[0] < 1e-20);

    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Eval);
    let v = g.input(Tensor::zeros(&[1, 3]));
    assert!(cross_entropy(&mut g, v, &[3]).is_err());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let mut adam = AdamState::new(&store, 1e-3);
    adam.step(&mut store, &[Some(vec![0.3, -4.0, 1e-3])]).unwrap();
    assert_eq!(adam.t, 1);
    // m̂ = g and v̂ = g² at t = 1, so the step is lr·g/(|g| + eps).
    let moved: Vec<f64> = store.get(id).data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
    for (d, g) in moved.iter().zip([0.3f64, -4.0, 1e-3]) {
        assert!((d + 1e-3 * g.signum()).abs() < 1e-3 * 1e-5, "{d}");
    }
    assert!(adam.second_moments().all(|&v| v >= 0.0));
}

#[test]
fn adam_with_zero_gradients_leaves_parameters_unchanged() {
    let mut store = ParamStore::new();
    store.add("w", random(&[4], 1), true);
    store.add("buf", random(&[2], 2), false);
    let before = store.clone();
    let mut adam = AdamState::new(&store, 0.1);
    for _ in 0..5 {
        adam.step(&mut store, &[Some(vec![0.0; 4]), None]).unwrap();
    }
    assert_eq!(store, before);
    assert_eq!(adam.t, 5);
    assert!(adam.step(&mut store, &[None]).is_err());
}

#[test]
fn every_layer_passes_gradient_check() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let fc = LinearParams::new(&mut store, "fc", 3, 4, &mut rng(seed));
        let ln = NormParams::layer(&mut store, "ln", 4);
        // A bias directly before batch norm has an identically zero gradient.
        let conv = ConvParams::new(&mut store, "conv", 4, 2, false, &mut rng(seed + 1));
        let bn = NormParams::batch(&mut store, "bn", 2);
        randomise(&mut store, seed + 2);
        let x = random(&[2, 3, 3, 3], seed + 3);
        for training in [true, false] {
            let report = grad_check_params(&store, std::slice::from_ref(&x), training, 1e-5, |g, xs| {
                let y = linear(g, xs[0], &fc)?;
                let y = layer_norm(g, y, &ln)?;
                let y = gelu(g, y);
                let y = dropout(g, y, 0.1)?;
                let y = conv3x3(g, y, &conv)?;
                let y = batch_norm(g, y, &bn)?;
                weighted_sum(g, y, seed)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "training={training}: {report:?}");
        }

        let logits = random(&[3, 4], seed + 4);
        let report =
            grad_check_params(&store, &[logits], true, 1e-5, |g, xs| cross_entropy(g, xs[0], &[1, 0, 3])).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
