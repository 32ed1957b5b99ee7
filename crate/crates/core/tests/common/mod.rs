#![allow(dead_code)]

use pixelseg::datakit::{generate_volumes, SynthConfig};
use pixelseg::hypercolumn;
use pixelseg::nn::{Tape, Tensor, Var};
use pixelseg::segmenter::{LabeledSlice, ModelConfig, Segmenter, StageConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform values bounded away from zero, so ReLU kinks stay out of reach
/// of a finite-difference step.
pub fn off_kink_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error between reverse-mode and central-difference gradients
/// of the scalar `f` with respect to every entry of every input.
pub fn max_input_grad_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut probe: Vec<Tensor> = inputs.to_vec();
            probe[k].data_mut()[i] += GRAD_EPS;
            let plus = eval(&probe);
            probe[k].data_mut()[i] -= 2.0 * GRAD_EPS;
            let minus = eval(&probe);
            let numeric = (plus - minus) / (2.0 * GRAD_EPS);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

/// `sum(out * weights)` with fixed random weights, turning any output into a
/// scalar whose gradient exercises every output entry.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(seed ^ 0xABCD);
    let w = tape.leaf(random_tensor(&shape, &mut r));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Per-layer and composed-model gradient checks for one seed; returns
/// `(name, max relative error)` pairs.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let x = random_tensor(&[2, 5, 4], &mut r);
    let w = random_tensor(&[3, 2, 3, 3], &mut r);
    let b = random_tensor(&[3], &mut r);
    out.push((
        "conv3x3",
        max_input_grad_error(&[x, w, b], |t, v| {
            let y = t.conv3x3(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        }),
    ));

    let x = off_kink_tensor(&[2, 3, 4], &mut r);
    out.push((
        "relu",
        max_input_grad_error(&[x], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        }),
    ));

    // distinct values keep every pooling window's argmax strict
    let mut vals: Vec<f64> = (0..2 * 4 * 6).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(&[2, 4, 6], vals).unwrap();
    out.push((
        "maxpool2x2",
        max_input_grad_error(&[x], |t, v| {
            let y = t.maxpool2x2(v[0]).unwrap();
            project(t, y, seed)
        }),
    ));

    let x = random_tensor(&[4, 5], &mut r);
    let w = random_tensor(&[3, 5], &mut r);
    let b = random_tensor(&[3], &mut r);
    out.push((
        "linear",
        max_input_grad_error(&[x, w, b], |t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        }),
    ));

    let logits = Tensor::from_fn(&[5, 4], |_| r.random_range(-3.0..3.0));
    let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
    out.push((
        "softmax_cross_entropy",
        max_input_grad_error(&[logits], |t, v| {
            t.softmax_cross_entropy(v[0], &targets).unwrap()
        }),
    ));

    let map = random_tensor(&[3, 4, 5], &mut r);
    let pixels: Vec<(usize, usize)> = (0..6)
        .map(|_| (r.random_range(0..8), r.random_range(0..10)))
        .collect();
    out.push((
        "bilinear_gather",
        max_input_grad_error(&[map], |t, v| {
            let taps = hypercolumn::level_taps(&pixels, 2, (4, 5), (8, 10)).unwrap();
            let y = t.gather(v[0], taps).unwrap();
            project(t, y, seed)
        }),
    ));

    let a = random_tensor(&[3, 2], &mut r);
    let c = random_tensor(&[3, 4], &mut r);
    out.push((
        "concat_cols",
        max_input_grad_error(&[a, c], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]]).unwrap();
            project(t, y, seed)
        }),
    ));

    out.push(("composed_model", composed_model_grad_error(seed)));
    out
}

pub fn tiny_model_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig {
        in_channels: 2,
        stages: vec![
            StageConfig {
                n_convs: 1,
                width: 3,
            },
            StageConfig {
                n_convs: 1,
                width: 4,
            },
        ],
        tap_stages: vec![0, 1],
        mlp_widths: vec![5],
        n_classes: 3,
        n_sample_pixels: 8,
        ..ModelConfig::default()
    };
    cfg.sgd.seed = seed;
    cfg
}

/// Checks d(loss)/d(parameter) for every scalar parameter of a small
/// backbone + hypercolumn + MLP model under cross-entropy.
pub fn composed_model_grad_error(seed: u64) -> f64 {
    let mut model = Segmenter::new(tiny_model_config(seed)).unwrap();
    let mut r = rng(seed ^ 0x5EED);
    // biases away from zero make exact ReLU ties vanishingly unlikely
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let image = random_tensor(&[2, 6, 6], &mut r);
    let pixels: Vec<(usize, usize)> = (0..7)
        .map(|_| (r.random_range(0..6), r.random_range(0..6)))
        .collect();
    let targets: Vec<usize> = (0..7).map(|_| r.random_range(0..3)).collect();

    let loss_of = |m: &Segmenter| {
        let mut tape = Tape::new();
        let logits = m.forward_sparse(&mut tape, &image, &pixels).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &targets).unwrap();
        (tape, loss)
    };

    let (tape, loss) = loss_of(&model);
    let grads = tape.backward(loss).unwrap();
    model.params_mut().zero_grad();
    grads.accumulate_into(model.params_mut());

    let mut worst = 0.0f64;
    for &id in &ids {
        let analytic = model.params().get(id).grad().unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + GRAD_EPS;
            let (t, l) = loss_of(&model);
            let plus = t.value(l).data()[0];
            model.params_mut().get_mut(id).data_mut()[i] = orig - GRAD_EPS;
            let (t, l) = loss_of(&model);
            let minus = t.value(l).data()[0];
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * GRAD_EPS)));
        }
    }
    worst
}

/// Exhaustive oracle: surface by face-neighbour test, then the minimum
/// spacing-scaled distance to every surface voxel of the other mask.
pub mod brute {
    pub type Cell = (usize, usize);

    pub fn surface(mask: &[bool], h: usize, w: usize) -> Vec<Cell> {
        let on = |r: isize, c: isize| {
            r >= 0
                && c >= 0
                && (r as usize) < h
                && (c as usize) < w
                && mask[r as usize * w + c as usize]
        };
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let (ri, ci) = (r as isize, c as isize);
                if mask[r * w + c]
                    && !(on(ri - 1, ci) && on(ri + 1, ci) && on(ri, ci - 1) && on(ri, ci + 1))
                {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn directed(a: &[Cell], b: &[Cell], spacing: (f64, f64)) -> Vec<f64> {
        a.iter()
            .map(|&(r, c)| {
                b.iter()
                    .map(|&(r2, c2)| {
                        let dy = (r as f64 - r2 as f64) * spacing.0;
                        let dx = (c as f64 - c2 as f64) * spacing.1;
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    pub fn p95(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let rank = ((0.95 * v.len() as f64).ceil() as usize).max(1);
        v[rank - 1]
    }

    pub fn hd95(a: &[bool], b: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Option<f64> {
        let (sa, sb) = (surface(a, h, w), surface(b, h, w));
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        Some(p95(directed(&sa, &sb, spacing)).max(p95(directed(&sb, &sa, spacing))))
    }

    pub fn dice(a: &[bool], b: &[bool]) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
        let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
        if total == 0 {
            1.0
        } else {
            (2 * inter) as f64 / total as f64
        }
    }

    pub fn mask_from_bits(bits: u32, n: usize) -> Vec<bool> {
        (0..n).map(|i| bits >> i & 1 == 1).collect()
    }
}

/// Default-config synthetic slices (normalised), all volumes flattened.
pub fn synth_slices(config: &SynthConfig) -> Vec<LabeledSlice> {
    generate_volumes(config)
        .unwrap()
        .iter()
        .flat_map(|v| v.labeled_slices().unwrap())
        .collect()
}
