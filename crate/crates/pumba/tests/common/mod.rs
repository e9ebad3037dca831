#![allow(dead_code)]

use std::path::Path;

use pumba::autodiff::{finite_difference, relative_error, Tape, Var};
use pumba::data::{generate, SyntheticSpec};
use pumba::eval::{CapriCategory, RankedModel, RankedModelSet};
use pumba::checkpoint::{load_checkpoint, save_checkpoint};
use pumba::model::{InterfacePairSample, ModelConfig, PumbaModel};
use pumba::train::{LogRow, TrainConfig, Trainer};
use pumba::ssm::{materialize_hidden_attention, Discretization, SsmLayerParams};
use pumba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Normal values pushed at least `gap` away from zero, for ops with a kink
/// at the origin.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `sum(w ⊙ f(inputs))` for a fixed random `w`.
pub fn grad_check(
    seed: u64,
    inputs: &[Tensor<f64>],
    step: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let eval = |vals: &[Tensor<f64>], weight: Option<&Tensor<f64>>| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out, weight.cloned())
    };
    let (tape0, _, out0, _) = eval(inputs, None);
    let w = normal(tape0.shape(out0), &mut r);

    let loss_of = |vals: &[Tensor<f64>]| -> f64 {
        let (tape, _, out, _) = eval(vals, Some(&w));
        tape.value(out)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let (mut tape, vars, out, _) = eval(inputs, Some(&w));
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let numeric = finite_difference(&inputs[i], step, |probe| {
            let mut vals = inputs.to_vec();
            vals[i] = probe.clone();
            loss_of(&vals)
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n, 1e-4));
        }
    }
    worst
}

/// A small image configuration for fast model tests: 16×16 images, 4×4
/// patches, 16-wide embeddings.
pub fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg
}

pub fn small_spec(complexes: usize, decoys: usize, signal: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        complexes,
        decoys,
        image_size: 16,
        signal,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn small_samples(complexes: usize, decoys: usize, signal: f64, seed: u64) -> Vec<InterfacePairSample> {
    generate(&small_spec(complexes, decoys, signal, seed)).unwrap()
}

pub fn ssm_params(d: usize, s: usize, seed: u64) -> SsmLayerParams<f32> {
    let mut r = rng(seed);
    let mut p = SsmLayerParams::<f32>::init(d, s, &mut r);
    // larger steps than the initialisation so the recurrence actually mixes
    p.b_delta = normal(&[d], &mut r).cast();
    p.d_skip = normal(&[d], &mut r).cast();
    p
}

pub fn ssm_input(t: usize, d: usize, seed: u64) -> Tensor<f32> {
    normal(&[t, d], &mut rng(seed.wrapping_add(1000))).cast()
}

pub struct Reference {
    pub y: Vec<Vec<f64>>,
    /// Largest |h| seen and the geometric bound it must respect.
    pub h_max: f64,
    pub h_bound: f64,
}

/// Step-by-step recurrence in f64, written directly from the definitions.
pub fn reference(x: &Tensor<f32>, p: &SsmLayerParams<f32>) -> Reference {
    let (t_len, d) = x.dims2();
    let s = p.a_log.dims2().1;
    let xf = |t: usize, c: usize| x.data()[t * d + c] as f64;
    let proj = |w: &Tensor<f32>, t: usize, col: usize, cols: usize| -> f64 {
        (0..d).map(|k| xf(t, k) * w.data()[k * cols + col] as f64).sum()
    };
    let mut h = vec![vec![0.0f64; s]; d];
    let mut y = Vec::new();
    let (mut a_bar_max, mut drive_max, mut h_max) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..t_len {
        let b: Vec<f64> = (0..s).map(|j| proj(&p.w_b, t, j, s)).collect();
        let c: Vec<f64> = (0..s).map(|j| proj(&p.w_c, t, j, s)).collect();
        let mut row = Vec::with_capacity(d);
        for ch in 0..d {
            let pre = proj(&p.w_delta, t, ch, d) + p.b_delta.data()[ch] as f64;
            let delta = if pre > 0.0 { pre + (-pre).exp().ln_1p() } else { pre.exp().ln_1p() };
            let mut out = p.d_skip.data()[ch] as f64 * xf(t, ch);
            for j in 0..s {
                let a = -(p.a_log.data()[ch * s + j] as f64).exp();
                let a_bar = (delta * a).exp();
                let b_bar = match p.rule {
                    Discretization::Euler => delta * b[j],
                    Discretization::ZeroOrderHold => (delta * a).exp_m1() / a * b[j],
                };
                a_bar_max = a_bar_max.max(a_bar);
                drive_max = drive_max.max((b_bar * xf(t, ch)).abs());
                h[ch][j] = a_bar * h[ch][j] + b_bar * xf(t, ch);
                h_max = h_max.max(h[ch][j].abs());
                out += c[j] * h[ch][j];
            }
            row.push(out);
        }
        y.push(row);
    }
    Reference {
        y,
        h_max,
        h_bound: drive_max / (1.0 - a_bar_max),
    }
}

pub fn rel_to_reference(y: &Tensor<f32>, r: &Reference) -> f64 {
    let d = y.dims2().1;
    let scale = r.y.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut worst = 0.0f64;
    for (t, row) in r.y.iter().enumerate() {
        for (c, want) in row.iter().enumerate() {
            worst = worst.max((y.data()[t * d + c] as f64 - want).abs());
        }
    }
    worst / scale
}

/// `α·x + D_skip⊙x` from the materialized hidden attention.
pub fn reconstruct(x: &Tensor<f32>, p: &SsmLayerParams<f32>) -> Tensor<f32> {
    let alpha = materialize_hidden_attention(x, p).unwrap();
    let (t, d) = x.dims2();
    Tensor::from_fn([t, d], |k| {
        let (i, c) = (k / d, k % d);
        let mix: f32 = (0..t)
            .map(|j| alpha.data()[(c * t + i) * t + j] * x.data()[j * d + c])
            .sum();
        mix + p.d_skip.data()[c] * x.data()[k]
    })
}

/// Scores on a coarse grid so ties are common, and labels with both classes.
pub fn random_labelled(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let levels = r.random_range(2..=n.max(2));
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
    labels[0] = true;
    labels[n - 1] = false;
    (scores, labels)
}

/// `P(s_pos > s_neg) + ½ P(tie)` over every pair, ×100.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    100.0 * num / pairs as f64
}

/// Step-wise AP: walk the distinct score levels from the top, adding
/// `ΔR·P` at each level.
pub fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut levels: Vec<f64> = scores.to_vec();
    levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    levels.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in levels {
        let selected: Vec<bool> = scores
            .iter()
            .zip(labels)
            .filter(|(&s, _)| s >= t)
            .map(|(_, &l)| l)
            .collect();
        let tp = selected.iter().filter(|&&l| l).count() as f64;
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    100.0 * ap
}

fn ranked(id: &str, score: f64, capri: CapriCategory) -> RankedModel {
    RankedModel {
        model_id: id.into(),
        score,
        native: capri >= CapriCategory::Medium,
        capri,
    }
}

/// Five complexes with hand-worked rankings, including a tie broken by
/// model id and a complex whose only hit is ranked last.
pub fn ranking_fixture() -> Vec<RankedModelSet> {
    use CapriCategory::*;
    let set = |id: &str, models: Vec<RankedModel>| RankedModelSet {
        complex_id: id.into(),
        models,
    };
    vec![
        set("c1", vec![ranked("m1", 0.9, Incorrect), ranked("m2", 0.8, Acceptable), ranked("m3", 0.1, High)]),
        set("c2", vec![ranked("m2", 0.4, Incorrect), ranked("m1", 0.5, Medium)]),
        set("c3", vec![ranked("m1", 0.3, Incorrect), ranked("m2", 0.2, Incorrect), ranked("m3", 0.1, Incorrect)]),
        set("c4", vec![ranked("b", 0.7, High), ranked("a", 0.7, Incorrect)]),
        set(
            "c5",
            vec![
                ranked("m1", 0.2, Incorrect),
                ranked("m2", 0.9, Incorrect),
                ranked("m3", 0.5, Incorrect),
                ranked("m4", 0.4, Incorrect),
                ranked("m5", 0.1, Acceptable),
            ],
        ),
    ]
}

/// Hand-enumerated answers for [`ranking_fixture`]: `(k, success %, [≥acc, ≥med, ≥high])`.
pub const FIXTURE_EXPECTED: [(usize, f64, [usize; 3]); 5] = [
    (1, 20.0, [1, 1, 0]),
    (2, 60.0, [3, 2, 1]),
    (3, 60.0, [3, 3, 2]),
    (5, 80.0, [4, 3, 2]),
    (100, 80.0, [4, 3, 2]),
];

fn same_bits(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

pub fn small_trainer(seed: u64) -> Trainer {
    let config = TrainConfig {
        seed,
        epochs: 10,
        batch_size: 4,
        ..TrainConfig::default()
    };
    Trainer::new(PumbaModel::new(small_config(), seed).unwrap(), config).unwrap()
}

/// Runs `split + extra` steps straight through, and again with a checkpoint
/// save and load after `split`. True when the logged losses, parameters and
/// optimizer moments agree bit for bit.
pub fn resume_is_bitwise(dir: &Path, seed: u64, split: usize, extra: usize) -> bool {
    let samples = small_samples(2, 3, 1.0, seed);
    let mut straight = small_trainer(seed);
    let mut rows_a = Vec::new();
    for _ in 0..split + extra {
        rows_a.push(straight.step(&samples).unwrap().unwrap());
    }

    let mut first = small_trainer(seed);
    for _ in 0..split {
        first.step(&samples).unwrap().unwrap();
    }
    let path = dir.join(format!("resume-{seed}.bin"));
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&path).unwrap();
    let rows_b: Vec<_> = (0..extra).map(|_| resumed.step(&samples).unwrap().unwrap()).collect();

    let loss_bits = |r: &LogRow| {
        let l = r.loss;
        (r.step, r.epoch, [l.total, l.bce, l.supcon, l.rank].map(f64::to_bits))
    };
    rows_a[split..].iter().map(loss_bits).eq(rows_b.iter().map(loss_bits))
        && same_bits(straight.model.params.tensors(), resumed.model.params.tensors())
        && same_bits(&straight.opt.m, &resumed.opt.m)
        && same_bits(&straight.opt.v, &resumed.opt.v)
        && straight.opt.step == resumed.opt.step
}
