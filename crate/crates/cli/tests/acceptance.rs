//! The acceptance gate: nine numbered criteria, one test per criterion, each
//! printing a single `criterion N <name>: PASS/FAIL` line (visible with
//! `--nocapture`). Criteria 3-7 share one trained model fixture; criteria 7-8
//! share one two-run CLI pipeline fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use protoparts_cli::config::RunConfig;
use protoparts_cli::core::backbone::BackboneConfig;
use protoparts_cli::core::data::{
    synth_dataset, Dataset, DatasetManifest, ImagePatch, SplitCounts, HUE_ONLY_PAIR,
    TEXTURE_ONLY_PAIR,
};
use protoparts_cli::core::embedding::{
    activation_rows, embed_points, knn_purity, EmbeddingConfig, Split,
};
use protoparts_cli::core::explain::{perturbation_sensitivity, Perturbation};
use protoparts_cli::core::metrics::evaluate_predictions;
use protoparts_cli::core::model::{ProtoPartsModel, Stage};
use protoparts_cli::core::prototype::PROTOTYPES_PER_CLASS;
use protoparts_cli::core::tensor::{BnMode, RunningStats, Tape, Tensor, VarId};
use protoparts_cli::core::training::{
    fit, fit_baseline, push_prototypes, BaselineModel, EpochRecord, TrainConfig,
};
use protoparts_oracle::{diff, diff::widen, f32ref, f64ref};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 7;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} {name}: {word} ({detail})");
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn uni(rng: &mut ChaCha8Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values with magnitude in `[lo, hi]` and random sign: bounded away from
/// zero, for inputs feeding kinked ops.
fn signed(rng: &mut ChaCha8Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Gap between the largest and second-largest value, `INFINITY` for fewer
/// than two values.
fn top2_gap(vals: impl Iterator<Item = f32>) -> f32 {
    let (mut top, mut second) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for v in vals {
        if v > top {
            second = top;
            top = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f32::NEG_INFINITY {
        f32::INFINITY
    } else {
        top - second
    }
}

// ───────────────────────── criterion 1: gradient suite ─────────────────────

const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-3;
const FD_FLOOR: f64 = 1e-4;
const GRAD_SEEDS: usize = 5;
/// Kinked reductions must sit this far from a tie so a `FD_STEP` probe cannot
/// cross the kink.
const OP_MARGIN: f32 = 5e-3;

/// Build a tape graph over gradient leaves, then compare its analytic
/// gradients against central differences of the f64 mirror. `build` returns
/// the scalar loss and whether the draw respects the op's kink margins;
/// `None` means the draw was discarded.
fn grads_vs_mirror(
    shapes: &[Vec<usize>],
    inputs: &[Vec<f32>],
    build: impl FnOnce(&mut Tape, &[VarId]) -> (VarId, bool),
    mirror: &mut dyn FnMut(&[Vec<f64>]) -> f64,
) -> Option<f64> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = shapes
        .iter()
        .zip(inputs)
        .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap().requires_grad(true)))
        .collect();
    let (loss, margins_ok) = build(&mut tape, &ids);
    if !margins_ok {
        return None;
    }
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Option<&[f32]>> = ids.iter().map(|&id| grads.get(id)).collect();
    let wide: Vec<Vec<f64>> = inputs.iter().map(|v| widen(v)).collect();
    Some(diff::check_grads(mirror, &wide, &analytic, FD_STEP, FD_FLOOR))
}

fn masked_sum(tape: &mut Tape, y: VarId, shape: Vec<usize>, mask: &[f32]) -> VarId {
    let mv = tape.leaf(Tensor::new(shape, mask.to_vec()).unwrap());
    let prod = tape.mul(y, mv).unwrap();
    tape.sum(prod)
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn op_conv(seed: u64) -> Option<f64> {
    let (n, c, h, w, f, k) = (2, 3, 8, 8, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, n * c * h * w, -1.0, 1.0);
    let wts = uni(&mut rng, f * c * k * k, -0.5, 0.5);
    let mask = signed(&mut rng, n * f * h * w, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![n, c, h, w], vec![f, c, k, k]],
        &[x, wts],
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 1, 1).unwrap();
            (masked_sum(tape, y, vec![n, f, h, w], &mask), true)
        },
        &mut |ins| {
            let (y, _, _) = f64ref::conv2d(&ins[0], n, c, h, w, &ins[1], f, k, k, 1, 1);
            dot64(&y, &m64)
        },
    )
}

fn op_relu(seed: u64) -> Option<f64> {
    let len = 2 * 3 * 6 * 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = signed(&mut rng, len, 0.05, 1.0);
    let mask = signed(&mut rng, len, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![2, 3, 6, 6]],
        &[x],
        |tape, ids| {
            let y = tape.relu(ids[0]);
            (masked_sum(tape, y, vec![2, 3, 6, 6], &mask), true)
        },
        &mut |ins| dot64(&f64ref::relu(&ins[0]), &m64),
    )
}

fn op_sigmoid(seed: u64) -> Option<f64> {
    let len = 3 * 14;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, len, -2.0, 2.0);
    let mask = signed(&mut rng, len, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![3, 14]],
        &[x],
        |tape, ids| {
            let y = tape.sigmoid(ids[0]);
            (masked_sum(tape, y, vec![3, 14], &mask), true)
        },
        &mut |ins| dot64(&f64ref::sigmoid(&ins[0]), &m64),
    )
}

fn op_maxpool(seed: u64) -> Option<f64> {
    let (n, c, h, w) = (2, 3, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, n * c * h * w, -1.0, 1.0);
    let mask = signed(&mut rng, n * c * (h / 2) * (w / 2), 0.5, 1.0);
    let m64 = widen(&mask);
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let vals = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dy, dx)| x[((img * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    if top2_gap(vals.into_iter()) < OP_MARGIN {
                        return None;
                    }
                }
            }
        }
    }
    grads_vs_mirror(
        &[vec![n, c, h, w]],
        &[x],
        |tape, ids| {
            let y = tape.maxpool2d(ids[0]).unwrap();
            (masked_sum(tape, y, vec![n, c, h / 2, w / 2], &mask), true)
        },
        &mut |ins| dot64(&f64ref::maxpool2d(&ins[0], n, c, h, w), &m64),
    )
}

fn op_batchnorm_train(seed: u64) -> Option<f64> {
    let (n, c, h, w) = (3, 4, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, n * c * h * w, -2.0, 2.0);
    let gamma = uni(&mut rng, c, 0.5, 1.5);
    let beta = uni(&mut rng, c, -0.5, 0.5);
    let mask = signed(&mut rng, n * c * h * w, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![n, c, h, w], vec![c], vec![c]],
        &[x, gamma, beta],
        |tape, ids| {
            let mut running = RunningStats::new(c);
            let y = tape
                .batch_norm(ids[0], ids[1], ids[2], BnMode::Train, &mut running, 0.1, 1e-5)
                .unwrap();
            (masked_sum(tape, y, vec![n, c, h, w], &mask), true)
        },
        &mut |ins| {
            dot64(&f64ref::batchnorm_train(&ins[0], n, c, h * w, &ins[1], &ins[2], 1e-5), &m64)
        },
    )
}

fn op_batchnorm_eval(seed: u64) -> Option<f64> {
    let (n, c, h, w) = (3, 4, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, n * c * h * w, -2.0, 2.0);
    let gamma = uni(&mut rng, c, 0.5, 1.5);
    let beta = uni(&mut rng, c, -0.5, 0.5);
    let rm = uni(&mut rng, c, -0.3, 0.3);
    let rv = uni(&mut rng, c, 0.5, 1.5);
    let mask = signed(&mut rng, n * c * h * w, 0.5, 1.0);
    let m64 = widen(&mask);
    let (rm64, rv64) = (widen(&rm), widen(&rv));
    grads_vs_mirror(
        &[vec![n, c, h, w], vec![c], vec![c]],
        &[x, gamma, beta],
        |tape, ids| {
            let mut running = RunningStats { mean: rm.clone(), var: rv.clone() };
            let y = tape
                .batch_norm(ids[0], ids[1], ids[2], BnMode::Eval, &mut running, 0.1, 1e-5)
                .unwrap();
            (masked_sum(tape, y, vec![n, c, h, w], &mask), true)
        },
        &mut |ins| {
            let y =
                f64ref::batchnorm_eval(&ins[0], n, c, h * w, &ins[1], &ins[2], &rm64, &rv64, 1e-5);
            dot64(&y, &m64)
        },
    )
}

fn op_dense(seed: u64) -> Option<f64> {
    let (n, din, dout) = (4, 9, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, n * din, -1.0, 1.0);
    let w = uni(&mut rng, dout * din, -0.7, 0.7);
    let b = uni(&mut rng, dout, -0.3, 0.3);
    let mask = signed(&mut rng, n * dout, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![n, din], vec![dout, din], vec![dout]],
        &[x, w, b],
        |tape, ids| {
            let y = tape.dense(ids[0], ids[1], Some(ids[2])).unwrap();
            (masked_sum(tape, y, vec![n, dout], &mask), true)
        },
        &mut |ins| dot64(&f64ref::dense(&ins[0], n, din, &ins[1], dout, Some(&ins[2])), &m64),
    )
}

fn op_softmax_ce(seed: u64) -> Option<f64> {
    let (n, k) = (4, 5);
    let labels = [0usize, 2, 4, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uni(&mut rng, n * k, -2.0, 2.0);
    grads_vs_mirror(
        &[vec![n, k]],
        &[logits],
        |tape, ids| (tape.softmax_cross_entropy(ids[0], &labels).unwrap(), true),
        &mut |ins| f64ref::softmax_ce(&ins[0], n, k, &labels),
    )
}

fn op_proto_distance(seed: u64) -> Option<f64> {
    let (n, d, gh, gw, p) = (2, 5, 3, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uni(&mut rng, n * d * gh * gw, 0.0, 1.0);
    let protos = uni(&mut rng, p * d, 0.0, 1.0);
    let mask = signed(&mut rng, n * p * gh * gw, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![n, d, gh, gw], vec![p, d]],
        &[z, protos],
        |tape, ids| {
            let y = tape.proto_distance(ids[0], ids[1]).unwrap();
            (masked_sum(tape, y, vec![n, p, gh, gw], &mask), true)
        },
        &mut |ins| dot64(&f64ref::proto_distance(&ins[0], n, d, gh * gw, &ins[1], p), &m64),
    )
}

fn op_log_similarity(seed: u64) -> Option<f64> {
    let len = 2 * 4 * 9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // distances bounded away from zero keep the log's curvature moderate
    // relative to the step size
    let d = uni(&mut rng, len, 0.2, 2.0);
    let mask = signed(&mut rng, len, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![2, 4, 3, 3]],
        &[d],
        |tape, ids| {
            let y = tape.log_similarity(ids[0], 1e-4).unwrap();
            (masked_sum(tape, y, vec![2, 4, 3, 3], &mask), true)
        },
        &mut |ins| dot64(&f64ref::log_similarity(&ins[0], 1e-4), &m64),
    )
}

fn op_spatial_max(seed: u64) -> Option<f64> {
    let (n, p, cells) = (2, 5, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = uni(&mut rng, n * p * cells, -1.0, 1.0);
    let mask = signed(&mut rng, n * p, 0.5, 1.0);
    let m64 = widen(&mask);
    for g in 0..n * p {
        if top2_gap(sim[g * cells..(g + 1) * cells].iter().copied()) < OP_MARGIN {
            return None;
        }
    }
    grads_vs_mirror(
        &[vec![n, p, 3, 3]],
        &[sim],
        |tape, ids| {
            let y = tape.spatial_max(ids[0]).unwrap();
            (masked_sum(tape, y, vec![n, p], &mask), true)
        },
        &mut |ins| dot64(&f64ref::spatial_max(&ins[0], n * p, cells), &m64),
    )
}

fn min_class_case(seed: u64, own: bool) -> Option<f64> {
    let (n, p, cells) = (2, 6, 9);
    let labels = [0usize, 1];
    let class_of = [0usize, 0, 0, 1, 1, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = uni(&mut rng, n * p * cells, 0.05, 2.0);
    for img in 0..n {
        let candidates = (0..p)
            .filter(|&pi| (class_of[pi] == labels[img]) == own)
            .flat_map(|pi| {
                dist[(img * p + pi) * cells..(img * p + pi + 1) * cells].iter().copied()
            })
            .collect::<Vec<f32>>();
        // the min is a max with flipped sign, so the same gap guard applies
        if top2_gap(candidates.iter().map(|v| -v)) < OP_MARGIN {
            return None;
        }
    }
    grads_vs_mirror(
        &[vec![n, p, 3, 3]],
        &[dist],
        |tape, ids| (tape.min_class_distance(ids[0], &labels, &class_of, own).unwrap(), true),
        &mut |ins| f64ref::min_class_distance(&ins[0], n, p, cells, &labels, &class_of, own),
    )
}

fn op_cluster(seed: u64) -> Option<f64> {
    min_class_case(seed, true)
}

fn op_separation(seed: u64) -> Option<f64> {
    min_class_case(seed, false)
}

fn op_global_avg_pool(seed: u64) -> Option<f64> {
    let (n, c, h, w) = (2, 3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, n * c * h * w, -1.0, 1.0);
    let mask = signed(&mut rng, n * c, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![n, c, h, w]],
        &[x],
        |tape, ids| {
            let y = tape.global_avg_pool(ids[0]).unwrap();
            (masked_sum(tape, y, vec![n, c], &mask), true)
        },
        &mut |ins| dot64(&f64ref::global_avg_pool(&ins[0], n * c, h * w), &m64),
    )
}

fn op_add(seed: u64) -> Option<f64> {
    let len = 3 * 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uni(&mut rng, len, -1.0, 1.0);
    let b = uni(&mut rng, len, -1.0, 1.0);
    let mask = signed(&mut rng, len, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![3, 7], vec![3, 7]],
        &[a, b],
        |tape, ids| {
            let y = tape.add(ids[0], ids[1]).unwrap();
            (masked_sum(tape, y, vec![3, 7], &mask), true)
        },
        &mut |ins| ins[0].iter().zip(&ins[1]).zip(&m64).map(|((a, b), m)| (a + b) * m).sum(),
    )
}

fn op_mul(seed: u64) -> Option<f64> {
    let len = 3 * 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uni(&mut rng, len, -1.0, 1.0);
    let b = uni(&mut rng, len, -1.0, 1.0);
    let mask = signed(&mut rng, len, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![3, 7], vec![3, 7]],
        &[a, b],
        |tape, ids| {
            let y = tape.mul(ids[0], ids[1]).unwrap();
            (masked_sum(tape, y, vec![3, 7], &mask), true)
        },
        &mut |ins| ins[0].iter().zip(&ins[1]).zip(&m64).map(|((a, b), m)| a * b * m).sum(),
    )
}

fn op_scale(seed: u64) -> Option<f64> {
    let len = 3 * 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, len, -1.0, 1.0);
    let mask = signed(&mut rng, len, 0.5, 1.0);
    let m64 = widen(&mask);
    grads_vs_mirror(
        &[vec![3, 7]],
        &[x],
        |tape, ids| {
            let y = tape.scale(ids[0], 0.37);
            (masked_sum(tape, y, vec![3, 7], &mask), true)
        },
        &mut |ins| ins[0].iter().zip(&m64).map(|(x, m)| 0.37 * x * m).sum(),
    )
}

fn op_sum(seed: u64) -> Option<f64> {
    let len = 2 * 3 * 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, len, -1.0, 1.0);
    grads_vs_mirror(
        &[vec![2, 3, 4]],
        &[x],
        |tape, ids| (tape.sum(ids[0]), true),
        &mut |ins| ins[0].iter().sum(),
    )
}

fn op_affine(seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uni(&mut rng, 5, -1.0, 1.0);
    let b = uni(&mut rng, 4, -1.0, 1.0);
    grads_vs_mirror(
        &[vec![5], vec![4]],
        &[a, b],
        |tape, ids| {
            let sa = tape.sum(ids[0]);
            let sb = tape.sum(ids[1]);
            (tape.affine(&[(sa, 0.8), (sb, -0.08)]).unwrap(), true)
        },
        &mut |ins| 0.8 * ins[0].iter().sum::<f64>() - 0.08 * ins[1].iter().sum::<f64>(),
    )
}

fn op_l1_masked(seed: u64) -> Option<f64> {
    let (k, p) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = signed(&mut rng, k * p, 0.05, 1.0);
    let mask: Vec<f32> = (0..k * p).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let m64 = widen(&mask);
    let mask_t = Tensor::new(vec![k, p], mask).unwrap();
    grads_vs_mirror(
        &[vec![k, p]],
        &[w],
        |tape, ids| (tape.l1_masked(ids[0], &mask_t).unwrap(), true),
        &mut |ins| f64ref::l1_masked(&ins[0], &m64),
    )
}

/// Composed-network dimensions, small enough that margin-safe draws stay
/// common at the coarse step size.
const AN: usize = 1;
const AC: usize = 2;
const AS: usize = 6;
const AF: usize = 4;
const AD: usize = 4;
const AP: usize = 4;
const AK: usize = 2;
const A_LABELS: [usize; AN] = [0];
const A_CLASS_OF: [usize; AP] = [0, 0, 1, 1];
/// Composed-graph margin: an input probe of `FD_STEP` moves intermediate
/// values by at most a few multiples of the step, so ties must clear that.
const NET_MARGIN: f32 = 8e-3;
/// Smallest admissible prototype distance; the similarity log's curvature
/// below this would dominate the finite-difference truncation budget.
const DIST_FLOOR: f32 = 5e-2;

fn composed_margins(tape: &Tape, bn: VarId, relu_out: VarId, sim: VarId, dist: VarId) -> bool {
    if tape.value(bn).data().iter().any(|v| v.abs() < NET_MARGIN) {
        return false;
    }
    let r = tape.value(relu_out).data();
    for img in 0..AN {
        for ch in 0..AF {
            for oy in 0..AS / 2 {
                for ox in 0..AS / 2 {
                    let vals = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| {
                        r[((img * AF + ch) * AS + 2 * oy + dy) * AS + 2 * ox + dx]
                    });
                    let mut sorted = vals;
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    // ties among clamped zeros route no gradient either way
                    if sorted[1] > 0.0 && sorted[0] - sorted[1] < NET_MARGIN {
                        return false;
                    }
                }
            }
        }
    }
    let cells = (AS / 2) * (AS / 2);
    let s = tape.value(sim).data();
    for g in 0..AN * AP {
        if top2_gap(s[g * cells..(g + 1) * cells].iter().copied()) < NET_MARGIN {
            return false;
        }
    }
    let d = tape.value(dist).data();
    if d.iter().any(|&v| v < DIST_FLOOR) {
        return false;
    }
    for img in 0..AN {
        for own in [true, false] {
            let candidates: Vec<f32> = (0..AP)
                .filter(|&pi| (A_CLASS_OF[pi] == A_LABELS[img]) == own)
                .flat_map(|pi| d[(img * AP + pi) * cells..(img * AP + pi + 1) * cells].to_vec())
                .collect();
            if top2_gap(candidates.iter().map(|v| -v)) < NET_MARGIN {
                return false;
            }
        }
    }
    true
}

fn composed_case(seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uni(&mut rng, AN * AC * AS * AS, -1.0, 1.0);
    let cw = uni(&mut rng, AF * AC * 9, -0.4, 0.4);
    let gamma = uni(&mut rng, AF, 0.8, 1.2);
    let beta = uni(&mut rng, AF, -0.2, 0.2);
    let aw = uni(&mut rng, AD * AF, -0.6, 0.6);
    let protos = uni(&mut rng, AP * AD, 0.1, 0.9);
    let head = uni(&mut rng, AK * AP, -1.0, 1.0);
    let mut l1_mask = vec![0.0f32; AK * AP];
    for k in 0..AK {
        for p in 0..AP {
            if A_CLASS_OF[p] != k {
                l1_mask[k * AP + p] = 1.0;
            }
        }
    }
    let l1_mask64 = widen(&l1_mask);
    let mask_t = Tensor::new(vec![AK, AP], l1_mask).unwrap();
    let shapes = vec![
        vec![AN, AC, AS, AS],
        vec![AF, AC, 3, 3],
        vec![AF],
        vec![AF],
        vec![AD, AF, 1, 1],
        vec![AP, AD],
        vec![AK, AP],
    ];
    grads_vs_mirror(
        &shapes,
        &[x, cw, gamma, beta, aw, protos, head],
        |tape, ids| {
            let mut running = RunningStats::new(AF);
            let c1 = tape.conv2d(ids[0], ids[1], 1, 1).unwrap();
            let b1 = tape
                .batch_norm(c1, ids[2], ids[3], BnMode::Train, &mut running, 0.1, 1e-5)
                .unwrap();
            let r1 = tape.relu(b1);
            let p1 = tape.maxpool2d(r1).unwrap();
            let a1 = tape.conv2d(p1, ids[4], 1, 0).unwrap();
            let z = tape.sigmoid(a1);
            let dist = tape.proto_distance(z, ids[5]).unwrap();
            let sim = tape.log_similarity(dist, 1e-4).unwrap();
            let scores = tape.spatial_max(sim).unwrap();
            let logits = tape.dense(scores, ids[6], None).unwrap();
            let ce = tape.softmax_cross_entropy(logits, &A_LABELS).unwrap();
            let clst = tape.min_class_distance(dist, &A_LABELS, &A_CLASS_OF, true).unwrap();
            let sep = tape.min_class_distance(dist, &A_LABELS, &A_CLASS_OF, false).unwrap();
            let l1 = tape.l1_masked(ids[6], &mask_t).unwrap();
            let loss = tape.affine(&[(ce, 1.0), (clst, 0.8), (sep, -0.08), (l1, 1e-4)]).unwrap();
            let ok = composed_margins(tape, b1, r1, sim, dist);
            (loss, ok)
        },
        &mut |ins| {
            let (c1, _, _) = f64ref::conv2d(&ins[0], AN, AC, AS, AS, &ins[1], AF, 3, 3, 1, 1);
            let b1 = f64ref::batchnorm_train(&c1, AN, AF, AS * AS, &ins[2], &ins[3], 1e-5);
            let r1 = f64ref::relu(&b1);
            let p1 = f64ref::maxpool2d(&r1, AN, AF, AS, AS);
            let (a1, _, _) = f64ref::conv2d(&p1, AN, AF, AS / 2, AS / 2, &ins[4], AD, 1, 1, 1, 0);
            let z = f64ref::sigmoid(&a1);
            let cells = (AS / 2) * (AS / 2);
            let dist = f64ref::proto_distance(&z, AN, AD, cells, &ins[5], AP);
            let sim = f64ref::log_similarity(&dist, 1e-4);
            let scores = f64ref::spatial_max(&sim, AN * AP, cells);
            let logits = f64ref::dense(&scores, AN, AP, &ins[6], AK, None);
            let ce = f64ref::softmax_ce(&logits, AN, AK, &A_LABELS);
            let clst =
                f64ref::min_class_distance(&dist, AN, AP, cells, &A_LABELS, &A_CLASS_OF, true);
            let sep =
                f64ref::min_class_distance(&dist, AN, AP, cells, &A_LABELS, &A_CLASS_OF, false);
            ce + 0.8 * clst - 0.08 * sep + 1e-4 * f64ref::l1_masked(&ins[6], &l1_mask64)
        },
    )
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let cases: [(&str, fn(u64) -> Option<f64>); 19] = [
        ("conv2d", op_conv),
        ("relu", op_relu),
        ("sigmoid", op_sigmoid),
        ("maxpool2d", op_maxpool),
        ("batch_norm/train", op_batchnorm_train),
        ("batch_norm/eval", op_batchnorm_eval),
        ("dense", op_dense),
        ("softmax_cross_entropy", op_softmax_ce),
        ("proto_distance", op_proto_distance),
        ("log_similarity", op_log_similarity),
        ("spatial_max", op_spatial_max),
        ("cluster_cost", op_cluster),
        ("separation_cost", op_separation),
        ("global_avg_pool", op_global_avg_pool),
        ("add", op_add),
        ("mul", op_mul),
        ("scale", op_scale),
        ("sum", op_sum),
        ("affine", op_affine),
    ];
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (name, case) in cases.iter().chain([("composed_model", composed_case as fn(u64) -> Option<f64>)].iter()) {
        let mut checked = 0;
        let mut seed = 900u64;
        let mut op_worst = 0.0f64;
        while checked < GRAD_SEEDS {
            assert!(seed < 1500, "{name}: no margin-safe draws left");
            if let Some(err) = case(seed) {
                op_worst = op_worst.max(err);
                checked += 1;
            }
            seed += 1;
        }
        if op_worst >= GRAD_TOL {
            failures.push(format!("{name} {op_worst:.2e}"));
        }
        worst = worst.max(op_worst);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "20 graphs x {GRAD_SEEDS} seeds, step {FD_STEP}, worst rel err {worst:.2e} \
             (tol {GRAD_TOL}), {secs:.1}s{}{}",
            if failures.is_empty() { "" } else { "; failed: " },
            failures.join(", ")
        ),
    );
}

// ──────────────────── criterion 2: oracle equivalence ──────────────────────

fn tape_forward(
    shapes: &[Vec<usize>],
    inputs: &[Vec<f32>],
    build: impl FnOnce(&mut Tape, &[VarId]) -> VarId,
) -> Vec<f32> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = shapes
        .iter()
        .zip(inputs)
        .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
        .collect();
    let out = build(&mut tape, &ids);
    tape.value(out).data().to_vec()
}

fn conv_exact(rng: &mut ChaCha8Rng) -> bool {
    let cases = [(2usize, 3usize, 16usize, 16usize, 8usize, 3usize, 1usize, 1usize),
        (1, 4, 9, 9, 6, 5, 2, 2), (2, 2, 12, 12, 4, 1, 1, 0)];
    cases.into_iter().all(|(n, c, h, w, f, k, stride, pad)| {
        let x = uni(rng, n * c * h * w, -1.0, 1.0);
        let wts = uni(rng, f * c * k * k, -0.5, 0.5);
        let got = tape_forward(&[vec![n, c, h, w], vec![f, c, k, k]], &[x.clone(), wts.clone()], |t, ids| {
            t.conv2d(ids[0], ids[1], stride, pad).unwrap()
        });
        let (want, _, _) = f32ref::conv2d(&x, n, c, h, w, &wts, f, k, k, stride, pad);
        bits_eq(&got, &want)
    })
}

fn pool_exact(rng: &mut ChaCha8Rng) -> bool {
    [(2usize, 4usize, 16usize, 16usize), (3, 3, 10, 8)].into_iter().all(|(n, c, h, w)| {
        // coarse quantization forces ties inside pooling windows
        let x: Vec<f32> = (0..n * c * h * w).map(|_| rng.gen_range(-4i32..5) as f32 * 0.25).collect();
        let got = tape_forward(&[vec![n, c, h, w]], &[x.clone()], |t, ids| {
            t.maxpool2d(ids[0]).unwrap()
        });
        bits_eq(&got, &f32ref::maxpool2d(&x, n, c, h, w))
    })
}

fn dense_exact(rng: &mut ChaCha8Rng) -> bool {
    let (n, din, dout) = (8, 64, 32);
    let x = uni(rng, n * din, -1.0, 1.0);
    let w = uni(rng, dout * din, -1.0, 1.0);
    let b = uni(rng, dout, -0.5, 0.5);
    let no_bias = tape_forward(&[vec![n, din], vec![dout, din]], &[x.clone(), w.clone()], |t, ids| {
        t.dense(ids[0], ids[1], None).unwrap()
    });
    let with_bias = tape_forward(
        &[vec![n, din], vec![dout, din], vec![dout]],
        &[x.clone(), w.clone(), b.clone()],
        |t, ids| t.dense(ids[0], ids[1], Some(ids[2])).unwrap(),
    );
    bits_eq(&no_bias, &f32ref::dense(&x, n, din, &w, dout, None))
        && bits_eq(&with_bias, &f32ref::dense(&x, n, din, &w, dout, Some(&b)))
}

fn distance_map_exact(rng: &mut ChaCha8Rng) -> bool {
    let (n, d, gh, gw, p) = (2, 16, 8, 8, 12);
    let z = uni(rng, n * d * gh * gw, 0.0, 1.0);
    let protos = uni(rng, p * d, 0.0, 1.0);
    let got = tape_forward(&[vec![n, d, gh, gw], vec![p, d]], &[z.clone(), protos.clone()], |t, ids| {
        t.proto_distance(ids[0], ids[1]).unwrap()
    });
    bits_eq(&got, &f32ref::proto_distance(&z, n, d, gh, gw, &protos, p))
}

/// Straight-loop mirror of the class-conditioned min-distance cost: per-image
/// min over the class's prototype cells, then the mean in ascending image
/// order.
fn min_cost_brute(
    dist: &[f32],
    n: usize,
    p: usize,
    cells: usize,
    labels: &[usize],
    class_of: &[usize],
    own: bool,
) -> f32 {
    let mut total = 0.0f32;
    for img in 0..n {
        let mut best = f32::INFINITY;
        for pi in 0..p {
            if (class_of[pi] == labels[img]) != own {
                continue;
            }
            for cell in 0..cells {
                let v = dist[(img * p + pi) * cells + cell];
                if v < best {
                    best = v;
                }
            }
        }
        total += best;
    }
    total / n as f32
}

fn min_cost_exact(rng: &mut ChaCha8Rng) -> bool {
    let (n, p, gh, gw) = (3, 12, 4, 4);
    let cells = gh * gw;
    let labels = [0usize, 1, 2];
    let class_of = [0usize, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
    let dist = uni(rng, n * p * cells, 0.05, 2.0);
    [true, false].into_iter().all(|own| {
        let got = tape_forward(&[vec![n, p, gh, gw]], &[dist.clone()], |t, ids| {
            t.min_class_distance(ids[0], &labels, &class_of, own).unwrap()
        });
        got[0].to_bits() == min_cost_brute(&dist, n, p, cells, &labels, &class_of, own).to_bits()
    })
}

/// Push check on a real (untrained) model over a small synthetic set: the
/// brute-force argmin over single-image latents must reproduce every pushed
/// vector, provenance id, and cell.
fn push_exact() -> bool {
    let manifest = DatasetManifest {
        classes: ["AU", "BRU"].map(String::from).to_vec(),
        patches_per_class: 10,
        patch_size: 32,
        split: 0.8,
        augmentation_factor: 1,
        seed: 3,
    };
    let ds = synth_dataset(&manifest).unwrap();
    let backbone = BackboneConfig {
        input_size: 32,
        channels: vec![8, 16],
        feature_dim: 16,
        use_batchnorm: true,
    };
    let mut model =
        ProtoPartsModel::new(backbone, ds.classes.clone(), ds.stats.clone(), 4, 5).unwrap();
    let base = ds.base_train();
    let p_count = model.prototypes.count();
    let dim = model.prototypes.dim();
    let grid = model.backbone.config().grid();
    let cells = grid * grid;
    let pre: Vec<f32> =
        (0..p_count).flat_map(|p| model.prototypes.vector(p).to_vec()).collect();
    push_prototypes(&mut model, &base, 4).unwrap();

    // latents depend only on the backbone, which a push never touches
    let mut latents = Vec::with_capacity(base.len());
    for patch in &base {
        let batch = model.image_tensor(&patch.image).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, Stage::Eval).unwrap();
        latents.push(tape.value(pass.features).data().to_vec());
    }
    for p in 0..p_count {
        let mut best = f32::INFINITY;
        let mut at = None;
        for (i, patch) in base.iter().enumerate() {
            if patch.class_id != model.prototypes.class_of(p) {
                continue;
            }
            let dist = f32ref::proto_distance(&latents[i], 1, dim, grid, grid, &pre, p_count);
            for (cell, &d) in dist[p * cells..(p + 1) * cells].iter().enumerate() {
                if d < best {
                    best = d;
                    at = Some((i, cell));
                }
            }
        }
        let (i, cell) = at.unwrap();
        let want: Vec<f32> = (0..dim).map(|ch| latents[i][ch * cells + cell]).collect();
        let prov = model.prototypes.provenance()[p].as_ref().unwrap();
        if !bits_eq(model.prototypes.vector(p), &want)
            || prov.train_image_id != base[i].id
            || prov.latent_cell != (cell / grid, cell % grid)
        {
            return false;
        }
    }
    true
}

fn knn_exact(rng: &mut ChaCha8Rng) -> bool {
    let n = 200;
    let k = 7;
    let coords: Vec<[f32; 3]> =
        (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let got = knn_purity(&coords, &labels, k).unwrap();
    let mut per_point = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let mut s = 0.0f64;
                for d in 0..3 {
                    let df = coords[i][d] as f64 - coords[j][d] as f64;
                    s += df * df;
                }
                (j, s.sqrt())
            })
            .collect();
        cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let share = cand[..k].iter().filter(|&&(j, _)| labels[j] == labels[i]).count();
        per_point.push(share as f64 / k as f64);
    }
    let mean = per_point.iter().sum::<f64>() / n as f64;
    got.mean.to_bits() == mean.to_bits()
        && got.per_point.len() == n
        && got.per_point.iter().zip(&per_point).all(|(a, b)| a.to_bits() == b.to_bits())
}

fn weighted_metrics_exact(rng: &mut ChaCha8Rng) -> bool {
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6usize);
        let len = rng.gen_range(10..=60usize);
        let truth: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let got = evaluate_predictions(&truth, &pred, k).unwrap();

        let mut conf = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            conf[t][p] += 1;
        }
        let total = len as f64;
        let mut correct = 0usize;
        let (mut wp, mut wr, mut wf) = (0.0f64, 0.0f64, 0.0f64);
        for c in 0..k {
            correct += conf[c][c];
            let support: usize = conf[c].iter().sum();
            let predicted: usize = (0..k).map(|t| conf[t][c]).sum();
            let precision = if predicted == 0 { 0.0 } else { conf[c][c] as f64 / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { conf[c][c] as f64 / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            if got.per_class[c].precision.to_bits() != precision.to_bits()
                || got.per_class[c].recall.to_bits() != recall.to_bits()
                || got.per_class[c].f1.to_bits() != f1.to_bits()
                || got.per_class[c].support != support
            {
                return false;
            }
            wp += precision * support as f64;
            wr += recall * support as f64;
            wf += f1 * support as f64;
        }
        if got.accuracy.to_bits() != (correct as f64 / total).to_bits()
            || got.weighted_precision.to_bits() != (wp / total).to_bits()
            || got.weighted_recall.to_bits() != (wr / total).to_bits()
            || got.weighted_f1.to_bits() != (wf / total).to_bits()
        {
            return false;
        }
    }
    true
}

#[test]
fn criterion_2_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);
    let results = [
        ("conv", conv_exact(&mut rng)),
        ("pool", pool_exact(&mut rng)),
        ("dense", dense_exact(&mut rng)),
        ("distance_map", distance_map_exact(&mut rng)),
        ("cluster/separation", min_cost_exact(&mut rng)),
        ("push", push_exact()),
        ("knn", knn_exact(&mut rng)),
        ("weighted_metrics", weighted_metrics_exact(&mut rng)),
    ];
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|&(n, _)| n).collect();
    let pass = failed.is_empty() && secs < 120.0;
    verdict(
        2,
        "oracle equivalence",
        pass,
        &format!(
            "conv/pool/dense/distance_map/cluster/separation/push/knn/weighted_metrics \
             bit-exact, {secs:.1}s{}{}",
            if failed.is_empty() { "" } else { "; failed: " },
            failed.join(", ")
        ),
    );
}

// ─────────────── shared fixture for criteria 3 through 7 ───────────────────

struct Fixture {
    dataset: Dataset,
    model: Mutex<ProtoPartsModel>,
    records: Vec<EpochRecord>,
    proto_acc: f32,
    baseline_acc: f32,
    train_secs: f64,
}

fn acceptance_manifest() -> DatasetManifest {
    DatasetManifest { augmentation_factor: 2, seed: SEED, ..DatasetManifest::default() }
}

fn acceptance_backbone() -> BackboneConfig {
    BackboneConfig { channels: vec![16, 32, 64], ..BackboneConfig::default() }
}

fn acceptance_train() -> TrainConfig {
    TrainConfig {
        epochs_warmup: 2,
        epochs_joint: 6,
        push_every: 3,
        epochs_last_layer: 4,
        seed: SEED,
        ..TrainConfig::default()
    }
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dataset = synth_dataset(&acceptance_manifest()).unwrap();
        let cfg = acceptance_train();
        let t0 = Instant::now();
        let mut model = ProtoPartsModel::new(
            acceptance_backbone(),
            dataset.classes.clone(),
            dataset.stats.clone(),
            PROTOTYPES_PER_CLASS,
            cfg.seed,
        )
        .unwrap();
        let records = fit(&mut model, &dataset, &cfg).unwrap();
        let mut baseline = BaselineModel::new(
            acceptance_backbone(),
            dataset.classes.clone(),
            dataset.stats.clone(),
            cfg.seed,
        )
        .unwrap();
        fit_baseline(&mut baseline, &dataset, &cfg).unwrap();
        let train_secs = t0.elapsed().as_secs_f64();
        let test: Vec<&ImagePatch> = dataset.test.iter().collect();
        let proto_acc = model.accuracy(&test, 64).unwrap();
        let baseline_acc = baseline.accuracy(&test, 64).unwrap();
        Fixture { dataset, model: Mutex::new(model), records, proto_acc, baseline_acc, train_secs }
    })
}

#[test]
fn criterion_3_interpretability_cost() {
    let f = fixture();
    let gap = (f.proto_acc - f.baseline_acc).abs();
    let pass = f.proto_acc >= 0.90 && gap <= 0.03 + 1e-6;
    verdict(
        3,
        "interpretability cost",
        pass,
        &format!(
            "prototype {:.4} (floor 0.90), baseline {:.4}, gap {:.4} (cap 0.03), \
             both trained in {:.1} min (target 30)",
            f.proto_acc,
            f.baseline_acc,
            gap,
            f.train_secs / 60.0
        ),
    );
}

#[test]
fn criterion_4_push_invariants() {
    let f = fixture();
    let mut model = f.model.lock().unwrap();
    let expected = f.dataset.classes.len() * PROTOTYPES_PER_CLASS;
    let provenance: Vec<(String, (usize, usize))> = model
        .prototypes
        .provenance()
        .iter()
        .map(|p| p.as_ref().map(|pr| (pr.train_image_id.clone(), pr.latent_cell)).unwrap())
        .collect();
    let with_provenance = provenance.len();

    let by_id: BTreeMap<&str, &ImagePatch> =
        f.dataset.base_train().into_iter().map(|p| (p.id.as_str(), p)).collect();
    let p_count = model.prototypes.count();
    let mut worst_dist = 0.0f32;
    for (p, (id, (cy, cx))) in provenance.iter().enumerate() {
        let patch = by_id[id.as_str()];
        let batch = model.image_tensor(&patch.image).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, Stage::Eval).unwrap();
        let dist = tape.value(pass.distances);
        let grid = dist.shape()[2];
        let d = dist.data()[(p * grid + cy) * grid + cx];
        worst_dist = worst_dist.max(d);
    }
    drop(model);

    let pre = f.records.iter().rev().find(|r| r.stage == "joint").unwrap().val_accuracy;
    let post = f.records.last().unwrap().val_accuracy;
    let drop_ = (post - pre).abs();
    let pass = with_provenance == expected
        && with_provenance == p_count
        && worst_dist < 1e-6
        && drop_ <= 0.02 + 1e-6;
    verdict(
        4,
        "push invariants",
        pass,
        &format!(
            "{with_provenance}/{expected} prototypes carry provenance, worst provenance-cell \
             distance {worst_dist:.2e} (cap 1e-6), accuracy pre-push {pre:.4} vs final {post:.4} \
             (cap 0.02)"
        ),
    );
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_5_descriptor_properties() {
    let f = fixture();
    let mut model = f.model.lock().unwrap();
    let p_count = model.prototypes.count();
    let per_class = model.prototypes.per_class();

    let mut worst_null = 0.0f32;
    for p in 0..p_count {
        let s = perturbation_sensitivity(&mut model, p, Perturbation::Identity).unwrap();
        worst_null = worst_null.max(s.abs());
    }

    let pair_medians = |model: &mut ProtoPartsModel, pair: (usize, usize)| {
        let mut hue = Vec::new();
        let mut texture = Vec::new();
        for class in [pair.0, pair.1] {
            for p in class * per_class..(class + 1) * per_class {
                hue.push(perturbation_sensitivity(model, p, Perturbation::Hue).unwrap());
                texture.push(perturbation_sensitivity(model, p, Perturbation::Texture).unwrap());
            }
        }
        (median(hue), median(texture))
    };
    let (hue_h, hue_t) = pair_medians(&mut model, HUE_ONLY_PAIR);
    let (tex_h, tex_t) = pair_medians(&mut model, TEXTURE_ONLY_PAIR);

    let pass = worst_null == 0.0 && hue_h > hue_t && tex_t > tex_h;
    verdict(
        5,
        "descriptor properties",
        pass,
        &format!(
            "null sensitivity {worst_null:.1e} over {p_count} prototypes; hue-pair medians \
             hue {hue_h:.3} > texture {hue_t:.3}; texture-pair medians texture {tex_t:.3} > \
             hue {tex_h:.3}"
        ),
    );
}

#[test]
fn criterion_6_embedding_quality() {
    let t0 = Instant::now();
    let f = fixture();
    let mut model = f.model.lock().unwrap();
    let test: Vec<&ImagePatch> = f.dataset.test.iter().collect();
    let mut points = Vec::new();
    activation_rows(&mut model, &test, Split::Test, 64, &mut points).unwrap();
    drop(model);

    let cfg = EmbeddingConfig { seed: SEED, ..EmbeddingConfig::default() };
    cfg.validate(points.len()).unwrap();
    let embedded = embed_points(&points, &cfg).unwrap();
    let coords: Vec<[f32; 3]> = embedded.iter().map(|e| e.coords).collect();
    let labels: Vec<usize> = embedded.iter().map(|e| e.label).collect();
    let purity = knn_purity(&coords, &labels, 10).unwrap().mean;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xD1B5_4A32_D192_ED03);
    let random_layout: Vec<[f32; 3]> = (0..coords.len())
        .map(|_| {
            [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
        })
        .collect();
    let random_purity = knn_purity(&random_layout, &labels, 10).unwrap().mean;

    let secs = t0.elapsed().as_secs_f64();
    let pass = purity >= 0.85 && purity >= random_purity + 0.2 && secs < 300.0;
    verdict(
        6,
        "embedding quality",
        pass,
        &format!(
            "test-set purity@10 {purity:.4} (floor 0.85) vs random Gaussian layout \
             {random_purity:.4} (+0.2 required) over {} points, {secs:.1}s",
            coords.len()
        ),
    );
}

#[test]
fn criterion_7_mode_collapse_diagnostic() {
    let f = fixture();
    let fixture_diversity = f.model.lock().unwrap().prototypes.diversity().unwrap();

    let p = pipeline();
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(p.run_a.join("training-summary.json")).unwrap(),
    )
    .unwrap();
    let reported = summary["prototype_diversity"].as_f64();

    let in_range = |d: f64| d > 0.0 && d <= 1.0;
    let pass = in_range(fixture_diversity as f64) && reported.is_some_and(in_range);
    verdict(
        7,
        "mode-collapse diagnostic",
        pass,
        &format!(
            "fixture diversity {fixture_diversity:.4}, pipeline summary reports {:?}, both in (0, 1]",
            reported
        ),
    );
}

// ─────────────── shared CLI pipeline fixture for criteria 7-8 ──────────────

struct Pipeline {
    _root: tempfile::TempDir,
    run_a: PathBuf,
    run_b: PathBuf,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn pipeline_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.patches_per_class = 12;
    cfg.dataset.patch_size = 32;
    cfg.dataset.augmentation_factor = 2;
    cfg.dataset.seed = 11;
    cfg.backbone.input_size = 32;
    cfg.backbone.channels = vec![8, 16];
    cfg.backbone.feature_dim = 16;
    cfg.prototypes_per_class = 3;
    cfg.train.epochs_warmup = 1;
    cfg.train.epochs_joint = 3;
    cfg.train.push_every = 2;
    cfg.train.epochs_last_layer = 2;
    cfg.train.batch_size = 16;
    cfg.train.seed = 11;
    cfg.embedding.k_neighbors = 8;
    cfg.embedding.epochs = 80;
    cfg.embedding.seed = 11;
    cfg.explain_top_k = 4;
    cfg.eval_batch = 32;
    cfg
}

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let cfg_path = root.path().join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&pipeline_config()).unwrap())
            .unwrap();
        let run = |out: &Path| {
            let data = out.join("dataset");
            let model = out.join("model.ppks");
            let steps: [Vec<String>; 5] = [
                vec!["synth".into()],
                vec!["train".into(), "--data".into(), data.display().to_string()],
                vec![
                    "eval".into(),
                    "--checkpoint".into(),
                    model.display().to_string(),
                    "--data".into(),
                    data.display().to_string(),
                ],
                vec![
                    "explain".into(),
                    "--checkpoint".into(),
                    model.display().to_string(),
                    "--data".into(),
                    data.display().to_string(),
                ],
                vec![
                    "embed".into(),
                    "--checkpoint".into(),
                    model.display().to_string(),
                    "--data".into(),
                    data.display().to_string(),
                ],
            ];
            for args in steps {
                let output = Command::new(env!("CARGO_BIN_EXE_protoparts"))
                    .arg("--config")
                    .arg(&cfg_path)
                    .arg("--out")
                    .arg(out)
                    .args(&args)
                    .output()
                    .unwrap();
                assert!(
                    output.status.success(),
                    "pipeline step {:?} failed: {}",
                    args,
                    String::from_utf8_lossy(&output.stderr)
                );
            }
        };
        let run_a = root.path().join("a");
        let run_b = root.path().join("b");
        run(&run_a);
        run(&run_b);
        Pipeline { _root: root, run_a, run_b }
    })
}

/// All files under `root` as relative path → bytes.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn criterion_8_determinism() {
    let p = pipeline();
    let a = tree(&p.run_a);
    let b = tree(&p.run_b);
    for key in ["model.ppks", "metrics.json", "predictions.csv", "embedding.csv", "embedding.png"] {
        assert!(a.contains_key(key), "pipeline output missing {key}");
    }
    let differing: Vec<&String> =
        a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    let pass = !a.is_empty() && differing.is_empty();
    verdict(
        8,
        "determinism",
        pass,
        &format!(
            "synth/train/eval/explain/embed twice under one seed: {} files bit-identical{}{:?}",
            a.len(),
            if differing.is_empty() { "" } else { "; differing: " },
            differing
        ),
    );
}

// ───────────────── criterion 9: data pipeline arithmetic ───────────────────

#[test]
fn criterion_9_data_pipeline_arithmetic() {
    let views = [2000usize, 2000, 4000].map(|n| DatasetManifest {
        patches_per_class: n,
        split: 0.8,
        augmentation_factor: 30,
        ..DatasetManifest::default()
    });
    let total = views
        .iter()
        .map(|m| m.counts())
        .fold(SplitCounts { train: 0, test: 0, augmented_train: 0 }, |a, b| a + b);
    let want = SplitCounts { train: 38_400, test: 9_600, augmented_train: 1_152_000 };
    let pass = total == want;
    verdict(
        9,
        "data pipeline arithmetic",
        pass,
        &format!(
            "three six-class views at 2000/2000/4000 per class, 80/20 split, factor 30: \
             {}/{}/{} train/test/augmented",
            total.train, total.test, total.augmented_train
        ),
    );
}
