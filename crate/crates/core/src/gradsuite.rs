//! Finite-difference verification of every differentiable building block:
//! each primitive tape operation, each attention score kind, each
//! activation, each encoding, and the full mixed-network loss. Shared by
//! the `gradcheck` command and the test suite.

use crate::diffcore::gradcheck::{check_gradients, GradReport};
use crate::diffcore::{ParamId, ParamKind, ParamSet, Tape, Var};
use crate::error::Result;
use crate::hypernet::HyperNetwork;
use crate::nnops::{apply_activation, apply_encoding, attention_scores, score_weight_shape, ConvParams, ModelConfig};
use crate::rng::Prng;
use crate::searchspace::{ActivationKind, AttentionKind, EncodingKind, SearchSpaceConfig};

/// Aggregate of one checked group (one op, one kind, ...) across instances.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub instances: usize,
    pub checked_coords: usize,
    pub worst_abs_diff: f64,
    pub failures: usize,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn absorb(&mut self, r: &GradReport) {
        self.checked_coords += r.checked;
        self.failures += r.failures;
        if r.worst_abs_diff > self.worst_abs_diff {
            self.worst_abs_diff = r.worst_abs_diff;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub groups: Vec<GroupReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupReport::passed)
    }

    pub fn total_coords(&self) -> usize {
        self.groups.iter().map(|g| g.checked_coords).sum()
    }
}

/// Values bounded away from zero so kinked activations (ReLU family) see
/// no crossing within the finite-difference step.
fn fill_away_from_zero(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.uniform(0.1, 1.0);
            if rng.uniform(0.0, 1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

fn fill_smooth(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// One gradient check of `build` (which reconstructs the graph from the
/// parameter set each call and returns the scalar loss variable).
fn check_one(
    set: &mut ParamSet,
    build: &dyn Fn(&mut Tape, &ParamSet) -> Result<Var>,
) -> Result<GradReport> {
    let ids: Vec<ParamId> = set.ids().collect();
    let loss_fn = |s: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, s)?;
        Ok(tape.value(loss))
    };
    let grad_fn = |s: &ParamSet, id: ParamId| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, s)?;
        tape.backward(loss)?;
        let var = tape.param(s, id);
        Ok(tape
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; s.get(id).numel()]))
    };
    check_gradients(set, &ids, loss_fn, grad_fn)
}

/// Project a tensor to a scalar with fixed random weights so every output
/// coordinate influences the loss.
fn project(tape: &mut Tape, rng: &mut Prng, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let weights = crate::diffcore::Tensor::new(shape, fill_smooth(rng, n))?;
    let w = tape.constant(weights);
    let prod = tape.mul(v, w)?;
    tape.mean_all(prod)
}

struct OpCase {
    name: &'static str,
    /// (param shapes, whether inputs must stay away from zero)
    param_shapes: Vec<Vec<usize>>,
    kinked: bool,
    build: fn(&mut Tape, &ParamSet, &[ParamId], &mut Prng) -> Result<Var>,
}

fn primitive_cases() -> Vec<OpCase> {
    fn p(tape: &mut Tape, set: &ParamSet, ids: &[ParamId], i: usize) -> Var {
        tape.param(set, ids[i])
    }
    vec![
        OpCase {
            name: "matmul",
            param_shapes: vec![vec![3, 4], vec![4, 2]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.matmul(a, b)
            },
        },
        OpCase {
            name: "matmul_nt",
            param_shapes: vec![vec![3, 4], vec![2, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.matmul_nt(a, b)
            },
        },
        OpCase {
            name: "add",
            param_shapes: vec![vec![3, 4], vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.add(a, b)
            },
        },
        OpCase {
            name: "sub",
            param_shapes: vec![vec![3, 4], vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.sub(a, b)
            },
        },
        OpCase {
            name: "mul",
            param_shapes: vec![vec![3, 4], vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.mul(a, b)
            },
        },
        OpCase {
            name: "add_row",
            param_shapes: vec![vec![3, 4], vec![4]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.add_row(a, b)
            },
        },
        OpCase {
            name: "scale",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.scale(a, 1.7)
            },
        },
        OpCase {
            name: "scale_by_scalar",
            param_shapes: vec![vec![3, 4], vec![1]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, c) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.scale_by_scalar(a, c)
            },
        },
        OpCase {
            name: "tanh",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.tanh(a)
            },
        },
        OpCase {
            name: "sigmoid",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.sigmoid(a)
            },
        },
        OpCase {
            name: "relu",
            param_shapes: vec![vec![3, 4]],
            kinked: true,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.relu(a)
            },
        },
        OpCase {
            name: "leaky_relu",
            param_shapes: vec![vec![3, 4]],
            kinked: true,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.leaky_relu(a, 0.01)
            },
        },
        OpCase {
            name: "elu",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.elu(a)
            },
        },
        OpCase {
            name: "gelu",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.gelu(a)
            },
        },
        OpCase {
            name: "softmax_rows",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.softmax(a, 1)
            },
        },
        OpCase {
            name: "softmax_cols",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.softmax(a, 0)
            },
        },
        OpCase {
            name: "softmax_vector",
            param_shapes: vec![vec![5]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.softmax(a, 0)
            },
        },
        OpCase {
            name: "layer_norm",
            param_shapes: vec![vec![3, 4], vec![4], vec![4]],
            kinked: false,
            build: |t, s, ids, _| {
                let (x, g, b) = (p(t, s, ids, 0), p(t, s, ids, 1), p(t, s, ids, 2));
                t.layer_norm(x, g, b, crate::nnops::LAYER_NORM_EPS)
            },
        },
        OpCase {
            name: "conv1d_depthwise_k1",
            param_shapes: vec![vec![6, 3], vec![1, 3]],
            kinked: false,
            build: |t, s, ids, _| {
                let (x, w) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.conv1d_depthwise(x, w, 1)
            },
        },
        OpCase {
            name: "conv1d_depthwise_k3",
            param_shapes: vec![vec![6, 3], vec![3, 3]],
            kinked: false,
            build: |t, s, ids, _| {
                let (x, w) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.conv1d_depthwise(x, w, 3)
            },
        },
        OpCase {
            name: "conv1d_depthwise_k5",
            param_shapes: vec![vec![6, 3], vec![5, 3]],
            kinked: false,
            build: |t, s, ids, _| {
                let (x, w) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.conv1d_depthwise(x, w, 5)
            },
        },
        OpCase {
            name: "patchify",
            param_shapes: vec![vec![12]],
            kinked: false,
            build: |t, s, ids, _| {
                let x = p(t, s, ids, 0);
                t.patchify(x, 4, 2)
            },
        },
        OpCase {
            name: "slice_cols",
            param_shapes: vec![vec![3, 6]],
            kinked: false,
            build: |t, s, ids, _| {
                let x = p(t, s, ids, 0);
                t.slice_cols(x, 2, 3)
            },
        },
        OpCase {
            name: "concat_cols",
            param_shapes: vec![vec![3, 2], vec![3, 3]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b) = (p(t, s, ids, 0), p(t, s, ids, 1));
                t.concat_cols(&[a, b])
            },
        },
        OpCase {
            name: "repeat_rows",
            param_shapes: vec![vec![2, 3]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.repeat_rows(a, 2)
            },
        },
        OpCase {
            name: "tile_rows",
            param_shapes: vec![vec![2, 3]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.tile_rows(a, 2)
            },
        },
        OpCase {
            name: "reshape",
            param_shapes: vec![vec![2, 6]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.reshape(a, vec![3, 4])
            },
        },
        OpCase {
            name: "mean_all",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.mean_all(a)
            },
        },
        OpCase {
            name: "sum_all",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.sum_all(a)
            },
        },
        OpCase {
            name: "sum_list",
            param_shapes: vec![vec![3, 4], vec![3, 4], vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let (a, b, c) = (p(t, s, ids, 0), p(t, s, ids, 1), p(t, s, ids, 2));
                t.sum_list(&[a, b, c])
            },
        },
        OpCase {
            name: "index_scalar",
            param_shapes: vec![vec![5]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.index_scalar(a, 2)
            },
        },
        OpCase {
            name: "gather",
            param_shapes: vec![vec![6]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                t.gather(a, &[4, 0, 2])
            },
        },
        OpCase {
            name: "dropout_fixed_mask",
            param_shapes: vec![vec![3, 4]],
            kinked: false,
            build: |t, s, ids, _| {
                let a = p(t, s, ids, 0);
                let scale = 1.0 / 0.8;
                let mask = vec![
                    scale, 0.0, scale, scale, 0.0, scale, scale, scale, 0.0, scale, scale, scale,
                ];
                t.dropout(a, mask)
            },
        },
    ]
}

/// Check every primitive tape operation over random instances.
pub fn check_primitive_ops(instances: usize, seed: u64) -> Result<Vec<GroupReport>> {
    let root = Prng::new(seed).split("gradsuite-primitives");
    let mut out = Vec::new();
    for case in primitive_cases() {
        let mut group = GroupReport {
            name: case.name.to_string(),
            instances,
            checked_coords: 0,
            worst_abs_diff: 0.0,
            failures: 0,
        };
        for inst in 0..instances {
            let mut rng = root.split(case.name).split_index("instance", inst as u64);
            let mut set = ParamSet::new();
            let mut ids = Vec::new();
            for (i, shape) in case.param_shapes.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = if case.kinked {
                    fill_away_from_zero(&mut rng, n)
                } else {
                    fill_smooth(&mut rng, n)
                };
                ids.push(set.add(&format!("p{i}"), ParamKind::Model, shape.clone(), data));
            }
            let proj_rng = rng.split("projection");
            let build_fn = case.build;
            let report = check_one(&mut set, &|tape, s| {
                let mut r = proj_rng.clone();
                let y = build_fn(tape, s, &ids, &mut r)?;
                project(tape, &mut r, y)
            })?;
            group.absorb(&report);
        }
        out.push(group);
    }
    Ok(out)
}

/// Check d(scores)/d{Q, K, W_d} for every attention kind.
pub fn check_attention_kinds(instances: usize, seed: u64) -> Result<Vec<GroupReport>> {
    let root = Prng::new(seed).split("gradsuite-attention");
    let (l, d_h) = (3usize, 2usize);
    let mut out = Vec::new();
    for kind in AttentionKind::ALL {
        let mut group = GroupReport {
            name: format!("attention_{kind}"),
            instances,
            checked_coords: 0,
            worst_abs_diff: 0.0,
            failures: 0,
        };
        for inst in 0..instances {
            let mut rng = root
                .split(&kind.to_string())
                .split_index("instance", inst as u64);
            let mut set = ParamSet::new();
            let q = set.add("q", ParamKind::Model, vec![l, d_h], fill_smooth(&mut rng, l * d_h));
            let k = set.add("k", ParamKind::Model, vec![l, d_h], fill_smooth(&mut rng, l * d_h));
            let w = score_weight_shape(kind, d_h).map(|shape| {
                let n: usize = shape.iter().product();
                set.add("w_d", ParamKind::Model, shape, fill_smooth(&mut rng, n))
            });
            let proj_rng = rng.split("projection");
            let report = check_one(&mut set, &|tape, s| {
                let mut r = proj_rng.clone();
                let qv = tape.param(s, q);
                let kv = tape.param(s, k);
                let wv = w.map(|id| tape.param(s, id));
                let scores = attention_scores(tape, kind, qv, kv, wv)?;
                project(tape, &mut r, scores)
            })?;
            group.absorb(&report);
        }
        out.push(group);
    }
    Ok(out)
}

/// Check each activation (inputs bounded away from the ReLU-family kink).
pub fn check_activations(instances: usize, seed: u64) -> Result<Vec<GroupReport>> {
    let root = Prng::new(seed).split("gradsuite-activations");
    let mut out = Vec::new();
    for kind in ActivationKind::ALL {
        let mut group = GroupReport {
            name: format!("activation_{kind}"),
            instances,
            checked_coords: 0,
            worst_abs_diff: 0.0,
            failures: 0,
        };
        for inst in 0..instances {
            let mut rng = root
                .split(&kind.to_string())
                .split_index("instance", inst as u64);
            let mut set = ParamSet::new();
            let x = set.add(
                "x",
                ParamKind::Model,
                vec![3, 4],
                fill_away_from_zero(&mut rng, 12),
            );
            let proj_rng = rng.split("projection");
            let report = check_one(&mut set, &|tape, s| {
                let mut r = proj_rng.clone();
                let xv = tape.param(s, x);
                let y = apply_activation(tape, kind, xv)?;
                project(tape, &mut r, y)
            })?;
            group.absorb(&report);
        }
        out.push(group);
    }
    Ok(out)
}

/// Check each encoding operation (conv kinds differentiate through both
/// the depthwise filter and the pointwise mix).
pub fn check_encodings(instances: usize, seed: u64) -> Result<Vec<GroupReport>> {
    let root = Prng::new(seed).split("gradsuite-encodings");
    let (l, d) = (6usize, 3usize);
    let mut out = Vec::new();
    for kind in EncodingKind::ALL {
        let mut group = GroupReport {
            name: format!("encoding_{kind}"),
            instances,
            checked_coords: 0,
            worst_abs_diff: 0.0,
            failures: 0,
        };
        for inst in 0..instances {
            let mut rng = root
                .split(&kind.to_string())
                .split_index("instance", inst as u64);
            let mut set = ParamSet::new();
            let x = set.add("x", ParamKind::Model, vec![l, d], fill_smooth(&mut rng, l * d));
            let conv = kind.kernel().map(|kernel| ConvParams {
                depthwise: set.add(
                    "dw",
                    ParamKind::Model,
                    vec![kernel, d],
                    fill_smooth(&mut rng, kernel * d),
                ),
                pointwise: set.add("pw", ParamKind::Model, vec![d, d], fill_smooth(&mut rng, d * d)),
            });
            let proj_rng = rng.split("projection");
            let report = check_one(&mut set, &|tape, s| {
                let mut r = proj_rng.clone();
                let xv = tape.param(s, x);
                let y = apply_encoding(tape, s, kind, conv.as_ref(), xv)?;
                project(tape, &mut r, y)
            })?;
            group.absorb(&report);
        }
        out.push(group);
    }
    Ok(out)
}

fn grad_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        num_blocks: 1,
        num_heads: 2,
        patch_len: 4,
        patch_stride: 2,
        lookback: 8,
        horizon: 2,
        num_channels: 1,
        dropout: 0.0,
        instance_norm: false,
    }
}

/// Check the full mixed-network batch loss against finite differences for
/// every model and architectural parameter of a one-block hyper-network.
pub fn check_hypernet_loss(instances: usize, seed: u64) -> Result<GroupReport> {
    let root = Prng::new(seed).split("gradsuite-hypernet");
    let mut group = GroupReport {
        name: "hypernet_loss_1block".to_string(),
        instances,
        checked_coords: 0,
        worst_abs_diff: 0.0,
        failures: 0,
    };
    let cfg = grad_cfg();
    for inst in 0..instances {
        let mut rng = root.split_index("instance", inst as u64);
        let mut hn = HyperNetwork::new(cfg.clone(), SearchSpaceConfig::full(), rng.seed())?;
        // Nudge architectural parameters off uniform so their gradients are
        // informative.
        for id in hn.arch_params() {
            let n = hn.params.get(id).numel();
            let data = fill_smooth(&mut rng, n);
            hn.params.get_mut(id).data = data;
        }
        let lookback: Vec<f64> = (0..cfg.lookback).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let target: Vec<f64> = (0..cfg.horizon).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ids: Vec<ParamId> = hn.params.ids().collect();

        // check_gradients perturbs the set through its closures; hand it the
        // network's own set and put it back afterwards so the parameter ids
        // stay valid.
        let mut set = std::mem::take(&mut hn.params);
        let batch = [(lookback.as_slice(), target.as_slice())];
        let report = check_gradients(
            &mut set,
            &ids,
            |s| {
                let mut tape = Tape::new();
                let loss = hn.batch_loss_with(s, &mut tape, &batch, &mut None)?;
                Ok(tape.value(loss))
            },
            |s, id| {
                let mut tape = Tape::new();
                let loss = hn.batch_loss_with(s, &mut tape, &batch, &mut None)?;
                tape.backward(loss)?;
                let var = tape.param(s, id);
                Ok(tape
                    .grad(var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; s.get(id).numel()]))
            },
        )?;
        hn.params = set;
        group.absorb(&report);
    }
    Ok(group)
}

/// The whole suite, as run by the `gradcheck` command and the acceptance
/// tests.
pub fn run_full_suite(instances: usize, hypernet_instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut groups = Vec::new();
    groups.extend(check_primitive_ops(instances, seed)?);
    groups.extend(check_attention_kinds(instances, seed)?);
    groups.extend(check_activations(instances, seed)?);
    groups.extend(check_encodings(instances, seed)?);
    groups.push(check_hypernet_loss(hypernet_instances, seed)?);
    Ok(SuiteReport { groups })
}
