//! Finite-difference audit of every differentiable op and of the end-to-end
//! losses, in 64-bit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport, Graph, Tensor, Var, DIFFERENTIABLE_OPS};
use crate::datagen::{make_batch, Augment, TripleBatch, TripleRecord};
use crate::encoders::{LocConfig, VitConfig};
use crate::error::{Error, Result};
use crate::geo::{GeoFootprint, GeoPoint, LocalCoord};
use crate::init;
use crate::inr::{inr_query, unfold3x3};
use crate::model::{Model, ModelConfig};
use crate::objectives::{combined_loss, incl_loss, secl_loss, MemoryBank};
use crate::params::ParamStore;
use crate::rng::{self, Domain};

pub const TOLERANCE: f64 = 1e-4;

/// End-to-end checks reported after the per-op rows.
pub const PIPELINE_CHECKS: &[&str] = &[
    "encode_rs",
    "encode_sv",
    "encode_loc",
    "f_theta",
    "inr_query",
    "incl_loss",
    "secl_loss",
    "combined_loss",
];

#[derive(Clone, Copy, Debug)]
pub struct AuditOptions {
    pub instances: usize,
    pub seed: u64,
    /// Replace the derivative supplied to the `map` op with a wrong one.
    pub inject_fault: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            instances: 10,
            seed: 0,
            inject_fault: false,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    init::normal(rng, shape, 1.0)
}

fn rand_range(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone().reshaped(g.shape(y))?);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn merge(name: &str, reports: Vec<GradCheckReport>) -> GradCheckReport {
    let max = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    GradCheckReport {
        op_name: name.to_string(),
        max_relative_error: max,
        tolerance: TOLERANCE,
        passed: reports.iter().all(|r| r.passed),
        coords_checked: reports.iter().map(|r| r.coords_checked).sum(),
    }
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Builds one random instance of `op`: inputs and the function producing the
/// op's (unreduced) output.
fn op_instance(op: &str, rng: &mut ChaCha8Rng, inject_fault: bool) -> Result<(Vec<Tensor<f64>>, OpFn)> {
    let variant = rng.random_range(0..3usize);
    let bshape: Vec<usize> = match variant {
        0 => vec![3, 4],
        1 => vec![1],
        _ => vec![4],
    };
    let inst: (Vec<Tensor<f64>>, OpFn) = match op {
        "matmul" => {
            let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let a = if ta { randn(rng, &[5, 4]) } else { randn(rng, &[4, 5]) };
            let b = if tb { randn(rng, &[3, 5]) } else { randn(rng, &[5, 3]) };
            (vec![a, b], Box::new(move |g, v| g.matmul_t(v[0], v[1], ta, tb)))
        }
        "batch_matmul" => {
            let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let a = if ta { randn(rng, &[2, 4, 3]) } else { randn(rng, &[2, 3, 4]) };
            let b = if tb { randn(rng, &[2, 5, 4]) } else { randn(rng, &[2, 4, 5]) };
            (vec![a, b], Box::new(move |g, v| g.matmul_t(v[0], v[1], ta, tb)))
        }
        "add" => (vec![randn(rng, &[3, 4]), randn(rng, &bshape)], Box::new(|g, v| g.add(v[0], v[1]))),
        "sub" => (vec![randn(rng, &bshape), randn(rng, &[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        "mul" => (vec![randn(rng, &[3, 4]), randn(rng, &bshape)], Box::new(|g, v| g.mul(v[0], v[1]))),
        "div" => {
            let b = Tensor::from_fn(&bshape, |_| {
                let m = rng.random_range(0.5..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            (vec![randn(rng, &[3, 4]), b], Box::new(|g, v| g.div(v[0], v[1])))
        }
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            (vec![randn(rng, &[3, 4])], Box::new(move |g, v| Ok(g.scale(v[0], c))))
        }
        "add_scalar" => {
            let c = rng.random_range(-2.0..2.0);
            (vec![randn(rng, &[3, 4])], Box::new(move |g, v| Ok(g.add_scalar(v[0], c))))
        }
        "neg" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.neg(v[0])))),
        "exp" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.exp(v[0])))),
        "log" => (vec![rand_range(rng, &[3, 4], 0.5, 2.0)], Box::new(|g, v| g.log(v[0]))),
        "sqrt" => (vec![rand_range(rng, &[3, 4], 0.5, 2.0)], Box::new(|g, v| g.sqrt(v[0]))),
        "gelu" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        "sin" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.sin(v[0])))),
        "cos" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.cos(v[0])))),
        "sigmoid" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        "map" => {
            let df: fn(f64) -> f64 = if inject_fault { |x| 2.0 * x * x } else { |x| 3.0 * x * x };
            (vec![randn(rng, &[3, 4])], Box::new(move |g, v| Ok(g.map(v[0], |x| x * x * x, df))))
        }
        "concat" => {
            let axis = rng.random_range(0..3usize);
            let parts: Vec<Tensor<f64>> = (1..=3)
                .map(|k| {
                    let mut s = vec![2, 3, 2];
                    s[axis] = k;
                    randn(rng, &s)
                })
                .collect();
            (parts, Box::new(move |g, v| g.concat(v, axis)))
        }
        "slice" => {
            let axis = rng.random_range(0..3usize);
            let start = rng.random_range(0..2usize);
            (vec![randn(rng, &[4, 4, 4])], Box::new(move |g, v| g.slice(v[0], axis, start, 2)))
        }
        "reshape" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        "permute" => {
            let mut perm = vec![0, 1, 2, 3];
            perm.shuffle(rng);
            (vec![randn(rng, &[2, 3, 4, 2])], Box::new(move |g, v| g.permute(v[0], &perm)))
        }
        "sum_axis" => {
            let axis = rng.random_range(0..3usize);
            (vec![randn(rng, &[2, 3, 4])], Box::new(move |g, v| g.sum_axis(v[0], axis)))
        }
        "mean_axis" => {
            let axis = rng.random_range(0..3usize);
            (vec![randn(rng, &[2, 3, 4])], Box::new(move |g, v| g.mean_axis(v[0], axis)))
        }
        "sum_all" => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.sum_all(v[0])))),
        "softmax_rows" => (vec![randn(rng, &[3, 5])], Box::new(|g, v| g.softmax_rows(v[0]))),
        "log_softmax_rows" => (vec![randn(rng, &[3, 5])], Box::new(|g, v| g.log_softmax_rows(v[0]))),
        "l2_normalize_rows" => (vec![randn(rng, &[3, 5])], Box::new(|g, v| Ok(g.l2_normalize_rows(v[0], 1e-12)))),
        "layer_norm" => (vec![randn(rng, &[3, 6])], Box::new(|g, v| Ok(g.layer_norm(v[0], 1e-5)))),
        "gather_rows" => {
            let index: Vec<Option<usize>> = (0..6)
                .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..4usize)))
                .collect();
            (vec![randn(rng, &[4, 3])], Box::new(move |g, v| g.gather_rows(v[0], &index)))
        }
        other => return Err(Error::Contract(format!("no audit instance for op {other}"))),
    };
    Ok(inst)
}

fn check_op(op: &str, opts: &AuditOptions) -> Result<GradCheckReport> {
    let mut reports = Vec::with_capacity(opts.instances);
    for k in 0..opts.instances {
        let mut rng = rng::stream(opts.seed, Domain::Eval, (k as u64) << 8 | op_seed(op));
        let (inputs, f) = op_instance(op, &mut rng, opts.inject_fault)?;
        // Output shape is only known after a forward pass.
        let mut probe = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let out = f(&mut probe, &vars)?;
        let w = randn(&mut rng, probe.shape(out));
        let check_opts = GradCheckOptions {
            tolerance: TOLERANCE,
            max_coords_per_input: None,
            seed: k as u64,
        };
        reports.push(grad_check(
            op,
            &inputs,
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, &w)
            },
            check_opts,
        )?);
    }
    Ok(merge(op, reports))
}

fn op_seed(op: &str) -> u64 {
    DIFFERENTIABLE_OPS.iter().position(|o| *o == op).unwrap_or(255) as u64
}

/// A tiny but complete model for end-to-end checks.
pub fn tiny_model_config() -> ModelConfig {
    let vit = |channels, image_size| VitConfig {
        channels,
        image_size,
        patch: 4,
        width: 8,
        depth: 1,
        heads: 2,
        ff_width: 12,
        out_dim: 6,
    };
    ModelConfig {
        embed_dim: 6,
        rs: vit(2, 12),
        sv: vit(1, 8),
        loc: LocConfig {
            frequencies: 4,
            sigma: 1.0,
            hidden: 8,
            out_dim: 6,
        },
    }
}

/// Random records matching [`tiny_model_config`].
pub fn tiny_records(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<TripleRecord>> {
    let cfg = tiny_model_config();
    (0..n)
        .map(|_| {
            let lon0 = rng.random_range(-1.0..1.0);
            let lat0 = rng.random_range(-0.5..0.5);
            let fp = GeoFootprint::new(lon0, lon0 + 0.01, lat0, lat0 + 0.01)?;
            let q = LocalCoord::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9));
            let s = cfg.rs.image_size;
            let t = cfg.sv.image_size;
            Ok(TripleRecord {
                rs: init::normal(rng, &[1, cfg.rs.channels, s, s], 1.0),
                sv: init::normal(rng, &[1, t, t], 1.0),
                loc: fp.from_local(q)?,
                footprint: fp,
                label_class: 0,
                label_reg: 0.0,
            })
        })
        .collect()
}

fn tiny_setup(opts: &AuditOptions, k: u64) -> Result<(Model, ParamStore<f64>, TripleBatch<f64>, MemoryBank<f64>)> {
    let mut rng = rng::stream(opts.seed, Domain::Eval, 0xF000 + k);
    let (model, store) = Model::init::<f64>(tiny_model_config(), opts.seed + k)?;
    let records = tiny_records(&mut rng, 3)?;
    let batch = make_batch(&records, &[0, 1, 2], &mut rng, Augment::NONE)?;
    let mut bank = MemoryBank::new(8, 6)?;
    let mut g = Graph::inference();
    let pts: Vec<GeoPoint> = (0..4)
        .map(|_| GeoPoint::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)))
        .collect::<Result<_>>()?;
    let e = model.loc_embed(&mut g, &store, &pts)?;
    bank.push(g.value(e))?;
    Ok((model, store, batch, bank))
}

fn pipeline_check(name: &str, opts: &AuditOptions) -> Result<GradCheckReport> {
    let tau = 0.5;
    let mut reports = Vec::new();
    for k in 0..opts.instances as u64 {
        let (model, store, batch, bank) = tiny_setup(opts, k)?;
        let check_opts = GradCheckOptions {
            tolerance: TOLERANCE,
            max_coords_per_input: Some(6),
            seed: k,
        };
        let mut wrng = rng::stream(opts.seed, Domain::Eval, 0xE000 + k);
        let w_d = randn(&mut wrng, &[3, 6]);
        let report = match name {
            "encode_rs" => grad_check_params(
                name,
                &store,
                |g, s| {
                    let fm = model.rs.encode_map(g, s, &batch.rs)?;
                    let w = randn(&mut rng::stream(k, Domain::Eval, 1), g.shape(fm));
                    weighted_sum(g, fm, &w)
                },
                check_opts,
            )?,
            "encode_sv" => grad_check_params(
                name,
                &store,
                |g, s| {
                    let y = model.sv_embed(g, s, &batch.sv)?;
                    weighted_sum(g, y, &w_d)
                },
                check_opts,
            )?,
            "encode_loc" => grad_check_params(
                name,
                &store,
                |g, s| {
                    let y = model.loc_embed(g, s, &batch.locs)?;
                    weighted_sum(g, y, &w_d)
                },
                check_opts,
            )?,
            "f_theta" => {
                let z = randn(&mut wrng, &[3, 9 * 6]);
                let d = rand_range(&mut wrng, &[3, 2], -1.0, 1.0);
                let ft = model.ftheta;
                let w = ft.layer.weight;
                let b = ft.layer.bias.expect("f_theta has a bias");
                let inputs = vec![store.value(w).clone(), store.value(b).clone(), z, d];
                grad_check(
                    name,
                    &inputs,
                    |g, v| {
                        g.bind(w, v[0]);
                        g.bind(b, v[1]);
                        let y = ft.forward(g, &store, v[2], v[3])?;
                        weighted_sum(g, y, &w_d)
                    },
                    GradCheckOptions {
                        max_coords_per_input: None,
                        ..check_opts
                    },
                )?
            }
            "inr_query" => {
                let p = 3;
                let fm = randn(&mut wrng, &[p, p, 6]);
                let q = LocalCoord::new(wrng.random_range(-0.6..0.6), wrng.random_range(-0.6..0.6));
                let ft = model.ftheta;
                let (w, b) = (ft.layer.weight, ft.layer.bias.expect("f_theta has a bias"));
                let inputs = vec![fm, store.value(w).clone(), store.value(b).clone()];
                grad_check(
                    name,
                    &inputs,
                    |g, v| {
                        g.bind(w, v[1]);
                        g.bind(b, v[2]);
                        let m = g.reshape(v[0], &[1, p, p, 6])?;
                        let um = unfold3x3(g, m)?;
                        let um = g.reshape(um, &[p, p, 54])?;
                        let z = inr_query(g, &store, &ft, um, q)?;
                        weighted_sum(g, z, &w_d.row(0).iter().copied().collect::<Vec<_>>().into_tensor())
                    },
                    GradCheckOptions {
                        max_coords_per_input: Some(20),
                        ..check_opts
                    },
                )?
            }
            "incl_loss" => {
                let z = randn(&mut wrng, &[4, 6]);
                let s = randn(&mut wrng, &[4, 6]);
                grad_check(
                    name,
                    &[z, s],
                    |g, v| {
                        let z = g.l2_normalize_rows(v[0], 1e-12);
                        let s = g.l2_normalize_rows(v[1], 1e-12);
                        incl_loss(g, z, s, tau)
                    },
                    GradCheckOptions {
                        max_coords_per_input: None,
                        ..check_opts
                    },
                )?
            }
            "secl_loss" => {
                let e = randn(&mut wrng, &[4, 6]);
                let z = randn(&mut wrng, &[4, 6]);
                let s = randn(&mut wrng, &[4, 6]);
                grad_check(
                    name,
                    &[e, z, s],
                    |g, v| {
                        let e = g.l2_normalize_rows(v[0], 1e-12);
                        let z = g.l2_normalize_rows(v[1], 1e-12);
                        let s = g.l2_normalize_rows(v[2], 1e-12);
                        secl_loss(g, e, z, s, &bank, tau)
                    },
                    GradCheckOptions {
                        max_coords_per_input: None,
                        ..check_opts
                    },
                )?
            }
            "combined_loss" => grad_check_params(
                name,
                &store,
                |g, s| {
                    let e = model.embed_batch(g, s, &batch)?;
                    let incl = incl_loss(g, e.z, e.s, tau)?;
                    let secl = secl_loss(g, e.e, e.z, e.s, &bank, tau)?;
                    combined_loss(g, incl, secl, 1.0)
                },
                check_opts,
            )?,
            other => return Err(Error::Contract(format!("unknown pipeline check {other}"))),
        };
        reports.push(report);
    }
    Ok(merge(name, reports))
}

trait IntoTensor {
    fn into_tensor(self) -> Tensor<f64>;
}

impl IntoTensor for Vec<f64> {
    fn into_tensor(self) -> Tensor<f64> {
        let n = self.len();
        Tensor::new(vec![1, n], self).expect("non-empty")
    }
}

/// One report per differentiable op (registry order), then the end-to-end checks.
pub fn run_audit(opts: &AuditOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for op in DIFFERENTIABLE_OPS {
        out.push(check_op(op, opts)?);
    }
    for name in PIPELINE_CHECKS {
        out.push(pipeline_check(name, opts)?);
    }
    Ok(out)
}
