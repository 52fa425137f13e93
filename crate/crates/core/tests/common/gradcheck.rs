//! Finite-difference oracle for the tape.
//!
//! Every op has an f64 reference forward written with plain loops, kept
//! separate from the engine's kernels. Analytic gradients from the engine are
//! compared with central differences of `Σ w ⊙ ref(x)` taken in f64.

#![allow(dead_code)]

use hvp_core::tensor::{Graph, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;
type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
    pub reference: Box<Reference>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub worst_forward_err: f64,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-7 {
        diff
    } else {
        diff / denom
    }
}

/// Returns (worst gradient relative error, worst forward relative error).
pub fn check(case: &Case, rng: &mut StdRng) -> (f64, f64) {
    let mut params: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|t| t.clone().requiring_grad())
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(i, p))
        .collect();
    let out = (case.build)(&mut g, &vars);
    let out_vals: Vec<f64> = g.value(out).iter().map(|&v| v as f64).collect();
    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let ref_out = (case.reference)(&base);
    assert_eq!(ref_out.len(), out_vals.len(), "{}: reference arity", case.name);
    let fwd_err = rel_err(&out_vals, &ref_out);

    let w: Vec<f32> = (0..out_vals.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.backward_from(out, &w, &mut params).expect("backward");

    let objective = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs)
            .iter()
            .zip(&w)
            .map(|(y, &wv)| y * wv as f64)
            .sum()
    };
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let analytic: Vec<f64> = p.grad().unwrap().iter().map(|&v| v as f64).collect();
        let mut fd = vec![0.0; analytic.len()];
        let mut xs = base.clone();
        for j in 0..fd.len() {
            let orig = xs[i][j];
            xs[i][j] = orig + FD_STEP;
            let up = objective(&xs);
            xs[i][j] = orig - FD_STEP;
            let down = objective(&xs);
            xs[i][j] = orig;
            fd[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    (worst, fwd_err)
}

// ---------------------------------------------------------------- references

pub fn affine_ref(x: &[f64], w: &[f64], b: &[f64], m: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * dout];
    for r in 0..m {
        for j in 0..dout {
            let mut s = b[j];
            for i in 0..din {
                s += x[r * din + i] * w[i * dout + j];
            }
            out[r * dout + j] = s;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_ref(
    x: &[f64],
    k: &[f64],
    m: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - 3) / stride + 1;
    let wo = (w + 2 * pad - 3) / stride + 1;
    let mut out = vec![0.0; m * f * ho * wo];
    for n in 0..m {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[((n * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((fi * c + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((n * f + fi) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

pub fn channel_bias_ref(x: &[f64], b: &[f64], c: usize, plane: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| v + b[(i / plane) % c])
        .collect()
}

pub fn relu_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn gap_ref(x: &[f64], plane: usize) -> Vec<f64> {
    x.chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn l2n_ref(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter().map(move |v| v / n).collect::<Vec<_>>()
        })
        .collect()
}

pub fn row_dot_ref(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    a.chunks(d)
        .zip(b.chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn matmul_nt_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
        }
    }
    out
}

pub fn lse_except_ref(x: &[f64], n: usize, exclude: &[usize]) -> Vec<f64> {
    x.chunks(n)
        .zip(exclude)
        .map(|(row, &ex)| {
            row.iter()
                .enumerate()
                .filter(|&(j, _)| j != ex)
                .map(|(_, v)| v.exp())
                .sum::<f64>()
                .ln()
        })
        .collect()
}

// ---------------------------------------------------------------- case generators

fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values in [−1,1] kept at least `gap` away from zero (ReLU kink).
fn rand_tensor_off_zero(rng: &mut StdRng, shape: &[usize], gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub const OPS: &[&str] = &[
    "affine",
    "matmul_nt",
    "conv2d",
    "channel_bias",
    "relu",
    "global_avg_pool",
    "l2_normalize",
    "row_dot",
    "scale",
    "add",
    "sub",
    "mean",
    "slice_rows",
    "concat_rows",
    "gather_cols",
    "row_logsumexp_except",
    "composed_encoder_head",
    "projector_predictor_head",
];

pub fn make_case(op: &'static str, rng: &mut StdRng) -> Case {
    match op {
        "affine" => {
            let (m, din, dout) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
            Case {
                name: op,
                inputs: vec![
                    rand_tensor(rng, &[m, din]),
                    rand_tensor(rng, &[din, dout]),
                    rand_tensor(rng, &[dout]),
                ],
                build: Box::new(|g, v| g.affine(v[0], v[1], v[2]).unwrap()),
                reference: Box::new(move |x| affine_ref(&x[0], &x[1], &x[2], m, din, dout)),
            }
        }
        "matmul_nt" => {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[n, k])],
                build: Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap()),
                reference: Box::new(move |x| matmul_nt_ref(&x[0], &x[1], m, k, n)),
            }
        }
        "conv2d" => {
            let m = rng.random_range(1..3);
            let c = rng.random_range(1..4);
            let h = rng.random_range(3..7);
            let w = rng.random_range(3..7);
            let f = rng.random_range(1..4);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, c, h, w]), rand_tensor(rng, &[f, c, 3, 3])],
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap()),
                reference: Box::new(move |x| conv_ref(&x[0], &x[1], m, c, h, w, f, stride, pad)),
            }
        }
        "channel_bias" => {
            let (m, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, c, h, w]), rand_tensor(rng, &[c])],
                build: Box::new(|g, v| g.channel_bias(v[0], v[1]).unwrap()),
                reference: Box::new(move |x| channel_bias_ref(&x[0], &x[1], c, h * w)),
            }
        }
        "relu" => {
            let n = rng.random_range(1..12);
            Case {
                name: op,
                inputs: vec![rand_tensor_off_zero(rng, &[n], 0.01)],
                build: Box::new(|g, v| g.relu(v[0])),
                reference: Box::new(|x| relu_ref(&x[0])),
            }
        }
        "global_avg_pool" => {
            let (m, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, c, h, w])],
                build: Box::new(|g, v| g.global_avg_pool(v[0]).unwrap()),
                reference: Box::new(move |x| gap_ref(&x[0], h * w)),
            }
        }
        "l2_normalize" => {
            let (m, d) = (rng.random_range(1..4), rng.random_range(2..7));
            // keep row norms well above eps so the op is smooth at the probe
            let mut t = rand_tensor(rng, &[m, d]);
            for row in t.data_mut().chunks_mut(d) {
                if row.iter().map(|v| v * v).sum::<f32>() < 0.05 {
                    row[0] = 0.5;
                }
            }
            Case {
                name: op,
                inputs: vec![t],
                build: Box::new(|g, v| g.l2_normalize(v[0], 1e-8).unwrap()),
                reference: Box::new(move |x| l2n_ref(&x[0], d, 1e-8)),
            }
        }
        "row_dot" => {
            let (m, d) = (rng.random_range(1..4), rng.random_range(1..7));
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, d]), rand_tensor(rng, &[m, d])],
                build: Box::new(|g, v| g.row_dot(v[0], v[1]).unwrap()),
                reference: Box::new(move |x| row_dot_ref(&x[0], &x[1], d)),
            }
        }
        "scale" => {
            let n = rng.random_range(1..8);
            let c: f32 = rng.random_range(-3.0..3.0);
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[n])],
                build: Box::new(move |g, v| g.scale(v[0], c)),
                reference: Box::new(move |x| x[0].iter().map(|v| v * c as f64).collect()),
            }
        }
        "add" | "sub" => {
            let n = rng.random_range(1..8);
            let sign = if op == "add" { 1.0 } else { -1.0 };
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[n]), rand_tensor(rng, &[n])],
                build: Box::new(move |g, v| {
                    if sign > 0.0 {
                        g.add(v[0], v[1]).unwrap()
                    } else {
                        g.sub(v[0], v[1]).unwrap()
                    }
                }),
                reference: Box::new(move |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + sign * b).collect()),
            }
        }
        "mean" => {
            let (m, d) = (rng.random_range(1..4), rng.random_range(1..5));
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, d])],
                build: Box::new(|g, v| g.mean(v[0])),
                reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]),
            }
        }
        "slice_rows" => {
            let (m, d) = (rng.random_range(2..6), rng.random_range(1..4));
            let start = rng.random_range(0..m);
            let len = rng.random_range(1..=m - start);
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, d])],
                build: Box::new(move |g, v| g.slice_rows(v[0], start, len).unwrap()),
                reference: Box::new(move |x| x[0][start * d..(start + len) * d].to_vec()),
            }
        }
        "concat_rows" => {
            let (m1, m2, d) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m1, d]), rand_tensor(rng, &[m2, d])],
                build: Box::new(|g, v| g.concat_rows(v[0], v[1]).unwrap()),
                reference: Box::new(|x| x[0].iter().chain(&x[1]).copied().collect()),
            }
        }
        "gather_cols" => {
            let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
            let cols: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let c2 = cols.clone();
            Case {
                name: op,
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.gather_cols(v[0], cols.clone()).unwrap()),
                reference: Box::new(move |x| c2.iter().enumerate().map(|(r, &c)| x[0][r * n + c]).collect()),
            }
        }
        "row_logsumexp_except" => {
            let (m, n) = (rng.random_range(1..5), rng.random_range(2..6));
            let ex: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let ex2 = ex.clone();
            let scale = rng.random_range(1.0f32..5.0);
            let mut t = rand_tensor(rng, &[m, n]);
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
            Case {
                name: op,
                inputs: vec![t],
                build: Box::new(move |g, v| g.row_logsumexp_except(v[0], &ex).unwrap()),
                reference: Box::new(move |x| lse_except_ref(&x[0], n, &ex2)),
            }
        }
        "composed_encoder_head" => composed_case(rng),
        "projector_predictor_head" => head_case(rng),
        other => panic!("unknown op {other}"),
    }
}

/// conv → bias → relu → pool → affine → l2 normalize → row dot with a
/// second normalized branch → mean.
fn composed_case(rng: &mut StdRng) -> Case {
    let (m, c, h, w, f, d) = (2, 2, 4, 4, 3, 3);
    loop {
        let inputs = vec![
            rand_tensor(rng, &[m, c, h, w]),
            rand_tensor(rng, &[f, c, 3, 3]),
            rand_tensor(rng, &[f]),
            rand_tensor(rng, &[f, d]),
            rand_tensor(rng, &[d]),
            rand_tensor(rng, &[m, d]),
        ];
        let base: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let pre = channel_bias_ref(&conv_ref(&base[0], &base[1], m, c, h, w, f, 2, 1), &base[2], f, 4);
        if pre.iter().any(|v| v.abs() < 0.02) {
            continue; // a ReLU kink inside the FD stencil
        }
        return Case {
            name: "composed_encoder_head",
            inputs,
            build: Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], 2, 1).unwrap();
                let y = g.channel_bias(y, v[2]).unwrap();
                let y = g.relu(y);
                let y = g.global_avg_pool(y).unwrap();
                let y = g.affine(y, v[3], v[4]).unwrap();
                let y = g.l2_normalize(y, 1e-8).unwrap();
                let o = g.l2_normalize(v[5], 1e-8).unwrap();
                let s = g.row_dot(y, o).unwrap();
                g.mean(s)
            }),
            reference: Box::new(move |x| {
                let y = conv_ref(&x[0], &x[1], m, c, h, w, f, 2, 1);
                let y = relu_ref(&channel_bias_ref(&y, &x[2], f, 4));
                let y = gap_ref(&y, 4);
                let y = l2n_ref(&affine_ref(&y, &x[3], &x[4], m, f, d), d, 1e-8);
                let o = l2n_ref(&x[5], d, 1e-8);
                let s = row_dot_ref(&y, &o, d);
                vec![s.iter().sum::<f64>() / m as f64]
            }),
        };
    }
}

/// affine → relu → affine (projector) then affine → relu → affine
/// (predictor), output `p`.
fn head_case(rng: &mut StdRng) -> Case {
    let (m, a, b, c, e) = (3, 4, 5, 3, 2);
    loop {
        let inputs = vec![
            rand_tensor(rng, &[m, a]),
            rand_tensor(rng, &[a, b]),
            rand_tensor(rng, &[b]),
            rand_tensor(rng, &[b, c]),
            rand_tensor(rng, &[c]),
            rand_tensor(rng, &[c, e]),
            rand_tensor(rng, &[e]),
            rand_tensor(rng, &[e, c]),
            rand_tensor(rng, &[c]),
        ];
        let x: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let pre1 = affine_ref(&x[0], &x[1], &x[2], m, a, b);
        let z = affine_ref(&relu_ref(&pre1), &x[3], &x[4], m, b, c);
        let pre2 = affine_ref(&z, &x[5], &x[6], m, c, e);
        if pre1.iter().chain(&pre2).any(|v| v.abs() < 0.02) {
            continue;
        }
        return Case {
            name: "projector_predictor_head",
            inputs,
            build: Box::new(|g, v| {
                let y = g.affine(v[0], v[1], v[2]).unwrap();
                let y = g.relu(y);
                let z = g.affine(y, v[3], v[4]).unwrap();
                let y = g.affine(z, v[5], v[6]).unwrap();
                let y = g.relu(y);
                g.affine(y, v[7], v[8]).unwrap()
            }),
            reference: Box::new(move |x| {
                let y = relu_ref(&affine_ref(&x[0], &x[1], &x[2], m, a, b));
                let z = affine_ref(&y, &x[3], &x[4], m, b, c);
                let y = relu_ref(&affine_ref(&z, &x[5], &x[6], m, c, e));
                affine_ref(&y, &x[7], &x[8], m, e, c)
            }),
        };
    }
}

/// Run `instances` random cases of `op`.
pub fn run_op(op: &'static str, instances: usize, seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst_rel_err = 0.0f64;
    let mut worst_forward_err = 0.0f64;
    for _ in 0..instances {
        let case = make_case(op, &mut rng);
        let (e, f) = check(&case, &mut rng);
        worst_rel_err = worst_rel_err.max(e);
        worst_forward_err = worst_forward_err.max(f);
    }
    Outcome {
        name: op,
        instances,
        worst_rel_err,
        worst_forward_err,
    }
}
