//! Central finite-difference oracle shared by the gradient tests and the
//! acceptance harness. Every check returns `(label, relative error)`.

#![allow(dead_code)]

use groupcomm::dprnn::{inter_block_pass, intra_block_pass, overlap_add, segment, DprnnBlock};
use groupcomm::groupcomm::{group_communicate, group_merge, group_split, GroupComm};
use groupcomm::layers::{blstm, Blstm, LayerNorm, Linear, Lstm, ResidualRnn, LAYER_NORM_EPS};
use groupcomm::metrics::{neg_snr_loss, pit_loss};
use groupcomm::params::{Bound, ParamRegistry};
use groupcomm::separator::{ModelConfig, SeparatorModel};
use groupcomm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub type Checks = Vec<(String, f64)>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, falling back to `‖a − n‖` for all-zero gradients.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Reduces any output to a scalar with fixed random weights so that no
/// gradient component cancels by symmetry.
fn project(out: &Tensor, seed: u64) -> Tensor {
    let w = Tensor::new(random(&mut rng(seed), out.numel()), out.shape()).unwrap();
    out.mul(&w).unwrap().sum_all()
}

pub type Input = (Vec<f64>, Vec<usize>);

/// Gradient of `f` with respect to each of `inputs`.
pub fn fd_inputs(label: &str, inputs: &[Input], f: impl Fn(&[Tensor]) -> Tensor) -> Checks {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s).unwrap())
        .collect();
    project(&f(&leaves), 99).backward().unwrap();
    let mut out = Vec::new();
    for (k, (data, shape)) in inputs.iter().enumerate() {
        let analytic = leaves[k].grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let mut numeric = vec![0.0; data.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let consts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (d, s))| {
                        let mut d = d.clone();
                        if j == k {
                            d[i] += delta;
                        }
                        Tensor::new(d, s).unwrap()
                    })
                    .collect();
                project(&f(&consts), 99).item().unwrap()
            };
            *slot = (eval(H) - eval(-H)) / (2.0 * H);
        }
        out.push((format!("{label} input {k} {shape:?}"), rel_err(&analytic, &numeric)));
    }
    out
}

/// Gradient of a registry-parameterised graph with respect to every entry,
/// at a generic point: the initial values plus U(±0.1) noise. At the exact
/// initialisation the zero FC biases put the LayerNorm of zero-padded
/// positions at zero variance, where its curvature scale (√ε = 1e-4) is
/// comparable to the step and central differences stop being accurate.
pub fn fd_registry(label: &str, reg: &ParamRegistry, f: impl Fn(&Bound) -> Tensor) -> Checks {
    let mut reg = reg.clone();
    let mut r = rng(1234);
    for id in reg.ids().collect::<Vec<_>>() {
        for v in &mut reg.entry_mut(id).data {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let p = reg.bind(true);
    project(&f(&p), 7).backward().unwrap();
    let grads = p.grads();
    let mut out = Vec::new();
    for (idx, entry) in reg.entries().iter().enumerate() {
        let mut numeric = vec![0.0; entry.data.len()];
        let id = reg.id(&entry.name).unwrap();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut moved = reg.clone();
                moved.entry_mut(id).data[i] += delta;
                project(&f(&moved.bind(false)), 7).item().unwrap()
            };
            *slot = (eval(H) - eval(-H)) / (2.0 * H);
        }
        out.push((format!("{label} {}", entry.name), rel_err(&grads[idx], &numeric)));
    }
    out
}

/// [`fd_inputs`] for a single input.
pub fn fd_input(label: &str, input: &Input, f: impl Fn(&[Tensor]) -> Tensor) -> Checks {
    fd_inputs(label, std::slice::from_ref(input), f)
}

fn inp(r: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    (random(r, shape.iter().product()), shape.to_vec())
}

pub fn elementwise_checks() -> Checks {
    let mut r = rng(1);
    let a = inp(&mut r, &[3, 4]);
    let b = inp(&mut r, &[3, 4]);
    let row = inp(&mut r, &[4]);
    let mut c = Checks::new();
    c.extend(fd_inputs("add", &[a.clone(), b.clone()], |t| t[0].add(&t[1]).unwrap()));
    c.extend(fd_inputs("add broadcast", &[a.clone(), row.clone()], |t| {
        t[0].add(&t[1]).unwrap()
    }));
    c.extend(fd_inputs("sub broadcast", &[row.clone(), a.clone()], |t| {
        t[0].sub(&t[1]).unwrap()
    }));
    c.extend(fd_inputs("mul", &[a.clone(), b.clone()], |t| t[0].mul(&t[1]).unwrap()));
    c.extend(fd_inputs("mul broadcast", &[a.clone(), row], |t| {
        t[0].mul(&t[1]).unwrap()
    }));
    c.extend(fd_input("scale", &a, |t| t[0].scale(-2.5)));
    c.extend(fd_input("sigmoid", &a, |t| t[0].scale(3.0).sigmoid()));
    c.extend(fd_input("tanh", &a, |t| t[0].scale(2.0).tanh()));
    // keep values clear of the kink
    let away: Vec<f64> = a.0.iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect();
    c.extend(fd_inputs("relu", &[(away, a.1.clone())], |t| t[0].relu()));
    let positive: Vec<f64> = b.0.iter().map(|v| v.abs() + 0.5).collect();
    c.extend(fd_inputs("log10", &[(positive, b.1)], |t| t[0].log10()));
    c
}

pub fn linear_algebra_checks() -> Checks {
    let mut r = rng(2);
    let mut c = fd_inputs("matmul", &[inp(&mut r, &[3, 5]), inp(&mut r, &[5, 2])], |t| {
        t[0].matmul(&t[1]).unwrap()
    });
    for stride in [1, 2, 3] {
        c.extend(fd_inputs(
            &format!("conv1d stride {stride}"),
            &[inp(&mut r, &[2, 13]), inp(&mut r, &[3, 2, 4])],
            |t| t[0].conv1d(&t[1], stride).unwrap(),
        ));
        c.extend(fd_inputs(
            &format!("conv1d_transpose stride {stride}"),
            &[inp(&mut r, &[3, 6]), inp(&mut r, &[3, 2, 4])],
            |t| t[0].conv1d_transpose(&t[1], stride).unwrap(),
        ));
    }
    c
}

pub fn layout_checks() -> Checks {
    let mut r = rng(3);
    let x = inp(&mut r, &[2, 3, 4]);
    let mut c = Checks::new();
    for axis in 0..3 {
        c.extend(fd_input(&format!("sum {axis}"), &x, |t| t[0].sum(axis).unwrap()));
        c.extend(fd_input(&format!("mean {axis}"), &x, |t| t[0].mean(axis).unwrap()));
        c.extend(fd_input(&format!("slice {axis}"), &x, |t| {
            t[0].slice(axis, 1, 1).unwrap()
        }));
    }
    c.extend(fd_input("sum_all", &x, |t| t[0].sum_all()));
    c.extend(fd_input("mean_all", &x, |t| t[0].mean_all()));
    c.extend(fd_input("reshape", &x, |t| t[0].reshape(&[4, 6]).unwrap()));
    c.extend(fd_input("permute", &x, |t| t[0].permute(&[2, 0, 1]).unwrap()));
    c.extend(fd_inputs("transpose", &[inp(&mut r, &[3, 5])], |t| {
        t[0].transpose().unwrap()
    }));
    let y = inp(&mut r, &[2, 1, 4]);
    c.extend(fd_inputs("concat", &[x, y], |t| {
        Tensor::concat(&[t[0].clone(), t[1].clone()], 1).unwrap()
    }));
    c
}

pub fn fused_checks() -> Checks {
    let mut r = rng(4);
    let mut c = fd_inputs(
        "layer_norm",
        &[inp(&mut r, &[3, 5]), inp(&mut r, &[5]), inp(&mut r, &[5])],
        |t| t[0].layer_norm(&t[1], &t[2], LAYER_NORM_EPS).unwrap(),
    );
    c.extend(fd_inputs(
        "lstm_cell",
        &[inp(&mut r, &[3, 8]), inp(&mut r, &[3, 2])],
        |t| t[0].lstm_cell(Some(&t[1])).unwrap(),
    ));
    c.extend(fd_inputs("lstm_cell first step", &[inp(&mut r, &[2, 12])], |t| {
        t[0].lstm_cell(None).unwrap()
    }));
    c
}

pub fn recurrent_checks() -> Checks {
    let mut r = rng(5);
    let mut reg = ParamRegistry::new();
    let fwd = Lstm::new(&mut reg, "lstm", 3, 4, &mut r).unwrap();
    let bi = Blstm::new(&mut reg, "blstm", 3, 2, &mut r).unwrap();
    let seq = Tensor::new(random(&mut r, 5 * 2 * 3), &[5, 2, 3]).unwrap();
    let single = Tensor::new(random(&mut r, 6 * 3), &[6, 3]).unwrap();
    let mut c = fd_registry("lstm forward", &reg, |p| fwd.run(p, &seq, false).unwrap());
    c.extend(fd_registry("lstm reverse", &reg, |p| fwd.run(p, &seq, true).unwrap()));
    c.extend(fd_registry("blstm", &reg, |p| bi.run(p, &seq).unwrap()));
    c.extend(fd_registry("blstm unbatched", &reg, |p| {
        blstm(p, &bi, &single).unwrap()
    }));
    let p = reg.bind(false);
    c.extend(fd_inputs("blstm", &[(seq.to_vec(), vec![5, 2, 3])], |t| {
        bi.run(&p, &t[0]).unwrap()
    }));
    c
}

pub fn feedforward_checks() -> Checks {
    let mut r = rng(6);
    let mut reg = ParamRegistry::new();
    let lin = Linear::new(&mut reg, "fc", 4, 3, &mut r).unwrap();
    let ln = LayerNorm::new(&mut reg, "ln", 4).unwrap();
    let res_bi = ResidualRnn::new(&mut reg, "res_bi", 4, 3, true, &mut r).unwrap();
    let res_uni = ResidualRnn::new(&mut reg, "res_uni", 4, 3, false, &mut r).unwrap();
    let x2 = Tensor::new(random(&mut r, 5 * 4), &[5, 4]).unwrap();
    let x3 = Tensor::new(random(&mut r, 4 * 2 * 4), &[4, 2, 4]).unwrap();
    let mut c = fd_registry("linear", &reg, |p| lin.forward(p, &x2).unwrap());
    c.extend(fd_registry("layer norm", &reg, |p| ln.forward(p, &x2).unwrap()));
    c.extend(fd_registry("residual bidirectional", &reg, |p| {
        res_bi.forward(p, &x3).unwrap()
    }));
    c.extend(fd_registry("residual unidirectional", &reg, |p| {
        res_uni.forward(p, &x3).unwrap()
    }));
    c
}

pub fn dual_path_checks() -> Checks {
    let mut r = rng(7);
    let mut reg = ParamRegistry::new();
    // M = 3: LayerNorm over two features degenerates to a sign function
    let block = DprnnBlock::new(&mut reg, "blk", 3, 3, true, &mut r).unwrap();
    let comm = GroupComm::new(&mut reg, "gc", 3, 3, &mut r).unwrap();
    let frames = Tensor::new(random(&mut r, 7 * 6), &[7, 6]).unwrap();
    let mut c = fd_registry("grouped dual-path", &reg, |p| {
        let seg = segment(&frames, 3).unwrap();
        let g = group_split(&seg, 2).unwrap();
        let mut g = group_communicate(&g, &comm, p).unwrap();
        g.seg = block.forward(&g.seg, p).unwrap();
        overlap_add(&group_merge(&g).unwrap()).unwrap()
    });
    let p = reg.bind(false);
    c.extend(fd_inputs("grouped dual-path", &[(frames.to_vec(), vec![7, 6])], |t| {
        let seg = segment(&t[0], 2).unwrap();
        let g = group_split(&seg, 2).unwrap();
        let mut g = group_communicate(&g, &comm, &p).unwrap();
        g.seg = intra_block_pass(&g.seg, &block.intra, &p).unwrap();
        g.seg = inter_block_pass(&g.seg, &block.inter, &p).unwrap();
        overlap_add(&group_merge(&g).unwrap()).unwrap()
    }));
    c
}

pub fn objective_checks() -> Checks {
    let mut r = rng(8);
    let reference = random(&mut r, 20);
    let mut c = fd_inputs("neg_snr_loss", &[inp(&mut r, &[20])], |t| {
        neg_snr_loss(&t[0], &reference).unwrap()
    });
    let refs = vec![random(&mut r, 16), random(&mut r, 16)];
    c.extend(fd_inputs("pit_loss", &[inp(&mut r, &[2, 16])], |t| {
        pit_loss(&t[0], &refs).unwrap().loss
    }));
    c
}

/// N=8, K=2, M=4, H 4/8, one block, window 4, stride 2; `groups = 1` gives
/// the matching ungrouped model.
pub fn micro_config(groups: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(groups, 8 / groups, 8, 4, 8, 1);
    cfg.window = 4;
    cfg.stride = 2;
    cfg
}

/// Whole model, every parameter, PIT-SNR loss on a 64-sample input.
pub fn model_checks(groups: usize) -> Checks {
    let model = SeparatorModel::new(&micro_config(groups), 11).unwrap();
    let mut r = rng(12);
    let mix: Vec<f64> = random(&mut r, 64).iter().map(|v| 0.5 * v).collect();
    let refs = vec![random(&mut r, 64), random(&mut r, 64)];
    let wave = Tensor::vector(&mix);
    fd_registry(&format!("model K={groups}"), model.registry(), |p| {
        pit_loss(&model.forward(p, &wave).unwrap(), &refs).unwrap().loss
    })
}

/// Every permutation of `0..n` by Heap's algorithm.
pub fn heap_permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            go(k - 1, a, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    go(n, &mut (0..n).collect(), &mut out);
    out
}

/// Best mean score over all estimate-to-reference assignments.
pub fn brute_force_best(
    est: &[Vec<f64>],
    refs: &[Vec<f64>],
    metric: fn(&[f64], &[f64]) -> groupcomm::Result<f64>,
) -> f64 {
    heap_permutations(refs.len())
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(r, &e)| metric(&est[e], &refs[r]).unwrap())
                .sum::<f64>()
                / refs.len() as f64
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest error in `checks` with its label.
pub fn worst(checks: &Checks) -> (String, f64) {
    checks
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default()
}
