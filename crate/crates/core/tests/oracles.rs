//! Layers, dual-path passes and group communication against plain scalar
//! loop implementations written from the defining equations.

use groupcomm::dprnn::{inter_block_pass, intra_block_pass, segment, SegmentedTensor};
use groupcomm::groupcomm::{group_communicate, group_split, GroupComm};
use groupcomm::layers::{Lstm, Recurrent, ResidualRnn, LAYER_NORM_EPS};
use groupcomm::metrics::{si_sdr_db, snr_db};
use groupcomm::params::ParamRegistry;
use groupcomm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

fn random(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < TOL, "{what}[{i}]: {x} vs {y}");
    }
}

/// Randomise every parameter so zero/one initialisations hide nothing.
fn scramble(reg: &mut ParamRegistry, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for id in reg.ids().collect::<Vec<_>>() {
        for v in &mut reg.entry_mut(id).data {
            *v = r.gen_range(-0.8..0.8);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction over a single sequence `xs[t][i]`.
fn lstm_oracle(reg: &ParamRegistry, l: &Lstm, xs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
    let (hi, ho) = (l.input_dim, l.hidden_dim);
    let w = &reg.entry(l.weight).data;
    let (bi, bh) = (&reg.entry(l.bias_ih).data, &reg.entry(l.bias_hh).data);
    let mut h = vec![0.0; ho];
    let mut c = vec![0.0; ho];
    let mut out = vec![vec![0.0; ho]; xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for t in order {
        let mut z = vec![0.0; 4 * ho];
        for (g, zg) in z.iter_mut().enumerate() {
            let row = &w[g * (hi + ho)..(g + 1) * (hi + ho)];
            *zg = bi[g] + bh[g];
            for i in 0..hi {
                *zg += row[i] * xs[t][i];
            }
            for j in 0..ho {
                *zg += row[hi + j] * h[j];
            }
        }
        for j in 0..ho {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[ho + j]);
            let g_g = z[2 * ho + j].tanh();
            let o_g = sigmoid(z[3 * ho + j]);
            c[j] = f_g * c[j] + i_g * g_g;
            h[j] = o_g * c[j].tanh();
        }
        out[t] = h.clone();
    }
    out
}

fn recurrent_oracle(reg: &ParamRegistry, rnn: &Recurrent, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match rnn {
        Recurrent::Unidirectional(l) => lstm_oracle(reg, l, xs, false),
        Recurrent::Bidirectional(b) => {
            let f = lstm_oracle(reg, &b.forward, xs, false);
            let r = lstm_oracle(reg, &b.backward, xs, true);
            f.into_iter().zip(r).map(|(a, b)| [a, b].concat()).collect()
        }
    }
}

/// `x + LN(FC(RNN(x)))` for a single sequence.
fn residual_oracle(reg: &ParamRegistry, res: &ResidualRnn, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let hs = recurrent_oracle(reg, &res.rnn, xs);
    let (w, b) = (&reg.entry(res.fc.weight).data, &reg.entry(res.fc.bias).data);
    let (gain, beta) = (&reg.entry(res.norm.gain).data, &reg.entry(res.norm.bias).data);
    let (din, d) = (res.fc.in_dim, res.fc.out_dim);
    xs.iter()
        .zip(&hs)
        .map(|(x, h)| {
            let y: Vec<f64> = (0..d)
                .map(|o| b[o] + (0..din).map(|i| w[o * din + i] * h[i]).sum::<f64>())
                .collect();
            let mean = y.iter().sum::<f64>() / d as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|k| x[k] + gain[k] * (y[k] - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[k])
                .collect()
        })
        .collect()
}

/// `[len × batch × d]` tensor from per-batch sequences.
fn stack(seqs: &[Vec<Vec<f64>>]) -> Tensor {
    let (batch, len, d) = (seqs.len(), seqs[0].len(), seqs[0][0].len());
    let mut data = Vec::with_capacity(batch * len * d);
    for t in 0..len {
        for s in seqs {
            data.extend_from_slice(&s[t]);
        }
    }
    Tensor::new(data, &[len, batch, d]).unwrap()
}

fn random_seqs(r: &mut ChaCha8Rng, batch: usize, len: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..batch).map(|_| (0..len).map(|_| random(r, d)).collect()).collect()
}

fn flatten_time_major(seqs: &[Vec<Vec<f64>>]) -> Vec<f64> {
    stack(seqs).to_vec()
}

#[test]
fn lstm_matches_scalar_recurrence() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for (hi, ho, len, batch) in [(1, 1, 1, 1), (3, 5, 7, 2), (6, 2, 4, 3)] {
        let mut reg = ParamRegistry::new();
        let l = Lstm::new(&mut reg, "l", hi, ho, &mut r).unwrap();
        scramble(&mut reg, 11);
        let seqs = random_seqs(&mut r, batch, len, hi);
        let p = reg.bind(false);
        for reverse in [false, true] {
            let got = l.run(&p, &stack(&seqs), reverse).unwrap();
            let want: Vec<Vec<Vec<f64>>> = seqs.iter().map(|s| lstm_oracle(&reg, &l, s, reverse)).collect();
            assert_close(got.data(), &flatten_time_major(&want), "lstm");
        }
    }
}

#[test]
fn residual_branches_match_scalar_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for bidirectional in [true, false] {
        let mut reg = ParamRegistry::new();
        let res = ResidualRnn::new(&mut reg, "res", 4, 3, bidirectional, &mut r).unwrap();
        scramble(&mut reg, 12);
        let seqs = random_seqs(&mut r, 3, 5, 4);
        let got = res.forward(&reg.bind(false), &stack(&seqs)).unwrap();
        let want: Vec<_> = seqs.iter().map(|s| residual_oracle(&reg, &res, s)).collect();
        assert_close(got.data(), &flatten_time_major(&want), "residual");
    }
}

fn branch_setup(seed: u64, d: usize, hidden: usize) -> (ParamRegistry, ResidualRnn, ChaCha8Rng) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    let res = ResidualRnn::new(&mut reg, "res", d, hidden, true, &mut r).unwrap();
    scramble(&mut reg, seed + 100);
    (reg, res, r)
}

/// `data[s][l]` from a `[S × 2T × d]` tensor.
fn blocks_of(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (s, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..s)
        .map(|b| (0..l).map(|i| t.data()[(b * l + i) * d..][..d].to_vec()).collect())
        .collect()
}

#[test]
fn intra_pass_runs_each_block_alone() {
    let (reg, res, mut r) = branch_setup(3, 3, 4);
    let p = reg.bind(false);
    let h = Tensor::new(random(&mut r, 17 * 3), &[17, 3]).unwrap();
    let seg = segment(&h, 3).unwrap();
    let out = intra_block_pass(&seg, &res, &p).unwrap();
    let got = blocks_of(&out.data);
    for (b, block) in blocks_of(&seg.data).iter().enumerate() {
        let want = residual_oracle(&reg, &res, block);
        assert_close(&got[b].concat(), &want.concat(), "intra block");
    }

    // a change confined to one block leaves every other block untouched
    let mut data = seg.data.to_vec();
    let l = seg.block_len();
    data[(2 * l + 1) * 3] += 0.5;
    let perturbed = SegmentedTensor {
        data: Tensor::new(data, seg.data.shape()).unwrap(),
        ..seg.clone()
    };
    let moved = blocks_of(&intra_block_pass(&perturbed, &res, &p).unwrap().data);
    for b in 0..seg.blocks() {
        assert_eq!(moved[b] == got[b], b != 2, "block {b}");
    }
}

#[test]
fn inter_pass_runs_across_blocks_per_position() {
    let (reg, res, mut r) = branch_setup(4, 3, 4);
    let p = reg.bind(false);
    let h = Tensor::new(random(&mut r, 20 * 3), &[20, 3]).unwrap();
    let seg = segment(&h, 4).unwrap();
    let got = blocks_of(&inter_block_pass(&seg, &res, &p).unwrap().data);
    let blocks = blocks_of(&seg.data);
    for pos in 0..seg.block_len() {
        let across: Vec<Vec<f64>> = blocks.iter().map(|b| b[pos].clone()).collect();
        let want = residual_oracle(&reg, &res, &across);
        for (b, w) in want.iter().enumerate() {
            assert_close(&got[b][pos], w, "inter position");
        }
    }
}

#[test]
fn group_communication_matches_scalar_oracle() {
    let (k, m) = (3, 2);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut reg = ParamRegistry::new();
    let comm = GroupComm::new(&mut reg, "gc", m, 3, &mut r).unwrap();
    scramble(&mut reg, 55);
    let h = Tensor::new(random(&mut r, 9 * k * m), &[9, k * m]).unwrap();
    let seg = segment(&h, 2).unwrap();
    let g = group_split(&seg, k).unwrap();
    let out = group_communicate(&g, &comm, &reg.bind(false)).unwrap();
    assert_eq!(out.seg.data.shape(), g.seg.data.shape());
    let (x, y) = (g.seg.data.data(), out.seg.data.data());
    for pos in 0..seg.blocks() * seg.block_len() {
        // the K group vectors at this (block, position), in group order
        let groups: Vec<Vec<f64>> = (0..k).map(|j| x[(pos * k + j) * m..][..m].to_vec()).collect();
        let want = residual_oracle(&reg, &comm.branch, &groups);
        assert_close(&y[pos * k * m..][..k * m], &want.concat(), "group comm");
    }
}

fn conv_oracle(x: &[f64], c_in: usize, k: &[f64], c_out: usize, w: usize, stride: usize) -> Vec<f64> {
    let len = x.len() / c_in;
    let frames = (len - w) / stride + 1;
    let mut y = vec![0.0; c_out * frames];
    for o in 0..c_out {
        for t in 0..frames {
            for c in 0..c_in {
                for j in 0..w {
                    y[o * frames + t] += k[(o * c_in + c) * w + j] * x[c * len + t * stride + j];
                }
            }
        }
    }
    y
}

fn conv_transpose_oracle(x: &[f64], c_in: usize, k: &[f64], c_out: usize, w: usize, stride: usize) -> Vec<f64> {
    let frames = x.len() / c_in;
    let len = (frames - 1) * stride + w;
    let mut y = vec![0.0; c_out * len];
    for c in 0..c_in {
        for t in 0..frames {
            for o in 0..c_out {
                for j in 0..w {
                    y[o * len + t * stride + j] += x[c * frames + t] * k[(c * c_out + o) * w + j];
                }
            }
        }
    }
    y
}

#[test]
fn convolutions_and_matmul_match_loops() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for (c_in, c_out, w, stride, len) in [(1, 1, 1, 1, 1), (1, 4, 4, 2, 21), (3, 2, 5, 3, 30), (2, 3, 2, 1, 9)] {
        let x = random(&mut r, c_in * len);
        let k = random(&mut r, c_out * c_in * w);
        let got = Tensor::new(x.clone(), &[c_in, len])
            .unwrap()
            .conv1d(&Tensor::new(k.clone(), &[c_out, c_in, w]).unwrap(), stride)
            .unwrap();
        assert_close(got.data(), &conv_oracle(&x, c_in, &k, c_out, w, stride), "conv1d");

        let kt = random(&mut r, c_in * c_out * w);
        let got = Tensor::new(x.clone(), &[c_in, len])
            .unwrap()
            .conv1d_transpose(&Tensor::new(kt.clone(), &[c_in, c_out, w]).unwrap(), stride)
            .unwrap();
        assert_eq!(got.shape(), &[c_out, (len - 1) * stride + w]);
        assert_close(
            got.data(),
            &conv_transpose_oracle(&x, c_in, &kt, c_out, w, stride),
            "conv1d_transpose",
        );
    }
    for (n, k, m) in [(1, 1, 1), (3, 7, 2), (17, 33, 9)] {
        let (a, b) = (random(&mut r, n * k), random(&mut r, k * m));
        let got = Tensor::new(a.clone(), &[n, k])
            .unwrap()
            .matmul(&Tensor::new(b.clone(), &[k, m]).unwrap())
            .unwrap();
        let want: Vec<f64> = (0..n * m)
            .map(|idx| (0..k).map(|q| a[idx / m * k + q] * b[q * m + idx % m]).sum())
            .collect();
        assert_close(got.data(), &want, "matmul");
    }
}

#[test]
fn orthogonal_noise_at_one_percent_energy_is_twenty_db() {
    let len = 4000;
    let s: Vec<f64> = (0..len)
        .map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.31).cos())
        .collect();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut n = random(&mut r, len);
    let center = |v: &mut Vec<f64>| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mu);
    };
    let mut s0 = s.clone();
    center(&mut s0);
    center(&mut n);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let proj = dot(&n, &s0) / dot(&s0, &s0);
    n.iter_mut().zip(&s0).for_each(|(v, t)| *v -= proj * t);
    let gain = (0.01 * dot(&s0, &s0) / dot(&n, &n)).sqrt();
    let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + gain * b).collect();
    let v = si_sdr_db(&est, &s).unwrap();
    assert!((v - 20.0).abs() < 0.01, "{v}");
    // the same holds at any estimate scale
    let loud: Vec<f64> = est.iter().map(|x| 7.5 * x).collect();
    assert!((si_sdr_db(&loud, &s).unwrap() - 20.0).abs() < 0.01);
    // and plain SNR agrees when the estimate is unscaled
    let zs: Vec<f64> = s0.iter().zip(&n).map(|(a, b)| a + gain * b).collect();
    assert!((snr_db(&zs, &s0).unwrap() - 20.0).abs() < 0.01);
}
