#![allow(dead_code)]

use blindtrace_core::models::{Arch, ArchParams, Classifier};
use blindtrace_core::nn::Tensor;
use blindtrace_core::remap::*;
use blindtrace_core::rng::{normal, seeded};
use blindtrace_core::traffic::{make_pairs, synth_connections, synth_corpus};
use rand::Rng;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Shifted-list oracle: materialize the list and insert one element at a time.
pub fn shifted_list(x: &[f64], scores: &[f64], count: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].abs().partial_cmp(&scores[a].abs()).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = idx[..count].to_vec();
    chosen.sort();
    let mut list = x.to_vec();
    for (k, &i) in chosen.iter().enumerate() {
        list.insert(i + k, if scores[i] > 0.0 { 1.0 } else { -1.0 });
    }
    list.truncate(x.len());
    list
}

/// Every sign pattern of length up to 8 against every {-2, 0, +2} score
/// vector; returns the number of cases.
pub fn exhaustive_insertion() -> Result<usize, String> {
    let mut cases = 0usize;
    for len in 1..=8usize {
        for xbits in 0..(1u32 << len) {
            let x: Vec<f64> = (0..len).map(|i| if xbits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            for code in 0..3usize.pow(len as u32) {
                let mut c = code;
                let scores: Vec<f64> = (0..len)
                    .map(|_| {
                        let v = [-2.0, 0.0, 2.0][c % 3];
                        c /= 3;
                        v
                    })
                    .collect();
                let count = scores.iter().filter(|s| **s != 0.0).count();
                let plan = InsertionPlan {
                    position_scores: scores.clone(),
                    value_vectors: vec![],
                    count,
                };
                let got = insert_packets(&[&x], &[InsertSource::Sign], &plan).map_err(|e| e.to_string())?;
                ensure!(got.channels[0] == shifted_list(&x, &scores, count), "x={x:?} l={scores:?}");
                cases += 1;
            }
        }
    }
    Ok(cases)
}

pub fn sum_loop(batch: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; batch[0].len()];
    for g in batch {
        for i in 0..g.len() {
            out[i] += g[i];
        }
    }
    out
}

pub fn check_timing(g: &[f64], offset: f64, mu: f64, sigma: f64) -> Check {
    let g: Vec<f64> = g.iter().map(|v| v + offset).collect();
    let b = TimingBudget::new(mu, sigma).map_err(|e| e.to_string())?;
    let d = TimingDelta::new(&g, &b);
    let n = d.delta.len() as f64;
    let m = d.delta.iter().sum::<f64>() / n;
    let s = (d.delta.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    ensure!(m.abs() <= mu + 1e-9, "mean {m} exceeds {mu}");
    ensure!(s <= sigma + 1e-9, "std {s} exceeds {sigma}");
    let x = vec![0.001; g.len()];
    ensure!(remap_timing(&x, &g, &b).unwrap().iter().all(|v| *v >= 0.0), "negative delay");
    Ok(())
}

pub fn check_size(a: &[f64], total: u32, cell_pick: usize, mult: u32) -> Check {
    let s = [1.0, 64.0, 512.0][cell_pick];
    let b = SizeBudget::new(total as f64, s * mult as f64, s).map_err(|e| e.to_string())?;
    let x = vec![100.0; a.len()];
    let (y, added) = remap_size(&x, a, &b).map_err(|e| e.to_string())?;
    ensure!(added.iter().sum::<f64>() <= b.total, "total budget exceeded");
    for (i, d) in added.iter().enumerate() {
        ensure!(*d >= 0.0 && *d <= b.per_packet, "per-packet budget exceeded at {i}: {d}");
        ensure!(d % s == 0.0, "{d} is not a multiple of {s}");
        ensure!(y[i] == x[i] + d, "output disagrees with additions at {i}");
    }
    Ok(())
}

pub fn check_insertion(scores: &[f64], frac: f64) -> Check {
    let len = scores.len();
    let count = ((len as f64) * frac) as usize;
    let x: Vec<f64> = (0..len).map(|i| 10.0 + i as f64).collect();
    let plan = InsertionPlan {
        position_scores: scores.to_vec(),
        value_vectors: vec![],
        count,
    };
    let out = insert_packets(&[&x], &[InsertSource::Sign], &plan).map_err(|e| e.to_string())?;
    let y = &out.channels[0];
    ensure!(y.len() == len, "length changed");
    let survivors: Vec<f64> = y.iter().copied().filter(|v| *v >= 10.0).collect();
    // originals survive as an in-order prefix; injected packets past the
    // end are cut along with the originals they displaced
    ensure!(survivors.len() >= len - count, "too few survivors");
    ensure!(survivors[..] == x[..survivors.len()], "originals reordered");
    ensure!(y.iter().filter(|v| v.abs() == 1.0).count() == len - survivors.len(), "stray values");
    Ok(())
}

pub fn check_gradients(batch: &[Vec<f64>], other: &[Vec<f64>], alpha: f64, beta: f64, scores: &[f64], count: usize) -> Check {
    let n = scores.len();
    ensure!(size_gradient(batch).unwrap() == sum_loop(batch), "size gradient differs from loop");
    let k = batch.len().min(other.len());
    let mixed: Vec<Vec<f64>> = (0..k)
        .map(|b| batch[b].iter().zip(&other[b]).map(|(u, v)| alpha * u + beta * v).collect())
        .collect();
    let lhs = size_gradient(&mixed).unwrap();
    let gu = size_gradient(&batch[..k]).unwrap();
    let gv = size_gradient(&other[..k]).unwrap();
    for i in 0..n {
        ensure!((lhs[i] - (alpha * gu[i] + beta * gv[i])).abs() < 1e-9, "size gradient not linear");
    }

    // two channels per sample
    let chans: Vec<Vec<Vec<f64>>> = (0..k).map(|b| vec![batch[b].clone(), other[b].clone()]).collect();
    let pg = insertion_position_gradient(&chans).unwrap();
    let s1 = sum_loop(&batch[..k]);
    let s2 = sum_loop(&other[..k]);
    for i in 0..n {
        ensure!((pg[i] - (s1[i] + s2[i]) / 2.0).abs() < 1e-9, "position gradient differs from loop");
    }

    let plan = InsertionPlan {
        position_scores: scores.to_vec(),
        value_vectors: vec![],
        count,
    };
    let vu = insertion_value_gradient(&plan, &batch[0]).unwrap();
    let vv = insertion_value_gradient(&plan, &other[0]).unwrap();
    let mix: Vec<f64> = batch[0].iter().zip(&other[0]).map(|(u, v)| alpha * u + beta * v).collect();
    let vm = insertion_value_gradient(&plan, &mix).unwrap();
    for i in 0..n {
        ensure!((vm[i] - (alpha * vu[i] + beta * vv[i])).abs() < 1e-9, "value gradient not linear");
    }
    // support equals an independent top-k
    let mut ranked: Vec<(f64, usize)> = scores.iter().enumerate().map(|(i, s)| (-s.abs(), i)).collect();
    ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut want = vec![false; n];
    for &(_, i) in &ranked[..count] {
        want[i] = true;
    }
    let ones = insertion_value_gradient(&plan, &vec![1.0; n]).unwrap();
    for i in 0..n {
        ensure!((ones[i] == 1.0) == want[i], "value gradient support differs at {i}");
    }
    Ok(())
}

/// Worst relative error of the input gradient against central differences
/// on `coords` random live coordinates of a jittered input.
pub fn classifier_gradient_error(arch: Arch, coords: usize, seed: u64) -> f64 {
    let l = if arch.is_pair() { 60 } else { 120 };
    let model = Classifier::new(arch, ArchParams::default_for(arch), l, 5, &mut seeded(seed));
    let mut rng = seeded(seed + 1);
    let mut x: Tensor = if arch.is_pair() {
        let conns = synth_connections(3, (l, 2 * l), l, seed);
        make_pairs(&conns, 1, seed).unwrap().samples[0].features()
    } else {
        let mut ds = synth_corpus(2, 2, (l, 2 * l), seed);
        ds.fixed_length = l;
        ds.samples[0].features(l)
    };
    let rows = x.channels;
    for (i, v) in x.data.iter_mut().enumerate() {
        // jitter keeps max-pool windows free of ties
        *v += if arch.is_pair() && i / l >= rows / 2 { 5.0 } else { 1e-2 } * normal(&mut rng);
    }
    let target = if arch.is_pair() { 1 } else { 2 };
    let g = model.loss_gradient(&x, target).unwrap();
    let live: Vec<usize> = (0..x.data.len()).filter(|&i| model.input_scale[i / l] != 0.0).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = live[rng.gen_range(0..live.len())];
        let h = 1e-4 / model.input_scale[i / l];
        let mut a = x.clone();
        let mut b = x.clone();
        a.data[i] += h;
        b.data[i] -= h;
        let fd = (model.loss(&a, target) - model.loss(&b, target)) / (2.0 * h);
        worst = worst.max((fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-6));
    }
    worst
}
