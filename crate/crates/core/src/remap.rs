//! Remapping functions that turn raw generator outputs into traffic changes
//! an on-path adversary can actually make, plus the gradients routed back to
//! the generator through them.
//!
//! Timing: shift/rescale the delay vector so its mean and standard deviation
//! stay inside the budget, then keep delays non-negative. Size: spend a byte
//! budget on the highest-scoring packets in whole cells. Insertion: inject
//! packets at the top-scoring positions and push later packets right.

use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::{Error, Result};

/// Floor on the standard deviation of the raw timing perturbation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingBudget {
    /// Largest allowed |mean| of the added delays, seconds.
    pub mu: f64,
    /// Largest allowed standard deviation of the added delays, seconds.
    pub sigma: f64,
}

impl TimingBudget {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(mu >= 0.0) || !(sigma > 0.0) {
            return Err(Error::Config(format!("timing budget needs mu >= 0, sigma > 0 (got {mu}, {sigma})")));
        }
        Ok(Self { mu, sigma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBudget {
    /// Maximum bytes added to a flow.
    pub total: f64,
    /// Maximum bytes added to one packet.
    pub per_packet: f64,
    /// Size quantum; 1 when the protocol imposes none.
    pub cell: f64,
}

impl SizeBudget {
    pub fn new(total: f64, per_packet: f64, cell: f64) -> Result<Self> {
        if !(total >= 0.0) || !(per_packet >= 1.0) || !(cell >= 1.0) || per_packet < cell {
            return Err(Error::Config(format!(
                "size budget needs N >= 0, n >= s >= 1 (got N={total}, n={per_packet}, s={cell})"
            )));
        }
        Ok(Self {
            total,
            per_packet,
            cell,
        })
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The budget-constrained delay vector `g~` (before the non-negativity
/// clamp), with what its derivative needs.
#[derive(Clone, Debug)]
pub struct TimingDelta {
    pub delta: Vec<f64>,
    mean: f64,
    std: f64,
    /// Centred-and-shifted vector before the std rescale.
    shifted: Vec<f64>,
    mean_clipped: bool,
    std_clipped: bool,
    floored: bool,
    sigma: f64,
}

impl TimingDelta {
    pub fn new(g: &[f64], budget: &TimingBudget) -> Self {
        assert!(!g.is_empty());
        let (mean, raw_std) = mean_std(g);
        let floored = raw_std < STD_FLOOR;
        let std = raw_std.max(STD_FLOOR);
        let shift = (mean - budget.mu).max(0.0) + (mean + budget.mu).min(0.0);
        let shifted: Vec<f64> = g.iter().map(|v| v - shift).collect();
        let k = std.min(budget.sigma) / std;
        Self {
            delta: shifted.iter().map(|v| v * k).collect(),
            mean,
            std,
            shifted,
            mean_clipped: mean.abs() > budget.mu,
            std_clipped: std > budget.sigma,
            floored,
            sigma: budget.sigma,
        }
    }

    /// Vector-Jacobian product: maps a gradient w.r.t. `delta` to one w.r.t.
    /// the raw perturbation `g`.
    pub fn backward(&self, grad_delta: &[f64]) -> Vec<f64> {
        let n = grad_delta.len() as f64;
        let k = self.std.min(self.sigma) / self.std;
        let mean_v = grad_delta.iter().sum::<f64>() / n;
        let c = if self.mean_clipped { mean_v } else { 0.0 };
        let mut out: Vec<f64> = grad_delta.iter().map(|v| k * (v - c)).collect();
        if self.std_clipped && !self.floored {
            // d k / d std = -sigma / std^2 ; d std / d g_i = (g_i - mean) / (n std)
            let dk = -self.sigma / (self.std * self.std);
            let vu: f64 = grad_delta.iter().zip(&self.shifted).map(|(v, u)| v * u).sum();
            let um = self.shifted_mean();
            for (o, u) in out.iter_mut().zip(&self.shifted) {
                let centred = u - um;
                *o += dk * vu * centred / (n * self.std);
            }
        }
        out
    }

    fn shifted_mean(&self) -> f64 {
        self.shifted.iter().sum::<f64>() / self.shifted.len() as f64
    }

    /// Mean of the raw perturbation this was built from.
    pub fn raw_mean(&self) -> f64 {
        self.mean
    }
}

/// `x + g~`, clamped at zero, where `g~` is `g` shifted so that its mean lies
/// within `[-mu, mu]` and rescaled so its std is at most `sigma`.
pub fn remap_timing(x: &[f64], g: &[f64], budget: &TimingBudget) -> Result<Vec<f64>> {
    if x.len() != g.len() {
        return Err(shape_err(x.len(), g.len()));
    }
    if g.is_empty() {
        return Ok(Vec::new());
    }
    let d = TimingDelta::new(g, budget);
    Ok(x.iter().zip(&d.delta).map(|(a, b)| (a + b).max(0.0)).collect())
}

/// Spends the byte budget on packets in descending order of `a`: each gets
/// `s * floor(min(a_i, n, remaining) / s)` bytes. Returns the new sizes and
/// the bytes added per packet.
pub fn remap_size(x: &[f64], a: &[f64], budget: &SizeBudget) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != a.len() {
        return Err(shape_err(x.len(), a.len()));
    }
    if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
        return Err(Error::Config(format!("non-finite size perturbation {bad}")));
    }
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].partial_cmp(&a[i]).unwrap().then(i.cmp(&j)));
    let mut remaining = budget.total;
    let mut added = vec![0.0; a.len()];
    for i in order {
        if remaining <= 0.0 {
            break;
        }
        let delta = budget.cell * (a[i].min(budget.per_packet).min(remaining) / budget.cell).floor();
        if delta <= 0.0 {
            continue;
        }
        remaining -= delta;
        added[i] = delta;
    }
    let out = x.iter().zip(&added).map(|(v, d)| v + d).collect();
    Ok((out, added))
}

fn batch_sum(batch: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = batch.first().ok_or_else(|| Error::Empty("gradient batch".into()))?;
    let mut sum = vec![0.0; first.len()];
    for g in batch {
        if g.len() != sum.len() {
            return Err(shape_err(sum.len(), g.len()));
        }
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    Ok(sum)
}

/// Straight-through gradient of the size remapping: the batch sum of the
/// gradients w.r.t. the remapped sizes.
pub fn size_gradient(batch_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    batch_sum(batch_grads)
}

/// Positions and feature values of packets to inject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub position_scores: Vec<f64>,
    pub value_vectors: Vec<Vec<f64>>,
    pub count: usize,
}

impl InsertionPlan {
    pub fn len(&self) -> usize {
        self.position_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_scores.is_empty()
    }

    /// Indices of the `count` largest |scores| (ties to the lower index),
    /// returned in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        top_abs_positions(&self.position_scores, self.count)
    }
}

pub fn top_abs_positions(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].abs().partial_cmp(&scores[i].abs()).unwrap().then(i.cmp(&j)));
    let mut top: Vec<usize> = order.into_iter().take(count).collect();
    top.sort_unstable();
    top
}

/// What an injected packet carries in one feature channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InsertSource {
    /// +1 if the position score is positive, otherwise -1.
    Sign,
    /// The plan's value vector with this index, read at the position.
    Values(usize),
    Constant(f64),
}

/// Where an output slot came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Original(usize),
    Injected(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inserted {
    pub channels: Vec<Vec<f64>>,
    pub origin: Vec<Origin>,
}

impl Inserted {
    /// Routes a gradient w.r.t. the output of one channel back onto the
    /// original packets that survived truncation.
    pub fn passthrough_gradient(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.origin.len()];
        for (j, o) in self.origin.iter().enumerate() {
            if let Origin::Original(i) = *o {
                g[i] += grad_out[j];
            }
        }
        g
    }
}

/// Injects `plan.count` packets into aligned feature channels. Each selected
/// position `i` (original coordinates, ascending) receives a new packet just
/// before the original packet `i`; all channels are then cut back to length.
pub fn insert_packets(channels: &[&[f64]], sources: &[InsertSource], plan: &InsertionPlan) -> Result<Inserted> {
    let l = plan.len();
    if plan.count > l {
        return Err(Error::Config(format!("cannot inject {} packets into length {l}", plan.count)));
    }
    if channels.len() != sources.len() {
        return Err(shape_err(channels.len(), sources.len()));
    }
    for c in channels {
        if c.len() != l {
            return Err(shape_err(l, c.len()));
        }
    }
    for s in sources {
        if let InsertSource::Values(k) = *s {
            match plan.value_vectors.get(k) {
                Some(v) if v.len() == l => {}
                Some(v) => return Err(shape_err(l, v.len())),
                None => return Err(Error::Config(format!("insertion plan lacks value vector {k}"))),
            }
        }
    }
    let mut selected = vec![false; l];
    for p in plan.positions() {
        selected[p] = true;
    }
    let mut origin = Vec::with_capacity(l);
    'walk: for i in 0..l {
        if selected[i] {
            origin.push(Origin::Injected(i));
            if origin.len() == l {
                break 'walk;
            }
        }
        origin.push(Origin::Original(i));
        if origin.len() == l {
            break 'walk;
        }
    }
    let out = channels
        .iter()
        .zip(sources)
        .map(|(c, src)| {
            origin
                .iter()
                .map(|o| match *o {
                    Origin::Original(i) => c[i],
                    Origin::Injected(i) => match *src {
                        InsertSource::Sign => {
                            if plan.position_scores[i] > 0.0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        InsertSource::Values(k) => plan.value_vectors[k][i],
                        InsertSource::Constant(v) => v,
                    },
                })
                .collect()
        })
        .collect();
    Ok(Inserted { channels: out, origin })
}

/// Gradient for the position scores: per channel, the batch sum of the
/// gradients w.r.t. the remapped channel; averaged across channels.
/// `batch_grads[b][c]` is sample `b`'s gradient for channel `c`.
pub fn insertion_position_gradient(batch_grads: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    let first = batch_grads.first().ok_or_else(|| Error::Empty("gradient batch".into()))?;
    let channels = first.len();
    if channels == 0 {
        return Err(Error::Empty("gradient channels".into()));
    }
    let mut total: Option<Vec<f64>> = None;
    for c in 0..channels {
        let per: Vec<Vec<f64>> = batch_grads
            .iter()
            .map(|b| b.get(c).cloned().ok_or_else(|| shape_err(channels, b.len())))
            .collect::<Result<_>>()?;
        let s = batch_sum(&per)?;
        match total.as_mut() {
            None => total = Some(s),
            Some(t) => {
                if t.len() != s.len() {
                    return Err(shape_err(t.len(), s.len()));
                }
                t.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
        }
    }
    let mut t = total.unwrap();
    t.iter_mut().for_each(|v| *v /= channels as f64);
    Ok(t)
}

/// Gradient for a value vector: zero except at the selected positions, where
/// the output gradient at the same index is copied.
pub fn insertion_value_gradient(plan: &InsertionPlan, grad_out: &[f64]) -> Result<Vec<f64>> {
    if grad_out.len() != plan.len() {
        return Err(shape_err(plan.len(), grad_out.len()));
    }
    let mut g = vec![0.0; plan.len()];
    for p in plan.positions() {
        g[p] = grad_out[p];
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};
    use rand::Rng;

    fn std_of(v: &[f64]) -> f64 {
        mean_std(v).1
    }

    #[test]
    fn timing_identity_inside_budget() {
        let g = vec![0.01, -0.01, 0.02, -0.02];
        let b = TimingBudget::new(0.0, 1.0).unwrap();
        let x = vec![1.0; 4];
        let y = remap_timing(&x, &g, &b).unwrap();
        for i in 0..4 {
            assert!((y[i] - (1.0 + g[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn timing_constant_collapses_to_mu() {
        let b = TimingBudget::new(0.005, 0.03).unwrap();
        for c in [0.2, -0.2] {
            let d = TimingDelta::new(&[c; 6], &b);
            for v in &d.delta {
                assert!((v - 0.005 * c.signum()).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn timing_bounds_hold_for_random_perturbations() {
        let mut rng = seeded(1);
        let b = TimingBudget::new(0.0, 0.03).unwrap();
        for _ in 0..200 {
            let g: Vec<f64> = (0..50).map(|_| 0.1 * normal(&mut rng) + 0.05).collect();
            let d = TimingDelta::new(&g, &b);
            assert!(mean_std(&d.delta).0.abs() <= 1e-9);
            assert!(std_of(&d.delta) <= 0.03 + 1e-9);
        }
    }

    #[test]
    fn timing_output_never_negative() {
        let b = TimingBudget::new(0.0, 0.5).unwrap();
        let y = remap_timing(&[0.0, 0.001, 0.0], &[-1.0, 0.5, 0.5], &b).unwrap();
        assert!(y.iter().all(|v| *v >= 0.0));
        assert!(remap_timing(&[0.0], &[1.0, 2.0], &b).is_err());
    }

    #[test]
    fn timing_backward_matches_finite_differences() {
        let mut rng = seeded(4);
        for (mu, sigma, offset) in [(0.0, 0.02, 0.03), (0.01, 5.0, 0.0), (0.05, 0.01, -0.01)] {
            let b = TimingBudget::new(mu, sigma).unwrap();
            let g: Vec<f64> = (0..12).map(|_| 0.05 * normal(&mut rng) + offset).collect();
            let w: Vec<f64> = (0..12).map(|_| normal(&mut rng)).collect();
            let f = |g: &[f64]| -> f64 { TimingDelta::new(g, &b).delta.iter().zip(&w).map(|(a, b)| a * b).sum() };
            let grad = TimingDelta::new(&g, &b).backward(&w);
            for i in 0..12 {
                let mut a = g.clone();
                let mut c = g.clone();
                a[i] += 1e-7;
                c[i] -= 1e-7;
                let fd = (f(&a) - f(&c)) / 2e-7;
                assert!((fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0), "mu={mu} i={i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn size_all_nonpositive_is_noop() {
        let b = SizeBudget::new(1000.0, 512.0, 512.0).unwrap();
        let (y, added) = remap_size(&[10.0, 20.0], &[-1.0, 0.0], &b).unwrap();
        assert_eq!(y, vec![10.0, 20.0]);
        assert_eq!(added, vec![0.0, 0.0]);
    }

    /// Step-by-step replay of the size remapping loop.
    fn size_oracle(x: &[f64], a: &[f64], total: f64, n: f64, s: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        let mut idx: Vec<usize> = (0..a.len()).collect();
        // stable selection sort, descending
        for i in 0..idx.len() {
            let mut best = i;
            for j in i + 1..idx.len() {
                if a[idx[j]] > a[idx[best]] {
                    best = j;
                }
            }
            let v = idx.remove(best);
            idx.insert(i, v);
        }
        let mut budget = total;
        for i in idx {
            if budget <= 0.0 {
                break;
            }
            let m = a[i].min(n).min(budget);
            let d = s * (m / s).floor();
            if d > 0.0 {
                budget -= d;
                x[i] += d;
            }
        }
        x
    }

    #[test]
    fn size_worked_example() {
        let b = SizeBudget::new(1000.0, 512.0, 512.0).unwrap();
        let (y, _) = remap_size(&[100.0, 100.0, 100.0], &[900.0, 50.0, 600.0], &b).unwrap();
        assert_eq!(y, vec![612.0, 100.0, 100.0]);
        assert_eq!(y, size_oracle(&[100.0; 3], &[900.0, 50.0, 600.0], 1000.0, 512.0, 512.0));
    }

    #[test]
    fn size_matches_oracle_and_budget() {
        let mut rng = seeded(8);
        for _ in 0..300 {
            let len = rng.gen_range(1..20);
            let s = [1.0, 3.0, 512.0][rng.gen_range(0..3)];
            let n = s * rng.gen_range(1..4) as f64;
            let total = rng.gen_range(0.0..3000.0f64).floor();
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(0..1500) as f64).collect();
            let a: Vec<f64> = (0..len).map(|_| rng.gen_range(-600.0..1600.0)).collect();
            let b = SizeBudget::new(total, n, s).unwrap();
            let (y, added) = remap_size(&x, &a, &b).unwrap();
            assert_eq!(y, size_oracle(&x, &a, total, n, s));
            assert!(added.iter().sum::<f64>() <= total);
            assert!(added.iter().all(|d| *d <= n && d % s == 0.0));
        }
    }

    #[test]
    fn size_budget_validation() {
        assert!(SizeBudget::new(10.0, 256.0, 512.0).is_err());
        assert!(SizeBudget::new(-1.0, 512.0, 512.0).is_err());
        assert!(SizeBudget::new(0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn size_gradient_sums_batch() {
        let g = vec![1.0, -2.0, 0.5];
        assert_eq!(size_gradient(&[g.clone()]).unwrap(), g);
        assert_eq!(size_gradient(&[g.clone(), g.clone()]).unwrap(), vec![2.0, -4.0, 1.0]);
        assert!(size_gradient(&[]).is_err());
    }

    fn plan(scores: Vec<f64>, count: usize) -> InsertionPlan {
        InsertionPlan {
            position_scores: scores,
            value_vectors: vec![],
            count,
        }
    }

    #[test]
    fn insertion_worked_example() {
        let x = [1.0; 5];
        let p = plan(vec![0.0, -9.0, 0.0, 8.0, 0.0], 2);
        let out = insert_packets(&[&x], &[InsertSource::Sign], &p).unwrap();
        assert_eq!(out.channels[0], vec![1.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(out.origin[4], Origin::Injected(3));
    }

    #[test]
    fn insertion_count_zero_is_identity() {
        let x = [1.0, -1.0, 1.0];
        let out = insert_packets(&[&x], &[InsertSource::Sign], &plan(vec![5.0, -5.0, 1.0], 0)).unwrap();
        assert_eq!(out.channels[0], x.to_vec());
    }

    #[test]
    fn insertion_errors() {
        let x = [1.0; 3];
        assert!(insert_packets(&[&x], &[InsertSource::Sign], &plan(vec![1.0; 3], 4)).is_err());
        assert!(insert_packets(&[&x], &[InsertSource::Values(0)], &plan(vec![1.0; 3], 1)).is_err());
    }

    #[test]
    fn insertion_fills_values_and_constants() {
        let dirs = [1.0, 1.0, -1.0, -1.0];
        let ipds = [0.0, 0.1, 0.2, 0.3];
        let sizes = [512.0; 4];
        let p = InsertionPlan {
            position_scores: vec![0.0, 0.0, -3.0, 0.0],
            value_vectors: vec![vec![9.0, 9.0, 0.05, 9.0]],
            count: 1,
        };
        let out = insert_packets(
            &[&dirs, &ipds, &sizes],
            &[InsertSource::Sign, InsertSource::Values(0), InsertSource::Constant(512.0)],
            &p,
        )
        .unwrap();
        assert_eq!(out.channels[0], vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(out.channels[1], vec![0.0, 0.1, 0.05, 0.2]);
        assert_eq!(out.channels[2], vec![512.0; 4]);
        assert_eq!(out.passthrough_gradient(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 4.0, 0.0]);
    }

    #[test]
    fn position_gradient_rules() {
        let g1 = vec![1.0, 2.0];
        let g2 = vec![3.0, -2.0];
        assert_eq!(insertion_position_gradient(&[vec![g1.clone()]]).unwrap(), g1);
        assert_eq!(insertion_position_gradient(&[vec![g1.clone(), g2.clone()]]).unwrap(), vec![2.0, 0.0]);
        assert!(insertion_position_gradient(&[]).is_err());
    }

    #[test]
    fn value_gradient_support() {
        let grad = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(insertion_value_gradient(&plan(vec![1.0; 4], 0), &grad).unwrap(), vec![0.0; 4]);
        assert_eq!(insertion_value_gradient(&plan(vec![1.0; 4], 4), &grad).unwrap(), grad);
        assert_eq!(
            insertion_value_gradient(&plan(vec![0.1, -7.0, 0.0, 2.0], 2), &grad).unwrap(),
            vec![0.0, 2.0, 0.0, 4.0]
        );
        assert!(insertion_value_gradient(&plan(vec![1.0; 3], 1), &grad).is_err());
    }
}
