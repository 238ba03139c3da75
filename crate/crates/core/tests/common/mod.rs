//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use spatial_memory::construct::{pair_similarity, InstanceTriplet};
use spatial_memory::geometry::Aabb;
use spatial_memory::numkern::{normalized, Rng};

/// Straight-line SplitMix64.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Double-double number `hi + lo`.
#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    pub fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (hi, lo) = quick_two_sum(s, e + self.lo + o.lo);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + self.hi * o.lo + self.lo * o.hi);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r2 = r.sub(o.mul(Dd::from(q2)));
        let q3 = r2.hi / o.hi;
        Dd::from(q1).add(Dd::from(q2)).add(Dd::from(q3))
    }

    pub fn sqrt(self) -> Dd {
        let s = Dd::from(self.hi.sqrt());
        s.add(self.sub(s.mul(s)).div(s.add(s)))
    }

    /// `exp` by Taylor series on `x / 2^10` followed by repeated squaring.
    pub fn exp(self) -> Dd {
        let r = self.mul(Dd::from(1.0 / 1024.0));
        let mut term = Dd::from(1.0);
        let mut sum = Dd::from(1.0);
        for k in 1..30 {
            term = term.mul(r).div(Dd::from(k as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        sum
    }

    pub fn tanh(self) -> Dd {
        let e = self.add(self).exp();
        e.sub(Dd::from(1.0)).div(e.add(Dd::from(1.0)))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

pub const PI: Dd = Dd::new(std::f64::consts::PI, 1.224_646_799_147_353_2e-16);

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))` in double-double.
pub fn gelu_oracle(x: f64) -> f64 {
    let x = Dd::from(x);
    let c = Dd::from(2.0).div(PI).sqrt();
    let inner = c.mul(x.add(Dd::from(0.044715).mul(x).mul(x).mul(x)));
    Dd::from(0.5).mul(x).mul(Dd::from(1.0).add(inner.tanh())).to_f64()
}

pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let exps: Vec<Dd> = row.iter().map(|&v| Dd::from(v).exp()).collect();
    let total = exps.iter().fold(Dd::from(0.0), |a, &e| a.add(e));
    exps.iter().map(|e| e.div(total).to_f64()).collect()
}

/// Two-pass population mean/variance normalization.
pub fn layer_norm_oracle(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

/// Single-head attention with explicit exponentials and sums.
pub fn attention_oracle(q: &[Vec<f64>], kv: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = kv[0].len() as f64;
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for qi in q {
        let scores: Vec<Dd> = kv
            .iter()
            .map(|k| {
                let s = qi.iter().zip(k).fold(Dd::from(0.0), |a, (x, y)| a.add(Dd::from(*x).mul(Dd::from(*y))));
                s.div(Dd::from(d).sqrt()).exp()
            })
            .collect();
        let total = scores.iter().fold(Dd::from(0.0), |a, &e| a.add(e));
        let w: Vec<Dd> = scores.iter().map(|e| e.div(total)).collect();
        let row = (0..kv[0].len())
            .map(|c| w.iter().zip(kv).fold(Dd::from(0.0), |a, (wk, k)| a.add(wk.mul(Dd::from(k[c])))).to_f64())
            .collect();
        out.push(row);
        weights.push(w.iter().map(|v| v.to_f64()).collect());
    }
    (out, weights)
}

/// Maximum-weight assignment over pairs with similarity ≥ `tau`, by brute
/// force over permutations. Returns sorted `(row, col)` pairs and the total.
pub fn assignment_oracle(sim: &[Vec<f64>], tau: f64) -> (Vec<(usize, usize)>, f64) {
    let rows = sim.len();
    let cols = sim.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (Vec::new(), 0.0);
    permute(&mut perm, 0, &mut |p| {
        let mut pairs = Vec::new();
        let mut total = 0.0;
        for (r, &c) in p.iter().enumerate().take(rows) {
            if c < cols && sim[r][c] >= tau {
                pairs.push((r, c));
                total += sim[r][c];
            }
        }
        if total > best.1 + 1e-12 {
            best = (pairs, total);
        }
    });
    best.0.sort_unstable();
    best
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// All set partitions of `0..n` as group-label vectors (restricted growth
/// strings).
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, labels: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(labels.clone());
            return;
        }
        for l in 0..=max + 1 {
            labels.push(l);
            rec(i + 1, n, labels, max.max(l), out);
            labels.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut labels = vec![0];
    rec(1, n, &mut labels, 0, &mut out);
    out
}

/// Partition maximizing `Σ_{i<j same group} (sim_ij − tau)`; returned as
/// groups of ascending indices ordered by smallest member.
pub fn partition_oracle(items: &[InstanceTriplet], tau: f64, lambda: f64) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            sim[i][j] = pair_similarity(&items[i], &items[j], lambda).unwrap();
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for labels in set_partitions(n) {
        let mut score = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] == labels[j] {
                    score += sim[i][j] - tau;
                }
            }
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s + 1e-12) {
            best = Some((score, labels));
        }
    }
    canonical_groups(&best.map(|b| b.1).unwrap_or_default())
}

pub fn canonical_groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match seen.iter().position(|&s| s == l) {
            Some(k) => groups[k].push(i),
            None => {
                seen.push(l);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

pub fn sorted_groups(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

pub fn unit_gaussian(rng: &mut Rng, d: usize) -> Vec<f64> {
    normalized(&rng.gaussian_vec(d))
}

/// Unit vector near `base`: `normalize(base + spread·g/√d)`.
pub fn jitter(rng: &mut Rng, base: &[f64], spread: f64) -> Vec<f64> {
    let s = spread / (base.len() as f64).sqrt();
    normalized(&base.iter().map(|b| b + s * rng.gaussian()).collect::<Vec<_>>())
}

pub fn triplet(
    category: &str,
    embedding: Vec<f64>,
    center: [f64; 3],
    half: [f64; 3],
    frame: u64,
    idx: usize,
) -> InstanceTriplet {
    InstanceTriplet {
        embedding,
        category: category.to_string(),
        bbox3d: Aabb::from_center(center, half).corners(),
        support_count: 1,
        provenance: vec![(frame, idx)],
    }
}

/// A margin-regime instance of at most `max_n` same-category detections:
/// within-object similarities exceed `tau + 0.1`, cross-object ones stay
/// below `tau − 0.1`. Returns the triplets and the ground-truth labels.
pub fn margin_instance(rng: &mut Rng, max_n: usize, tau: f64, lambda: f64) -> (Vec<InstanceTriplet>, Vec<usize>) {
    loop {
        let n_obj = 1 + rng.below(3) as usize;
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for o in 0..n_obj {
            let base = unit_gaussian(rng, 384);
            let center = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0.0, 1.0)];
            let half = [rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2)];
            let views = 1 + rng.below(3) as usize;
            for _ in 0..views {
                if items.len() == max_n {
                    break;
                }
                let c = [
                    center[0] + 0.01 * rng.gaussian(),
                    center[1] + 0.01 * rng.gaussian(),
                    center[2] + 0.01 * rng.gaussian(),
                ];
                let idx = items.len();
                items.push(triplet("mug", jitter(rng, &base, 0.1), c, half, idx as u64, 0));
                labels.push(o);
            }
        }
        let mut ok = true;
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                let s = pair_similarity(&items[i], &items[j], lambda).unwrap();
                let same = labels[i] == labels[j];
                if (same && s <= tau + 0.1) || (!same && s >= tau - 0.1) {
                    ok = false;
                }
            }
        }
        if ok {
            return (items, labels);
        }
    }
}
