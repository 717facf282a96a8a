//! Small deterministic numeric kernels behind the stub tools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Column-wise z-scores; constant columns become zero.
pub fn standardize(x: &Matrix) -> Matrix {
    let Some(d) = x.first().map(Vec::len) else { return Vec::new() };
    let n = x.len() as f64;
    let mut out = x.clone();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in out.iter_mut() {
            r[j] = if sd > 1e-12 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Ward,
    Complete,
    Average,
    Single,
}

impl Linkage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ward" => Some(Linkage::Ward),
            "complete" => Some(Linkage::Complete),
            "average" => Some(Linkage::Average),
            "single" => Some(Linkage::Single),
            _ => None,
        }
    }
}

/// One merge: node ids follow the usual convention, leaves `0..n` and the
/// k-th merge creates node `n + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

/// Naive agglomerative clustering with Lance-Williams updates. Ties go to
/// the lexicographically smallest pair.
pub fn agglomerate(x: &Matrix, linkage: Linkage, manhattan_metric: bool) -> Vec<Merge> {
    let n = x.len();
    if n < 2 {
        return Vec::new();
    }
    let ward = linkage == Linkage::Ward;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = if ward {
                sq_dist(&x[i], &x[j])
            } else if manhattan_metric {
                manhattan(&x[i], &x[j])
            } else {
                sq_dist(&x[i], &x[j]).sqrt()
            };
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut node: Vec<usize> = (0..n).collect();
    let mut size: Vec<usize> = vec![1; n];
    let mut merges = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && d[i * n + j] < best.0 {
                    best = (d[i * n + j], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for m in 0..n {
            if !active[m] || m == i || m == j {
                continue;
            }
            let (dmi, dmj) = (d[m * n + i], d[m * n + j]);
            let nm = size[m] as f64;
            let v = match linkage {
                Linkage::Ward => ((ni + nm) * dmi + (nj + nm) * dmj - nm * dij) / (ni + nj + nm),
                Linkage::Complete => dmi.max(dmj),
                Linkage::Single => dmi.min(dmj),
                Linkage::Average => (ni * dmi + nj * dmj) / (ni + nj),
            };
            d[m * n + i] = v;
            d[i * n + m] = v;
        }
        active[j] = false;
        let height = if ward { dij.max(0.0).sqrt() } else { dij };
        let (a, b) = (node[i].min(node[j]), node[i].max(node[j]));
        size[i] += size[j];
        merges.push(Merge { a, b, height, size: size[i] });
        node[i] = n + k;
    }
    merges
}

/// Flat labels after replaying merges until `clusters` remain, or until
/// the next merge would exceed `threshold` when one is given. Labels are
/// numbered by the first sample of each cluster.
pub fn cut_tree(n: usize, merges: &[Merge], clusters: usize, threshold: Option<f64>) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    // Representative sample of each tree node.
    let mut rep: Vec<usize> = (0..n).collect();
    let mut remaining = n;
    for m in merges {
        let stop = match threshold {
            Some(t) => m.height > t,
            None => remaining <= clusters.max(1),
        };
        if stop {
            break;
        }
        let (ra, rb) = (find(&mut parent, rep[m.a]), find(&mut parent, rep[m.b]));
        parent[rb] = ra;
        rep.push(ra);
        remaining -= 1;
    }
    relabel(&(0..n).map(|i| find(&mut parent, i)).collect::<Vec<_>>())
}

/// Renumbers arbitrary cluster ids by first appearance.
pub fn relabel(raw: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    raw.iter()
        .map(|r| match seen.iter().position(|s| s == r) {
            Some(p) => p,
            None => {
                seen.push(*r);
                seen.len() - 1
            }
        })
        .collect()
}

/// Leaf order of a dendrogram, left to right.
pub fn leaf_order(n: usize, merges: &[Merge]) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let root = if merges.is_empty() { 0 } else { n + merges.len() - 1 };
    let mut out = Vec::with_capacity(n);
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        if v < n {
            out.push(v);
        } else {
            let m = &merges[v - n];
            stack.push(m.b);
            stack.push(m.a);
        }
    }
    out
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, max_iter: usize) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.len();
    let mut centers: Matrix = vec![x[rng.gen_range(0..n)].clone()];
    while centers.len() < k {
        let w: Vec<f64> =
            x.iter().map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = w.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, wi) in w.iter().enumerate() {
                if r < *wi {
                    idx = i;
                    break;
                }
                r -= wi;
            }
            idx
        };
        centers.push(x[pick].clone());
    }
    let mut labels = vec![0; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in x.iter().enumerate() {
            let best = nearest(p, &centers);
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let d = x[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in x.iter().zip(&labels) {
            counts[l] += 1;
            for j in 0..d {
                sums[l][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    (centers, labels)
}

pub fn nearest(p: &[f64], centers: &Matrix) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

pub struct GmmFit {
    pub weights: Vec<f64>,
    pub means: Matrix,
    /// Per-component diagonal variances.
    pub variances: Matrix,
    pub responsibilities: Matrix,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// EM for a diagonal-covariance Gaussian mixture, initialized from k-means.
pub fn gmm(x: &Matrix, k: usize, seed: u64, max_iter: usize, tol: f64, reg: f64) -> GmmFit {
    let n = x.len();
    let d = x[0].len();
    let (centers, labels) = kmeans(x, k, seed, 100);
    let mut weights = vec![0.0; k];
    let mut variances = vec![vec![0.0; d]; k];
    for (p, &l) in x.iter().zip(&labels) {
        weights[l] += 1.0;
        for j in 0..d {
            variances[l][j] += (p[j] - centers[l][j]).powi(2);
        }
    }
    for c in 0..k {
        for v in variances[c].iter_mut() {
            *v = if weights[c] > 0.0 { *v / weights[c] } else { 1.0 } + reg;
        }
        weights[c] = (weights[c] / n as f64).max(1e-12);
    }
    let mut means = centers;
    let mut resp = vec![vec![0.0; k]; n];
    let mut prev = f64::NEG_INFINITY;
    let mut ll = prev;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..max_iter.max(1) {
        iterations = it + 1;
        ll = 0.0;
        for (i, p) in x.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|c| {
                    let mut s = weights[c].ln();
                    for j in 0..d {
                        let v = variances[c][j];
                        s -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (p[j] - means[c][j]).powi(2) / v);
                    }
                    s
                })
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            ll += m + z.ln();
            for c in 0..k {
                resp[i][c] = (logs[c] - m).exp() / z;
            }
        }
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum::<f64>().max(1e-12);
            weights[c] = nk / n as f64;
            for j in 0..d {
                means[c][j] = resp.iter().zip(x).map(|(r, p)| r[c] * p[j]).sum::<f64>() / nk;
            }
            for j in 0..d {
                variances[c][j] =
                    resp.iter().zip(x).map(|(r, p)| r[c] * (p[j] - means[c][j]).powi(2)).sum::<f64>() / nk + reg;
            }
        }
        if (ll - prev).abs() < tol * n as f64 {
            converged = true;
            break;
        }
        prev = ll;
    }
    GmmFit { weights, means, variances, responsibilities: resp, log_likelihood: ll, iterations, converged }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn centroids(x: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let d = x[0].len();
    let mut c = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for (p, &l) in x.iter().zip(labels) {
        counts[l] += 1.0;
        for j in 0..d {
            c[l][j] += p[j];
        }
    }
    for (ci, n) in c.iter_mut().zip(&counts) {
        if *n > 0.0 {
            ci.iter_mut().for_each(|v| *v /= n);
        }
    }
    c
}

/// Mean silhouette; 0 when fewer than two clusters.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 || x.len() < 2 {
        return 0.0;
    }
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(&x[i], &x[j]).sqrt();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b).max(1e-12);
        }
    }
    total / n as f64
}

pub fn calinski_harabasz(x: &Matrix, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let n = x.len();
    if k < 2 || n <= k {
        return 0.0;
    }
    let all = centroids(x, &vec![0; n], 1).remove(0);
    let c = centroids(x, labels, k);
    let mut counts = vec![0.0; k];
    labels.iter().for_each(|&l| counts[l] += 1.0);
    let between: f64 = (0..k).map(|i| counts[i] * sq_dist(&c[i], &all)).sum();
    let within: f64 = x.iter().zip(labels).map(|(p, &l)| sq_dist(p, &c[l])).sum();
    if within <= 0.0 {
        return 0.0;
    }
    (between / (k as f64 - 1.0)) / (within / (n - k) as f64)
}

pub fn davies_bouldin(x: &Matrix, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return 0.0;
    }
    let c = centroids(x, labels, k);
    let mut s = vec![0.0; k];
    let mut counts = vec![0.0; k];
    for (p, &l) in x.iter().zip(labels) {
        s[l] += sq_dist(p, &c[l]).sqrt();
        counts[l] += 1.0;
    }
    for i in 0..k {
        if counts[i] > 0.0 {
            s[i] /= counts[i];
        }
    }
    let mut total = 0.0;
    for i in 0..k {
        let worst = (0..k)
            .filter(|&j| j != i)
            .map(|j| (s[i] + s[j]) / sq_dist(&c[i], &c[j]).sqrt().max(1e-12))
            .fold(0.0, f64::max);
        total += worst;
    }
    total / k as f64
}

/// Adjusted Rand index between two labelings of equal length.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / c2(n as u64);
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
