//! Alignment scores, k-NN accuracies, entropy estimates and an exact
//! minimum-entropy-coupling solver for small discrete marginals.

use std::collections::HashMap;

use crate::denoiser::CondInput;
use crate::diffusion::{self, NllOptions, SampleConfig};
use crate::mec::{sinkhorn, CouplingPair, Phase};
use crate::numkit::Tensor;
use crate::rng::{self, Rng};
use crate::{check_dim, Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Fraction of samples closer than the true match, averaged over both
/// directions. `correspondence[i]` is the target row matching source row `i`.
pub fn foscttm(source: &Tensor, target: &Tensor, correspondence: &[usize]) -> Result<f64> {
    let per = foscttm_per_point(source, target, correspondence)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-pair FOSCTTM: entry `i` averages the source-side and target-side
/// fractions of the pair (source `i`, target `correspondence[i]`).
pub fn foscttm_per_point(source: &Tensor, target: &Tensor, correspondence: &[usize]) -> Result<Vec<f64>> {
    let n = source.rows();
    check_dim("target rows", n, target.rows())?;
    check_dim("correspondence", n, correspondence.len())?;
    check_dim("point dimension", source.cols(), target.cols())?;
    if n < 2 {
        return Err(Error::InvalidArgument("FOSCTTM needs at least 2 points".into()));
    }
    let mut inverse = vec![usize::MAX; n];
    for (i, &j) in correspondence.iter().enumerate() {
        if j >= n || inverse[j] != usize::MAX {
            return Err(Error::InvalidArgument("correspondence is not a permutation".into()));
        }
        inverse[j] = i;
    }
    let frac = |a: &Tensor, b: &Tensor, i: usize, m: usize| -> f64 {
        let d_true = sq_dist(a.row(i), b.row(m));
        let closer = (0..n).filter(|&j| j != m && sq_dist(a.row(i), b.row(j)) < d_true).count();
        closer as f64 / (n - 1) as f64
    };
    Ok((0..n)
        .map(|i| {
            let j = correspondence[i];
            0.5 * (frac(source, target, i, j) + frac(target, source, j, i))
        })
        .collect())
}

/// Indices of the `k` nearest rows of `data` to `q`, nearest first, ties to the lower index.
pub fn knn(data: &Tensor, q: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..data.rows()).map(|j| (sq_dist(data.row(j), q), j)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Most frequent label, smallest id on ties.
pub fn majority(labels: impl IntoIterator<Item = i64>) -> Option<i64> {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(l, _)| l)
}

/// Fraction of `query` rows whose k-NN majority over `reference_labels` equals their own label.
pub fn neighborhood_type_accuracy(
    query: &Tensor,
    query_labels: &[i64],
    reference: &Tensor,
    reference_labels: &[i64],
    k: usize,
) -> Result<f64> {
    check_dim("query labels", query.rows(), query_labels.len())?;
    check_dim("reference labels", reference.rows(), reference_labels.len())?;
    check_dim("point dimension", reference.cols(), query.cols())?;
    if k == 0 || k > reference.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} needs 1..={} reference points", reference.rows())));
    }
    if query.rows() == 0 {
        return Err(Error::InvalidArgument("no query points".into()));
    }
    let hits = (0..query.rows())
        .filter(|&i| majority(knn(reference, query.row(i), k).into_iter().map(|j| reference_labels[j])) == Some(query_labels[i]))
        .count();
    Ok(hits as f64 / query.rows() as f64)
}

/// k-NN classifier fit on `source`, scored on `target`.
pub fn label_transfer_accuracy(source: &Tensor, source_labels: &[i64], target: &Tensor, target_labels: &[i64], k: usize) -> Result<f64> {
    if k >= source.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} must be below the {} source points", source.rows())));
    }
    neighborhood_type_accuracy(target, target_labels, source, source_labels, k)
}

/// Replaces every row of `generated` by its nearest `dataset` row (lower
/// index on ties). Returns the projected rows and their indices.
pub fn nn_project(generated: &Tensor, dataset: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if dataset.rows() == 0 {
        return Err(Error::InvalidArgument("projection dataset is empty".into()));
    }
    check_dim("projection dimension", dataset.cols(), generated.cols())?;
    let idx: Vec<usize> = (0..generated.rows()).map(|i| knn(dataset, generated.row(i), 1)[0]).collect();
    Ok((crate::data::select_rows(dataset, &idx), idx))
}

/// Shannon entropy in nats of a probability vector (zeros contribute 0).
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Plug-in entropy of integer counts.
pub fn plug_in_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    entropy(&counts.iter().map(|&c| c as f64 / n as f64).collect::<Vec<_>>())
}

/// Cell index in `0..4` from the signs of the first two coordinates relative to `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantQuantizer {
    pub center: [f64; 2],
}

impl QuadrantQuantizer {
    /// Centers on the per-coordinate medians of `data`.
    pub fn fit(data: &Tensor) -> Result<Self> {
        if data.cols() < 2 || data.rows() == 0 {
            return Err(Error::InvalidArgument("quantizer needs at least 2 columns and 1 row".into()));
        }
        let med = |j: usize| {
            let mut v: Vec<f64> = (0..data.rows()).map(|i| data.row(i)[j]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        };
        Ok(Self { center: [med(0), med(1)] })
    }

    pub fn cell(&self, p: &[f64]) -> usize {
        usize::from(p[0] >= self.center[0]) * 2 + usize::from(p[1] >= self.center[1])
    }

    pub fn histogram(&self, data: &Tensor) -> Vec<f64> {
        let mut h = [0.0; 4];
        for i in 0..data.rows() {
            h[self.cell(data.row(i))] += 1.0;
        }
        let n = data.rows().max(1) as f64;
        h.iter().map(|c| c / n).collect()
    }
}

/// Plug-in entropy of the quantized joint of paired rows `a[i], b[i]`.
pub fn quantized_joint_entropy(a: &Tensor, qa: &QuadrantQuantizer, b: &Tensor, qb: &QuadrantQuantizer) -> Result<f64> {
    check_dim("paired rows", a.rows(), b.rows())?;
    let mut counts = vec![0usize; 16];
    for i in 0..a.rows() {
        counts[qa.cell(a.row(i)) * 4 + qb.cell(b.row(i))] += 1;
    }
    Ok(plug_in_entropy(&counts))
}

/// Index of the nearest centroid for each row.
pub fn assign_nearest(points: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..points.rows()).map(|i| knn(centroids, points.row(i), 1)[0]).collect()
}

/// Per-label mean rows; labels must be `0..k`.
pub fn label_centroids(points: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_dim("labels", points.rows(), labels.len())?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = points.cols();
    let mut sums = vec![0.0; k * d];
    let mut n = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        n[l] += 1;
        sums[l * d..(l + 1) * d].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
    }
    if n.contains(&0) {
        return Err(Error::InvalidArgument("every label in 0..k needs at least one point".into()));
    }
    for l in 0..k {
        sums[l * d..(l + 1) * d].iter_mut().for_each(|s| *s /= n[l] as f64);
    }
    Tensor::matrix(k, d, sums)
}

/// `Σ_a max_b count(a, b) / N`: how consistently each source cluster maps to one target cluster.
pub fn cluster_purity(source: &[usize], assigned: &[usize]) -> Result<f64> {
    check_dim("assignments", source.len(), assigned.len())?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("no points".into()));
    }
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for (&a, &b) in source.iter().zip(assigned) {
        *counts.entry((a, b)).or_default() += 1;
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for ((a, _), c) in counts {
        let e = best.entry(a).or_default();
        *e = (*e).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / source.len() as f64)
}

/// Entropy estimates for one direction of a coupling. Absolute values share
/// an unknown additive constant per dimension; differences are calibrated.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingEntropy {
    pub conditional: f64,
    pub conditional_stderr: f64,
    /// Conditional entropy plus the conditioning marginal's entropy estimate.
    pub joint: f64,
    pub generated_marginal: f64,
    pub conditioning_marginal: f64,
    pub mutual_information: f64,
    pub mutual_information_stderr: f64,
    pub n: usize,
}

/// Generates for every row of `cond_data` with the phase's sampler and scores
/// the pairs with the sampler (conditional) and both anchors (marginals). The
/// conditional and marginal terms share noise draws, so an independent
/// coupling gives a mutual information estimate of 0.
pub fn estimate_coupling_entropy(
    pair: &CouplingPair,
    phase: Phase,
    cond_data: &Tensor,
    k_mc: usize,
    sample_cfg: &SampleConfig,
    rng: &mut Rng,
) -> Result<CouplingEntropy> {
    let (sampler, _, gen_anchor) = pair.roles(phase);
    let cond_anchor = match phase {
        Phase::Theta => &pair.phi_anchor,
        Phase::Phi => &pair.theta_anchor,
    };
    let (gen, _) = diffusion::sample(sampler, Some(cond_data), cond_data.rows(), sample_cfg, rng)?;
    let opts = NllOptions::new(k_mc);
    let seed = rng::int_in(rng, 0, usize::MAX >> 1) as u64;
    let cond_nll = diffusion::estimate_nll(sampler, &gen, Some(cond_data), &opts, &mut rng::seeded(seed))?;
    let gen_nll = diffusion::estimate_nll_with(
        |xt, t, _| gen_anchor.predict(xt, t, CondInput::Null),
        &gen_anchor.schedule,
        &gen,
        Some(cond_data),
        &opts,
        &mut rng::seeded(seed),
    )?;
    let marg_nll = diffusion::estimate_nll(cond_anchor, cond_data, None, &opts, rng)?;
    let (c, cse) = diffusion::mean_stderr(&cond_nll);
    let (hg, _) = diffusion::mean_stderr(&gen_nll);
    let (hc, _) = diffusion::mean_stderr(&marg_nll);
    let mi: Vec<f64> = gen_nll.iter().zip(&cond_nll).map(|(g, c)| g - c).collect();
    let (mi_m, mi_se) = diffusion::mean_stderr(&mi);
    Ok(CouplingEntropy {
        conditional: c,
        conditional_stderr: cse,
        joint: c + hc,
        generated_marginal: hg,
        conditioning_marginal: hc,
        mutual_information: mi_m,
        mutual_information_stderr: mi_se,
        n: cond_data.rows(),
    })
}

/// Minimum-entropy coupling of two small discrete marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct MecSolution {
    /// Row-major `p_x.len() × p_y.len()` joint.
    pub coupling: Vec<f64>,
    pub entropy: f64,
}

fn check_marginal(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} must be non-empty and non-negative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        -v * v.ln()
    } else {
        0.0
    }
}

/// Fills cells in `order` with `min(residual row, residual column)`.
fn greedy_fill(px: &[f64], py: &[f64], order: &[usize]) -> Vec<f64> {
    let n = py.len();
    let (mut r, mut c) = (px.to_vec(), py.to_vec());
    let mut x = vec![0.0; px.len() * n];
    for &k in order {
        let (i, j) = (k / n, k % n);
        let v = r[i].min(c[j]);
        if v > 0.0 {
            x[k] = v;
            r[i] -= v;
            c[j] -= v;
        }
    }
    x
}

fn coupling_entropy(x: &[f64]) -> f64 {
    x.iter().map(|&v| xlogx(v)).sum()
}

/// Repeatedly pairs the largest remaining row and column masses.
fn largest_first(px: &[f64], py: &[f64]) -> Vec<f64> {
    let n = py.len();
    let (mut r, mut c) = (px.to_vec(), py.to_vec());
    let mut x = vec![0.0; px.len() * n];
    loop {
        let i = (0..r.len()).max_by(|a, b| r[*a].total_cmp(&r[*b])).expect("rows");
        let j = (0..n).max_by(|a, b| c[*a].total_cmp(&c[*b])).expect("cols");
        let v = r[i].min(c[j]);
        if !(v > 1e-15) {
            break;
        }
        x[i * n + j] += v;
        r[i] -= v;
        c[j] -= v;
    }
    x
}

struct Search<'a> {
    n: usize,
    best: f64,
    best_x: Vec<f64>,
    seen: HashMap<(Vec<u64>, Vec<u64>), f64>,
    px: &'a [f64],
}

impl Search<'_> {
    fn bound(r: &[f64], c: &[f64]) -> f64 {
        let hr: f64 = r.iter().map(|&v| xlogx(v)).sum();
        let hc: f64 = c.iter().map(|&v| xlogx(v)).sum();
        hr.max(hc)
    }

    fn dfs(&mut self, r: &mut Vec<f64>, c: &mut Vec<f64>, x: &mut Vec<f64>, acc: f64) {
        if acc + Self::bound(r, c) >= self.best - 1e-15 {
            return;
        }
        let key = (r.iter().map(|v| v.to_bits()).collect(), c.iter().map(|v| v.to_bits()).collect());
        if let Some(&prev) = self.seen.get(&key) {
            if prev <= acc {
                return;
            }
        }
        self.seen.insert(key, acc);
        let mut moves: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..self.px.len() {
            if r[i] <= 0.0 {
                continue;
            }
            for j in 0..self.n {
                if c[j] > 0.0 {
                    moves.push((r[i].min(c[j]), i, j));
                }
            }
        }
        if moves.is_empty() {
            if acc < self.best {
                self.best = acc;
                self.best_x = x.clone();
            }
            return;
        }
        moves.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (v, i, j) in moves {
            let (ri, cj) = (r[i], c[j]);
            // exhausting the smaller side exactly keeps residuals free of rounding dust
            if ri <= cj {
                r[i] = 0.0;
                c[j] = cj - ri;
            } else {
                c[j] = 0.0;
                r[i] = ri - cj;
            }
            let k = i * self.n + j;
            x[k] += v;
            self.dfs(r, c, x, acc + xlogx(v));
            x[k] -= v;
            r[i] = ri;
            c[j] = cj;
        }
    }
}

/// Mirror-descent sharpening of a random interior coupling, then rounding to
/// a vertex by filling cells in order of decreasing mass.
fn random_start(px: &[f64], py: &[f64], rng: &mut Rng) -> Vec<f64> {
    let (m, n) = (px.len(), py.len());
    let k: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| 0.01 + rng::uniform(rng)).collect()).collect();
    let mut x = sinkhorn(k, px, py, 50);
    for _ in 0..20 {
        let sharp: Vec<Vec<f64>> = x.iter().map(|row| row.iter().map(|v| v.powf(1.5).max(1e-300)).collect()).collect();
        x = sinkhorn(sharp, px, py, 50);
    }
    let mut order: Vec<usize> = (0..m * n).collect();
    order.sort_by(|a, b| x[b / n][b % n].total_cmp(&x[a / n][a % n]));
    greedy_fill(px, py, &order)
}

/// Exact minimum-entropy coupling for supports with `m·n ≤ 25`. Seeds come
/// from the north-west corner rule, largest-first pairing and 64 sharpened
/// random starts; a branch-and-bound search over vertex constructions then
/// proves or improves the incumbent.
pub fn discrete_mec_oracle(px: &[f64], py: &[f64], tol: f64, rng: &mut Rng) -> Result<MecSolution> {
    check_marginal(px, "p_x")?;
    check_marginal(py, "p_y")?;
    let (m, n) = (px.len(), py.len());
    if m * n > 25 {
        return Err(Error::InvalidArgument(format!("support {m}×{n} exceeds 25 cells")));
    }
    let mut cands = vec![greedy_fill(px, py, &(0..m * n).collect::<Vec<_>>()), largest_first(px, py)];
    for _ in 0..64 {
        cands.push(random_start(px, py, rng));
    }
    let (best_x, best) = cands
        .into_iter()
        .map(|x| {
            let h = coupling_entropy(&x);
            (x, h)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("candidates");
    let mut s = Search { n, best: best + 1e-12, best_x: best_x.clone(), seen: HashMap::new(), px };
    s.dfs(&mut px.to_vec(), &mut py.to_vec(), &mut vec![0.0; m * n], 0.0);
    let (coupling, entropy) = if s.best < best { (s.best_x, s.best) } else { (best_x, best) };
    for i in 0..m {
        let row: f64 = coupling[i * n..(i + 1) * n].iter().sum();
        if (row - px[i]).abs() > tol {
            return Err(Error::NonFinite(format!("row {i} marginal off by {}", row - px[i])));
        }
    }
    for j in 0..n {
        let col: f64 = (0..m).map(|i| coupling[i * n + j]).sum();
        if (col - py[j]).abs() > tol {
            return Err(Error::NonFinite(format!("column {j} marginal off by {}", col - py[j])));
        }
    }
    Ok(MecSolution { coupling, entropy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn foscttm_examples() {
        let a = t(3, 1, &[0.0, 1.0, 2.0]);
        assert_eq!(foscttm(&a, &a, &[0, 1, 2]).unwrap(), 0.0);
        // source 0's true match is target 2 at distance 2; targets 0 and 1 are closer (2/2).
        // source 1 matches target 1 at distance 0 (0/2). source 2 is symmetric to 0 (2/2).
        // The reversed direction is identical, so the score is (1 + 0 + 1)/3.
        let v = foscttm(&a, &a, &[2, 1, 0]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert!(foscttm(&t(1, 1, &[0.0]), &t(1, 1, &[0.0]), &[0]).is_err());
    }

    #[test]
    fn foscttm_random_alignment_is_half() {
        let mut r = rng::seeded(1);
        let mut acc = 0.0;
        for _ in 0..100 {
            let a = rng::normal_tensor(&mut r, 30, 2);
            let b = rng::normal_tensor(&mut r, 30, 2);
            let mut perm: Vec<usize> = (0..30).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
            acc += foscttm(&a, &b, &perm).unwrap();
        }
        assert!((acc / 100.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn knn_accuracy_examples() {
        let pts = t(4, 1, &[0.0, 0.1, 10.0, 10.1]);
        let labels = [0, 0, 1, 1];
        assert_eq!(neighborhood_type_accuracy(&pts, &labels, &pts, &labels, 1).unwrap(), 1.0);
        assert_eq!(label_transfer_accuracy(&pts, &labels, &pts, &labels, 2).unwrap(), 1.0);
        assert!(label_transfer_accuracy(&pts, &labels, &pts, &labels, 4).is_err());
        let wrong = t(2, 1, &[10.05, 0.05]);
        assert_eq!(neighborhood_type_accuracy(&wrong, &[0, 1], &pts, &labels, 2).unwrap(), 0.0);
        let half = t(2, 1, &[0.05, 0.05]);
        assert_eq!(neighborhood_type_accuracy(&half, &[0, 1], &pts, &labels, 2).unwrap(), 0.5);
        assert_eq!(majority([3, 1, 3, 1]), Some(1));
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut r = rng::seeded(2);
        let c = 4;
        let mut accs = Vec::new();
        for _ in 0..100 {
            let a = rng::normal_tensor(&mut r, 80, 2);
            let b = rng::normal_tensor(&mut r, 80, 2);
            let la: Vec<i64> = (0..80).map(|i| (i % c) as i64).collect();
            let mut lb = la.clone();
            rand::seq::SliceRandom::shuffle(lb.as_mut_slice(), &mut r);
            accs.push(label_transfer_accuracy(&a, &la, &b, &lb, 5).unwrap());
        }
        let (m, se) = diffusion::mean_stderr(&accs);
        assert!((m - 0.25).abs() < 3.0 * se.max(0.01), "{m} ± {se}");
    }

    #[test]
    fn nn_project_contracts() {
        let d = t(3, 1, &[0.0, 2.0, 5.0]);
        let (p, idx) = nn_project(&t(3, 1, &[2.0, 1.0, 4.0]), &d).unwrap();
        assert_eq!(p.data(), &[2.0, 0.0, 5.0]);
        assert_eq!(idx, vec![1, 0, 2]);
        let (pp, _) = nn_project(&p, &d).unwrap();
        assert_eq!(pp, p);
        assert!(nn_project(&p, &t(0, 1, &[])).is_err());
    }

    #[test]
    fn purity_is_permutation_invariant() {
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn oracle_examples() {
        let mut r = rng::seeded(3);
        let s = discrete_mec_oracle(&[0.5, 0.5], &[0.5, 0.5], 1e-12, &mut r).unwrap();
        assert!((s.entropy - 2f64.ln()).abs() < 1e-12);
        let py = [0.2, 0.3, 0.5];
        let s = discrete_mec_oracle(&[1.0, 0.0], &py, 1e-12, &mut r).unwrap();
        assert!((s.entropy - entropy(&py)).abs() < 1e-12);
        let p = [0.1, 0.2, 0.3, 0.4];
        let s = discrete_mec_oracle(&p, &p, 1e-12, &mut r).unwrap();
        assert!((s.entropy - entropy(&p)).abs() < 1e-12);
        assert!(discrete_mec_oracle(&[0.5, 0.6], &[1.0], 1e-9, &mut r).is_err());
    }

    /// All vertex constructions of a 3×3 polytope by trying every cell order.
    #[test]
    fn oracle_matches_exhaustive_orderings() {
        let mut r = rng::seeded(4);
        for _ in 0..5 {
            let px = {
                let v: Vec<f64> = (0..3).map(|_| rng::uniform(&mut r) + 0.05).collect();
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let py = {
                let v: Vec<f64> = (0..3).map(|_| rng::uniform(&mut r) + 0.05).collect();
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let mut best = f64::INFINITY;
            let mut order: Vec<usize> = (0..9).collect();
            permutations(&mut order, 0, &mut |o| best = best.min(coupling_entropy(&greedy_fill(&px, &py, o))));
            let s = discrete_mec_oracle(&px, &py, 1e-12, &mut r).unwrap();
            assert!((s.entropy - best).abs() < 1e-12, "{} vs {best}", s.entropy);
        }
    }

    fn permutations(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permutations(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn quantizer_cells() {
        let data = t(4, 2, &[-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
        let q = QuadrantQuantizer::fit(&data).unwrap();
        assert_eq!(q.center, [0.0, 0.0]);
        assert_eq!(q.histogram(&data), vec![0.25; 4]);
        let h = quantized_joint_entropy(&data, &q, &data, &q).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-15);
    }
}
