//! Diagonal-covariance Gaussian mixture fitted by EM, with k-means++
//! initialization and optional PCA.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::model::checkpoint::{self, take, write_atomic, GMM_MAGIC};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    /// Project to at most this many principal components first.
    pub pca_dims: Option<usize>,
    pub max_iter: usize,
    /// Stop once the per-point log-likelihood gain falls below this.
    pub tol: f64,
    pub restarts: usize,
    pub lloyd_iters: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            pca_dims: Some(50),
            max_iter: 200,
            tol: 1e-6,
            restarts: 3,
            lloyd_iters: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `p` rows of length `E`, by decreasing variance.
    pub basis: Vec<Vec<f64>>,
}

impl Pca {
    fn fit(points: &[Vec<f64>], p: usize) -> Self {
        let e = points[0].len();
        let n = points.len() as f64;
        let mut mean = vec![0.0; e];
        for x in points {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(e, e);
        for x in points {
            for i in 0..e {
                let di = x[i] - mean[i];
                for j in i..e {
                    cov[(i, j)] += di * (x[j] - mean[j]);
                }
            }
        }
        for i in 0..e {
            for j in i..e {
                let v = cov[(i, j)] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let basis = order
            .into_iter()
            .take(p)
            .map(|c| {
                let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                // fix the sign so the largest component is positive
                let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if big < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Self { mean, basis }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|b| b.iter().zip(x).zip(&self.mean).map(|((bi, xi), mi)| bi * (xi - mi)).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub pca: Option<Pca>,
    /// Total log-likelihood of the training points under the final fit.
    pub log_likelihood: f64,
    /// Total log-likelihood before each M-step, then after the last one.
    /// Restarts whenever an empty component is reseeded.
    pub history: Vec<f64>,
    pub reseeds: usize,
}

fn log_gauss(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        let d = xi - mi;
        acc += d * d / vi + vi.ln();
    }
    -0.5 * (acc + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Fit {
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    weights: Vec<f64>,
    history: Vec<f64>,
    reseeds: usize,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn transform(&self, x: &[f64]) -> Vec<f64> {
        match &self.pca {
            Some(p) => p.project(x),
            None => x.to_vec(),
        }
    }

    fn component_logs(&self, z: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|c| self.weights[c].ln() + log_gauss(z, &self.means[c], &self.variances[c]))
            .collect()
    }

    /// Posterior component probabilities for one point.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_logs(&self.transform(x));
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Most responsible component; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logs = self.component_logs(&self.transform(x));
        let mut best = 0;
        for c in 1..logs.len() {
            if logs[c] > logs[best] {
                best = c;
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let k = self.k();
        let p = self.dim();
        let flat = |rows: &[Vec<f64>]| -> Vec<f32> { rows.iter().flatten().map(|&v| v as f32).collect() };
        let means = Tensor::new(vec![k, p], flat(&self.means))?;
        let vars = Tensor::new(vec![k, p], flat(&self.variances))?;
        let weights = Tensor::new(vec![k], self.weights.iter().map(|&v| v as f32).collect())?;
        let mut tensors: Vec<(String, Tensor<f32>)> =
            vec![("means".into(), means), ("variances".into(), vars), ("weights".into(), weights)];
        if let Some(pca) = &self.pca {
            let e = pca.mean.len();
            tensors.push(("pca.mean".into(), Tensor::new(vec![e], pca.mean.iter().map(|&v| v as f32).collect())?));
            tensors.push(("pca.basis".into(), Tensor::new(vec![p, e], flat(&pca.basis))?));
        }
        let refs: Vec<(String, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::encode(
            GMM_MAGIC,
            "gmm",
            serde_json::json!({ "k": k, "dim": p, "pca": self.pca.is_some() }),
            serde_json::json!({
                "log_likelihood": self.log_likelihood,
                "history": self.history,
                "reseeds": self.reseeds,
            }),
            &refs,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut ts) = checkpoint::decode::<f32>(GMM_MAGIC, bytes)?;
        if header.kind != "gmm" {
            return Err(Error::Format(format!("expected a gmm file, found {}", header.kind)));
        }
        let rows = |t: Tensor<f32>| -> Vec<Vec<f64>> {
            let c = t.cols();
            t.data().chunks(c).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
        };
        let flat = |t: Tensor<f32>| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
        let means = rows(take(&mut ts, "means")?);
        let variances = rows(take(&mut ts, "variances")?);
        let weights = flat(take(&mut ts, "weights")?);
        let pca = if header.config["pca"].as_bool().unwrap_or(false) {
            Some(Pca {
                mean: flat(take(&mut ts, "pca.mean")?),
                basis: rows(take(&mut ts, "pca.basis")?),
            })
        } else {
            None
        };
        let meta = header.metadata;
        let bad = |what: &str| Error::Format(format!("gmm metadata: {what}"));
        Ok(Self {
            means,
            variances,
            weights,
            pca,
            log_likelihood: meta["log_likelihood"].as_f64().ok_or_else(|| bad("log_likelihood"))?,
            history: serde_json::from_value(meta["history"].clone()).map_err(|_| bad("history"))?,
            reseeds: meta["reseeds"].as_u64().ok_or_else(|| bad("reseeds"))? as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, opts: &GmmOptions, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a center
            Err(_) => rng.gen_range(0..n),
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    for _ in 0..opts.lloyd_iters {
        let mut sums = vec![vec![0.0; points[0].len()]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = nearest(p, &centers);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (c, m) in centers.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < bd {
            bd = d;
            best = c;
        }
    }
    best
}

fn em(points: &[Vec<f64>], k: usize, opts: &GmmOptions, rng: &mut ChaCha8Rng) -> Fit {
    let n = points.len();
    let dim = points[0].len();
    let centers = kmeans_pp(points, k, opts, rng);

    let mut global_var = vec![0.0; dim];
    let mut global_mean = vec![0.0; dim];
    for p in points {
        for (m, v) in global_mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    for p in points {
        for j in 0..dim {
            global_var[j] += (p[j] - global_mean[j]).powi(2) / n as f64;
        }
    }
    global_var.iter_mut().for_each(|v| *v = v.max(VARIANCE_FLOOR));

    // hard assignment to the k-means centers seeds the first M-step
    let mut resp = vec![vec![0.0; k]; n];
    for (i, p) in points.iter().enumerate() {
        resp[i][nearest(p, &centers)] = 1.0;
    }
    let mut fit = Fit {
        means: centers,
        variances: vec![global_var.clone(); k],
        weights: vec![1.0 / k as f64; k],
        history: Vec::new(),
        reseeds: 0,
    };
    m_step(points, &resp, &mut fit, &global_var);

    let mut point_ll = vec![0.0; n];
    let mut previous = None;
    for iter in 0..opts.max_iter {
        let ll = e_step(points, &fit, &mut resp, &mut point_ll);
        if let Some(&prev) = fit.history.last() {
            if ll < prev {
                // round-off at convergence: keep the better parameters
                if let Some((m, v, w)) = previous.take() {
                    (fit.means, fit.variances, fit.weights) = (m, v, w);
                }
                return fit;
            }
            if (ll - prev) / (n as f64) < opts.tol {
                fit.history.push(ll);
                return fit;
            }
        }
        fit.history.push(ll);
        previous = Some((fit.means.clone(), fit.variances.clone(), fit.weights.clone()));
        let reseeded = m_step(points, &resp, &mut fit, &global_var);
        if reseeded > 0 {
            // a reseed restarts the monotone sequence; keep only the new run
            log::warn!("gmm: reseeded {reseeded} empty component(s) at iteration {iter}");
            fit.reseeds += reseeded;
            fit.history.clear();
        }
    }
    let ll = e_step(points, &fit, &mut resp, &mut point_ll);
    fit.history.push(ll);
    fit
}

fn e_step(points: &[Vec<f64>], fit: &Fit, resp: &mut [Vec<f64>], point_ll: &mut [f64]) -> f64 {
    let k = fit.weights.len();
    let mut total = 0.0;
    let mut logs = vec![0.0; k];
    for (i, p) in points.iter().enumerate() {
        for (c, l) in logs.iter_mut().enumerate() {
            *l = fit.weights[c].ln() + log_gauss(p, &fit.means[c], &fit.variances[c]);
        }
        let lse = log_sum_exp(&logs);
        for c in 0..k {
            resp[i][c] = (logs[c] - lse).exp();
        }
        point_ll[i] = lse;
        total += lse;
    }
    total
}

/// Returns how many components had to be reseeded.
fn m_step(points: &[Vec<f64>], resp: &[Vec<f64>], fit: &mut Fit, global_var: &[f64]) -> usize {
    let n = points.len();
    let k = fit.weights.len();
    let dim = points[0].len();
    let mut reseeded = 0;
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum();
        if nk < 1e-10 {
            // lowest-likelihood point under the current fit becomes the new center
            let worst = (0..n)
                .min_by(|&a, &b| {
                    let la = log_sum_exp(
                        &(0..k)
                            .map(|j| fit.weights[j].ln() + log_gauss(&points[a], &fit.means[j], &fit.variances[j]))
                            .collect::<Vec<_>>(),
                    );
                    let lb = log_sum_exp(
                        &(0..k)
                            .map(|j| fit.weights[j].ln() + log_gauss(&points[b], &fit.means[j], &fit.variances[j]))
                            .collect::<Vec<_>>(),
                    );
                    la.total_cmp(&lb).then(a.cmp(&b))
                })
                .unwrap();
            fit.means[c] = points[worst].clone();
            fit.variances[c] = global_var.to_vec();
            fit.weights[c] = 1.0 / n as f64;
            reseeded += 1;
            continue;
        }
        let mut mean = vec![0.0; dim];
        for (p, r) in points.iter().zip(resp) {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += r[c] * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; dim];
        for (p, r) in points.iter().zip(resp) {
            for j in 0..dim {
                var[j] += r[c] * (p[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / nk).max(VARIANCE_FLOOR));
        fit.means[c] = mean;
        fit.variances[c] = var;
        fit.weights[c] = nk / n as f64;
    }
    let s: f64 = fit.weights.iter().sum();
    fit.weights.iter_mut().for_each(|w| *w /= s);
    reseeded
}

/// Fits a `k`-component mixture. Each restart draws its own k-means++
/// initialization from `seed`; the highest final log-likelihood wins.
pub fn fit_points(points: &[Vec<f64>], k: usize, seed: u64, opts: &GmmOptions) -> Result<GmmModel> {
    if k == 0 {
        return Err(config("gmm needs at least one component"));
    }
    if points.len() < 2 * k {
        return Err(config(format!("{} points are too few for {k} components", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(config("gmm points must share a positive dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gmm input contains non-finite values".into()));
    }
    let pca = opts.pca_dims.map(|p| Pca::fit(points, p.min(dim).max(1)));
    let projected: Vec<Vec<f64>> = match &pca {
        Some(p) => points.iter().map(|x| p.project(x)).collect(),
        None => points.to_vec(),
    };
    let mut best: Option<Fit> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let fit = em(&projected, k, opts, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => fit.history.last().unwrap() > b.history.last().unwrap(),
        };
        if better {
            best = Some(fit);
        }
    }
    let fit = best.unwrap();
    Ok(GmmModel {
        log_likelihood: *fit.history.last().unwrap(),
        means: fit.means,
        variances: fit.variances,
        weights: fit.weights,
        pca,
        history: fit.history,
        reseeds: fit.reseeds,
    })
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return if index == expected { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    /// Three blobs with σ = 0.1 × the smallest inter-mean distance.
    pub(crate) fn blobs(seed: u64, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let centers = [[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.5], [0.0, 1.0, 0.5, 0.0]];
        let min_dist = (0..3)
            .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
            .map(|(i, j)| sq_dist(&centers[i], &centers[j]).sqrt())
            .fold(f64::INFINITY, f64::min);
        let sigma = 0.1 * min_dist;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(
                    m.iter()
                        .map(|&v| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            v + sigma * z
                        })
                        .collect(),
                );
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn ari_matches_reference_values() {
        // values from an independent implementation
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]) - 0.5714285714285714).abs() < 1e-12);
        assert!(
            (adjusted_rand_index(&[0, 0, 0, 1, 1, 1, 2, 2, 2], &[1, 1, 0, 0, 2, 2, 2, 2, 0]) - 0.07142857142857142).abs()
                < 1e-12
        );
        assert_eq!(adjusted_rand_index(&[0, 1, 2, 3], &[0, 0, 0, 0]), 0.0);
        assert_eq!(adjusted_rand_index(&[2, 2, 0, 0], &[0, 0, 1, 1]), 1.0);
    }

    #[test]
    fn separated_blobs_recovered() {
        for seed in 0..5 {
            let (pts, labels) = blobs(seed, 60);
            let gmm = fit_points(&pts, 3, seed, &GmmOptions::default()).unwrap();
            let pred: Vec<usize> = pts.iter().map(|p| gmm.predict(p)).collect();
            assert!(adjusted_rand_index(&labels, &pred) > 0.9);
            assert!(gmm.history.windows(2).all(|w| w[1] >= w[0]), "{:?}", gmm.history);
            let w: f64 = gmm.weights.iter().sum();
            assert!((w - 1.0).abs() < 1e-9);
            assert!(gmm.variances.iter().flatten().all(|&v| v >= VARIANCE_FLOOR));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (pts, _) = blobs(3, 30);
        let a = fit_points(&pts, 3, 11, &GmmOptions::default()).unwrap();
        let b = fit_points(&pts, 3, 11, &GmmOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_points() {
        let (pts, _) = blobs(0, 1);
        assert!(matches!(fit_points(&pts, 3, 0, &GmmOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_points_force_reseed_and_still_fit() {
        let mut pts = vec![vec![0.0, 0.0]; 20];
        pts.extend(vec![vec![5.0, 5.0]; 20]);
        let opts = GmmOptions {
            pca_dims: None,
            ..GmmOptions::default()
        };
        let g = fit_points(&pts, 4, 1, &opts).unwrap();
        assert!(g.log_likelihood.is_finite());
        assert!(g.history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn save_load_round_trip() {
        let (pts, _) = blobs(1, 20);
        let g = fit_points(&pts, 3, 1, &GmmOptions::default()).unwrap();
        let bytes = g.to_bytes().unwrap();
        let back = GmmModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.k(), 3);
        let mut bad = bytes.clone();
        bad[4] = b'X';
        assert!(matches!(GmmModel::from_bytes(&bad), Err(Error::Format(_))));
        let pred_a: Vec<usize> = pts.iter().map(|p| g.predict(p)).collect();
        let pred_b: Vec<usize> = pts.iter().map(|p| back.predict(p)).collect();
        assert_eq!(pred_a, pred_b);
    }
}
