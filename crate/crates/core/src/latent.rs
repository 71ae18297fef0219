//! Arithmetic and statistics over steering vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{decodes_exactly, Control};
use crate::model::ModelWeights;
use crate::rng::SeededRng;
use crate::svec::SteeringVector;
use crate::tokenizer::encode;

const SAMPLE_STREAM: u64 = 0x4741_5553;
const RADIUS_STREAM: u64 = 0x5241_4449;
const PCA_STREAM: u64 = 0x5043_4131;

/// Difference of class centroids, kept in f64 so that `a + (b − a)` lands
/// back on `b` after rounding to f32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetVector {
    pub values: Vec<f64>,
    pub source_centroid: Vec<f64>,
    pub target_centroid: Vec<f64>,
    pub n_source: usize,
    pub n_target: usize,
}

impl OffsetVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub struct TransferRequest<'a> {
    pub base: &'a SteeringVector,
    pub offset: &'a OffsetVector,
    pub lambda_scale: f64,
}

fn check_family(vectors: &[&SteeringVector]) -> Result<()> {
    if let Some(first) = vectors.first() {
        for v in &vectors[1..] {
            first.compatible_with(v)?;
        }
    }
    Ok(())
}

fn centroid(vectors: &[&SteeringVector]) -> Vec<f64> {
    let n = vectors.len() as f64;
    (0..vectors[0].dim())
        .map(|i| vectors.iter().map(|v| v.values[i] as f64).sum::<f64>() / n)
        .collect()
}

/// `mean(target) − mean(source)`.
pub fn compute_offset(
    source: &[&SteeringVector],
    target: &[&SteeringVector],
) -> Result<OffsetVector> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument(
            "offset needs at least one source and one target vector".into(),
        ));
    }
    let all: Vec<&SteeringVector> = source.iter().chain(target).copied().collect();
    check_family(&all)?;
    let source_centroid = centroid(source);
    let target_centroid = centroid(target);
    let values = target_centroid
        .iter()
        .zip(&source_centroid)
        .map(|(t, s)| t - s)
        .collect();
    Ok(OffsetVector {
        values,
        source_centroid,
        target_centroid,
        n_source: source.len(),
        n_target: target.len(),
    })
}

/// `base + λ · offset`, inheriting the base's metadata.
pub fn apply_offset(req: &TransferRequest<'_>) -> Result<SteeringVector> {
    let base = req.base;
    if base.dim() != req.offset.dim() {
        return Err(Error::Incompatible(format!(
            "base has dimension {} but offset has {}",
            base.dim(),
            req.offset.dim()
        )));
    }
    if !req.lambda_scale.is_finite() {
        return Err(Error::InvalidArgument("lambda must be finite".into()));
    }
    let mut out = base.clone();
    out.target_text = None;
    if req.lambda_scale != 0.0 {
        for (v, &o) in out.values.iter_mut().zip(&req.offset.values) {
            *v = (*v as f64 + req.lambda_scale * o) as f32;
        }
    }
    Ok(out)
}

/// `(1 − t) · a + t · b` for `t ∈ [0, 1]`.
pub fn interpolate(a: &SteeringVector, b: &SteeringVector, t: f64) -> Result<SteeringVector> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "interpolation weight {t} is outside [0, 1]"
        )));
    }
    a.compatible_with(b)?;
    let mut out = if t == 1.0 { b.clone() } else { a.clone() };
    out.target_text = None;
    if t > 0.0 && t < 1.0 {
        for (o, (&x, &y)) in out.values.iter_mut().zip(a.values.iter().zip(&b.values)) {
            *o = ((1.0 - t) * x as f64 + t * y as f64) as f32;
        }
    } else {
        out.target_text = if t == 0.0 {
            a.target_text.clone()
        } else {
            b.target_text.clone()
        };
    }
    Ok(out)
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Incompatible(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub spearman: f64,
    pub pearson: f64,
    pub n: usize,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "correlation of lists with lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("correlation input is not finite".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("correlation of a constant list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson on raw values and Spearman as Pearson on average ranks.
pub fn correlations(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    let p = pearson(xs, ys)?;
    let s = pearson(&average_ranks(xs), &average_ranks(ys))?;
    Ok(CorrelationResult {
        spearman: s,
        pearson: p,
        n: xs.len(),
    })
}

/// Draws `n` vectors from independent per-dimension normals fitted to
/// `vectors` (population variance).
pub fn gaussian_sample(
    vectors: &[&SteeringVector],
    n: usize,
    seed: u64,
) -> Result<Vec<SteeringVector>> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(
            "gaussian sampling needs at least 2 vectors".into(),
        ));
    }
    check_family(vectors)?;
    let mean = centroid(vectors);
    let k = vectors.len() as f64;
    let std: Vec<f64> = mean
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let var = vectors
                .iter()
                .map(|v| (v.values[i] as f64 - m).powi(2))
                .sum::<f64>()
                / k;
            var.sqrt()
        })
        .collect();
    let mut rng = SeededRng::derive(seed, SAMPLE_STREAM);
    let template = vectors[0];
    Ok((0..n)
        .map(|_| SteeringVector {
            values: mean
                .iter()
                .zip(&std)
                .map(|(&m, &s)| {
                    let e = rng.normal();
                    if s == 0.0 {
                        m as f32
                    } else {
                        (m + s * e) as f32
                    }
                })
                .collect(),
            spec: template.spec.clone(),
            model_fingerprint: template.model_fingerprint,
            seed,
            target_text: None,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusScan {
    /// Largest tested ε at which every perturbation still recovered the target.
    pub radius: f64,
    /// `(ε, perturbations that recovered)` for each ε scanned.
    pub tested: Vec<(f64, usize)>,
    pub n_directions: usize,
}

/// Scans `eps_grid` in ascending order, perturbing `vector` by `ε · u` for
/// random unit directions `u`, and stops at the first ε where any fails.
pub fn recovery_radius(
    weights: &ModelWeights<f32>,
    vector: &SteeringVector,
    target: &str,
    eps_grid: &[f64],
    n_directions: usize,
    seed: u64,
) -> Result<RadiusScan> {
    vector.check_model(weights)?;
    if n_directions == 0 {
        return Err(Error::InvalidArgument("n_directions must be positive".into()));
    }
    if eps_grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::InvalidArgument("radius grid must be finite and non-negative".into()));
    }
    let ids = encode(target).ids_usize();
    let recovers = |z: &[f32]| -> Result<bool> {
        let up = crate::model::make_projection(vector.dim(), weights.config.d_model, vector.spec.projection_seed)?
            .up_project(z)?;
        decodes_exactly(
            weights,
            Control::Inject {
                vector: &up,
                spec: &vector.spec,
            },
            &ids,
        )
    };
    if !recovers(&vector.values)? {
        return Err(Error::InvalidArgument(
            "base vector does not recover the target".into(),
        ));
    }
    let mut grid = eps_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut rng = SeededRng::derive(seed, RADIUS_STREAM);
    let mut radius = 0.0;
    let mut tested = Vec::new();
    for &eps in &grid {
        let mut ok = 0;
        for _ in 0..n_directions {
            let u: Vec<f64> = (0..vector.dim()).map(|_| rng.normal()).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let z: Vec<f32> = vector
                .values
                .iter()
                .zip(&u)
                .map(|(&v, &d)| (v as f64 + eps * d / norm) as f32)
                .collect();
            if eps == 0.0 || recovers(&z)? {
                ok += 1;
            }
        }
        tested.push((eps, ok));
        if ok < n_directions {
            break;
        }
        radius = eps;
    }
    Ok(RadiusScan {
        radius,
        tested,
        n_directions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca2d {
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    /// Covariance eigenvalues (sample variance along each component).
    pub variances: [f64; 2],
    pub mean: Vec<f64>,
}

/// Mean-centred projection onto the top two principal components, found by
/// power iteration on the sample covariance with deflation.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Pca2d> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::InvalidArgument("PCA needs at least 3 vectors".into()));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument(
            "PCA vectors must share a dimension of at least 2".into(),
        ));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !trace.is_finite() || trace <= 0.0 {
        return Err(Error::Numerical("degenerate covariance".into()));
    }

    let mut rng = SeededRng::derive(0, PCA_STREAM);
    let (v1, l1) = power_iteration(&cov, d, &mut rng);
    if l1 <= 1e-12 * trace {
        return Err(Error::Numerical("degenerate covariance".into()));
    }
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, mut l2) = power_iteration(&cov, d, &mut rng);
    if l2 <= 1e-12 * trace {
        // Rank-one data: any unit vector orthogonal to the first will do.
        l2 = 0.0;
        v2 = orthogonal_unit(&v1);
    }
    let coords = centred
        .iter()
        .map(|r| [dot(r, &v1), dot(r, &v2)])
        .collect();
    Ok(Pca2d {
        coords,
        components: [v1, v2],
        variances: [l1, l2],
        mean,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonal_unit(v: &[f64]) -> Vec<f64> {
    let k = v
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut e: Vec<f64> = (0..v.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
    let p = dot(&e, v);
    e.iter_mut().zip(v).for_each(|(x, y)| *x -= p * y);
    let n = dot(&e, &e).sqrt();
    e.iter_mut().for_each(|x| *x /= n);
    e
}

fn power_iteration(m: &[f64], d: usize, rng: &mut SeededRng) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0;
    for _ in 0..200_000 {
        let w: Vec<f64> = (0..d).map(|i| dot(&m[i * d..(i + 1) * d], &v)).collect();
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return (v, 0.0);
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        lambda = norm;
        if delta < 1e-14 {
            break;
        }
    }
    // Rayleigh quotient keeps the sign of negative deflation residue.
    let mv: Vec<f64> = (0..d).map(|i| dot(&m[i * d..(i + 1) * d], &v)).collect();
    let rq = dot(&v, &mv);
    (v, if rq.is_finite() { rq } else { lambda })
}

/// Mean within-group and mean between-group pairwise Euclidean distance.
pub fn cluster_distances(groups: &[Vec<&[f32]>]) -> Result<(f64, f64)> {
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (gi, g) in groups.iter().enumerate() {
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                within += dist(a, b);
                nw += 1;
            }
            for h in &groups[gi + 1..] {
                for b in h {
                    between += dist(a, b);
                    nb += 1;
                }
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(Error::InvalidArgument(
            "need at least two groups with two members".into(),
        ));
    }
    Ok((within / nw as f64, between / nb as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InjectionSite, InjectionSpec, Timesteps};

    fn sv(values: Vec<f32>) -> SteeringVector {
        SteeringVector {
            values,
            spec: InjectionSpec::single(InjectionSite::AfterSelfAttn(0), Timesteps::All, 3),
            model_fingerprint: 7,
            seed: 0,
            target_text: None,
        }
    }

    #[test]
    fn offset_of_two_sets_matches_hand_means() {
        let s = [sv(vec![1.0, 2.0, 3.0]), sv(vec![3.0, 2.0, 1.0])];
        let t = [sv(vec![0.0, 0.0, 6.0]), sv(vec![2.0, 4.0, 0.0]), sv(vec![4.0, 2.0, 0.0])];
        let o = compute_offset(&[&s[0], &s[1]], &[&t[0], &t[1], &t[2]]).unwrap();
        assert_eq!(o.source_centroid, vec![2.0, 2.0, 2.0]);
        assert_eq!(o.target_centroid, vec![2.0, 2.0, 2.0]);
        assert_eq!(o.values, vec![0.0, 0.0, 0.0]);

        let o = compute_offset(&[&s[0]], &[&t[1]]).unwrap();
        assert_eq!(o.values, vec![1.0, 2.0, -3.0]);
        assert!(compute_offset(&[], &[&t[1]]).is_err());
    }

    #[test]
    fn offset_rejects_other_specs() {
        let a = sv(vec![1.0, 2.0, 3.0]);
        let mut b = sv(vec![1.0, 2.0, 3.0]);
        b.model_fingerprint = 8;
        assert!(compute_offset(&[&a], &[&b]).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_range() {
        let a = sv(vec![0.1, -0.2, 0.3]);
        let b = sv(vec![1.5, 2.5, -3.5]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().values, a.values);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().values, b.values);
        assert!(interpolate(&a, &b, 1.5).is_err());
        assert!(interpolate(&a, &b, -0.1).is_err());
        let neg = sv(a.values.iter().map(|v| -v).collect());
        assert!(interpolate(&a, &neg, 0.5).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_cases() {
        let z = [0.3f32, -1.2, 2.0];
        let nz: Vec<f32> = z.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&z, &nz).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn correlation_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let r = correlations(&xs, &xs).unwrap();
        assert!((r.spearman - 1.0).abs() < 1e-12 && (r.pearson - 1.0).abs() < 1e-12);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((correlations(&xs, &rev).unwrap().spearman + 1.0).abs() < 1e-12);
        assert!(correlations(&xs, &xs[..3]).is_err());
        assert!(correlations(&xs, &[1.0; 4]).is_err());
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn gaussian_of_identical_vectors_is_the_mean() {
        let a = sv(vec![0.25, -1.0, 3.5]);
        let out = gaussian_sample(&[&a, &a, &a], 5, 1).unwrap();
        assert!(out.iter().all(|v| v.values == a.values));
        assert!(gaussian_sample(&[&a], 5, 1).is_err());
    }

    #[test]
    fn pca_of_planar_data_reconstructs() {
        let mut rng = SeededRng::new(5);
        let basis = [
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 2.0, 0.0, -1.0],
        ];
        let data: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let (a, b) = (rng.normal() * 3.0, rng.normal());
                (0..4).map(|j| a * basis[0][j] + b * basis[1][j] + 0.5).collect()
            })
            .collect();
        let p = pca_2d(&data).unwrap();
        assert!(p.variances[0] >= p.variances[1]);
        for (row, c) in data.iter().zip(&p.coords) {
            for (j, x) in row.iter().enumerate() {
                let rec = p.mean[j] + c[0] * p.components[0][j] + c[1] * p.components[1][j];
                assert!((rec - x).abs() < 1e-6);
            }
        }
        assert!(pca_2d(&data[..2]).is_err());
        assert!(pca_2d(&vec![vec![1.0, 1.0]; 4]).is_err());
    }

    #[test]
    fn cluster_distance_means() {
        let a = [0.0f32, 0.0];
        let b = [0.0f32, 1.0];
        let c = [3.0f32, 0.0];
        let d = [3.0f32, 1.0];
        let (w, bt) = cluster_distances(&[vec![&a[..], &b[..]], vec![&c[..], &d[..]]]).unwrap();
        assert_eq!(w, 1.0);
        let expected = (3.0 + 10f64.sqrt() + 10f64.sqrt() + 3.0) / 4.0;
        assert!((bt - expected).abs() < 1e-12);
    }
}
