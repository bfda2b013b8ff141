//! Fréchet distance between embedded image sets, and layout statistics.

use crate::data::{self, Dataset, Image, SegMap};
use crate::error::{Error, Result};
use crate::imgsynth::SurrogateFeatureExtractor;
use crate::rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

/// Empirical mean and (unbiased) covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Fit a Gaussian to `n×d` features (rows are samples).
pub fn fit_gaussian(features: &Array2<f64>) -> Result<GaussianStats> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::Argument(format!("fit_gaussian needs at least 2 rows, got {n}")));
    }
    let x = DMatrix::from_row_iterator(n, d, features.iter().cloned());
    let mu = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
    // exact symmetry
    sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma })
}

/// Symmetric PSD square root by eigendecomposition, clamping tiny negative
/// eigenvalues to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for v in vals.iter_mut() {
        if *v < -1e-6 * scale {
            log::warn!("matrix square root: eigenvalue {v:e} below tolerance, clamping to 0");
        }
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace of the square
/// root taken from the symmetric product `Σa^½ Σb Σa^½`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.nrows() != b.sigma.nrows() {
        return Err(Error::Argument(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let sa = sqrtm_psd(&a.sigma);
    let inner = &sa * &b.sigma * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < -1e-6 * scale {
                log::warn!("frechet_distance: eigenvalue {v:e} below tolerance, clamping to 0");
            }
            v.max(0.0).sqrt()
        })
        .sum();
    let d = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Fixed map from images to feature vectors.
pub trait EmbeddingModel {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// `n × d` features, one row per image.
    fn embed(&self, images: &[&Image]) -> Array2<f64>;
}

/// The seeded random feature pyramid, globally average-pooled per level.
pub struct SurrogateEmbedder {
    pub fx: SurrogateFeatureExtractor,
}

impl SurrogateEmbedder {
    pub fn new(seed: u64) -> Self {
        SurrogateEmbedder { fx: SurrogateFeatureExtractor::new(seed) }
    }
}

impl EmbeddingModel for SurrogateEmbedder {
    fn id(&self) -> String {
        format!("surrogate-pyramid-{}-seed{}", self.fx.dim(), self.fx.seed)
    }

    fn dim(&self) -> usize {
        self.fx.dim()
    }

    fn embed(&self, images: &[&Image]) -> Array2<f64> {
        let mut out = Array2::zeros((images.len(), self.fx.dim()));
        for (ci, chunk) in images.chunks(64).enumerate() {
            let f = self.fx.pooled(&data::images_to_tensor(chunk));
            out.slice_mut(ndarray::s![ci * 64..ci * 64 + chunk.len(), ..]).assign(&f);
        }
        out
    }
}

pub fn embed_stats(emb: &dyn EmbeddingModel, images: &[&Image]) -> Result<GaussianStats> {
    fit_gaussian(&emb.embed(images))
}

/// FID of two image sets under `emb`.
pub fn fid(emb: &dyn EmbeddingModel, a: &[&Image], b: &[&Image]) -> Result<f64> {
    frechet_distance(&embed_stats(emb, a)?, &embed_stats(emb, b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub mean: f64,
    pub trials: Vec<f64>,
    pub n_per_trial: usize,
    pub seed: u64,
    pub embedder_id: String,
}

/// Average FID over `trials` independent draws of `n_per_trial` synthetic
/// and `n_per_trial` real images. When `n_per_trial` equals the real set
/// size every trial uses the whole real set.
///
/// `sampler(n, seed)` must be a pure function of its arguments.
pub fn evaluate_fid<S>(
    mut sampler: S,
    real: &[&Image],
    emb: &dyn EmbeddingModel,
    n_per_trial: usize,
    trials: usize,
    seed: u64,
) -> Result<FidReport>
where
    S: FnMut(usize, u64) -> Result<Vec<Image>>,
{
    if n_per_trial < 2 || trials == 0 {
        return Err(Error::Argument(format!("need n_per_trial >= 2 and trials >= 1, got {n_per_trial}, {trials}")));
    }
    if real.len() < n_per_trial {
        return Err(Error::Argument(format!(
            "{} real images, {n_per_trial} needed per trial",
            real.len()
        )));
    }
    let mut values = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let idx: Vec<usize> = if n_per_trial == real.len() {
            (0..real.len()).collect()
        } else {
            let mut r = rng::stream(seed, &[rng::tag("fid-real"), t]);
            sample(&mut r, real.len(), n_per_trial).into_vec()
        };
        let real_sub: Vec<&Image> = idx.iter().map(|&i| real[i]).collect();
        let fake = sampler(n_per_trial, rng::derive_seed(seed, &[rng::tag("fid-fake"), t]))?;
        if fake.len() != n_per_trial {
            return Err(Error::State(format!("sampler returned {} images, asked for {n_per_trial}", fake.len())));
        }
        let fake_ref: Vec<&Image> = fake.iter().collect();
        values.push(fid(emb, &fake_ref, &real_sub)?);
    }
    Ok(FidReport {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        trials: values,
        n_per_trial,
        seed,
        embedder_id: emb.id(),
    })
}

/// Anything that paints an image from a class map.
pub trait ConditionalSynth {
    fn synthesize_maps(&self, maps: &[&SegMap]) -> Result<Vec<Image>>;
}

/// Synthesize one image per ground-truth validation map and compute FID
/// against the validation images.
pub fn eval_conditioned_on_gt(g: &dyn ConditionalSynth, val: &Dataset, emb: &dyn EmbeddingModel) -> Result<f64> {
    let maps = val.segmaps();
    let mut fake = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(64) {
        fake.extend(g.synthesize_maps(chunk)?);
    }
    let fake_ref: Vec<&Image> = fake.iter().collect();
    fid(emb, &fake_ref, &val.images())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaStats {
    pub mean: f64,
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutDivergence {
    pub kl_class_freq: f64,
    /// per class: area fraction statistics over generated maps
    pub gen_area: Vec<AreaStats>,
    /// per class: area fraction statistics over real maps
    pub real_area: Vec<AreaStats>,
}

pub const KL_SMOOTHING: f64 = 1e-8;

/// `KL(p ‖ q)` after adding `smoothing` to every entry and renormalizing.
pub fn kl_divergence(p: &[f64], q: &[f64], smoothing: f64) -> f64 {
    assert_eq!(p.len(), q.len());
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x + smoothing).sum();
        v.iter().map(|x| (x + smoothing) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

fn area_stats(maps: &[&SegMap], k: usize) -> Vec<AreaStats> {
    (0..k)
        .map(|c| {
            let fr: Vec<f64> = maps
                .iter()
                .map(|m| m.labels().iter().filter(|&&l| l as usize == c).count() as f64 / m.labels().len() as f64)
                .collect();
            let n = fr.len() as f64;
            let mean = fr.iter().sum::<f64>() / n;
            let var = if fr.len() > 1 {
                fr.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            AreaStats { mean, var }
        })
        .collect()
}

/// KL of class frequencies (generated ‖ real) plus per-class area statistics.
pub fn layout_divergence(gen: &[&SegMap], real: &[&SegMap]) -> Result<LayoutDivergence> {
    let (g0, r0) = match (gen.first(), real.first()) {
        (Some(g), Some(r)) => (g, r),
        _ => return Err(Error::Argument("layout_divergence needs non-empty map sets".into())),
    };
    if g0.k() != r0.k() {
        return Err(Error::Argument(format!("class counts differ: {} vs {}", g0.k(), r0.k())));
    }
    let k = g0.k();
    let p = data::class_histogram(gen)?;
    let q = data::class_histogram(real)?;
    Ok(LayoutDivergence {
        kl_class_freq: kl_divergence(&p, &q, KL_SMOOTHING),
        gen_area: area_stats(gen, k),
        real_area: area_stats(real, k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats1(mu: f64, var: f64) -> GaussianStats {
        GaussianStats { mu: DVector::from_element(1, mu), sigma: DMatrix::from_element(1, 1, var) }
    }

    #[test]
    fn fit_two_points() {
        let s = fit_gaussian(&array![[0.0, 0.0], [2.0, 2.0]]).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma, DMatrix::from_element(2, 2, 2.0));
        let same = fit_gaussian(&array![[3.0, 1.0], [3.0, 1.0], [3.0, 1.0]]).unwrap();
        assert_eq!(same.sigma, DMatrix::zeros(2, 2));
        assert!(matches!(fit_gaussian(&array![[1.0, 2.0]]), Err(Error::Argument(_))));
    }

    #[test]
    fn fit_is_permutation_invariant_and_scale_equivariant() {
        let x = array![[0.3, 1.0, -2.0], [1.5, 0.2, 0.0], [-0.7, 2.2, 1.1], [0.9, -1.0, 0.4]];
        let perm = array![[1.5, 0.2, 0.0], [0.9, -1.0, 0.4], [0.3, 1.0, -2.0], [-0.7, 2.2, 1.1]];
        let a = fit_gaussian(&x).unwrap();
        let b = fit_gaussian(&perm).unwrap();
        assert!((&a.mu - &b.mu).amax() < 1e-12 && (&a.sigma - &b.sigma).amax() < 1e-12);
        let c = fit_gaussian(&(&x * 3.0)).unwrap();
        assert!((&c.mu - &a.mu * 3.0).amax() < 1e-12);
        assert!((&c.sigma - &a.sigma * 9.0).amax() < 1e-12);
    }

    #[test]
    fn one_dimensional_closed_forms() {
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&stats1(0.5, 2.0), &stats1(0.5, 2.0)).unwrap() < 1e-12);
        let two = GaussianStats { mu: DVector::zeros(2), sigma: DMatrix::identity(2, 2) };
        assert!(matches!(frechet_distance(&stats1(0.0, 1.0), &two), Err(Error::Argument(_))));
    }

    #[test]
    fn kl_examples() {
        let a = SegMap::constant(2, 2, 2, 0).unwrap();
        let half = SegMap::from_fn(2, 2, 2, |i, _| i as u8).unwrap();
        assert_eq!(layout_divergence(&[&a], &[&a]).unwrap().kl_class_freq, 0.0);
        // p = (1, 0), q = (1/2, 1/2) after smoothing
        let e = KL_SMOOTHING;
        let p = [(1.0 + e) / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
        let q = [(0.5 + e) / (1.0 + 2.0 * e), (0.5 + e) / (1.0 + 2.0 * e)];
        let want = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        let got = layout_divergence(&[&a], &[&half]).unwrap();
        assert!((got.kl_class_freq - want).abs() < 1e-12);
        assert_eq!(got.gen_area[0], AreaStats { mean: 1.0, var: 0.0 });
        assert_eq!(got.real_area[1].mean, 0.5);
        let k3 = SegMap::constant(3, 2, 2, 0).unwrap();
        assert!(matches!(layout_divergence(&[&a], &[&k3]), Err(Error::Argument(_))));
    }
}
