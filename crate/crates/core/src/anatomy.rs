//! Per-class PCA over training MIPs and the 8-token anatomy condition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::phantom::{ClassLabel, DatasetManifest, Split};

pub const PCA_COMPONENTS: usize = 7;
pub const ANATOMY_TOKENS: usize = PCA_COMPONENTS + 1;

/// Mean image plus the top-`k` principal axes of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub class_label: ClassLabel,
    pub height: usize,
    pub width: usize,
    pub mean_image: Vec<f64>,
    /// Unit-norm, mutually orthogonal.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing; covariance normalised by `1/n`.
    pub explained_variance: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Flip so the largest-magnitude entry is positive (first one on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top eigenpairs of a symmetric matrix, descending.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .map(|(&l, v)| (l, v.into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

impl PcaModel {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    fn check(&self, img: &Image2D) -> Result<()> {
        if img.shape() != [self.height, self.width] {
            return Err(Error::shape("pca projection", &[self.height, self.width], &img.shape()));
        }
        Ok(())
    }

    /// `<img - mean, comp_i>` for each component.
    pub fn project(&self, img: &Image2D) -> Result<Vec<f64>> {
        self.check(img)?;
        let centred: Vec<f64> = img.data.iter().zip(&self.mean_image).map(|(&x, m)| x as f64 - m).collect();
        Ok(self.components.iter().map(|c| dot(&centred, c)).collect())
    }

    /// `mean + sum c_i comp_i`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.k() {
            return Err(Error::shape("pca coefficients", &[self.k()], &[coeffs.len()]));
        }
        let mut out = self.mean_image.clone();
        for (c, comp) in coeffs.iter().zip(&self.components) {
            out.iter_mut().zip(comp).for_each(|(o, v)| *o += c * v);
        }
        Ok(out)
    }
}

/// PCA of `images` keeping `k` components. Uses the `n x n` Gram matrix when
/// there are fewer images than pixels, the pixel covariance otherwise.
/// Directions with zero variance are completed to an orthonormal set.
pub fn fit_pca(class_label: ClassLabel, images: &[Image2D], k: usize) -> Result<PcaModel> {
    let n = images.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("PCA needs at least 2 images, got {n}")));
    }
    let [h, w] = images[0].shape();
    let d = h * w;
    if let Some(bad) = images.iter().find(|im| im.shape() != [h, w]) {
        return Err(Error::shape("pca input", &[h, w], &bad.shape()));
    }
    if k > (n - 1).min(d) {
        return Err(Error::InsufficientSamples(format!(
            "{k} components need at least {} images of {d} pixels, got {n}",
            k + 1
        )));
    }
    let mut mean = vec![0.0; d];
    for im in images {
        mean.iter_mut().zip(&im.data).for_each(|(m, &x)| *m += x as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| images[i].data[j] as f64 - mean[j]);
    let total: f64 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let tiny = 1e-12 * total.max(f64::MIN_POSITIVE);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variance = Vec::with_capacity(k);
    let pairs = if n < d {
        sorted_eigen(&x * x.transpose() / n as f64)
    } else {
        sorted_eigen(x.transpose() * &x / n as f64)
    };
    for (lambda, u) in pairs.into_iter().take(k) {
        if lambda <= tiny {
            break;
        }
        let mut v: Vec<f64> = if n < d { (x.transpose() * u).iter().copied().collect() } else { u.iter().copied().collect() };
        let nv = norm(&v);
        v.iter_mut().for_each(|e| *e /= nv);
        fix_sign(&mut v);
        components.push(v);
        variance.push(lambda.max(0.0));
    }
    let mut basis = 0;
    while components.len() < k {
        let mut v = vec![0.0; d];
        v[basis] = 1.0;
        basis += 1;
        for c in &components {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(e, ce)| *e -= p * ce);
        }
        let nv = norm(&v);
        if nv > 0.5 {
            v.iter_mut().for_each(|e| *e /= nv);
            fix_sign(&mut v);
            components.push(v);
            variance.push(0.0);
        }
    }
    Ok(PcaModel {
        class_label,
        height: h,
        width: w,
        mean_image: mean,
        components,
        explained_variance: variance,
    })
}

/// Per-class PCA with [`PCA_COMPONENTS`] components on the training MIPs.
pub fn fit_class_pca(manifest: &DatasetManifest, class_label: ClassLabel) -> Result<PcaModel> {
    let images: Vec<Image2D> = manifest
        .load_mips(Split::Train)?
        .into_iter()
        .filter(|(_, c)| *c == class_label)
        .map(|(im, _)| im)
        .collect();
    if images.is_empty() {
        return Err(Error::EmptyClass(class_label.number()));
    }
    fit_pca(class_label, &images, PCA_COMPONENTS)
}

/// `[mean || comp_1 || ... || comp_k]` as `k + 1` tokens at the
/// conditioning resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyConditionVector {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<Vec<f32>>,
}

impl AnatomyConditionVector {
    pub fn token_len(&self) -> usize {
        self.height * self.width
    }

    pub fn token_image(&self, i: usize) -> Image2D {
        Image2D::new(self.height, self.width, self.tokens[i].clone()).expect("token length")
    }

    /// Flattened `[tokens, H*W]`.
    pub fn flat(&self) -> Vec<f32> {
        self.tokens.concat()
    }
}

fn area_downsample(v: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (fy, fx) = (h / oh, w / ow);
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / fy) * ow + x / fx] += v[y * w + x];
        }
    }
    let area = (fy * fx) as f64;
    out.into_iter().map(|s| (s / area) as f32).collect()
}

/// Area-average the mean and each component down to `height x width`.
pub fn build_anatomy_condition(model: &PcaModel, height: usize, width: usize) -> Result<AnatomyConditionVector> {
    if height == 0 || width == 0 || model.height % height != 0 || model.width % width != 0 {
        return Err(Error::invalid(
            "conditioning resolution",
            format!("{height}x{width} does not evenly divide {}x{}", model.height, model.width),
        ));
    }
    let tokens = std::iter::once(&model.mean_image)
        .chain(&model.components)
        .map(|v| area_downsample(v, model.height, model.width, height, width))
        .collect();
    Ok(AnatomyConditionVector { height, width, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention() {
        let mut v = vec![0.1, -0.9, 0.3];
        fix_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Image2D::zeros(4, 4);
        assert!(matches!(fit_pca(ClassLabel::Class1, &[a.clone()], 1), Err(Error::InsufficientSamples(_))));
        assert!(fit_pca(ClassLabel::Class1, &[a.clone(), a.clone()], 2).is_err());
        assert!(matches!(
            fit_pca(ClassLabel::Class1, &[a.clone(), Image2D::zeros(4, 5)], 1),
            Err(Error::ShapeMismatch { .. })
        ));
        let m = fit_pca(ClassLabel::Class1, &[a.clone(), a.clone()], 1).unwrap();
        assert!(m.project(&Image2D::zeros(2, 2)).is_err());
        assert!(build_anatomy_condition(&m, 3, 3).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let d = area_downsample(&v, 4, 4, 2, 2);
        assert_eq!(d, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
