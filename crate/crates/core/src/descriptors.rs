//! Hu and Zernike shape moments and the class-wise shape condition vector.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::phantom::{ClassLabel, DatasetManifest, Split};

pub const HU_LEN: usize = 7;
pub const DEFAULT_ZERNIKE_ORDER: usize = 8;

struct Centroid {
    mass: f64,
    x: f64,
    y: f64,
}

fn centroid(img: &Image2D) -> Result<Centroid> {
    let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = img.get(y, x) as f64;
            m00 += v;
            m10 += x as f64 * v;
            m01 += y as f64 * v;
        }
    }
    if m00 <= 0.0 || !m00.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok(Centroid {
        mass: m00,
        x: m10 / m00,
        y: m01 / m00,
    })
}

/// `mu_pq = sum (x - xbar)^p (y - ybar)^q I(x, y)`, with `x` the column and
/// `y` the row index.
pub fn central_moment(img: &Image2D, p: u32, q: u32) -> Result<f64> {
    let c = centroid(img)?;
    Ok(central_about(img, &c, p, q))
}

fn central_about(img: &Image2D, c: &Centroid, p: u32, q: u32) -> f64 {
    let mut s = 0.0;
    for y in 0..img.height {
        let dy = (y as f64 - c.y).powi(q as i32);
        for x in 0..img.width {
            let v = img.get(y, x) as f64;
            if v != 0.0 {
                s += (x as f64 - c.x).powi(p as i32) * dy * v;
            }
        }
    }
    s
}

/// The seven Hu invariants `phi1..phi7`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HuVector {
    pub phi: [f64; HU_LEN],
}

pub fn hu_moments(img: &Image2D) -> Result<HuVector> {
    let c = centroid(img)?;
    let eta = |p: u32, q: u32| central_about(img, &c, p, q) / c.mass.powf(1.0 + (p + q) as f64 / 2.0);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));
    let a = n30 + n12;
    let b = n21 + n03;
    let phi = [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2),
        a * a + b * b,
        (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b) + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b),
        (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b,
        (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b) - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b),
    ];
    Ok(HuVector { phi })
}

/// `sign(phi) * log10(1 + |phi| * 1e12) / 12`.
pub fn log_compress_hu(phi: f64) -> f64 {
    phi.signum() * (1.0 + phi.abs() * 1e12).log10() / 12.0
}

/// `(n, m)` pairs with `m >= 0`, `n - m` even, `n <= max_order`, in
/// increasing `n` then `m`.
pub fn zernike_orders(max_order: usize) -> Vec<(usize, usize)> {
    (0..=max_order)
        .flat_map(|n| (n % 2..=n).step_by(2).map(move |m| (n, m)))
        .collect()
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Zernike radial polynomial `R_n^m(rho)` for `m >= 0`, `n - m` even.
pub fn zernike_radial(n: usize, m: usize, rho: f64) -> f64 {
    debug_assert!(m <= n && (n - m) % 2 == 0);
    (0..=(n - m) / 2)
        .map(|s| {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(n - s) / (factorial(s) * factorial((n + m) / 2 - s) * factorial((n - m) / 2 - s))
                * rho.powi((n - 2 * s) as i32)
        })
        .sum()
}

/// Basis function `V_nm(rho, theta) = R_n^|m|(rho) e^{i m theta}`.
pub fn zernike_basis(n: usize, m: i64, rho: f64, theta: f64) -> Complex64 {
    let r = zernike_radial(n, m.unsigned_abs() as usize, rho);
    Complex64::from_polar(r, m as f64 * theta)
}

/// Unit-disk mapping of an image: centroid-centred, radius equal to the
/// largest centroid-to-foreground (`I > 0`) distance.
struct DiskMap {
    cx: f64,
    cy: f64,
    radius: f64,
}

impl DiskMap {
    fn of(img: &Image2D) -> Result<Self> {
        let c = centroid(img)?;
        let mut r2: f64 = 0.0;
        for y in 0..img.height {
            for x in 0..img.width {
                if img.get(y, x) > 0.0 {
                    r2 = r2.max((x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2));
                }
            }
        }
        Ok(DiskMap {
            cx: c.x,
            cy: c.y,
            radius: r2.sqrt().max(0.5),
        })
    }

    /// `(rho, theta)` of pixel `(y, x)`, or `None` outside the unit disk.
    fn polar(&self, y: usize, x: usize) -> Option<(f64, f64)> {
        let (dx, dy) = ((x as f64 - self.cx) / self.radius, (y as f64 - self.cy) / self.radius);
        let rho = (dx * dx + dy * dy).sqrt();
        (rho <= 1.0 + 1e-12).then(|| (rho.min(1.0), dy.atan2(dx)))
    }
}

/// Complex Zernike moments `A_nm` for `m >= 0`, ordered as [`zernike_orders`].
pub fn zernike_complex(img: &Image2D, max_order: usize) -> Result<Vec<((usize, usize), Complex64)>> {
    let map = DiskMap::of(img)?;
    let orders = zernike_orders(max_order);
    let mut acc = vec![Complex64::new(0.0, 0.0); orders.len()];
    let area = 1.0 / (map.radius * map.radius);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = img.get(y, x) as f64;
            if v == 0.0 {
                continue;
            }
            let Some((rho, theta)) = map.polar(y, x) else { continue };
            for (a, &(n, m)) in acc.iter_mut().zip(&orders) {
                *a += v * zernike_basis(n, m as i64, rho, theta).conj();
            }
        }
    }
    Ok(orders
        .into_iter()
        .zip(acc)
        .map(|((n, m), a)| ((n, m), a * ((n + 1) as f64 / std::f64::consts::PI) * area))
        .collect())
}

/// `|A_nm|` for `m >= 0`, `n <= max_order`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZernikeVector {
    pub max_order: usize,
    pub magnitudes: Vec<f64>,
}

pub fn zernike_moments(img: &Image2D, max_order: usize) -> Result<ZernikeVector> {
    Ok(ZernikeVector {
        max_order,
        magnitudes: zernike_complex(img, max_order)?.into_iter().map(|(_, a)| a.norm()).collect(),
    })
}

/// Truncated expansion `sum A_nm V_nm` over `n <= max_order` (both signs of
/// `m`), evaluated on the pixels inside the image's unit disk; pixels outside
/// are zero.
pub fn zernike_reconstruct(img: &Image2D, max_order: usize) -> Result<Image2D> {
    let map = DiskMap::of(img)?;
    let moments = zernike_complex(img, max_order)?;
    let mut out = Image2D::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let Some((rho, theta)) = map.polar(y, x) else { continue };
            let mut v = 0.0;
            for &((n, m), a) in &moments {
                let term = (a * zernike_basis(n, m as i64, rho, theta)).re;
                v += if m == 0 { term } else { 2.0 * term };
            }
            out.set(y, x, v as f32);
        }
    }
    Ok(out)
}

/// Whether pixel `(y, x)` lies in the unit disk used for `img`'s moments.
pub fn zernike_disk_mask(img: &Image2D) -> Result<Vec<bool>> {
    let map = DiskMap::of(img)?;
    let mut mask = Vec::with_capacity(img.len());
    for y in 0..img.height {
        for x in 0..img.width {
            mask.push(map.polar(y, x).is_some());
        }
    }
    Ok(mask)
}

/// Length of `[Hu || Zernike]` for `max_order`.
pub fn shape_vector_len(max_order: usize) -> usize {
    HU_LEN + zernike_orders(max_order).len()
}

/// Raw `[phi1..phi7 || |A_nm|...]` of one image.
pub fn shape_descriptor(img: &Image2D, max_order: usize) -> Result<Vec<f64>> {
    let mut v = hu_moments(img)?.phi.to_vec();
    v.extend(zernike_moments(img, max_order)?.magnitudes);
    Ok(v)
}

/// Element-wise mean of raw shape descriptors for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeConditionVector {
    pub class_label: ClassLabel,
    pub values: Vec<f64>,
}

impl ShapeConditionVector {
    pub fn from_images<'a>(class_label: ClassLabel, images: impl IntoIterator<Item = &'a Image2D>, max_order: usize) -> Result<Self> {
        let mut sum: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for img in images {
            let d = shape_descriptor(img, max_order)?;
            match sum.as_mut() {
                None => sum = Some(d),
                Some(s) => s.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            }
            count += 1;
        }
        let sum = sum.ok_or(Error::EmptyClass(class_label.number()))?;
        Ok(ShapeConditionVector {
            class_label,
            values: sum.into_iter().map(|v| v / count as f64).collect(),
        })
    }
}

/// Shape condition for `class_label` from the training MIPs in `manifest`.
pub fn build_shape_condition(manifest: &DatasetManifest, class_label: ClassLabel) -> Result<ShapeConditionVector> {
    build_shape_condition_with_order(manifest, class_label, DEFAULT_ZERNIKE_ORDER)
}

pub fn build_shape_condition_with_order(manifest: &DatasetManifest, class_label: ClassLabel, max_order: usize) -> Result<ShapeConditionVector> {
    let images: Vec<Image2D> = manifest
        .load_mips(Split::Train)?
        .into_iter()
        .filter(|(_, c)| *c == class_label)
        .map(|(im, _)| im)
        .collect();
    ShapeConditionVector::from_images(class_label, &images, max_order)
}

/// The three class vectors plus per-element standardization statistics.
///
/// Standardization first log-compresses the Hu part ([`log_compress_hu`]),
/// then subtracts the mean and divides by the (population) standard
/// deviation taken over the three classes. Elements with no spread across
/// classes keep unit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeConditioning {
    pub vectors: Vec<ShapeConditionVector>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn compressed(v: &[f64]) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| if i < HU_LEN { log_compress_hu(x) } else { x })
        .collect()
}

impl ShapeConditioning {
    pub fn from_vectors(vectors: Vec<ShapeConditionVector>) -> Result<Self> {
        if vectors.len() != 3 {
            return Err(Error::invalid("shape conditioning", "need one vector per class"));
        }
        let len = vectors[0].values.len();
        if vectors.iter().any(|v| v.values.len() != len) {
            return Err(Error::invalid("shape conditioning", "class vectors differ in length"));
        }
        if vectors.iter().flat_map(|v| &v.values).any(|x| !x.is_finite()) {
            return Err(Error::invalid("shape conditioning", "non-finite moment"));
        }
        let comp: Vec<Vec<f64>> = vectors.iter().map(|v| compressed(&v.values)).collect();
        let mut mean = vec![0.0; len];
        let mut std = vec![0.0; len];
        for i in 0..len {
            let m = comp.iter().map(|c| c[i]).sum::<f64>() / 3.0;
            let var = comp.iter().map(|c| (c[i] - m).powi(2)).sum::<f64>() / 3.0;
            mean[i] = m;
            std[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(ShapeConditioning { vectors, mean, std })
    }

    pub fn build(manifest: &DatasetManifest, max_order: usize) -> Result<Self> {
        let train = manifest.load_mips(Split::Train)?;
        let vectors = ClassLabel::ALL
            .iter()
            .map(|&c| ShapeConditionVector::from_images(c, train.iter().filter(|(_, l)| *l == c).map(|(im, _)| im), max_order))
            .collect::<Result<Vec<_>>>()?;
        Self::from_vectors(vectors)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Standardized vector fed to the shape embedding.
    pub fn standardized(&self, class_label: ClassLabel) -> Vec<f64> {
        let v = &self.vectors[class_label.index()];
        compressed(&v.values)
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(size: usize, r: f64) -> Image2D {
        let c = size as f64 / 2.0;
        Image2D::from_fn(size, size, |y, x| {
            if (x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= r * r {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn first_central_moments_vanish() {
        let img = Image2D::from_fn(9, 13, |y, x| ((x * 7 + y * 3) % 5) as f32);
        assert!(central_moment(&img, 1, 0).unwrap().abs() < 1e-9);
        assert!(central_moment(&img, 0, 1).unwrap().abs() < 1e-9);
    }

    #[test]
    fn single_pixel_moments() {
        let mut img = Image2D::zeros(8, 8);
        img.set(3, 5, 1.0);
        assert_eq!(central_moment(&img, 0, 0).unwrap(), 1.0);
        assert_eq!(central_moment(&img, 2, 0).unwrap(), 0.0);
    }

    #[test]
    fn zero_mass_is_an_error() {
        let img = Image2D::zeros(8, 8);
        assert!(matches!(central_moment(&img, 0, 0), Err(Error::ZeroMass)));
        assert!(matches!(hu_moments(&img), Err(Error::ZeroMass)));
        assert!(matches!(zernike_moments(&img, 4), Err(Error::ZeroMass)));
    }

    #[test]
    fn zernike_order_count() {
        assert_eq!(zernike_orders(8).len(), 25);
        assert_eq!(shape_vector_len(8), 32);
        assert_eq!(zernike_orders(0), vec![(0, 0)]);
    }

    #[test]
    fn radial_polynomials_match_closed_forms() {
        for rho in [0.0, 0.3, 0.7, 1.0] {
            assert!((zernike_radial(2, 0, rho) - (2.0 * rho * rho - 1.0)).abs() < 1e-12);
            assert!((zernike_radial(3, 1, rho) - (3.0 * rho.powi(3) - 2.0 * rho)).abs() < 1e-12);
            assert!((zernike_radial(4, 4, rho) - rho.powi(4)).abs() < 1e-12);
            assert!((zernike_radial(6, 0, 1.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disk_hu_values() {
        let hu = hu_moments(&disk(64, 20.0)).unwrap();
        let expect = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((hu.phi[0] - expect).abs() / expect < 0.02, "{}", hu.phi[0]);
        for k in 1..7 {
            assert!(hu.phi[k].abs() < 1e-4, "phi{} = {}", k + 1, hu.phi[k]);
        }
    }

    #[test]
    fn log_compression_is_odd_and_bounded() {
        assert_eq!(log_compress_hu(0.0), 0.0);
        assert_eq!(log_compress_hu(-0.3), -log_compress_hu(0.3));
        assert!(log_compress_hu(1.0) < 1.01);
    }

    #[test]
    fn single_and_duplicated_image_class_vectors() {
        let img = disk(32, 9.0).translate(2, -3);
        let one = ShapeConditionVector::from_images(ClassLabel::Class1, [&img], 8).unwrap();
        assert_eq!(one.values, shape_descriptor(&img, 8).unwrap());
        let two = ShapeConditionVector::from_images(ClassLabel::Class1, [&img, &img], 8).unwrap();
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
        let none: [&Image2D; 0] = [];
        assert!(matches!(
            ShapeConditionVector::from_images(ClassLabel::Class2, none, 8),
            Err(Error::EmptyClass(2))
        ));
    }
}
