//! Toy datasets, dequantization and file formats.
//!
//! Vector data is CSV with one point per row. Image data is raw bytes after
//! an 8-byte header of four little-endian `u16`: height, width, channels,
//! bit depth. Images follow back to back in HWC order, one byte per value.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::DataSpec;
use crate::error::{FlowError, Result};
use crate::flow::layer::Shape;
use crate::linalg::Matrix;

pub const RING_RADII: [f64; 3] = [0.5, 1.0, 1.5];
pub const RING_HALF_WIDTH: f64 = 0.08;

pub const TOY_NAMES: [&str; 5] = ["gaussian", "two_moons", "rings", "checkerboard", "spiral"];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Seeded 2-D toy distribution.
///
/// * `gaussian`: standard normal.
/// * `two_moons`: two interleaved half circles with noise 0.1, centred.
/// * `rings`: three concentric annuli, radii [`RING_RADII`], radial
///   half-width [`RING_HALF_WIDTH`], ring chosen uniformly.
/// * `checkerboard`: uniform on the dark squares of a 4x4 board on [-2, 2]².
/// * `spiral`: one noisy arm of an Archimedean spiral.
pub fn toy_dataset(name: &str, n: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    match name {
        "gaussian" => {
            for _ in 0..2 * n {
                data.push(gauss(&mut rng));
            }
        }
        "two_moons" => {
            for _ in 0..n {
                let t = PI * rng.random::<f64>();
                let (x, y) = if rng.random::<bool>() { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                data.push(x - 0.5 + 0.1 * gauss(&mut rng));
                data.push(y - 0.25 + 0.1 * gauss(&mut rng));
            }
        }
        "rings" => {
            for _ in 0..n {
                let radius = RING_RADII[rng.random_range(0..RING_RADII.len())];
                let r = radius + RING_HALF_WIDTH * (2.0 * rng.random::<f64>() - 1.0);
                let a = 2.0 * PI * rng.random::<f64>();
                data.push(r * a.cos());
                data.push(r * a.sin());
            }
        }
        "checkerboard" => {
            for _ in 0..n {
                let x: f64 = 4.0 * rng.random::<f64>() - 2.0;
                let row = rng.random_range(0..2) as f64 * 2.0;
                let parity = (x.floor() as i64).rem_euclid(2) as f64;
                let y = rng.random::<f64>() - 2.0 + row + parity;
                data.push(x);
                data.push(y);
            }
        }
        "spiral" => {
            for _ in 0..n {
                let t = 3.0 * PI * rng.random::<f64>().sqrt();
                let r = t / (1.5 * PI);
                data.push(r * t.cos() + 0.05 * gauss(&mut rng));
                data.push(r * t.sin() + 0.05 * gauss(&mut rng));
            }
        }
        _ => return Err(FlowError::UnknownName(name.to_string())),
    }
    Matrix::new(n, 2, data)
}

/// Fixed lower-triangular mixing matrix drawn from `seed`.
pub fn mixing_matrix(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c);
    let off = Normal::new(0.0, 0.5).expect("valid normal");
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            m[(i, j)] = off.sample(&mut rng);
        }
        m[(i, i)] = 0.5 + rng.random::<f64>();
    }
    m
}

/// Zero-mean Gaussian samples `L ε` with `L = mixing_matrix(d, seed)`.
pub fn correlated_gaussian(n: usize, d: usize, seed: u64) -> Matrix {
    let l = mixing_matrix(d, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut eps = vec![0.0; d];
    for _ in 0..n {
        eps.iter_mut().for_each(|e| *e = gauss(&mut rng));
        data.extend(l.matvec(&eps));
    }
    Matrix::from_raw(n, d, data)
}

/// Integer-valued images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub shape: Shape,
    pub bits: u32,
    /// `count * shape.dim()` values, each below `2^bits`.
    pub values: Vec<u32>,
}

impl ImageSet {
    pub fn count(&self) -> usize {
        self.values.len() / self.shape.dim().max(1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.values.len());
        for v in [self.shape.h, self.shape.w, self.shape.c, self.bits as usize] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.extend(self.values.iter().map(|v| *v as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(FlowError::Shape("image file shorter than its header".into()));
        }
        let f = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize;
        let shape = Shape::new(f(0), f(1), f(2));
        let bits = f(3) as u32;
        let body = &bytes[8..];
        if shape.dim() == 0 || body.len() % shape.dim() != 0 {
            return Err(FlowError::Shape(format!("{} value bytes do not divide into {shape} images", body.len())));
        }
        if !(1..=8).contains(&bits) {
            return Err(FlowError::OutOfDomain { what: "bit depth", value: bits as f64 });
        }
        let values: Vec<u32> = body.iter().map(|b| *b as u32).collect();
        if let Some(v) = values.iter().find(|v| **v >= 1 << bits) {
            return Err(FlowError::ValueOutOfRange { value: *v, bits });
        }
        Ok(Self { shape, bits, values })
    }
}

/// Smooth random blobs on an `h x w x 1` grid, quantized to `bits`.
pub fn synthetic_images(n: usize, h: usize, w: usize, bits: u32, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = (1u32 << bits) as f64;
    let mut values = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64, 1.0 + 2.0 * rng.random::<f64>(), 0.3 + 0.7 * rng.random::<f64>()))
            .collect();
        let tilt = 0.2 * rng.random::<f64>();
        for i in 0..h {
            for j in 0..w {
                let mut v = tilt * (i as f64 / h as f64);
                for (ci, cj, s, a) in &blobs {
                    let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                    v += a * (-r2 / (2.0 * s * s)).exp();
                }
                values.push(((v.min(0.999_999) * levels) as u32).min(levels as u32 - 1));
            }
        }
    }
    ImageSet { shape: Shape::new(h, w, 1), bits, values }
}

/// `(v + u) / 2^bits`.
pub fn dequantize_value(v: u32, bits: u32, u: f64) -> Result<f64> {
    if !(1..=8).contains(&bits) {
        return Err(FlowError::OutOfDomain { what: "bit depth", value: bits as f64 });
    }
    if v >= 1 << bits {
        return Err(FlowError::ValueOutOfRange { value: v, bits });
    }
    Ok((v as f64 + u) / (1u32 << bits) as f64)
}

/// Uniform dequantization of integer values into `[0, 1)`.
pub fn dequantize(raw: &[u32], bits: u32, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    raw.iter().map(|v| dequantize_value(*v, bits, rng.random::<f64>())).collect()
}

pub fn read_csv(text: &str) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FlowError::Config { line: i + 1, msg: format!("bad number: {e}") })?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => return Err(FlowError::Config { line: i + 1, msg: format!("expected {c} columns, got {}", vals.len()) }),
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

pub fn write_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Splits off the last 10% of rows as held-out data.
pub fn split_heldout(data: &Matrix) -> (Matrix, Matrix) {
    let n = data.rows();
    let held = n / 10;
    let d = data.cols();
    let cut = (n - held) * d;
    (Matrix::from_raw(n - held, d, data.data()[..cut].to_vec()), Matrix::from_raw(held, d, data.data()[cut..].to_vec()))
}

/// Materializes the dataset named by `spec` for a model of the given shape.
/// Returns the data and the bit depth to report bits/dim at.
pub fn load_dataset(spec: &DataSpec, shape: Shape) -> Result<(Matrix, u32)> {
    let d = shape.dim();
    let (data, bits) = match spec.name.as_str() {
        "csv" => {
            let path = spec.path.as_deref().ok_or_else(|| FlowError::Config { line: 0, msg: "dataset = csv needs data_path".into() })?;
            (read_csv(&std::fs::read_to_string(path)?)?, 0)
        }
        "image" => {
            let path = spec.path.as_deref().ok_or_else(|| FlowError::Config { line: 0, msg: "dataset = image needs data_path".into() })?;
            let set = ImageSet::from_bytes(&std::fs::read(path)?)?;
            images_to_matrix(&set, spec.seed)?
        }
        "correlated_gaussian" => (correlated_gaussian(spec.n, d, spec.seed), 0),
        "synthetic_images" => {
            if shape.c != 1 {
                return Err(FlowError::Shape("synthetic images have one channel".into()));
            }
            images_to_matrix(&synthetic_images(spec.n, shape.h, shape.w, 5, spec.seed), spec.seed)?
        }
        name => (toy_dataset(name, spec.n, spec.seed)?, 0),
    };
    if data.cols() != d {
        return Err(FlowError::Shape(format!("dataset has {} dimensions, model expects {d}", data.cols())));
    }
    Ok((data, bits))
}

/// Dequantized images as matrix rows.
pub fn images_to_matrix(set: &ImageSet, seed: u64) -> Result<(Matrix, u32)> {
    let x = dequantize(&set.values, set.bits, seed)?;
    Ok((Matrix::new(set.count(), set.shape.dim(), x)?, set.bits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_covariance() {
        let m = toy_dataset("gaussian", 100_000, 5).unwrap();
        let s = crate::qlf::sample_covariance(&m);
        assert!(s.sub(&Matrix::identity(2)).data().iter().all(|v| v.abs() < 0.02), "{s:?}");
    }

    #[test]
    fn rings_stay_in_annuli() {
        let m = toy_dataset("rings", 5000, 1).unwrap();
        for r in 0..m.rows() {
            let rad = m.row(r)[0].hypot(m.row(r)[1]);
            assert!(RING_RADII.iter().any(|c| (rad - c).abs() <= RING_HALF_WIDTH + 1e-12), "{rad}");
        }
    }

    #[test]
    fn generators_are_seeded() {
        for name in TOY_NAMES {
            assert_eq!(toy_dataset(name, 300, 9).unwrap(), toy_dataset(name, 300, 9).unwrap());
        }
        assert_eq!(toy_dataset("moons", 3, 0), Err(FlowError::UnknownName("moons".into())));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_value(0, 8, 0.0).unwrap(), 0.0);
        assert_eq!(dequantize_value(1, 1, 0.5).unwrap(), 0.75);
        assert_eq!(dequantize_value(2, 1, 0.0), Err(FlowError::ValueOutOfRange { value: 2, bits: 1 }));
        let all: Vec<u32> = (0..256).collect();
        let x = dequantize(&all, 8, 3).unwrap();
        assert!(x.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn image_bytes_round_trip() {
        let set = synthetic_images(3, 4, 4, 5, 2);
        assert!(set.values.iter().all(|v| *v < 32));
        assert_eq!(ImageSet::from_bytes(&set.to_bytes()).unwrap(), set);
    }

    #[test]
    fn csv_round_trip_and_split() {
        let m = toy_dataset("spiral", 20, 0).unwrap();
        assert_eq!(read_csv(&write_csv(&m)).unwrap(), m);
        let (a, b) = split_heldout(&m);
        assert_eq!((a.rows(), b.rows()), (18, 2));
        assert_eq!(b.row(1), m.row(19));
    }
}
