//! PPM and CSV writers.

use flowdet::linalg::Matrix;

/// Binary PPM (P6) from row-major RGB triples.
pub fn ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height, "pixel count must match the image size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    out
}

/// Black-red-yellow-white ramp for `t` in `[0, 1]`.
pub fn heat(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let ch = |v: f64| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    [ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)]
}

fn gray(v: f64) -> [u8; 3] {
    let g = (255.0 * if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }).round() as u8;
    [g, g, g]
}

/// Tiles image rows (HWC, values in `[0, 1]`, first channel shown) into a
/// near-square grayscale mosaic with one-pixel gaps.
pub fn tile_images(rows: &Matrix, h: usize, w: usize, c: usize) -> Vec<u8> {
    let n = rows.rows().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let grid_rows = n.div_ceil(cols);
    let (width, height) = (cols * (w + 1) + 1, grid_rows * (h + 1) + 1);
    let mut px = vec![[0u8; 3]; width * height];
    for k in 0..rows.rows() {
        let (gy, gx) = (k / cols, k % cols);
        let img = rows.row(k);
        for i in 0..h {
            for j in 0..w {
                let p = (gy * (h + 1) + 1 + i) * width + gx * (w + 1) + 1 + j;
                px[p] = gray(img[(i * w + j) * c]);
            }
        }
    }
    ppm(width, height, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let img = ppm(3, 2, &[[1, 2, 3]; 6]);
        assert!(img.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(img.len(), b"P6\n3 2\n255\n".len() + 18);
    }

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 0]);
        assert_eq!(heat(1.0), [255, 255, 255]);
        assert_eq!(heat(f64::NAN), [0, 0, 0]);
    }

    #[test]
    fn tiles_two_images() {
        let m = Matrix::new(2, 4, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let img = tile_images(&m, 2, 2, 1);
        assert!(img.starts_with(b"P6\n7 4\n255\n"));
    }
}
