//! Portable artifacts for spectrogram tensors.
//!
//! The `.npy` file is NPY version 1.0 with dtype `<f8`, C order and shape
//! `(N, D_mel)`. The heatmap is an 8-bit grayscale PNG, `D_mel` pixels wide
//! and `N` tall: one row per frame, brighter is larger, min-max scaled over
//! the whole matrix.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_array2, save_array2};

pub fn write_npy(path: &Path, a: &Array2<f64>) -> Result<()> {
    ndarray_npy::write_npy(path, a).map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn read_npy(path: &Path) -> Result<Array2<f64>> {
    ndarray_npy::read_npy(path).map_err(|e| Error::CorruptTensor(format!("{}: {e}", path.display())))
}

/// Min-max scaled grayscale image; a constant matrix renders uniformly black.
pub fn heatmap(a: &Array2<f64>) -> Result<GrayImage> {
    let (n, d) = a.dim();
    if n == 0 || d == 0 {
        return Err(Error::Shape(format!("cannot render an empty {n}x{d} matrix")));
    }
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numerical("cannot render non-finite values".into()));
    }
    let span = hi - lo;
    let w = u32::try_from(d).map_err(|_| Error::Shape("too many bins".into()))?;
    let h = u32::try_from(n).map_err(|_| Error::Shape("too many frames".into()))?;
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let v = a[[y as usize, x as usize]];
        let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
        Luma([(u * 255.0).round() as u8])
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedFeatures {
    pub npy: PathBuf,
    pub png: PathBuf,
    pub frames: usize,
    pub bins: usize,
}

/// Converts a binary tensor file into `{stem}.npy` and `{stem}.png` under `out_dir`.
pub fn export_audio_features(bin: &Path, out_dir: &Path) -> Result<ExportedFeatures> {
    let a = load_array2(bin)?;
    std::fs::create_dir_all(out_dir)?;
    let stem = bin
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mel")
        .to_string();
    let npy = out_dir.join(format!("{stem}.npy"));
    let png = out_dir.join(format!("{stem}.png"));
    write_npy(&npy, &a)?;
    heatmap(&a)?.save(&png)?;
    Ok(ExportedFeatures {
        npy,
        png,
        frames: a.nrows(),
        bins: a.ncols(),
    })
}

/// Inverse of the `.npy` half of [`export_audio_features`].
pub fn import_npy(npy: &Path, bin: &Path) -> Result<()> {
    save_array2(bin, &read_npy(npy)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_npy_binary_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array2::from_shape_fn((7, 5), |(i, j)| (i as f64 * 0.37 - j as f64).sin() / 3.0 + 1e-300);
        let bin = dir.path().join("mel.bin");
        save_array2(&bin, &a).unwrap();
        let out = export_audio_features(&bin, &dir.path().join("out")).unwrap();
        let back = dir.path().join("back.bin");
        import_npy(&out.npy, &back).unwrap();
        assert_eq!(std::fs::read(&bin).unwrap(), std::fs::read(&back).unwrap());
    }

    #[test]
    fn heatmap_has_frame_rows_and_bin_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array2::from_shape_fn((9, 4), |(i, j)| (i * j) as f64);
        let bin = dir.path().join("x.bin");
        save_array2(&bin, &a).unwrap();
        let out = export_audio_features(&bin, dir.path()).unwrap();
        let img = image::open(&out.png).unwrap().to_luma8();
        assert_eq!((img.height(), img.width()), (9, 4));
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(3, 8).0[0], 255);
    }

    #[test]
    fn zero_spectrogram_is_uniform() {
        let img = heatmap(&Array2::zeros((6, 3))).unwrap();
        let first = img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| p == first));
    }

    #[test]
    fn corrupt_input_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("bad.bin");
        std::fs::write(&bin, [1u8, 2, 3]).unwrap();
        let err = export_audio_features(&bin, dir.path()).unwrap_err();
        assert!(matches!(err, Error::CorruptTensor(_)), "{err}");
    }
}
