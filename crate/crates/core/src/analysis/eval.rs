//! Folder evaluation: encode, decode and score every PPM image.

use std::fmt::Write as _;
use std::path::Path;

use crate::entropy::bitstream::Bitstream;
use crate::entropy::codec::{decode_image, encode_image};
use crate::error::{AnalysisError, Error};
use crate::image::Rgb8;
use crate::net::Model;
use crate::tensor::{Element, Tensor};
use crate::train::metrics::{ms_ssim, ms_ssim_db, psnr};

pub const CSV_HEADER: &str = "image,bpp,psnr_db,msssim,msssim_db";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    /// File size in bits over the original pixel count.
    pub bpp: f64,
    pub psnr_db: f64,
    /// NaN when the image is too small for five scales.
    pub msssim: f64,
    pub msssim_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    /// `None` for skipped files.
    pub scores: Option<Scores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// In filename order.
    pub rows: Vec<EvalRow>,
    /// Arithmetic mean over scored rows.
    pub mean: Scores,
}

impl EvalReport {
    pub fn scored(&self) -> usize {
        self.rows.iter().filter(|r| r.scores.is_some()).count()
    }

    /// Skipped files appear with empty fields; the last line is the mean.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        let line = |s: &mut String, name: &str, v: &Scores| {
            let _ = writeln!(s, "{name},{:.6},{:.4},{:.6},{:.4}", v.bpp, v.psnr_db, v.msssim, v.msssim_db);
        };
        for r in &self.rows {
            match &r.scores {
                Some(v) => line(&mut s, &r.image, v),
                None => {
                    let _ = writeln!(s, "{},,,,", r.image);
                }
            }
        }
        line(&mut s, "mean", &self.mean);
        s
    }
}

/// Scores one image through the full byte-level round trip.
pub fn score_image<F: Element>(model: &Model<F>, img: &Rgb8, lambda_index: u8) -> Result<Scores, Error> {
    let x: Tensor<F> = img.to_tensor();
    let enc = encode_image(model, &x, lambda_index)?;
    let bytes = enc.stream.to_bytes();
    let dec = decode_image(model, &Bitstream::parse(&bytes)?)?;
    let rec: Tensor<F> = Rgb8::from_tensor(&dec.x_hat)?.to_tensor();
    let msssim = ms_ssim(&x, &rec).unwrap_or(f64::NAN);
    Ok(Scores {
        bpp: 8.0 * bytes.len() as f64 / (img.width * img.height) as f64,
        psnr_db: psnr(&x, &rec)?,
        msssim,
        msssim_db: if msssim.is_nan() { f64::NAN } else { ms_ssim_db(msssim) },
    })
}

fn mean(rows: &[EvalRow]) -> Scores {
    let v: Vec<&Scores> = rows.iter().filter_map(|r| r.scores.as_ref()).collect();
    let n = v.len() as f64;
    let avg = |f: fn(&Scores) -> f64| v.iter().map(|s| f(s)).sum::<f64>() / n;
    Scores {
        bpp: avg(|s| s.bpp),
        psnr_db: avg(|s| s.psnr_db),
        msssim: avg(|s| s.msssim),
        msssim_db: avg(|s| s.msssim_db),
    }
}

/// Every `.ppm` in `folder`, sorted by name. Unreadable or uncodable files
/// are skipped with a warning.
pub fn eval_dataset<F: Element>(model: &Model<F>, folder: &Path, lambda_index: u8) -> Result<EvalReport, Error> {
    let mut paths: Vec<_> = std::fs::read_dir(folder)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    let empty = || AnalysisError::EmptyFolder(folder.display().to_string());
    if paths.is_empty() {
        return Err(empty().into());
    }
    let mut rows = Vec::with_capacity(paths.len());
    for p in &paths {
        let image = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let scores = Rgb8::read(p)
            .map_err(Error::from)
            .and_then(|img| score_image(model, &img, lambda_index));
        match scores {
            Ok(s) => rows.push(EvalRow { image, scores: Some(s) }),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                rows.push(EvalRow { image, scores: None });
            }
        }
    }
    if rows.iter().all(|r| r.scores.is_none()) {
        return Err(empty().into());
    }
    let mean = mean(&rows);
    Ok(EvalReport { rows, mean })
}
