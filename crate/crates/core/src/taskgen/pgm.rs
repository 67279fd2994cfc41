//! Ingestion of external image folders: one sub-directory per class holding
//! 8-bit grayscale PGM files (binary `P5` or ASCII `P2`).

use std::fs;
use std::path::Path;

use super::dataset::Split;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded image as `(width, height, pixels in [0, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |m: &str| Error::Parse(format!("pgm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("non-numeric header field")) };
    let (w, h, max) = (num()?, num()?, num()?);
    if w == 0 || h == 0 || max == 0 || max > 255 {
        return Err(bad("only non-empty 8-bit images are supported"));
    }
    let n = w * h;
    let raw: Vec<u8> = match magic.as_str() {
        "P5" => {
            let start = pos + 1;
            bytes.get(start..start + n).ok_or_else(|| bad("truncated pixel data"))?.to_vec()
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let v: Vec<u8> = text.split_whitespace().take(n).map(|t| t.parse().map_err(|_| bad("bad pixel"))).collect::<Result<_>>()?;
            if v.len() != n {
                return Err(bad("truncated pixel data"));
            }
            v
        }
        _ => return Err(bad("unsupported magic")),
    };
    Ok((w, h, raw.into_iter().map(|p| f64::from(p) / max as f64).collect()))
}

/// Center-crops the largest square and box-resamples it to `side × side`.
pub fn center_crop_resize(w: usize, h: usize, px: &[f64], side: usize) -> Vec<f64> {
    let s = w.min(h);
    let (x0, y0) = ((w - s) / 2, (h - s) / 2);
    let mut out = vec![0.0; side * side];
    for (k, o) in out.iter_mut().enumerate() {
        let (oy, ox) = (k / side, k % side);
        let (ya, yb) = (oy * s / side, ((oy + 1) * s / side).max(oy * s / side + 1));
        let (xa, xb) = (ox * s / side, ((ox + 1) * s / side).max(ox * s / side + 1));
        let mut acc = 0.0;
        for y in ya..yb {
            for x in xa..xb {
                acc += px[(y0 + y) * w + x0 + x];
            }
        }
        *o = acc / ((yb - ya) * (xb - xa)) as f64;
    }
    out
}

/// Loads `root/<class>/*.pgm`; classes are labelled in sorted directory order.
pub fn load_pgm_folder(root: &Path, side: usize) -> Result<(Vec<String>, Split)> {
    let mut classes: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (y, c) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.join(c))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        for f in files {
            let (w, h, px) = decode_pgm(&fs::read(&f)?)?;
            data.extend(center_crop_resize(w, h, &px, side));
            labels.push(y);
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse(format!("no PGM images under {}", root.display())));
    }
    Ok((classes, Split { inputs: Tensor::new(vec![labels.len(), 1, side, side], data)?, labels }))
}
