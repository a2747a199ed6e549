//! PFM float rasters and PNG images.
//!
//! PFM files use the single-channel `Pf` header with a negative scale
//! (little-endian) and store rows bottom to top. Invalid pixels are
//! written as `+inf`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::GrayImage;
use thiserror::Error;

use crate::raster::{DepthMap, DisparityMap, Grid};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PFM: {0}")]
    Format(String),
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_pfm_to<W: Write>(out: &mut W, grid: &Grid<f32>) -> std::io::Result<()> {
    write!(out, "Pf\n{} {}\n-1.0\n", grid.width(), grid.height())?;
    for y in (0..grid.height()).rev() {
        for v in grid.row(y) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String, IoError> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r
            .read(&mut byte)
            .map_err(|e| IoError::Format(e.to_string()))?;
        if n == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    if tok.is_empty() {
        return Err(IoError::Format("truncated header".into()));
    }
    String::from_utf8(tok).map_err(|_| IoError::Format("non-ASCII header".into()))
}

pub fn read_pfm_from<R: BufRead>(r: &mut R) -> Result<Grid<f32>, IoError> {
    let magic = header_token(r)?;
    if magic != "Pf" {
        return Err(IoError::Format(format!(
            "expected single-channel 'Pf', found '{magic}'"
        )));
    }
    let parse_dim = |s: String| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| IoError::Format(format!("bad dimension '{s}'")))
    };
    let width = parse_dim(header_token(r)?)?;
    let height = parse_dim(header_token(r)?)?;
    let scale: f32 = header_token(r)?
        .parse()
        .map_err(|_| IoError::Format("bad scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(IoError::Format("scale must be non-zero".into()));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw)
        .map_err(|_| IoError::Format("truncated pixel data".into()))?;
    let mut data = vec![0f32; width * height];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (x, row_from_bottom) = (i % width, i / width);
        data[(height - 1 - row_from_bottom) * width + x] = v;
    }
    Ok(Grid::from_vec(width, height, data))
}

pub fn write_pfm(path: &Path, grid: &Grid<f32>) -> Result<(), IoError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_pfm_to(&mut w, grid).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<Grid<f32>, IoError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_pfm_from(&mut BufReader::new(f))
}

pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_pfm(path, depth.values())
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap, IoError> {
    Ok(DepthMap::new(read_pfm(path)?))
}

pub fn write_disparity_pfm(path: &Path, disp: &DisparityMap) -> Result<(), IoError> {
    write_pfm(path, disp.values())
}

pub fn read_disparity_pfm(path: &Path, num_disparities: usize) -> Result<DisparityMap, IoError> {
    Ok(DisparityMap::new(read_pfm(path)?, num_disparities))
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<(), IoError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| IoError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Loads any supported image and converts it to 8-bit grayscale.
pub fn read_gray(path: &Path) -> Result<GrayImage, IoError> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => IoError::Io {
            path: path.display().to_string(),
            source: e,
        },
        other => IoError::Image {
            path: path.display().to_string(),
            source: other,
        },
    })?;
    Ok(img.to_luma8())
}

/// PNG bytes of an 8-bit grayscale image.
pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("PNG encoding into memory");
    buf.into_inner()
}
