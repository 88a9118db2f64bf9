//! Image fixture files: a JSON header (`<base>.json` with dims and dtype)
//! next to a flat little-endian f32 blob (`<base>.bin`), row-major
//! `[H, W, 3]` with values in [0, 1]. The same header+blob convention as
//! checkpoints, sized for single test images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ImageFileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("payload holds {got} values, header requires {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("unsupported dtype {0}")]
    Dtype(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageFileError + '_ {
    move |source| ImageFileError::Io { path: path.to_path_buf(), source }
}

pub fn save(image: &Tensor, base: &Path) -> Result<(), ImageFileError> {
    let shape = image.shape();
    let header = ImageHeader {
        height: shape[0],
        width: shape[1],
        channels: shape[2],
        dtype: "f32".to_string(),
    };
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let hpath = base.with_extension("json");
    fs::write(&hpath, serde_json::to_string_pretty(&header)?).map_err(io_err(&hpath))?;
    let mut payload = Vec::with_capacity(image.numel() * 4);
    for &v in image.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let bpath = base.with_extension("bin");
    fs::write(&bpath, payload).map_err(io_err(&bpath))?;
    Ok(())
}

pub fn load(base: &Path) -> Result<Tensor, ImageFileError> {
    let hpath = base.with_extension("json");
    let header: ImageHeader =
        serde_json::from_str(&fs::read_to_string(&hpath).map_err(io_err(&hpath))?)?;
    if header.dtype != "f32" {
        return Err(ImageFileError::Dtype(header.dtype));
    }
    let bpath = base.with_extension("bin");
    let payload = fs::read(&bpath).map_err(io_err(&bpath))?;
    let expected = header.height * header.width * header.channels;
    let got = payload.len() / 4;
    if got != expected {
        return Err(ImageFileError::PayloadSize { expected, got });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(
        vec![header.height, header.width, header.channels],
        data,
    )?)
}
