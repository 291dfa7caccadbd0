//! Feature-grid video files and labelled split directories.
//!
//! A grid file is a header of four little-endian u32 (frames, grid height,
//! grid width, D) followed by frame-major, cell-major little-endian f64 values.
//! A split directory holds one grid file per video plus `labels.csv` with
//! `file,label,camera` rows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::spatial::FrameFeatureGrid;

pub const LABELS_FILE: &str = "labels.csv";
const HEADER_BYTES: usize = 16;

/// One raw video with its identity and camera.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub frames: Vec<FrameFeatureGrid>,
    pub label: usize,
    pub camera: usize,
}

pub fn encode(frames: &[FrameFeatureGrid]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot encode a video with no frames".into()))?;
    let (h, w) = first.grid_shape();
    let d = first.dim();
    if frames.iter().any(|f| f.grid_shape() != (h, w) || f.dim() != d) {
        return Err(Error::shape("frames of one video must share grid shape and D"));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + frames.len() * h * w * d * 8);
    for v in [frames.len(), h, w, d] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        for x in f.cells().as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<FrameFeatureGrid>> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!("grid file too short: {} bytes", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (n, h, w, d) = (word(0), word(1), word(2), word(3));
    if n == 0 || h == 0 || w == 0 || d == 0 {
        return Err(Error::Format(format!("grid header has a zero dimension: {n}x{h}x{w}x{d}")));
    }
    let values = n
        .checked_mul(h * w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format("grid header overflows".into()))?;
    if bytes.len() - HEADER_BYTES != values * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header promises {} values",
            bytes.len() - HEADER_BYTES,
            values
        )));
    }
    let data: Vec<f64> = bytes[HEADER_BYTES..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("grid file holds non-finite values".into()));
    }
    data.chunks_exact(h * w * d)
        .map(|frame| FrameFeatureGrid::new(Mat::from_vec(h * w, d, frame.to_vec())?, (h, w)))
        .collect()
}

pub fn read(path: &Path) -> Result<Vec<FrameFeatureGrid>> {
    decode(&fs::read(path)?)
}

pub fn write(path: &Path, frames: &[FrameFeatureGrid]) -> Result<()> {
    fs::write(path, encode(frames)?)?;
    Ok(())
}

/// Writes `videos` as `0000.grid`, `0001.grid`, … plus the labels file.
pub fn write_split(dir: &Path, videos: &[LabeledVideo]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("file,label,camera\n");
    for (i, v) in videos.iter().enumerate() {
        let name = format!("{i:04}.grid");
        write(&dir.join(&name), &v.frames)?;
        labels.push_str(&format!("{name},{},{}\n", v.label, v.camera));
    }
    fs::write(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<Vec<LabeledVideo>> {
    let text = fs::read_to_string(dir.join(LABELS_FILE))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("file,label,camera") {
        return Err(Error::Format(format!("{}: bad header", dir.join(LABELS_FILE).display())));
    }
    let mut videos = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("{LABELS_FILE} line {}: {line:?}", i + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [file, label, camera] = fields[..] else {
            return Err(bad());
        };
        if file.contains('/') || file.contains("..") {
            return Err(bad());
        }
        videos.push(LabeledVideo {
            frames: read(&dir.join(file))?,
            label: label.parse().map_err(|_| bad())?,
            camera: camera.parse().map_err(|_| bad())?,
        });
    }
    Ok(videos)
}
