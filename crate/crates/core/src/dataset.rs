//! On-disk dataset format.
//!
//! ```text
//! <dir>/views.json        [{view_id, K: [9], R: [9], t: [3], width, height}, ...]
//! <dir>/color_<id>.ppm    binary P6, maxval 255
//! <dir>/depth_<id>.pfm    grayscale Pf, scale -1.0 (little-endian), bottom-up rows
//! <dir>/mask_<id>.pbm     P4 validity mask, 1 = valid depth
//! ```
//!
//! Matrices are row-major. Invalid depth pixels are stored as 0.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Intrinsics, Pose};
use crate::maps::{DepthFrame, DepthMap, RgbImage};
use crate::scene::CameraView;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed file: {reason}")]
    Parse { file: PathBuf, reason: String },
    #[error("{file}: dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        file: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("view {view_id} is listed in views.json but {file} is missing")]
    MissingViewFile { view_id: u32, file: PathBuf },
    #[error("{file}: view {view_id} has no pose entry in views.json")]
    MissingPose { view_id: u32, file: PathBuf },
}

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        file: file.to_path_buf(),
        source,
    }
}

fn parse_err(file: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

/// Read whitespace-separated header tokens of a netpbm-family file,
/// skipping `#` comments. Consumes exactly one whitespace byte after the
/// last token.
fn read_header_tokens<R: BufRead>(r: &mut R, n: usize, file: &Path) -> Result<Vec<String>, DatasetError> {
    let mut tokens = Vec::with_capacity(n);
    let mut cur = String::new();
    let mut byte = [0u8; 1];
    while tokens.len() < n {
        if r.read(&mut byte).map_err(io_err(file))? == 0 {
            return Err(parse_err(file, "truncated header"));
        }
        let c = byte[0];
        if c == b'#' && cur.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip).map_err(io_err(file))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(c as char);
        }
    }
    Ok(tokens)
}

fn parse_dim(s: &str, file: &Path) -> Result<usize, DatasetError> {
    s.parse::<usize>()
        .ok()
        .filter(|&d| d > 0)
        .ok_or_else(|| parse_err(file, format!("bad dimension {s:?}")))
}

pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<(), DatasetError> {
    let mut out = Vec::with_capacity(32 + 4 * map.values.len());
    write!(out, "Pf\n{} {}\n-1.0\n", map.width, map.height).expect("write to vec");
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            let v = map.get(x, y).unwrap_or(0.0) as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Grayscale PFM; all values come back valid (absolute frame).
pub fn read_pfm(path: &Path) -> Result<DepthMap, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let tokens = read_header_tokens(&mut r, 4, path)?;
    match tokens[0].as_str() {
        "Pf" => {}
        "PF" => return Err(parse_err(path, "color PFM where grayscale expected")),
        other => return Err(parse_err(path, format!("bad magic {other:?}"))),
    }
    let width = parse_dim(&tokens[1], path)?;
    let height = parse_dim(&tokens[2], path)?;
    let scale: f32 = tokens[3]
        .parse()
        .map_err(|_| parse_err(path, format!("bad scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(parse_err(path, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let mut buf = vec![0u8; 4 * width * height];
    r.read_exact(&mut buf)
        .map_err(|_| parse_err(path, "truncated float data"))?;
    let mut values = vec![0.0; width * height];
    for (k, chunk) in buf.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row_from_bottom, x) = (k / width, k % width);
        values[(height - 1 - row_from_bottom) * width + x] = v as f64;
    }
    Ok(DepthMap::from_values(width, height, values, DepthFrame::Absolute))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), DatasetError> {
    let mut out = Vec::with_capacity(20 + 3 * img.pixels.len());
    write!(out, "P6\n{} {}\n255\n", img.width, img.height).expect("write to vec");
    for px in &img.pixels {
        for c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let tokens = read_header_tokens(&mut r, 4, path)?;
    if tokens[0] != "P6" {
        return Err(parse_err(path, format!("bad magic {:?}", tokens[0])));
    }
    let width = parse_dim(&tokens[1], path)?;
    let height = parse_dim(&tokens[2], path)?;
    if tokens[3] != "255" {
        return Err(parse_err(path, format!("unsupported maxval {}", tokens[3])));
    }
    let mut buf = vec![0u8; 3 * width * height];
    r.read_exact(&mut buf)
        .map_err(|_| parse_err(path, "truncated pixel data"))?;
    let pixels = buf
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

/// P4 bitmap; rows padded to whole bytes, most significant bit first.
pub fn write_pbm(path: &Path, width: usize, height: usize, bits: &[bool]) -> Result<(), DatasetError> {
    assert_eq!(bits.len(), width * height);
    let row_bytes = width.div_ceil(8);
    let mut out = Vec::with_capacity(20 + row_bytes * height);
    write!(out, "P4\n{width} {height}\n").expect("write to vec");
    for row in bits.chunks_exact(width) {
        let mut packed = vec![0u8; row_bytes];
        for (x, &b) in row.iter().enumerate() {
            if b {
                packed[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_pbm(path: &Path) -> Result<(usize, usize, Vec<bool>), DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let tokens = read_header_tokens(&mut r, 3, path)?;
    if tokens[0] != "P4" {
        return Err(parse_err(path, format!("bad magic {:?}", tokens[0])));
    }
    let width = parse_dim(&tokens[1], path)?;
    let height = parse_dim(&tokens[2], path)?;
    let row_bytes = width.div_ceil(8);
    let mut buf = vec![0u8; row_bytes * height];
    r.read_exact(&mut buf)
        .map_err(|_| parse_err(path, "truncated bitmap data"))?;
    let mut bits = Vec::with_capacity(width * height);
    for row in buf.chunks_exact(row_bytes) {
        for x in 0..width {
            bits.push(row[x / 8] & (0x80 >> (x % 8)) != 0);
        }
    }
    Ok((width, height, bits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ViewEntry {
    view_id: u32,
    K: [f64; 9],
    R: [f64; 9],
    t: [f64; 3],
    width: usize,
    height: usize,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

fn from_row_major(a: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(a)
}

pub fn color_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("color_{id}.ppm"))
}

pub fn depth_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("depth_{id}.pfm"))
}

pub fn mask_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("mask_{id}.pbm"))
}

pub fn save_dataset(views: &[CameraView], dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let entries: Vec<ViewEntry> = views
        .iter()
        .map(|v| ViewEntry {
            view_id: v.view_id,
            K: row_major(v.intrinsics.matrix()),
            R: row_major(&v.pose.rotation),
            t: [v.pose.translation.x, v.pose.translation.y, v.pose.translation.z],
            width: v.width(),
            height: v.height(),
        })
        .collect();
    let json_path = dir.join("views.json");
    let json = serde_json::to_string_pretty(&entries).expect("serializable entries");
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    for v in views {
        write_ppm(&color_path(dir, v.view_id), &v.image)?;
        if let Some(d) = &v.gt_depth {
            write_pfm(&depth_path(dir, v.view_id), d)?;
            write_pbm(&mask_path(dir, v.view_id), d.width, d.height, &d.validity)?;
        }
    }
    Ok(())
}

fn check_dims(file: &Path, expected: (usize, usize), found: (usize, usize)) -> Result<(), DatasetError> {
    if expected == found {
        Ok(())
    } else {
        Err(DatasetError::DimensionMismatch {
            file: file.to_path_buf(),
            expected,
            found,
        })
    }
}

/// Image ids present in `dir` as `color_<id>.ppm`.
fn color_ids(dir: &Path) -> Result<BTreeSet<u32>, DatasetError> {
    let mut ids = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_prefix("color_")
            .and_then(|s| s.strip_suffix(".ppm"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            ids.insert(id);
        }
    }
    Ok(ids)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<CameraView>, DatasetError> {
    let json_path = dir.join("views.json");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let entries: Vec<ViewEntry> =
        serde_json::from_str(&text).map_err(|e| parse_err(&json_path, e.to_string()))?;

    let listed: BTreeSet<u32> = entries.iter().map(|e| e.view_id).collect();
    if listed.len() != entries.len() {
        return Err(parse_err(&json_path, "duplicate view_id"));
    }
    if let Some(&orphan) = color_ids(dir)?.difference(&listed).next() {
        return Err(DatasetError::MissingPose {
            view_id: orphan,
            file: color_path(dir, orphan),
        });
    }

    let mut views = Vec::with_capacity(entries.len());
    for e in entries {
        let intrinsics = Intrinsics::new(from_row_major(&e.K))
            .map_err(|err| parse_err(&json_path, format!("view {}: {err}", e.view_id)))?;
        let pose = Pose::new(from_row_major(&e.R), Vector3::from(e.t))
            .map_err(|err| parse_err(&json_path, format!("view {}: {err}", e.view_id)))?;
        let dims = (e.width, e.height);

        let cpath = color_path(dir, e.view_id);
        if !cpath.exists() {
            return Err(DatasetError::MissingViewFile {
                view_id: e.view_id,
                file: cpath,
            });
        }
        let image = read_ppm(&cpath)?;
        check_dims(&cpath, dims, (image.width, image.height))?;

        let dpath = depth_path(dir, e.view_id);
        let gt_depth = if dpath.exists() {
            let mut depth = read_pfm(&dpath)?;
            check_dims(&dpath, dims, (depth.width, depth.height))?;
            let mpath = mask_path(dir, e.view_id);
            if !mpath.exists() {
                return Err(DatasetError::MissingViewFile {
                    view_id: e.view_id,
                    file: mpath,
                });
            }
            let (mw, mh, bits) = read_pbm(&mpath)?;
            check_dims(&mpath, dims, (mw, mh))?;
            depth.validity = bits;
            for (v, &ok) in depth.values.iter_mut().zip(&depth.validity) {
                if !ok {
                    *v = 0.0;
                }
            }
            Some(depth)
        } else {
            None
        };

        views.push(CameraView {
            view_id: e.view_id,
            intrinsics,
            pose,
            image,
            gt_depth,
        });
    }
    Ok(views)
}
