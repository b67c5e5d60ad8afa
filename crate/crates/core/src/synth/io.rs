//! Dataset directory layout.
//!
//! ```text
//! <dir>/<sequence>/rgb/000000.ppm     binary P6
//! <dir>/<sequence>/x/000000.pgm       binary P5 (or .ppm for 3-channel X)
//! <dir>/<sequence>/groundtruth.txt    "x,y,w,h" per frame, corner form
//! <dir>/<sequence>/visible.txt        0/1 per frame
//! <dir>/<sequence>/attributes.json    {"modality": .., "frames": [[tags], ..]}
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Attribute, Image, SequenceRecord, XModality};
use crate::error::{Error, Result};
use crate::geometry::Rect;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributesFile {
    modality: XModality,
    frames: Vec<BTreeSet<Attribute>>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Encodes a 1-channel image as P5 and a 3-channel image as P6.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Input(format!("cannot encode a {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let n = img.height * img.width;
    out.reserve(n * img.channels);
    for k in 0..n {
        for c in 0..img.channels {
            out.push(img.data[c * n + k]);
        }
    }
    Ok(out)
}

/// Decodes binary P5/P6 with optional `#` comments in the header.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0usize;
    let mut line = 1usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            if bytes[pos] == b'\n' {
                line += 1;
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, line, "truncated header"));
        }
        tokens.push((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), line));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0].0.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(parse_err(path, tokens[0].1, format!("unsupported magic {m:?}"))),
    };
    let mut dims = [0usize; 3];
    for (d, (tok, ln)) in dims.iter_mut().zip(&tokens[1..]) {
        *d = tok
            .parse()
            .map_err(|_| parse_err(path, *ln, format!("bad header field {tok:?}")))?;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(parse_err(path, tokens[3].1, format!("maxval {maxval} is not 255")));
    }
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != n * channels {
        return Err(parse_err(
            path,
            tokens[3].1 + 1,
            format!("raster has {} bytes, expected {}", raster.len(), n * channels),
        ));
    }
    let mut img = Image::new(channels, height, width);
    for k in 0..n {
        for c in 0..channels {
            img.data[c * n + k] = raster[k * channels + c];
        }
    }
    Ok(img)
}

fn frame_name(t: usize, img: &Image) -> String {
    format!("{t:06}.{}", if img.channels == 1 { "pgm" } else { "ppm" })
}

/// Writes one sequence into `dir` (created if missing).
pub fn write_sequence(rec: &SequenceRecord, dir: &Path) -> Result<()> {
    rec.validate()?;
    for sub in ["rgb", "x"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (t, (rgb, x)) in rec.rgb.iter().zip(&rec.x).enumerate() {
        if rgb.channels != 3 {
            return Err(Error::Input(format!("{}: RGB frame {t} has {} channels", rec.name, rgb.channels)));
        }
        write_file(&dir.join("rgb").join(frame_name(t, rgb)), &encode_pnm(rgb)?)?;
        write_file(&dir.join("x").join(frame_name(t, x)), &encode_pnm(x)?)?;
    }
    let gt: String = rec.gt.iter().map(|r| format!("{},{},{},{}\n", r.x, r.y, r.w, r.h)).collect();
    write_file(&dir.join("groundtruth.txt"), gt.as_bytes())?;
    let vis: String = rec.visible.iter().map(|&v| if v { "1\n" } else { "0\n" }).collect();
    write_file(&dir.join("visible.txt"), vis.as_bytes())?;
    let attrs = AttributesFile {
        modality: rec.modality,
        frames: rec.attributes.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&attrs)?;
    json.push(b'\n');
    write_file(&dir.join("attributes.json"), &json)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "not UTF-8"))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

/// Reads one sequence directory; the sequence name is the directory name.
pub fn read_sequence(dir: &Path) -> Result<SequenceRecord> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let gt_path = dir.join("groundtruth.txt");
    let mut gt = Vec::new();
    for (ln, l) in read_lines(&gt_path)? {
        let vals: Vec<f64> = l
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(&gt_path, ln, format!("bad number in {l:?}")))?;
        let [x, y, w, h] = vals[..] else {
            return Err(parse_err(&gt_path, ln, format!("expected 4 fields, got {}", vals.len())));
        };
        gt.push(Rect::new(x, y, w, h));
    }
    let vis_path = dir.join("visible.txt");
    let mut visible = Vec::new();
    for (ln, l) in read_lines(&vis_path)? {
        visible.push(match l.as_str() {
            "1" => true,
            "0" => false,
            _ => return Err(parse_err(&vis_path, ln, format!("expected 0 or 1, got {l:?}"))),
        });
    }
    let attr_path = dir.join("attributes.json");
    let attrs: AttributesFile = serde_json::from_slice(&read_file(&attr_path)?)
        .map_err(|e| parse_err(&attr_path, e.line(), e.to_string()))?;
    let n = gt.len();
    if visible.len() != n || attrs.frames.len() != n {
        return Err(Error::Input(format!(
            "{name}: {n} boxes, {} visibility flags, {} attribute rows",
            visible.len(),
            attrs.frames.len()
        )));
    }
    let mut rgb = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for t in 0..n {
        let p = dir.join("rgb").join(format!("{t:06}.ppm"));
        rgb.push(decode_pnm(&read_file(&p)?, &p)?);
        let pgm = dir.join("x").join(format!("{t:06}.pgm"));
        let p = if pgm.exists() { pgm } else { dir.join("x").join(format!("{t:06}.ppm")) };
        x.push(decode_pnm(&read_file(&p)?, &p)?);
    }
    Ok(SequenceRecord {
        name,
        modality: attrs.modality,
        rgb,
        x,
        gt,
        visible,
        attributes: attrs.frames,
        masks: None,
    })
}

/// Writes each record to `dir/<record name>`.
pub fn write_dataset(records: &[SequenceRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for rec in records {
        write_sequence(rec, &dir.join(&rec.name))?;
    }
    Ok(())
}

/// Reads every sequence subdirectory of `dir`, ordered by name.
pub fn read_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no sequences under {}", dir.display())));
    }
    dirs.iter().map(|d| read_sequence(d)).collect()
}
