//! Dataset directories: one folder per sequence with `frames/%05d.png`, optional
//! `masks/%05d.png` and `flows/%05d.flo`, plus an optional root-level `attributes.txt`
//! (`sequence attr attr ...` per line).
//!
//! Flow files hold `u32 height`, `u32 width`, then `dy` and `dx` planes as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::codec::{read_frame, read_mask, write_frame, write_mask};
use crate::tensor::Tensor;
use crate::video::VideoSequence;

pub const FRAMES: &str = "frames";
pub const MASKS: &str = "masks";
pub const FLOWS: &str = "flows";
pub const ATTRIBUTES: &str = "attributes.txt";

pub fn indexed_name(index: usize, ext: &str) -> String {
    format!("{index:05}.{ext}")
}

/// Files in `dir` named `<digits>.<ext>`, sorted by index. Other files are ignored.
pub fn indexed_files(dir: &Path, ext: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(e)) = (path.file_stem().and_then(|s| s.to_str()), path.extension().and_then(|s| s.to_str())) else {
            continue;
        };
        if e != ext || stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        if let Ok(i) = stem.parse() {
            out.push((i, path));
        }
    }
    out.sort();
    Ok(out)
}

fn contiguous(dir: &Path, files: &[(usize, PathBuf)]) -> Result<()> {
    if let Some((pos, (i, _))) = files.iter().enumerate().find(|(pos, (i, _))| pos != i) {
        return Err(Error::format(dir, format!("frame indices must run 0, 1, 2, ...; found {i} at position {pos}")));
    }
    Ok(())
}

pub fn write_flow(path: &Path, flow: &Tensor<f32>) -> Result<()> {
    let [_, h, w] = match *flow.shape() {
        [2, h, w] => [2, h, w],
        _ => return Err(Error::shape("write_flow", "[2, H, W]", format!("{:?}", flow.shape()))),
    };
    let mut bytes = Vec::with_capacity(8 + 4 * flow.numel());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in flow.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated flow header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 8 * h * w {
        return Err(Error::format(path, format!("{} bytes for a {h}x{w} flow", bytes.len())));
    }
    let data = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new([2, h, w], data)
}

/// Reads one sequence folder; its name is the folder name.
pub fn read_sequence(dir: &Path) -> Result<VideoSequence> {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("sequence").to_string();
    let frame_dir = dir.join(FRAMES);
    let files = indexed_files(&frame_dir, "png")?;
    if files.is_empty() {
        return Err(Error::format(&frame_dir, "no frames"));
    }
    contiguous(&frame_dir, &files)?;
    let frames = files.iter().map(|(_, p)| read_frame(p)).collect::<Result<Vec<_>>>()?;
    let mut video = VideoSequence::new(name, frames)?;

    let mask_dir = dir.join(MASKS);
    if mask_dir.is_dir() {
        let files = indexed_files(&mask_dir, "png")?;
        if !files.is_empty() {
            contiguous(&mask_dir, &files)?;
            video.masks = Some(files.iter().map(|(_, p)| read_mask(p)).collect::<Result<_>>()?);
        }
    }
    let flow_dir = dir.join(FLOWS);
    if flow_dir.is_dir() {
        let files = indexed_files(&flow_dir, "flo")?;
        if !files.is_empty() {
            contiguous(&flow_dir, &files)?;
            video.flows = Some(files.iter().map(|(_, p)| read_flow(p)).collect::<Result<_>>()?);
        }
    }
    video.validate().map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(video)
}

pub fn write_sequence(root: &Path, video: &VideoSequence) -> Result<PathBuf> {
    let dir = root.join(&video.name);
    let frame_dir = dir.join(FRAMES);
    fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        write_frame(&frame_dir.join(indexed_name(i, "png")), f)?;
    }
    if let Some(masks) = &video.masks {
        let mask_dir = dir.join(MASKS);
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        for (i, m) in masks.iter().enumerate() {
            write_mask(&mask_dir.join(indexed_name(i, "png")), m)?;
        }
    }
    if let Some(flows) = &video.flows {
        let flow_dir = dir.join(FLOWS);
        fs::create_dir_all(&flow_dir).map_err(|e| Error::io(&flow_dir, e))?;
        for (i, f) in flows.iter().enumerate() {
            write_flow(&flow_dir.join(indexed_name(i, "flo")), f)?;
        }
    }
    Ok(dir)
}

/// Every sequence folder under `root` (folders with a `frames` subfolder), sorted by name.
pub fn read_dataset(root: &Path) -> Result<Vec<VideoSequence>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(FRAMES).is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no sequence folders (expected <name>/frames/00000.png)"));
    }
    dirs.iter().map(|d| read_sequence(d)).collect()
}

pub fn parse_attributes(text: &str) -> BTreeMap<String, Vec<String>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").replace(',', " "))
        .filter_map(|l| {
            let mut parts = l.split_whitespace().map(str::to_string);
            let name = parts.next()?;
            Some((name, parts.collect()))
        })
        .collect()
}

pub fn read_attributes(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_attributes(&text))
}

pub fn write_attributes(path: &Path, attrs: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let text: String = attrs.iter().map(|(k, v)| format!("{k} {}\n", v.join(" "))).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_corpus, CorpusConfig};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { height: 16, width: 16, frames: 3, min_size: 4.0, max_size: 6.0, ..CorpusConfig::default() };
        let videos = gen_corpus(&cfg, 2, 3).unwrap();
        for v in &videos {
            write_sequence(dir.path(), v).unwrap();
        }
        fs::write(dir.path().join("seq00000").join(FRAMES).join("notes.txt"), "x").unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in videos.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.masks, b.masks);
            assert_eq!(a.flows, b.flows);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!(fa.max_abs_diff(fb).unwrap() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn gaps_in_frame_indices_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("s").join(FRAMES);
        fs::create_dir_all(&f).unwrap();
        write_frame(&f.join("00000.png"), &Tensor::zeros([3, 4, 4])).unwrap();
        write_frame(&f.join("00002.png"), &Tensor::zeros([3, 4, 4])).unwrap();
        let e = read_sequence(&dir.path().join("s")).unwrap_err().to_string();
        assert!(e.contains("found 2"), "{e}");
    }

    #[test]
    fn attributes_table() {
        let a = parse_attributes("# name attrs\nbear fast occlusion\ncar, shake\n\n");
        assert_eq!(a["bear"], vec!["fast", "occlusion"]);
        assert_eq!(a["car"], vec!["shake"]);
    }
}
