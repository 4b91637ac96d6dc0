//! Saliency map files, dataset manifests and image loading.
//!
//! Map files come in two flavours, chosen by extension:
//!
//! * `.pgm` — ASCII portable graymap (`P2`, width, height, maxval, then
//!   row-major integers). Values are read back as `v / maxval`.
//! * `.f32` — little-endian container: `u32` width, `u32` height, then
//!   `width·height` `f32` values row-major.
//!
//! A manifest is UTF-8 text with one tab-separated line per sample:
//! `relative_image_path<TAB>label[<TAB>relative_saliency_path]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{ImageSize, Sample};
use crate::error::{Result, SamError};

pub fn write_pgm(path: &Path, size: ImageSize, map: &[f32], maxval: u16) -> Result<()> {
    if map.len() != size.pixels() {
        return Err(SamError::shape(format!(
            "map has {} cells, expected {}",
            map.len(),
            size.pixels()
        )));
    }
    let peak = map.iter().copied().fold(0f32, f32::max);
    let scale = if peak > 0.0 { f32::from(maxval) / peak } else { 0.0 };
    let mut out = format!("P2\n{} {}\n{}\n", size.width, size.height, maxval);
    for row in map.chunks(size.width) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v * scale).round() as u32).min(u32::from(maxval)).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| SamError::io(path, e))
}

pub fn write_raw_f32(path: &Path, size: ImageSize, map: &[f32]) -> Result<()> {
    if map.len() != size.pixels() {
        return Err(SamError::shape(format!(
            "map has {} cells, expected {}",
            map.len(),
            size.pixels()
        )));
    }
    let mut bytes = Vec::with_capacity(8 + 4 * map.len());
    bytes.extend_from_slice(&(size.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(size.height as u32).to_le_bytes());
    for v in map {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| SamError::io(path, e))
}

fn parse_pgm(text: &str, path: &Path) -> Result<(ImageSize, Vec<f32>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |what: &str| SamError::data(format!("{}: {what}", path.display()));
    if tokens.next() != Some("P2") {
        return Err(bad("not an ASCII graymap (expected P2)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(what))
    };
    let width = num("missing width")?;
    let height = num("missing height")?;
    let maxval = num("missing maxval")?;
    if maxval == 0 {
        return Err(bad("maxval must be positive"));
    }
    let mut map = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        map.push(num("truncated pixel data")? as f32 / maxval as f32);
    }
    Ok((ImageSize::new(height, width), map))
}

fn parse_raw(bytes: &[u8], path: &Path) -> Result<(ImageSize, Vec<f32>)> {
    let bad = |what: &str| SamError::data(format!("{}: {what}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("missing 8-byte header"));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * width * height {
        return Err(bad("payload length does not match header"));
    }
    let map = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((ImageSize::new(height, width), map))
}

/// Reads a `.pgm` or `.f32` saliency map.
pub fn read_map(path: &Path) -> Result<(ImageSize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| SamError::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => {
            let text = String::from_utf8(bytes)
                .map_err(|_| SamError::data(format!("{}: not UTF-8", path.display())))?;
            parse_pgm(&text, path)
        }
        Some("f32") => parse_raw(&bytes, path),
        _ => Err(SamError::data(format!(
            "{}: unknown saliency map extension",
            path.display()
        ))),
    }
}

/// Loads an RGB image, resizes it to `size` and returns channel-major data in `[0,1]`.
pub fn read_image(path: &Path, size: ImageSize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != size.width || img.height() as usize != size.height {
        image::imageops::resize(&img, size.width as u32, size.height as u32, FilterType::Triangle)
    } else {
        img
    };
    let plane = size.pixels();
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = f32::from(px[ch]) / 255.0;
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, size: ImageSize, image: &[f32]) -> Result<()> {
    let plane = size.pixels();
    let mut buf = image::RgbImage::new(size.width as u32, size.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for ch in 0..3 {
            px[ch] = (image[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: usize,
    pub saliency: Option<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| SamError::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || {
            SamError::data(format!(
                "{}:{}: expected `image<TAB>label[<TAB>saliency]`",
                path.display(),
                lineno + 1
            ))
        };
        if !(2..=3).contains(&fields.len()) {
            return Err(bad());
        }
        let label = fields[1].trim().parse().map_err(|_| bad())?;
        entries.push(ManifestEntry {
            image: PathBuf::from(fields[0]),
            label,
            saliency: fields.get(2).filter(|s| !s.is_empty()).map(PathBuf::from),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| SamError::io(path, e))?;
    for e in entries {
        let mut line = format!("{}\t{}", e.image.display(), e.label);
        if let Some(s) = &e.saliency {
            line.push('\t');
            line.push_str(&s.display().to_string());
        }
        writeln!(f, "{line}").map_err(|e| SamError::io(path, e))?;
    }
    Ok(())
}

/// Loads every manifest entry into a [`Sample`]; paths resolve against the
/// manifest's directory. Sample ids are the image file stems.
pub fn load_manifest(path: &Path, size: ImageSize) -> Result<Vec<Sample>> {
    let root = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let image = read_image(&root.join(&e.image), size)?;
            let saliency = match &e.saliency {
                Some(rel) => {
                    let (msize, map) = read_map(&root.join(rel))?;
                    if msize != size {
                        return Err(SamError::shape(format!(
                            "{}: map is {}×{}, images are {}×{}",
                            rel.display(),
                            msize.height,
                            msize.width,
                            size.height,
                            size.width
                        )));
                    }
                    Some(map)
                }
                None => None,
            };
            let id = e
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.image.display().to_string());
            Ok(Sample {
                id,
                image,
                label: e.label,
                saliency,
                task_id: 0,
                meta: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_container_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let size = ImageSize::new(2, 3);
        let map = vec![0.0, 0.5, 1.25, 3.0, 1e-7, 2.0];
        write_raw_f32(&p, size, &map).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[0..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(read_map(&p).unwrap(), (size, map));
    }

    #[test]
    fn pgm_round_trip_is_peak_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let size = ImageSize::new(2, 2);
        write_pgm(&p, size, &[0.0, 1.0, 2.0, 4.0], 4).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("P2\n2 2\n4\n"));
        let (s, map) = read_map(&p).unwrap();
        assert_eq!(s, size);
        assert_eq!(map, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn manifest_parses_optional_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.tsv");
        fs::write(&p, "a.png\t3\tmaps/a.pgm\nb.png\t4\n").unwrap();
        let entries = read_manifest(&p).unwrap();
        assert_eq!(entries[0].saliency.as_deref(), Some(Path::new("maps/a.pgm")));
        assert_eq!(entries[1].saliency, None);
        assert_eq!(entries[1].label, 4);
        let q = dir.path().join("copy.tsv");
        write_manifest(&q, &entries).unwrap();
        assert_eq!(read_manifest(&q).unwrap(), entries);
    }

    #[test]
    fn malformed_manifest_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        fs::write(&p, "a.png\tnotanumber\n").unwrap();
        let err = read_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn manifest_images_load_resized() {
        let dir = tempfile::tempdir().unwrap();
        let size = ImageSize::new(4, 4);
        let img: Vec<f32> = (0..48).map(|i| (i % 5) as f32 / 4.0).collect();
        write_png(&dir.path().join("x.png"), size, &img).unwrap();
        write_raw_f32(&dir.path().join("x.f32"), size, &[1.0; 16]).unwrap();
        fs::write(dir.path().join("m.tsv"), "x.png\t1\tx.f32\n").unwrap();
        let samples = load_manifest(&dir.path().join("m.tsv"), size).unwrap();
        assert_eq!(samples[0].id, "x");
        // 8-bit PNG storage quantizes to multiples of 1/255.
        for (a, b) in samples[0].image.iter().zip(&img) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(samples[0].saliency.as_ref().unwrap().len(), 16);
    }
}
