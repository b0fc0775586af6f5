//! Binary PPM (P6) frames and PGM (P5) masks.

use std::fs;
use std::path::{Path, PathBuf};

use super::{check_clip_dims, MaskStack, Video, CHANNELS};
use crate::error::{shape_err, Error, Result};

const FRAMES_DIR: &str = "frames";
const MASKS_DIR: &str = "masks";

struct Pnm {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

fn parse_pnm(bytes: &[u8], magic: &[u8; 2], depth: usize, path: &Path) -> Result<Pnm> {
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad("bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header field"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let expected = width * height * depth;
    if bytes.len() - pos != expected {
        return Err(bad(&format!(
            "payload is {} bytes, expected {expected}",
            bytes.len() - pos
        )));
    }
    Ok(Pnm {
        width,
        height,
        pixels: bytes[pos..].to_vec(),
    })
}

/// Lists `<prefix>NNNNN.<ext>` files in lexicographic order, requiring the
/// indices to run contiguously from zero.
fn numbered_files(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(prefix) && name.ends_with(ext) {
            names.push(name);
        }
    }
    names.sort();
    for (i, name) in names.iter().enumerate() {
        let idx: Option<usize> = name[prefix.len()..name.len() - ext.len()].parse().ok();
        if idx != Some(i) {
            return Err(Error::Format(format!(
                "{}: expected frame index {i}, found {name}",
                dir.display()
            )));
        }
    }
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads `frame_00000.ppm …` from `dir` into a clip with values `byte / 255`.
pub fn read_clip(dir: impl AsRef<Path>) -> Result<Video> {
    let dir = dir.as_ref();
    let files = numbered_files(dir, "frame_", ".ppm")?;
    let mut dims = None;
    let mut data = Vec::new();
    for path in &files {
        let img = parse_pnm(&read_file(path)?, b"P6", CHANNELS, path)?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(Error::Format(format!(
                    "{}: frame is {}x{}, earlier frames are {}x{}",
                    path.display(),
                    img.height,
                    img.width,
                    d.0,
                    d.1
                )))
            }
            Some(_) => {}
        }
        data.extend(img.pixels.iter().map(|&b| b as f64 / 255.0));
    }
    let (height, width) = dims.unwrap_or((0, 0));
    check_clip_dims(files.len(), height, width)?;
    Video::new(files.len(), height, width, data)
}

/// Reads `mask_00000.pgm …` from `dir`, binarizing with `pixel > 127`.
/// When `expected` is given the stack must match that `(frames, h, w)`.
pub fn read_masks(
    dir: impl AsRef<Path>,
    expected: Option<(usize, usize, usize)>,
) -> Result<MaskStack> {
    let dir = dir.as_ref();
    let files = numbered_files(dir, "mask_", ".pgm")?;
    let mut dims = None;
    let mut data = Vec::new();
    for path in &files {
        let img = parse_pnm(&read_file(path)?, b"P5", 1, path)?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(shape_err!("{}: mask dims differ from earlier masks", path.display()))
            }
            Some(_) => {}
        }
        data.extend(img.pixels.iter().map(|&b| (b > 127) as u8));
    }
    let (height, width) = dims.unwrap_or((0, 0));
    if let Some(exp) = expected {
        if exp != (files.len(), height, width) {
            return Err(shape_err!(
                "masks are {:?}, clip is {:?}",
                (files.len(), height, width),
                exp
            ));
        }
    }
    MaskStack::new(files.len(), height, width, data)
}

fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes one P6 frame per clip frame, `byte = round(255 * clamp(v, 0, 1))`.
pub fn write_clip(video: &Video, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let header = format!("P6\n{} {}\n255\n", video.width(), video.height());
    for f in 0..video.frames() {
        let mut bytes = header.clone().into_bytes();
        bytes.extend(video.frame(f).iter().map(|&v| to_byte(v)));
        write_file(&dir.join(format!("frame_{f:05}.ppm")), &bytes)?;
    }
    Ok(())
}

/// Writes one P5 mask per frame with values 0 / 255.
pub fn write_masks(masks: &MaskStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let header = format!("P5\n{} {}\n255\n", masks.width(), masks.height());
    let n = masks.height() * masks.width();
    for f in 0..masks.frames() {
        let mut bytes = header.clone().into_bytes();
        bytes.extend(masks.data()[f * n..(f + 1) * n].iter().map(|&m| m * 255));
        write_file(&dir.join(format!("mask_{f:05}.pgm")), &bytes)?;
    }
    Ok(())
}

/// Loads `<root>/frames` and, when present, `<root>/masks`.
pub fn load_clip(root: impl AsRef<Path>) -> Result<(Video, Option<MaskStack>)> {
    let root = root.as_ref();
    let video = read_clip(root.join(FRAMES_DIR))?;
    let mask_dir = root.join(MASKS_DIR);
    let masks = if mask_dir.is_dir() {
        Some(read_masks(mask_dir, Some(video.dims()))?)
    } else {
        None
    };
    Ok((video, masks))
}

/// Writes the `<root>/frames` (+ `<root>/masks`) layout.
pub fn save_clip(root: impl AsRef<Path>, video: &Video, masks: Option<&MaskStack>) -> Result<()> {
    let root = root.as_ref();
    write_clip(video, root.join(FRAMES_DIR))?;
    if let Some(m) = masks {
        write_masks(m, root.join(MASKS_DIR))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(dir: &Path, idx: usize, w: usize, h: usize, value: u8) {
        let mut bytes = format!("P6\n# comment\n{w} {h}\n255\n").into_bytes();
        bytes.extend(std::iter::repeat_n(value, w * h * 3));
        fs::write(dir.join(format!("frame_{idx:05}.ppm")), bytes).unwrap();
    }

    fn write_pgm(dir: &Path, idx: usize, w: usize, h: usize, value: u8) {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(std::iter::repeat_n(value, w * h));
        fs::write(dir.join(format!("mask_{idx:05}.pgm")), bytes).unwrap();
    }

    #[test]
    fn white_frames_read_as_ones() {
        let tmp = tempfile::tempdir().unwrap();
        for i in 0..9 {
            write_ppm(tmp.path(), i, 64, 64, 255);
        }
        let v = read_clip(tmp.path()).unwrap();
        assert_eq!(v.dims(), (9, 64, 64));
        assert!(v.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn eight_frames_is_a_shape_error() {
        let tmp = tempfile::tempdir().unwrap();
        for i in 0..8 {
            write_ppm(tmp.path(), i, 64, 64, 10);
        }
        assert!(matches!(read_clip(tmp.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn mixed_frame_sizes_are_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        for i in 0..5 {
            let w = if i == 3 { 32 } else { 64 };
            write_ppm(tmp.path(), i, w, 64, 10);
        }
        assert!(matches!(read_clip(tmp.path()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_frame_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_ppm(tmp.path(), 0, 8, 8, 10);
        let p = tmp.path().join("frame_00000.ppm");
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_clip(tmp.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_frame_index_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        for i in [0, 1, 2, 3, 5] {
            write_ppm(tmp.path(), i, 8, 8, 10);
        }
        assert!(matches!(read_clip(tmp.path()), Err(Error::Format(_))));
    }

    #[test]
    fn mask_threshold_is_strictly_above_127() {
        let tmp = tempfile::tempdir().unwrap();
        for (i, v) in [0u8, 255, 128, 127, 0].into_iter().enumerate() {
            write_pgm(tmp.path(), i, 8, 8, v);
        }
        let m = read_masks(tmp.path(), Some((5, 8, 8))).unwrap();
        let areas: Vec<_> = (0..5).map(|f| m.frame_area(f)).collect();
        assert_eq!(areas, vec![0, 64, 64, 0, 0]);
    }

    #[test]
    fn mask_count_mismatch_is_a_shape_error() {
        let tmp = tempfile::tempdir().unwrap();
        for i in 0..5 {
            write_pgm(tmp.path(), i, 8, 8, 0);
        }
        let err = read_masks(tmp.path(), Some((9, 8, 8))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn byte_rounding_is_half_up() {
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(1.7), 255);
    }

    #[test]
    fn byte_round_trip_error_is_at_most_half_a_step() {
        // Exhaustive over byte values, plus the worst case between two bytes.
        let mut worst: f64 = 0.0;
        for b in 0..=255u8 {
            let v = b as f64 / 255.0;
            worst = worst.max((to_byte(v) as f64 / 255.0 - v).abs());
            let mid = (b as f64 + 0.4999) / 255.0;
            if mid <= 1.0 {
                worst = worst.max((to_byte(mid) as f64 / 255.0 - mid).abs());
            }
        }
        assert!(worst <= 1.0 / 510.0);
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        let v = Video::constant(1, 8, 8, 0.5).unwrap();
        assert!(matches!(write_clip(&v, file.join("sub")), Err(Error::Io { .. })));
    }
}
