//! Binary greyscale PGM (P5, maxval 255) frame sequences.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Shape, VideoVolume};
use crate::error::{Result, SfsegError};

/// Parses a P5 image into `(height, width, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(SfsegError::Format("unexpected end of PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(SfsegError::Format(format!("expected binary PGM (P5), found {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| SfsegError::Format(format!("bad PGM {what}: {t:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(SfsegError::Format(format!("PGM maxval must be 255, found {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(SfsegError::Truncated {
            expected: n,
            found: bytes.len().saturating_sub(pos),
        });
    }
    Ok((height, width, bytes[pos..pos + n].to_vec()))
}

pub fn write_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Loads every file in `dir` whose name matches `pattern`, in lexicographic
/// order, as consecutive frames scaled to `[0, 1]`.
///
/// Frame order comes from the file names alone, so numbered sequences must be
/// zero-padded (`frame_009.pgm` sorts before `frame_010.pgm`).
pub fn import_pgm_sequence(dir: impl AsRef<Path>, pattern: &str) -> Result<VideoVolume> {
    let dir = dir.as_ref();
    let matcher = glob::Pattern::new(pattern)
        .map_err(|e| SfsegError::Parameter(format!("bad pattern {pattern:?}: {e}")))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SfsegError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| matcher.matches(n))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SfsegError::Validation(format!(
            "no frames matching {pattern:?} in {}",
            dir.display()
        )));
    }
    let mut dims = None;
    let mut data = Vec::new();
    for path in &files {
        let bytes = fs::read(path).map_err(|e| SfsegError::io(path, e))?;
        let (h, w, pixels) = read_pgm(&bytes).map_err(|e| match e {
            SfsegError::Format(m) => SfsegError::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(SfsegError::Shape(format!(
                    "{} is {h}x{w} but earlier frames are {}x{}",
                    path.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        data.extend(pixels.iter().map(|&p| p as f64 / 255.0));
    }
    let (h, w) = dims.expect("at least one frame");
    VideoVolume::new(Shape::new(files.len(), h, w)?, data)
}

/// Writes one PGM per frame as `<prefix>_<frame:05>.pgm`, mapping `[0, 1]` to
/// `0..=255` (values are clamped first).
pub fn export_pgm_sequence(
    volume: &VideoVolume,
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| SfsegError::io(dir, e))?;
    let mut written = Vec::with_capacity(volume.frames());
    for t in 0..volume.frames() {
        let pixels: Vec<u8> = volume
            .frame(t)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = dir.join(format!("{prefix}_{t:05}.pgm"));
        fs::write(&path, write_pgm(volume.height(), volume.width(), &pixels))
            .map_err(|e| SfsegError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_scaled() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("f0.pgm"), write_pgm(2, 2, &[0, 255, 255, 0])).unwrap();
        let v = import_pgm_sequence(dir.path(), "*.pgm").unwrap();
        assert_eq!(v.shape(), Shape::new(1, 2, 2).unwrap());
        assert_eq!(v.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        let err = import_pgm_sequence(dir.path(), "*.pgm").unwrap_err();
        assert!(err.to_string().contains("no frames"));
    }

    #[test]
    fn three_frames_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, value) in [("b_01.pgm", 2u8), ("b_00.pgm", 1), ("b_02.pgm", 3)] {
            fs::write(dir.path().join(name), write_pgm(4, 4, &[value; 16])).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let v = import_pgm_sequence(dir.path(), "b_*.pgm").unwrap();
        assert_eq!(v.shape(), Shape::new(3, 4, 4).unwrap());
        assert_eq!(v.get(0, 0, 0), 1.0 / 255.0);
        assert_eq!(v.get(2, 3, 3), 3.0 / 255.0);
        assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn mixed_dimensions_and_bad_formats() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), write_pgm(2, 2, &[0; 4])).unwrap();
        fs::write(dir.path().join("b.pgm"), write_pgm(2, 3, &[0; 6])).unwrap();
        assert!(matches!(
            import_pgm_sequence(dir.path(), "*.pgm"),
            Err(SfsegError::Shape(_))
        ));
        assert!(matches!(read_pgm(b"P2\n1 1\n255\n0"), Err(SfsegError::Format(_))));
        assert!(matches!(read_pgm(b"P5\n1 1\n65535\n\0\0"), Err(SfsegError::Format(_))));
    }

    #[test]
    fn header_comments_are_skipped() {
        let (h, w, px) = read_pgm(b"P5\n# made by hand\n2 1\n255\n\x10\x20").unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(px, vec![0x10, 0x20]);
    }

    #[test]
    fn export_then_import() {
        let dir = tempfile::tempdir().unwrap();
        let v = VideoVolume::from_dims(2, 1, 3, vec![0.0, 0.5, 1.0, 1.0, 0.0, 2.0]).unwrap();
        export_pgm_sequence(&v, dir.path(), "mask").unwrap();
        let back = import_pgm_sequence(dir.path(), "mask_*.pgm").unwrap();
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0, 1.0, 0.0, 1.0]);
    }
}
