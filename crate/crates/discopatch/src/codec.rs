//! PNG and binary PPM (P6) reading and writing of 8-bit RGB images.
//!
//! Grayscale inputs are replicated to three channels and alpha is dropped.

use crate::error::{Error, Result};
use discopatch_core::{PixelSource, Rgb8};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Png,
    Ppm,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(Format::Png),
            "ppm" => Some(Format::Ppm),
            _ => None,
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            Format::Png => "png",
            Format::Ppm => "ppm",
        }
    }
}

/// Decodes by content: the PNG signature or a `P6` header.
pub fn load_image(path: &Path) -> Result<Rgb8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Rgb8> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes, path)
    } else if bytes.len() < 2 {
        Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes", bytes.len()),
        })
    } else {
        Err(Error::UnsupportedFormat {
            path: path.into(),
            detail: "neither PNG nor binary PPM".into(),
        })
    }
}

/// Writes the format implied by the extension (PNG when unknown).
pub fn save_image(img: &Rgb8, path: &Path) -> Result<()> {
    let bytes = match Format::from_path(path).unwrap_or(Format::Png) {
        Format::Png => encode_png(img, path)?,
        Format::Ppm => encode_ppm(img),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Rgb8> {
    let malformed = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            path: path.into(),
            detail: io.to_string(),
        },
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.into(),
            detail: other.to_string(),
        },
    };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(malformed)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(malformed)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let px = &buf[..frame.buffer_size()];
    let data: Vec<u8> = match frame.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                detail: "palette image was not expanded".into(),
            })
        }
    };
    Ok(Rgb8::new(w, h, data)?)
}

fn encode_png(img: &Rgb8, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let fail = |e: png::EncodingError| Error::Malformed {
        path: path.into(),
        detail: e.to_string(),
    };
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(img.data()).map_err(fail)?;
    }
    Ok(out)
}

fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

/// Header fields are whitespace-separated; `#` starts a comment running to
/// the end of the line. Exactly one whitespace byte precedes the raster.
fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Rgb8> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(if pos >= bytes.len() {
                Error::Truncated {
                    path: path.into(),
                    detail: "header ends early".into(),
                }
            } else {
                Error::Malformed {
                    path: path.into(),
                    detail: format!("expected a number at byte {}", pos),
                }
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed {
                path: path.into(),
                detail: "header number out of range".into(),
            })?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            detail: format!("maxval {} (only 8-bit PPM is supported)", maxval),
        });
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Truncated {
            path: path.into(),
            detail: "missing raster".into(),
        });
    }
    pos += 1;
    let need = w * h * 3;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| Error::Truncated {
        path: path.into(),
        detail: format!("raster needs {} bytes, found {}", need, bytes.len() - pos),
    })?;
    Ok(Rgb8::new(w, h, raster.to_vec())?)
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{}.{}.tmp", name, std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> Rgb8 {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        Rgb8::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn white_pixel_ppm() {
        let img = decode(b"P6\n1 1\n255\n\xff\xff\xff", Path::new("w.ppm")).unwrap();
        assert_eq!(img.to_image().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ppm_header_comments() {
        let img = decode(b"P6 # comment\n2 # w\n1\n255\n\x01\x02\x03\x04\x05\x06", Path::new("c.ppm")).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.data(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn round_trips_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["a.png", "b.ppm"].iter().enumerate() {
            let img = random_image(7, 5, i as u64);
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back, img);
            save_image(&back, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn grayscale_png_is_replicated() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[10, 200]).unwrap();
        }
        let img = decode(&bytes, Path::new("g.png")).unwrap();
        assert_eq!(img.data(), &[10, 10, 10, 200, 200, 200]);
    }

    #[test]
    fn failures_are_distinguished() {
        let p = Path::new("x");
        assert!(matches!(decode(b"P6\n4 4\n255\n\x00\x00", p), Err(Error::Truncated { .. })));
        assert!(matches!(decode(b"P6\n1 1\n65535\n", p), Err(Error::UnsupportedFormat { .. })));
        assert!(matches!(decode(b"GIF89a", p), Err(Error::UnsupportedFormat { .. })));
        let mut png_bytes = encode_png(&random_image(8, 8, 3), p).unwrap();
        png_bytes.truncate(png_bytes.len() / 2);
        assert!(matches!(decode(&png_bytes, p), Err(Error::Truncated { .. } | Error::Malformed { .. })));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
