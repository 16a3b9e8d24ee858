//! On-disk datasets: one directory per split holding binary PPM images and
//! 16-bit PGM class/instance maps, plus a JSON catalog and manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::{generate_split, Catalog, Image, PanopticLabel, Sample, SceneSpec, Split};

// ---- netpbm ----------------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

/// 8-bit grayscale P5.
pub fn encode_pgm8(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// 16-bit grayscale P5 (big-endian samples, maxval 65535).
pub fn encode_pgm16(width: usize, height: usize, data: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let perr = |offset, detail: &str| Error::Parse {
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 {
        return Err(perr(0, "missing magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(perr(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(perr(pos, "expected decimal header field"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| perr(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(perr(pos, "missing whitespace after header"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        offset: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, bytes_per_px: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * bytes_per_px;
    let body = &bytes[h.offset..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("payload truncated: need {need} bytes, have {}", body.len()),
        });
    }
    Ok(&body[..need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" || h.maxval != 255 {
        return Err(Error::Parse {
            offset: 0,
            detail: "expected 8-bit binary PPM (P6, maxval 255)".into(),
        });
    }
    Ok(Image {
        width: h.width,
        height: h.height,
        rgb: payload(bytes, &h, 3)?.to_vec(),
    })
}

/// Returns `(width, height, samples)` of a 16-bit P5 map.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" || h.maxval != 65535 {
        return Err(Error::Parse {
            offset: 0,
            detail: "expected 16-bit binary PGM (P5, maxval 65535)".into(),
        });
    }
    let data = payload(bytes, &h, 2)?
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((h.width, h.height, data))
}

/// Returns `(width, height, samples)` of an 8-bit P5 map.
pub fn decode_pgm8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" || h.maxval != 255 {
        return Err(Error::Parse {
            offset: 0,
            detail: "expected 8-bit binary PGM (P5, maxval 255)".into(),
        });
    }
    Ok((h.width, h.height, payload(bytes, &h, 1)?.to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_file(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { offset, detail } => Error::Parse {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    }
}

// ---- dataset layout ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub splits: Vec<SplitEntry>,
    pub catalog: Catalog,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == split.name())
    }
}

fn sample_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("{index:05}.ppm")),
        dir.join(format!("{index:05}_class.pgm")),
        dir.join(format!("{index:05}_instance.pgm")),
    ]
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_sample(s: &Sample) -> [Vec<u8>; 3] {
    let l = &s.label;
    [
        encode_ppm(&s.image),
        encode_pgm16(l.width, l.height, &l.class_map),
        encode_pgm16(l.width, l.height, &l.instance_map),
    ]
}

/// Writes all splits and returns the manifest (also written as
/// `manifest.json`).
pub fn write_dataset(
    out: &Path,
    spec: &SceneSpec,
    catalog: &Catalog,
    counts: [usize; 3],
) -> Result<Manifest> {
    let mut splits = Vec::new();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut hasher = Sha256::new();
        for (i, s) in generate_split(spec, catalog, split, count).iter().enumerate() {
            for (path, bytes) in sample_paths(&dir, i).iter().zip(encode_sample(s)) {
                hasher.update(&bytes);
                write_file(path, &bytes)?;
            }
        }
        splits.push(SplitEntry {
            name: split.name().to_string(),
            count,
            sha256: hex(&hasher.finalize()),
        });
    }
    let manifest = Manifest {
        seed: spec.seed,
        height: spec.height,
        width: spec.width,
        splits,
        catalog: catalog.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("serializable");
    write_file(&out.join("manifest.json"), &json)?;
    let cat = serde_json::to_vec_pretty(catalog).expect("serializable");
    write_file(&out.join("catalog.json"), &cat)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads every sample of a split, verifying the manifest checksum.
pub fn read_split(root: &Path, split: Split) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(root)?;
    let entry = manifest
        .split(split)
        .ok_or_else(|| Error::Data(format!("manifest has no split {}", split.name())))?
        .clone();
    let dir = root.join(split.name());
    let mut hasher = Sha256::new();
    let mut samples = Vec::with_capacity(entry.count);
    for i in 0..entry.count {
        let [img_p, cls_p, ins_p] = sample_paths(&dir, i);
        let (ib, cb, nb) = (read_file(&img_p)?, read_file(&cls_p)?, read_file(&ins_p)?);
        for b in [&ib, &cb, &nb] {
            hasher.update(b);
        }
        let image = decode_ppm(&ib).map_err(|e| with_path(e, &img_p))?;
        let (w, h, class_map) = decode_pgm16(&cb).map_err(|e| with_path(e, &cls_p))?;
        let (w2, h2, instance_map) = decode_pgm16(&nb).map_err(|e| with_path(e, &ins_p))?;
        if (w, h) != (image.width, image.height) || (w2, h2) != (w, h) {
            return Err(Error::Data(format!("sample {i} of {}: size mismatch", split.name())));
        }
        samples.push(Sample {
            image,
            label: PanopticLabel {
                width: w,
                height: h,
                class_map,
                instance_map,
            },
        });
    }
    let digest = hex(&hasher.finalize());
    if digest != entry.sha256 {
        return Err(Error::Integrity(format!(
            "split {} checksum {digest} does not match manifest {}",
            split.name(),
            entry.sha256
        )));
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_round_trip_and_truncation() {
        let data: Vec<u16> = (0..12).map(|v| v * 5000).collect();
        let bytes = encode_pgm16(4, 3, &data);
        let (w, h, back) = decode_pgm16(&bytes).unwrap();
        assert_eq!((w, h, back), (4, 3, data));
        let err = decode_pgm16(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn header_errors_carry_offsets() {
        match decode_ppm(b"P6\n4 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.rgb, vec![1, 2, 3]);
    }
}
