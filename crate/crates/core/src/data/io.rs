//! On-disk formats: 8-bit binary PGM for images and masks, PMAP for
//! probability maps, and the CSV dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GrayImage, Sample};
use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, Spacing};
use crate::postproc::ProbabilityMap;

const PMAP_MAGIC: &[u8; 4] = b"PMAP";
const PMAP_VERSION: u32 = 1;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parse a binary PGM into `(height, width, maxval, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, u16, Vec<u8>)> {
    let bad = |msg: &str| Error::Format(format!("PGM: {msg}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [width, height, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("header not terminated by whitespace"));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(bad("only 8-bit maxval is supported"));
    }
    let data = &bytes[pos..];
    if data.len() != width * height {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            width * height,
            data.len()
        )));
    }
    Ok((height, width, maxval as u16, data.to_vec()))
}

/// Intensities are stored as `round(255 * v)`.
pub fn save_image(path: &Path, image: &GrayImage) -> Result<()> {
    let px: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write(path, &encode_pgm(image.height(), image.width(), &px))
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let (h, w, maxval, px) =
        decode_pgm(&read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let scale = maxval as f32;
    GrayImage::new(h, w, px.into_iter().map(|v| v as f32 / scale).collect())
}

/// Masks are stored as 0 / 255.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write(path, &encode_pgm(mask.height(), mask.width(), &px))
}

pub fn load_mask(path: &Path, spacing: Spacing) -> Result<BinaryMask> {
    let (h, w, maxval, px) =
        decode_pgm(&read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if maxval != 255 || px.iter().any(|&v| v != 0 && v != 255) {
        return Err(Error::Format(format!(
            "{}: mask values must be 0 or 255",
            path.display()
        )));
    }
    BinaryMask::new(h, w, px.into_iter().map(|v| (v == 255) as u8).collect(), spacing)
}

pub fn encode_pmap(map: &ProbabilityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.data().len());
    out.extend_from_slice(PMAP_MAGIC);
    out.extend_from_slice(&PMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pmap(bytes: &[u8]) -> Result<ProbabilityMap> {
    if bytes.len() < 16 || &bytes[..4] != PMAP_MAGIC {
        return Err(Error::Format("PMAP: bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != PMAP_VERSION {
        return Err(Error::Format(format!("PMAP: unsupported version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != 4 * h * w {
        return Err(Error::Format(format!(
            "PMAP: {h}x{w} needs {} payload bytes, found {}",
            4 * h * w,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ProbabilityMap::new(h, w, data)
}

pub fn save_pmap(path: &Path, map: &ProbabilityMap) -> Result<()> {
    write(path, &encode_pmap(map))
}

pub fn load_pmap(path: &Path) -> Result<ProbabilityMap> {
    decode_pmap(&read(path)?)
}

/// One manifest row. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub patient_id: String,
    pub view_tag: String,
    pub spacing_row_mm: f64,
    pub spacing_col_mm: f64,
}

impl ManifestEntry {
    pub fn spacing(&self) -> Spacing {
        Spacing {
            row_mm: self.spacing_row_mm,
            col_mm: self.spacing_col_mm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Format(format!(
                    "{}: duplicate id '{}'",
                    path.display(),
                    e.id
                )));
            }
            e.spacing().validate()?;
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)
                .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, self.to_csv()?.as_bytes())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_sample(&self, e: &ManifestEntry) -> Result<Sample> {
        let image = load_image(&self.resolve(&e.image_path))?;
        let mask = load_mask(&self.resolve(&e.mask_path), e.spacing())?;
        Sample::new(&e.id, image, mask, &e.patient_id, &e.view_tag)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(|e| self.load_sample(e)).collect()
    }

    /// `(id, patient_id)` pairs in manifest order, the input of the splitters.
    pub fn patient_items(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|e| (e.id.clone(), e.patient_id.clone()))
            .collect()
    }
}

/// Write `images/<id>.pgm`, `masks/<id>.pgm` and `manifest.csv` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image_path = format!("images/{}.pgm", s.id);
        let mask_path = format!("masks/{}.pgm", s.id);
        save_image(&dir.join(&image_path), &s.image)?;
        save_mask(&dir.join(&mask_path), &s.mask)?;
        let sp = s.mask.spacing();
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            mask_path,
            patient_id: s.patient_id.clone(),
            view_tag: s.view_tag.clone(),
            spacing_row_mm: sp.row_mm,
            spacing_col_mm: sp.col_mm,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let (h, w, maxval, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((h, w, maxval, px), (1, 2, 255, vec![0, 255]));
    }

    #[test]
    fn pgm_rejects_truncation_and_ascii() {
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn pmap_round_trip_and_magic() {
        let m = ProbabilityMap::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let bytes = encode_pmap(&m);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_pmap(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_pmap(&bad), Err(Error::Format(_))));
    }
}
