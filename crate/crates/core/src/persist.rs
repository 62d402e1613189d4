//! On-disk formats.
//!
//! Binary containers are little-endian: 8 magic bytes, a `u32` schema
//! version, then length-prefixed fields. Arrays are stored as `f32`,
//! row-major. PNGs carry the config hash in a `tEXt` chunk and metrics CSVs
//! carry it in the `run_id` column.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::PixelImage;
use crate::conditioning::PseudoWordEmbedding;
use crate::error::{Error, Result};
use crate::synthesis::StyleRecord;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TXINVCKP";
pub const STYLE_MAGIC: &[u8; 8] = b"TXINVSTY";
pub const SCHEMA_VERSION: u32 = 1;
pub const PNG_HASH_KEY: &str = "textinv-config-hash";
pub const CSV_HEADER: &str = "run_id,variant,step,loss,wall_time_s";

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f32s(&mut self, data: &[f32]) {
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Parse(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("invalid utf-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Parse("array too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Parse("bad magic bytes".into()));
        }
        let v = self.u32()?;
        if v != SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported schema version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Parse(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn tensor_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// A pretrained backbone: named arrays plus the config that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(SCHEMA_VERSION);
        w.str(&self.config_hash);
        w.str(&self.config_text);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(t.rank() as u32);
            for d in t.dims() {
                w.u64(*d as u64);
            }
            w.f32s(&tensor_f32(t)?);
        }
        Ok(w.0)
    }

    /// Arrays come back as `f32` tensors.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.header(CHECKPOINT_MAGIC)?;
        let config_hash = r.str()?;
        let config_text = r.str()?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Parse("array too large".into()))?;
            let data = r.f32s(n)?;
            tensors.insert(name, Tensor::from_vec(data, dims, &Device::Cpu)?);
        }
        r.finish()?;
        Ok(Self {
            config_hash,
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn style_to_bytes(style: &StyleRecord) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(STYLE_MAGIC);
    w.u32(SCHEMA_VERSION);
    w.u32(style.embedding.len() as u32);
    w.u32(style.embedding.dim() as u32);
    w.str(&style.template);
    w.str(&style.config_hash);
    w.u64(style.seed);
    w.u64(style.steps);
    w.f32s(&style.embedding.to_f32_vec()?);
    Ok(w.0)
}

pub fn style_from_bytes(buf: &[u8]) -> Result<StyleRecord> {
    let mut r = Reader { buf, pos: 0 };
    r.header(STYLE_MAGIC)?;
    let l = r.u32()? as usize;
    let d = r.u32()? as usize;
    let template = r.str()?;
    let config_hash = r.str()?;
    let seed = r.u64()?;
    let steps = r.u64()?;
    let data = r.f32s(l.checked_mul(d).ok_or_else(|| Error::Parse("array too large".into()))?)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("non-finite embedding".into()));
    }
    Ok(StyleRecord {
        embedding: PseudoWordEmbedding::new(Tensor::from_vec(data, (l, d), &Device::Cpu)?)?,
        template,
        config_hash,
        seed,
        steps,
    })
}

pub fn save_style(path: &Path, style: &StyleRecord) -> Result<()> {
    Ok(fs::write(path, style_to_bytes(style)?)?)
}

/// Loads a style record and checks its config hash against `expected`.
/// A mismatch is an error when `strict`, otherwise it is returned as a
/// warning alongside the record.
pub fn load_style(path: &Path, expected: Option<&str>, strict: bool) -> Result<(StyleRecord, Option<String>)> {
    let style = style_from_bytes(&fs::read(path)?)?;
    let mut warning = None;
    if let Some(h) = expected {
        if style.config_hash != h {
            if strict {
                return Err(Error::HashMismatch {
                    expected: h.to_string(),
                    found: style.config_hash,
                });
            }
            warning = Some(format!(
                "style record hash {} differs from expected {h}",
                style.config_hash
            ));
        }
    }
    Ok((style, warning))
}

pub fn png_bytes(img: &PixelImage, config_hash: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(PNG_HASH_KEY.to_string(), config_hash.to_string())?;
        let mut w = enc.write_header()?;
        w.write_image_data(&img.to_rgb8())?;
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &PixelImage, config_hash: &str) -> Result<()> {
    Ok(fs::write(path, png_bytes(img, config_hash)?)?)
}

/// Decodes an 8-bit RGB or RGBA PNG; returns the image and its embedded
/// config hash, if any.
pub fn load_png(path: &Path) -> Result<(PixelImage, Option<String>)> {
    let file = fs::File::open(path)?;
    let mut reader = png::Decoder::new(file).read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("only 8-bit images are supported".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4]
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    let hash = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == PNG_HASH_KEY)
        .map(|c| c.text.clone());
    Ok((PixelImage::from_rgb8(&rgb, h, w)?, hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub variant: String,
    pub step: usize,
    pub loss: f64,
    pub wall_time_s: f64,
}

/// `run_id` is the config hash followed by the seed.
pub fn run_id(config_hash: &str, seed: u64) -> String {
    format!("{config_hash}-s{seed}")
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::Parse(format!(
            "{}: unexpected CSV header {header:?}",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style() -> StyleRecord {
        let v = Tensor::from_vec(vec![0.1f32, -2.5, 3.25, 1e-7], (2, 2), &Device::Cpu).unwrap();
        StyleRecord {
            embedding: PseudoWordEmbedding::new(v).unwrap(),
            template: "a painting of [C]".into(),
            config_hash: "abc123".into(),
            seed: 9,
            steps: 400,
        }
    }

    #[test]
    fn style_round_trip_is_bit_exact() {
        let s = style();
        let bytes = style_to_bytes(&s).unwrap();
        let back = style_from_bytes(&bytes).unwrap();
        assert_eq!(back.embedding.to_f32_vec().unwrap(), s.embedding.to_f32_vec().unwrap());
        assert_eq!(
            (back.template, back.config_hash, back.seed, back.steps),
            (s.template, s.config_hash, 9, 400)
        );
        assert_eq!(style_to_bytes(&style_from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn truncated_or_corrupt_style_is_rejected() {
        let bytes = style_to_bytes(&style()).unwrap();
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(style_from_bytes(&bytes[..cut]), Err(Error::Parse(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(style_from_bytes(&bad).is_err());
        let mut ver = bytes.clone();
        ver[8] = 2;
        assert!(style_from_bytes(&ver).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(style_from_bytes(&long).is_err());
    }

    #[test]
    fn strict_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.style");
        save_style(&p, &style()).unwrap();
        assert!(load_style(&p, Some("abc123"), true).unwrap().1.is_none());
        assert!(matches!(
            load_style(&p, Some("zzz"), true),
            Err(Error::HashMismatch { .. })
        ));
        let (_, warn) = load_style(&p, Some("zzz"), false).unwrap();
        assert!(warn.is_some());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a".to_string(),
            Tensor::from_vec(vec![1f32, 2.0, 3.0, 4.0, 5.0, 6.0], (2, 3), &Device::Cpu).unwrap(),
        );
        tensors.insert("b".to_string(), Tensor::from_vec(vec![7f32], 1, &Device::Cpu).unwrap());
        let ck = Checkpoint {
            config_hash: "h".into(),
            config_text: "x = 1\n".into(),
            tensors,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors["a"].dims(), &[2, 3]);
        assert_eq!(
            back.tensors["a"].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1., 2., 3., 4., 5., 6.]
        );
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn png_carries_hash_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let data: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 4) as u8).collect();
        let img = PixelImage::from_rgb8(&data, 4, 5).unwrap();
        save_png(&p, &img, "feedbeef").unwrap();
        let (back, hash) = load_png(&p).unwrap();
        assert_eq!(hash.as_deref(), Some("feedbeef"));
        assert_eq!(back.to_rgb8(), data);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            run_id: run_id("h", 3),
            variant: "direct".into(),
            step: 1,
            loss: 0.25,
            wall_time_s: 0.5,
        }];
        write_metrics(&p, &rows).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with(CSV_HEADER));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
