//! Dataset files in two encodings, chosen by extension.
//!
//! `.jsonl` is line-delimited JSON: a header object on the first line,
//! then one bag per line.
//!
//! ```text
//! {"format":"cmil-dataset","version":1,"classes":2,"dim":3,"bags":1}
//! {"id":"img0","labels":[1,-1],"ground_truth":[{"class":0,"bbox":[0.1,0.1,0.5,0.6]}],
//!  "instances":[{"bbox":[0.1,0.1,0.5,0.5],"features":[0.5,0.0,1.25]},
//!               {"bbox":[0.6,0.6,0.9,0.95],"features":[-0.25,1.0,0.0]}]}
//! ```
//!
//! (The bag record is wrapped here for width; in a file it is one line.)
//! Boxes are `[x1, y1, x2, y2]`, labels are `1` or `-1` per class, and
//! `ground_truth` may be omitted for bags without box annotations.
//!
//! Any other extension (conventionally `.bin`) is the little-endian binary
//! form:
//!
//! ```text
//! magic      8 bytes  "CMILDATA"
//! version    u32
//! classes    u32
//! dim        u32
//! bags       u64
//! per bag:
//!   id_len   u32, id bytes (UTF-8)
//!   labels   classes x i8 (+1 / -1)
//!   gt_count u32, gt_count x (class u32, 4 x f64)
//!   n        u32, n x (4 x f64 box, dim x f64 features)
//! ```
//!
//! Floats are stored exactly in both forms, so either round-trips bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::io::write_atomic;
use crate::model::{Bag, GroundTruth, Instance, Label};

pub const DATASET_VERSION: u32 = 1;
pub const FORMAT_NAME: &str = "cmil-dataset";
const MAGIC: &[u8; 8] = b"CMILDATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: FormatTag,
    pub version: u32,
    pub classes: usize,
    pub dim: usize,
    pub bags: usize,
}

/// The literal format tag of the text header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatTag {
    #[serde(rename = "cmil-dataset")]
    CmilDataset,
}

/// Bags plus the shape they were validated against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub dim: usize,
    pub bags: Vec<Bag>,
}

impl Dataset {
    /// Infers the shape from the first bag and validates every bag.
    pub fn from_bags(bags: Vec<Bag>) -> Result<Self> {
        let first = bags
            .first()
            .ok_or_else(|| Error::Precondition("dataset has no bags".into()))?;
        let classes = first.num_classes();
        let dim = first.instances.first().map_or(0, |i| i.features.len());
        for b in &bags {
            b.validate(classes, dim)?;
        }
        Ok(Dataset { classes, dim, bags })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Text,
    Binary,
}

impl Encoding {
    pub fn for_path(path: &Path) -> Encoding {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Encoding::Text,
            _ => Encoding::Binary,
        }
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = match Encoding::for_path(path) {
        Encoding::Text => encode_text(dataset)?.into_bytes(),
        Encoding::Binary => encode_binary(dataset),
    };
    write_atomic(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match Encoding::for_path(path) {
        Encoding::Text => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| Error::parse(format!("byte {}", e.valid_up_to()), "invalid UTF-8"))?;
            decode_text(text)
        }
        Encoding::Binary => decode_binary(&bytes),
    }
}

pub fn encode_text(dataset: &Dataset) -> Result<String> {
    let header = DatasetHeader {
        format: FormatTag::CmilDataset,
        version: DATASET_VERSION,
        classes: dataset.classes,
        dim: dataset.dim,
        bags: dataset.bags.len(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    out.push('\n');
    for bag in &dataset.bags {
        out.push_str(&serde_json::to_string(bag).map_err(|e| Error::Config(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_text(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "missing header"))?;
    let version: serde_json::Value = serde_json::from_str(first)
        .map_err(|e| Error::parse("line 1", format!("header: {e}")))?;
    if let Some(v) = version.get("version").and_then(|v| v.as_u64()) {
        if v != DATASET_VERSION as u64 {
            return Err(Error::UnsupportedVersion {
                found: v as u32,
                supported: DATASET_VERSION,
            });
        }
    }
    let header: DatasetHeader = serde_json::from_value(version)
        .map_err(|e| Error::parse("line 1", format!("header: {e}")))?;
    let mut bags = Vec::with_capacity(header.bags);
    for (i, line) in lines {
        let loc = format!("line {}", i + 1);
        let bag: Bag =
            serde_json::from_str(line).map_err(|e| Error::parse(&loc, e.to_string()))?;
        bag.validate(header.classes, header.dim)
            .map_err(|e| Error::parse(&loc, e.to_string()))?;
        bags.push(bag);
    }
    if bags.len() != header.bags {
        return Err(Error::parse(
            "end of file",
            format!("header declares {} bags, found {}", header.bags, bags.len()),
        ));
    }
    Ok(Dataset {
        classes: header.classes,
        dim: header.dim,
        bags,
    })
}

pub fn encode_binary(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.classes as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.bags.len() as u64).to_le_bytes());
    let put_box = |out: &mut Vec<u8>, b: &BBox| {
        for v in <[f64; 4]>::from(*b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for bag in &dataset.bags {
        out.extend_from_slice(&(bag.id.len() as u32).to_le_bytes());
        out.extend_from_slice(bag.id.as_bytes());
        out.extend(bag.labels.iter().map(|&l| i8::from(l) as u8));
        out.extend_from_slice(&(bag.ground_truth.len() as u32).to_le_bytes());
        for g in &bag.ground_truth {
            out.extend_from_slice(&(g.class as u32).to_le_bytes());
            put_box(&mut out, &g.bbox);
        }
        out.extend_from_slice(&(bag.instances.len() as u32).to_le_bytes());
        for inst in &bag.instances {
            put_box(&mut out, &inst.bbox);
            for v in &inst.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Byte cursor whose errors name the offset and the record being read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn error(&self, message: String) -> Error {
        Error::parse(format!("byte {} ({})", self.pos, self.record), message)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn bbox(&mut self) -> Result<BBox> {
        let at = self.pos;
        let mut c = [0.0; 4];
        for v in &mut c {
            *v = self.f64("box")?;
        }
        BBox::try_from(c).map_err(|e| {
            Error::parse(format!("byte {at} ({})", self.record), e.to_string())
        })
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader {
        bytes,
        pos: 0,
        record: "header".into(),
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::parse("byte 0 (header)", "not a dataset file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let classes = r.u32("classes")? as usize;
    let dim = r.u32("dim")? as usize;
    let count = r.u64("bag count")?;
    let mut bags = Vec::new();
    for b in 0..count {
        r.record = format!("bag {b}");
        let id_len = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| r.error("id is not UTF-8".into()))?
            .to_string();
        let labels = r
            .take(classes, "labels")?
            .iter()
            .map(|&v| Label::try_from(v as i8))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| r.error(e.to_string()))?;
        let gt_count = r.u32("ground-truth count")?;
        let mut ground_truth = Vec::new();
        for _ in 0..gt_count {
            let class = r.u32("ground-truth class")? as usize;
            ground_truth.push(GroundTruth {
                class,
                bbox: r.bbox()?,
            });
        }
        let n = r.u32("instance count")?;
        let mut instances = Vec::new();
        for _ in 0..n {
            let bbox = r.bbox()?;
            let features = (0..dim)
                .map(|_| r.f64("features"))
                .collect::<Result<Vec<_>>>()?;
            instances.push(Instance { bbox, features });
        }
        let bag = Bag {
            id,
            labels,
            ground_truth,
            instances,
        };
        bag.validate(classes, dim).map_err(|e| r.error(e.to_string()))?;
        bags.push(bag);
    }
    if r.pos != bytes.len() {
        return Err(r.error(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Dataset { classes, dim, bags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthConfig};

    fn sample() -> Dataset {
        Dataset::from_bags(
            generate(&SynthConfig {
                num_bags: 12,
                ..SynthConfig::default()
            })
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip_is_exact() {
        let d = sample();
        let back = decode_text(&encode_text(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let d = sample();
        assert_eq!(decode_binary(&encode_binary(&d)).unwrap(), d);
    }

    #[test]
    fn files_round_trip_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample();
        for name in ["a.jsonl", "a.bin"] {
            let p = dir.path().join(name);
            write_dataset(&p, &d).unwrap();
            assert_eq!(read_dataset(&p).unwrap(), d);
        }
        let text = fs::read(dir.path().join("a.jsonl")).unwrap();
        assert_eq!(text.first(), Some(&b'{'));
    }

    #[test]
    fn truncated_binary_names_offset() {
        let bytes = encode_binary(&sample());
        for cut in [3, 20, 40, bytes.len() / 2, bytes.len() - 1] {
            match decode_binary(&bytes[..cut]) {
                Err(Error::Parse { location, .. }) => assert!(location.starts_with("byte ")),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn truncated_text_names_line() {
        let text = encode_text(&sample()).unwrap();
        let cut = &text[..text.len() / 2];
        match decode_text(cut) {
            Err(Error::Parse { location, .. }) => assert!(location.starts_with("line ")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = encode_binary(&sample());
        bytes[8] = 9;
        assert!(matches!(
            decode_binary(&bytes),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let text = encode_text(&sample()).unwrap().replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(decode_text(&text), Err(Error::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn schema_violation_is_a_parse_error_and_missing_file_is_io() {
        let text = "{\"format\":\"cmil-dataset\",\"version\":1,\"classes\":1,\"dim\":2,\"bags\":1}\n\
                    {\"id\":\"x\",\"labels\":[1],\"instances\":[{\"bbox\":[0,0,1,1],\"features\":[1.0]}]}\n";
        match decode_text(text) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        let err = read_dataset(Path::new("/nonexistent/d.bin")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
