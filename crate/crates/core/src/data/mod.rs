//! Manifests, image decoding and preprocessing, augmentation, splitting and
//! the synthetic generator.

pub mod augment;
pub mod image;
pub mod split;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ontology::{FindingSet, Mapping, Ontology};
use crate::train::Dataset;

pub use augment::{augment, AugmentConfig};
pub use image::{decode_image, encode_pnm, normalize, preprocess, resize_bilinear, to_three_channels};
pub use split::split_dataset;
pub use synth::{synth_dataset, synth_samples};

pub const IMAGE_SIZE: usize = 150;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: String,
    /// 0 = Normal, 1 = Pneumonia.
    pub label: u8,
    pub age_months: Option<u32>,
    pub metadata: Vec<(String, String)>,
}

impl SampleRecord {
    /// Value of a named field: `age_months` or a metadata key.
    pub fn field(&self, name: &str) -> Option<String> {
        if name == "age_months" {
            return self.age_months.map(|a| a.to_string());
        }
        self.metadata
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.clone())
    }

    fn to_line(&self) -> String {
        let meta: Vec<String> = self.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "{},{},{},{}",
            self.image_path,
            label_name(self.label),
            self.age_months.map(|a| a.to_string()).unwrap_or_default(),
            meta.join(";")
        )
    }
}

pub fn label_name(label: u8) -> &'static str {
    if label == 1 {
        "PNEUMONIA"
    } else {
        "NORMAL"
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    /// File the manifest came from; relative image paths resolve against its
    /// directory.
    pub source: PathBuf,
}

fn parse_label(tok: &str) -> Option<u8> {
    match tok.trim().to_ascii_uppercase().as_str() {
        "NORMAL" | "0" => Some(0),
        "PNEUMONIA" | "1" => Some(1),
        _ => None,
    }
}

/// Parses `path,label,age_months,key=value;key=value` lines. Age and metadata
/// may be empty or omitted; `#` lines and blank lines are skipped.
pub fn load_manifest(text: &str) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| Error::Parse { line, msg };
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = l.splitn(4, ',').map(str::trim).collect();
        if fields.len() < 2 || fields[0].is_empty() {
            return Err(err("expected `path,label[,age_months[,metadata]]`".into()));
        }
        let label = parse_label(fields[1]).ok_or_else(|| err(format!("unknown label `{}`", fields[1])))?;
        let age_months = match fields.get(2).copied().unwrap_or("") {
            "" => None,
            a => Some(a.parse::<u32>().map_err(|_| err(format!("bad age_months `{a}`")))?),
        };
        let mut metadata = Vec::new();
        for pair in fields.get(3).copied().unwrap_or("").split(';').map(str::trim) {
            if pair.is_empty() {
                continue;
            }
            let (k, v) = pair
                .split_once('=')
                .filter(|(k, _)| !k.trim().is_empty())
                .ok_or_else(|| err(format!("bad metadata entry `{pair}`")))?;
            metadata.push((k.trim().to_string(), v.trim().to_string()));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(err(format!("duplicate path `{}`", fields[0])));
        }
        records.push(SampleRecord {
            image_path: fields[0].to_string(),
            label,
            age_months,
            metadata,
        });
    }
    Ok(Manifest {
        records,
        source: PathBuf::new(),
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = load_manifest(&text)?;
    m.source = path.to_path_buf();
    Ok(m)
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# path,label,age_months,metadata\n");
        for r in &self.records {
            let _ = writeln!(s, "{}", r.to_line());
        }
        s
    }

    pub fn resolve(&self, rec: &SampleRecord) -> PathBuf {
        let p = Path::new(&rec.image_path);
        match self.source.parent() {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads, decodes and preprocesses every image to `[3, height, width]`.
    pub fn load_dataset(&self, height: usize, width: usize) -> Result<Dataset> {
        let mut images = Vec::with_capacity(self.len());
        for rec in &self.records {
            let path = self.resolve(rec);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let pixels = decode_image(&bytes)
                .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
            images.push(preprocess(&pixels, height, width)?);
        }
        Dataset::new(images, self.records.iter().map(|r| r.label).collect())
    }
}

/// Concepts whose mapping predicate holds over the record's own fields
/// (`p_cnn` is not a record field, so such mappings never hold here).
pub fn map_metadata_to_findings(rec: &SampleRecord, rules: &[Mapping], ontology: &Ontology) -> Result<FindingSet> {
    ontology.check_declared(rules.iter().map(|m| &m.concept))?;
    Ok(rules
        .iter()
        .filter(|m| m.holds(rec.field(&m.field).as_deref()))
        .map(|m| m.concept.clone())
        .collect())
}
