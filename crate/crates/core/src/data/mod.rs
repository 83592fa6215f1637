//! Relationship annotations, their on-disk format, and image rasters.
//!
//! # Annotation file
//!
//! A JSON document with a versioned header and label vocabularies; labels
//! inside records are names that must appear in the vocabularies.
//!
//! ```json
//! {
//!   "format": "boxattn-annotations",
//!   "version": 1,
//!   "object_classes": ["rect", "ellipse"],
//!   "predicates": ["above", "below", "sit"],
//!   "images": [
//!     {
//!       "id": "img00000",
//!       "image": "images/img00000.ppm",
//!       "subjects": [{ "box": [0.1, 0.1, 0.3, 0.3], "label": "rect" }],
//!       "relationships": [
//!         { "subject": 0, "predicate": "above",
//!           "object": { "box": [0.1, 0.4, 0.3, 0.6], "label": "ellipse" } },
//!         { "subject": 0, "predicate": "sit", "object": "not_visible", "role": "object" }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! Boxes are `[x_min, y_min, x_max, y_max]` normalized to `[0, 1]`. The
//! optional `role` is `"object"` or `"instrument"`. Datasets in other
//! formats (V-COCO, VRD, Open Images) are converted to this schema outside
//! the library.

mod ppm;
pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Label};

pub use ppm::{read_ppm, write_ppm, RgbImage};

pub const FORMAT_NAME: &str = "boxattn-annotations";
pub const FORMAT_VERSION: u32 = 1;
const NOT_VISIBLE_MARKER: &str = "not_visible";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Object,
    Instrument,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subject {
    pub bbox: BBox,
    pub label: Label,
}

/// Target of a relationship: a labelled box, or an object that is present
/// but hidden.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectRef {
    Visible { bbox: BBox, label: Label },
    NotVisible,
}

impl ObjectRef {
    pub fn visible(&self) -> Option<(BBox, Label)> {
        match *self {
            ObjectRef::Visible { bbox, label } => Some((bbox, label)),
            ObjectRef::NotVisible => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relationship {
    pub subject: usize,
    pub predicate: Label,
    pub object: ObjectRef,
    pub role: Option<Role>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotation {
    pub image_id: String,
    /// Image file, relative to the annotation file's directory.
    pub image: Option<String>,
    pub subjects: Vec<Subject>,
    pub relationships: Vec<Relationship>,
}

impl ImageAnnotation {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let err = |field: String, reason: String| Error::Annotation {
            image_id: self.image_id.clone(),
            field,
            reason,
        };
        for (i, s) in self.subjects.iter().enumerate() {
            if s.label >= vocab.object_classes.len() {
                return Err(err(
                    format!("subjects[{i}].label"),
                    format!("label id {} out of range", s.label),
                ));
            }
        }
        for (i, r) in self.relationships.iter().enumerate() {
            if r.subject >= self.subjects.len() {
                return Err(err(
                    format!("relationships[{i}].subject"),
                    format!("index {} but only {} subjects", r.subject, self.subjects.len()),
                ));
            }
            if r.predicate >= vocab.predicates.len() {
                return Err(err(
                    format!("relationships[{i}].predicate"),
                    format!("id {} out of range", r.predicate),
                ));
            }
            if let ObjectRef::Visible { label, .. } = r.object {
                if label >= vocab.object_classes.len() {
                    return Err(err(
                        format!("relationships[{i}].object.label"),
                        format!("id {label} out of range"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every distinct labelled box in the image: subjects first, then visible
    /// relationship objects not already listed.
    pub fn all_boxes(&self) -> Vec<(BBox, Label)> {
        let mut out: Vec<(BBox, Label)> = self.subjects.iter().map(|s| (s.bbox, s.label)).collect();
        for r in &self.relationships {
            if let Some(o) = r.object.visible() {
                if !out.contains(&o) {
                    out.push(o);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub object_classes: Vec<String>,
    pub predicates: Vec<String>,
}

impl Vocabulary {
    pub fn object_id(&self, name: &str) -> Option<Label> {
        self.object_classes.iter().position(|c| c == name)
    }

    pub fn predicate_id(&self, name: &str) -> Option<Label> {
        self.predicates.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub images: Vec<ImageAnnotation>,
}

// ---- file records ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRecord {
    format: String,
    version: u32,
    object_classes: Vec<String>,
    predicates: Vec<String>,
    images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    subjects: Vec<BoxRecord>,
    relationships: Vec<RelationshipRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ObjectRecord {
    Visible(BoxRecord),
    Marker(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationshipRecord {
    subject: usize,
    predicate: String,
    object: ObjectRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<Role>,
}

fn duplicate_check(names: &[String], what: &str) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() {
            return Err(Error::parse(format!("{what}[{i}]"), "empty name"));
        }
        if n == NOT_VISIBLE_MARKER {
            return Err(Error::parse(format!("{what}[{i}]"), format!("{n:?} is reserved")));
        }
        if let Some(j) = seen.insert(n.as_str(), i) {
            return Err(Error::parse(
                format!("{what}[{i}]"),
                format!("duplicate of {what}[{j}] {n:?}"),
            ));
        }
    }
    Ok(())
}

fn parse_dataset(rec: FileRecord) -> Result<Dataset> {
    if rec.format != FORMAT_NAME {
        return Err(Error::parse(
            "header.format",
            format!("expected {FORMAT_NAME:?}, got {:?}", rec.format),
        ));
    }
    if rec.version != FORMAT_VERSION {
        return Err(Error::parse(
            "header.version",
            format!("unsupported version {}", rec.version),
        ));
    }
    duplicate_check(&rec.object_classes, "object_classes")?;
    duplicate_check(&rec.predicates, "predicates")?;
    let vocabulary = Vocabulary {
        object_classes: rec.object_classes,
        predicates: rec.predicates,
    };
    let mut images = Vec::with_capacity(rec.images.len());
    for (ii, img) in rec.images.into_iter().enumerate() {
        let image_id = img.id.clone();
        let err = |field: String, reason: String| Error::Annotation {
            image_id: image_id.clone(),
            field: format!("images[{ii}].{field}"),
            reason,
        };
        let parse_box = |field: String, b: &BoxRecord| -> Result<(BBox, Label)> {
            let bbox = BBox::from_array(b.bbox).map_err(|e| err(format!("{field}.box"), e.to_string()))?;
            let label = vocabulary
                .object_id(&b.label)
                .ok_or_else(|| err(format!("{field}.label"), format!("unknown object class {:?}", b.label)))?;
            Ok((bbox, label))
        };
        let mut subjects = Vec::with_capacity(img.subjects.len());
        for (i, s) in img.subjects.iter().enumerate() {
            let (bbox, label) = parse_box(format!("subjects[{i}]"), s)?;
            subjects.push(Subject { bbox, label });
        }
        let mut relationships = Vec::with_capacity(img.relationships.len());
        for (i, r) in img.relationships.iter().enumerate() {
            let field = format!("relationships[{i}]");
            if r.subject >= subjects.len() {
                return Err(err(
                    format!("{field}.subject"),
                    format!("index {} but only {} subjects", r.subject, subjects.len()),
                ));
            }
            let predicate = vocabulary.predicate_id(&r.predicate).ok_or_else(|| {
                err(
                    format!("{field}.predicate"),
                    format!("unknown predicate {:?}", r.predicate),
                )
            })?;
            let object = match &r.object {
                ObjectRecord::Visible(b) => {
                    let (bbox, label) = parse_box(format!("{field}.object"), b)?;
                    ObjectRef::Visible { bbox, label }
                }
                ObjectRecord::Marker(m) if m == NOT_VISIBLE_MARKER => ObjectRef::NotVisible,
                ObjectRecord::Marker(m) => {
                    return Err(err(
                        format!("{field}.object"),
                        format!("expected a box or {NOT_VISIBLE_MARKER:?}, got {m:?}"),
                    ))
                }
            };
            relationships.push(Relationship {
                subject: r.subject,
                predicate,
                object,
                role: r.role,
            });
        }
        images.push(ImageAnnotation {
            image_id: img.id,
            image: img.image,
            subjects,
            relationships,
        });
    }
    Ok(Dataset { vocabulary, images })
}

fn to_record(ds: &Dataset) -> Result<FileRecord> {
    let v = &ds.vocabulary;
    let mut images = Vec::with_capacity(ds.images.len());
    for img in &ds.images {
        img.validate(v)?;
        let boxrec = |b: &BBox, l: Label| BoxRecord {
            bbox: b.to_array(),
            label: v.object_classes[l].clone(),
        };
        images.push(ImageRecord {
            id: img.image_id.clone(),
            image: img.image.clone(),
            subjects: img.subjects.iter().map(|s| boxrec(&s.bbox, s.label)).collect(),
            relationships: img
                .relationships
                .iter()
                .map(|r| RelationshipRecord {
                    subject: r.subject,
                    predicate: v.predicates[r.predicate].clone(),
                    object: match r.object {
                        ObjectRef::Visible { bbox, label } => ObjectRecord::Visible(boxrec(&bbox, label)),
                        ObjectRef::NotVisible => ObjectRecord::Marker(NOT_VISIBLE_MARKER.into()),
                    },
                    role: r.role,
                })
                .collect(),
        });
    }
    Ok(FileRecord {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        object_classes: v.object_classes.clone(),
        predicates: v.predicates.clone(),
        images,
    })
}

pub fn parse_annotations(text: &str) -> Result<Dataset> {
    let rec: FileRecord = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    parse_dataset(rec)
}

pub fn annotations_to_string(ds: &Dataset) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&to_record(ds)?)?;
    s.push('\n');
    Ok(s)
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Parse { location, reason } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            reason,
        },
        other => other,
    })
}

pub fn save_annotations(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, annotations_to_string(ds)?)?;
    Ok(())
}

/// Loads the raster referenced by `ann`, resolving relative paths against
/// `base_dir`.
pub fn load_image(base_dir: &Path, ann: &ImageAnnotation) -> Result<RgbImage> {
    let rel = ann.image.as_ref().ok_or_else(|| Error::Annotation {
        image_id: ann.image_id.clone(),
        field: "image".into(),
        reason: "no image path".into(),
    })?;
    read_ppm(&base_dir.join(rel))
}
