//! Multi-label datasets on disk, preprocessing, and the outcome partition.
//!
//! Layout: `root/images/*`, `root/annotations.jsonl` with one
//! `{"id", "file", "labels": [names], "split"?}` object per line, and
//! `root/classes.txt` listing class names in index order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::digest::{Digest, DigestBuilder};
use crate::error::{Error, Result};
use crate::model::{validate_threshold, ModelBundle};
use crate::render::{png_bytes_rgb, to_rgb, write_bytes};
use crate::tensor::{ImageSize, ImageTensor};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const CLASSES_FILE: &str = "classes.txt";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    /// Path relative to `root/images`.
    pub file: PathBuf,
    pub labels: BTreeSet<usize>,
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    file: String,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    /// Sorted by `sample_id`.
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples
            .binary_search_by(|s| s.sample_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.samples[i])
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.split == Some(split))
            .collect()
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(IMAGES_DIR).join(&sample.file)
    }

    pub fn load_image(&self, sample: &Sample, size: ImageSize) -> Result<ImageTensor> {
        preprocess(&self.image_path(sample), size)
    }

    pub fn label_names(&self, labels: &BTreeSet<usize>) -> Vec<String> {
        labels.iter().map(|&i| self.class_names[i].clone()).collect()
    }

    /// Content digest of the annotations and class list (not of pixels).
    pub fn digest(&self) -> Digest {
        let mut b = DigestBuilder::new();
        b.usize(self.class_names.len());
        for c in &self.class_names {
            b.str(c);
        }
        b.usize(self.samples.len());
        for s in &self.samples {
            b.str(&s.sample_id);
            b.str(&s.file.to_string_lossy());
            b.usize(s.labels.len());
            for &l in &s.labels {
                b.usize(l);
            }
            b.str(match s.split {
                None => "",
                Some(Split::Train) => "train",
                Some(Split::Eval) => "eval",
            });
        }
        b.finish()
    }
}

fn offenders(kind: &str, ids: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut s = format!("{kind}: {}", ids[..ids.len().min(SHOWN)].join(", "));
    if ids.len() > SHOWN {
        s.push_str(&format!(" (and {} more)", ids.len() - SHOWN));
    }
    s
}

pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref().to_path_buf();
    let images = root.join(IMAGES_DIR);
    if !images.is_dir() {
        return Err(Error::Ingestion(format!(
            "{} has no {IMAGES_DIR}/ directory",
            root.display()
        )));
    }
    let classes_path = root.join(CLASSES_FILE);
    let class_text =
        std::fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
    let class_names: Vec<String> = class_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let class_index: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    if class_index.len() != class_names.len() {
        return Err(Error::Ingestion(format!(
            "{} lists a class more than once",
            classes_path.display()
        )));
    }

    let ann_path = root.join(ANNOTATIONS_FILE);
    let ann_text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut malformed = Vec::new();
    let mut duplicate = Vec::new();
    let mut dangling = Vec::new();
    let mut unknown = Vec::new();
    let mut by_id: BTreeMap<String, Sample> = BTreeMap::new();
    for (n, line) in ann_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotationLine = match serde_json::from_str(line) {
            Ok(a) => a,
            Err(e) => {
                malformed.push(format!("line {} ({e})", n + 1));
                continue;
            }
        };
        let mut labels = BTreeSet::new();
        for name in &a.labels {
            match class_index.get(name.as_str()) {
                Some(&i) => {
                    labels.insert(i);
                }
                None => unknown.push(format!("{} ({name})", a.id)),
            }
        }
        if !images.join(&a.file).is_file() {
            dangling.push(format!("{} ({})", a.id, a.file));
        }
        if by_id.contains_key(&a.id) {
            duplicate.push(a.id.clone());
            continue;
        }
        by_id.insert(
            a.id.clone(),
            Sample {
                sample_id: a.id,
                file: PathBuf::from(a.file),
                labels,
                split: a.split,
            },
        );
    }
    let problems: Vec<String> = [
        ("malformed annotations", &malformed),
        ("duplicate ids", &duplicate),
        ("missing image files", &dangling),
        ("unknown labels", &unknown),
    ]
    .iter()
    .filter(|(_, v)| !v.is_empty())
    .map(|(k, v)| offenders(k, v))
    .collect();
    if !problems.is_empty() {
        return Err(Error::Ingestion(problems.join("; ")));
    }
    if by_id.is_empty() {
        return Err(Error::Ingestion(format!("{} is empty", ann_path.display())));
    }
    Ok(DatasetManifest {
        root,
        class_names,
        samples: by_id.into_values().collect(),
    })
}

/// Decodes an image file, center-crops it to a square, resizes it to `size`
/// and scales to `[0, 1]`. Grayscale inputs are replicated to three channels.
pub fn preprocess(path: &Path, size: ImageSize) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Ingestion(format!("cannot decode {}: {e}", path.display())))?;
    preprocess_image(&img, size)
}

pub fn preprocess_image(img: &DynamicImage, size: ImageSize) -> Result<ImageTensor> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Ingestion("empty image".into()));
    }
    let side = w.min(h);
    let cropped =
        image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let (tw, th) = (size.width as u32, size.height as u32);
    let resized = if (side, side) == (tw, th) {
        cropped
    } else {
        image::imageops::resize(&cropped, tw, th, FilterType::Triangle)
    };
    let values = Array3::from_shape_fn((3, size.height, size.width), |(c, y, x)| {
        resized.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    });
    ImageTensor::new(values)
}

/// One entry for [`write_dataset`].
pub struct NewSample<'a> {
    pub id: &'a str,
    pub image: &'a ImageTensor,
    pub labels: &'a BTreeSet<usize>,
    pub split: Option<Split>,
}

/// Writes PNGs, annotations and class list in the on-disk layout.
pub fn write_dataset(root: &Path, class_names: &[String], samples: &[NewSample<'_>]) -> Result<()> {
    let images = root.join(IMAGES_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut ann = String::new();
    for s in samples {
        let file = format!("{}.png", s.id);
        write_bytes(&images.join(&file), &png_bytes_rgb(&to_rgb(s.image.values()))?)?;
        let line = AnnotationLine {
            id: s.id.to_string(),
            file,
            labels: s
                .labels
                .iter()
                .map(|&i| {
                    class_names.get(i).cloned().ok_or_else(|| {
                        Error::Argument(format!("label {i} out of range for sample {}", s.id))
                    })
                })
                .collect::<Result<_>>()?,
            split: s.split,
        };
        ann.push_str(&serde_json::to_string(&line)?);
        ann.push('\n');
    }
    write_bytes(&root.join(ANNOTATIONS_FILE), ann.as_bytes())?;
    let mut classes = class_names.join("\n");
    classes.push('\n');
    write_bytes(&root.join(CLASSES_FILE), classes.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Prediction set equals the target set.
    Correct,
    /// No target is in the prediction set.
    Incorrect,
    /// Partial overlap.
    Mixed,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "correct",
            Outcome::Incorrect => "incorrect",
            Outcome::Mixed => "mixed",
        }
    }
}

/// An empty prediction set with non-empty targets is [`Outcome::Incorrect`].
pub fn classify_outcome(targets: &BTreeSet<usize>, prediction: &BTreeSet<usize>) -> Outcome {
    if targets == prediction {
        Outcome::Correct
    } else if targets.is_disjoint(prediction) {
        Outcome::Incorrect
    } else {
        Outcome::Mixed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub top_class: usize,
    pub prediction_set: BTreeSet<usize>,
    pub posteriors: Vec<f64>,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomePartition {
    pub correct: Vec<String>,
    pub incorrect: Vec<String>,
    pub mixed: Vec<String>,
    pub threshold: f64,
}

impl OutcomePartition {
    pub fn from_outcomes(outcomes: &[SampleOutcome], threshold: f64) -> Self {
        let mut p = OutcomePartition {
            threshold,
            ..Default::default()
        };
        for o in outcomes {
            let list = match o.outcome {
                Outcome::Correct => &mut p.correct,
                Outcome::Incorrect => &mut p.incorrect,
                Outcome::Mixed => &mut p.mixed,
            };
            list.push(o.sample_id.clone());
        }
        p
    }

    pub fn len(&self) -> usize {
        self.correct.len() + self.incorrect.len() + self.mixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outcome_of(&self, id: &str) -> Option<Outcome> {
        let has = |v: &Vec<String>| v.iter().any(|s| s == id);
        if has(&self.correct) {
            Some(Outcome::Correct)
        } else if has(&self.incorrect) {
            Some(Outcome::Incorrect)
        } else if has(&self.mixed) {
            Some(Outcome::Mixed)
        } else {
            None
        }
    }
}

/// Runs the classifier over `samples` and records each outcome.
pub fn evaluate_samples(
    bundle: &ModelBundle,
    manifest: &DatasetManifest,
    samples: &[&Sample],
    threshold: f64,
) -> Result<Vec<SampleOutcome>> {
    validate_threshold(threshold)?;
    let size = bundle.input_size();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let images: Vec<ImageTensor> = chunk
            .iter()
            .map(|s| manifest.load_image(s, size))
            .collect::<Result<_>>()?;
        for (scores, s) in bundle.predict_batch(&images)?.into_iter().zip(chunk) {
            let prediction_set = scores.prediction_set(threshold);
            out.push(SampleOutcome {
                sample_id: s.sample_id.clone(),
                top_class: scores.top_class(),
                outcome: classify_outcome(&s.labels, &prediction_set),
                prediction_set,
                posteriors: scores.posteriors,
            });
        }
    }
    Ok(out)
}

pub fn partition_by_outcome(
    bundle: &ModelBundle,
    manifest: &DatasetManifest,
    threshold: f64,
) -> Result<OutcomePartition> {
    let all: Vec<&Sample> = manifest.samples.iter().collect();
    let outcomes = evaluate_samples(bundle, manifest, &all, threshold)?;
    Ok(OutcomePartition::from_outcomes(&outcomes, threshold))
}
