//! Labelled examples and GLUE-style TSV ingestion.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

impl Example {
    pub fn single(text: &str, label: usize) -> Self {
        Self {
            text_a: text.to_string(),
            text_b: None,
            label,
        }
    }

    pub fn pair(a: &str, b: &str, label: usize) -> Self {
        Self {
            text_a: a.to_string(),
            text_b: Some(b.to_string()),
            label,
        }
    }
}

/// Label strings in first-appearance order; index = class id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub names: Vec<String>,
}

impl LabelMap {
    pub fn id_or_insert(&mut self, name: &str) -> usize {
        match self.names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// When the names are exactly the integers `0..len`, returns the map
    /// sending each current id to the id equal to its own name.
    fn integer_permutation(&self) -> Option<Vec<usize>> {
        let values: Vec<usize> = self
            .names
            .iter()
            .map(|n| n.parse().ok())
            .collect::<Option<_>>()?;
        let mut seen = vec![false; values.len()];
        for &v in &values {
            if v >= values.len() || std::mem::replace(&mut seen[v], true) {
                return None;
            }
        }
        Some(values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: String,
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub metric: String,
    pub labels: LabelMap,
}

impl Dataset {
    pub fn new(
        split: &str,
        examples: Vec<Example>,
        labels: LabelMap,
        metric: &str,
    ) -> Result<Self> {
        let num_classes = labels.len();
        if examples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "split {split} has no examples"
            )));
        }
        if let Some(bad) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} >= {num_classes} classes",
                bad.label
            )));
        }
        Ok(Self {
            split: split.to_string(),
            examples,
            num_classes,
            metric: metric.to_string(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples
            .iter()
            .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
    }

    /// Writes the split as a TSV with a header row.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let pair = self.examples.iter().any(|e| e.text_b.is_some());
        let mut out = Vec::new();
        let header = if pair {
            "text_a\ttext_b\tlabel"
        } else {
            "sentence\tlabel"
        };
        writeln!(out, "{header}").expect("write to Vec");
        for e in &self.examples {
            let label = &self.labels.names[e.label];
            match (&e.text_b, pair) {
                (Some(b), true) => writeln!(out, "{}\t{}\t{}", e.text_a, b, label),
                (None, true) => writeln!(out, "{}\t\t{}", e.text_a, label),
                _ => writeln!(out, "{}\t{}", e.text_a, label),
            }
            .expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Names of the TSV columns holding each field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: String,
}

impl ColumnSchema {
    /// SST-2 layout: `sentence`, `label`.
    pub fn single_sentence() -> Self {
        Self {
            text_a: "sentence".into(),
            text_b: None,
            label: "label".into(),
        }
    }

    pub fn sentence_pair(a: &str, b: &str) -> Self {
        Self {
            text_a: a.into(),
            text_b: Some(b.into()),
            label: "label".into(),
        }
    }
}

/// Loads a TSV split, assigning fresh class ids in first-appearance order.
pub fn load_dataset(
    path: &Path,
    schema: &ColumnSchema,
    split: &str,
    metric: &str,
) -> Result<Dataset> {
    load_dataset_with_labels(path, schema, split, metric, LabelMap::default())
}

/// Loads a TSV split reusing (and extending) an existing label mapping,
/// so dev splits agree with their train split.
pub fn load_dataset_with_labels(
    path: &Path,
    schema: &ColumnSchema,
    split: &str,
    metric: &str,
    mut labels: LabelMap,
) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    if std::str::from_utf8(&bytes).is_err() {
        return Err(Error::NotUtf8 {
            path: path.to_path_buf(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let parse_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let headers = reader.headers().map_err(parse_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let a_idx = col(&schema.text_a)?;
    let b_idx = schema.text_b.as_deref().map(col).transpose()?;
    let y_idx = col(&schema.label)?;
    let mut examples = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(parse_err)?;
        let field = |i: usize| {
            rec.get(i).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                msg: format!(
                    "row {} has {} fields, expected column {}",
                    line + 2,
                    rec.len(),
                    i + 1
                ),
            })
        };
        let text_a = field(a_idx)?.trim().to_string();
        if text_a.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("row {} has empty text", line + 2),
            });
        }
        let text_b = b_idx.map(field).transpose()?.map(|s| s.trim().to_string());
        let label = labels.id_or_insert(field(y_idx)?.trim());
        examples.push(Example {
            text_a,
            text_b,
            label,
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Dataset::new(split, examples, labels, metric)
}

/// Train and dev splits of one task sharing a label mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub train: Dataset,
    pub dev: Dataset,
}

impl TaskData {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes.max(self.dev.num_classes)
    }

    /// Loads `train.tsv` and `dev.tsv` from a directory.
    pub fn load_dir(dir: &Path, name: &str, schema: &ColumnSchema, metric: &str) -> Result<Self> {
        let train = load_dataset(&dir.join("train.tsv"), schema, "train", metric)?;
        let dev = load_dataset_with_labels(
            &dir.join("dev.tsv"),
            schema,
            "dev",
            metric,
            train.labels.clone(),
        )?;
        let mut train = train;
        let mut dev = dev;
        // Integer label names keep their own value as class id.
        if let Some(perm) = dev.labels.integer_permutation() {
            let names: Vec<String> = (0..perm.len()).map(|i| i.to_string()).collect();
            for d in [&mut train, &mut dev] {
                d.examples.iter_mut().for_each(|e| e.label = perm[e.label]);
                d.labels.names = names.clone();
            }
        }
        train.labels = dev.labels.clone();
        train.num_classes = dev.num_classes;
        Ok(Self {
            name: name.to_string(),
            train,
            dev,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_tsv(&dir.join("train.tsv"))?;
        self.dev.write_tsv(&dir.join("dev.tsv"))
    }
}
