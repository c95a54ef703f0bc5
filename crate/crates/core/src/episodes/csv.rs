use std::collections::BTreeMap;
use std::path::Path;

use super::dataset::{split_base_novel, ClassEntry, Dataset, DatasetManifest, DomainEntry};
use crate::error::{CoreError, Result};

/// Column roles for tabular ingestion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub label: String,
    pub domain: String,
    /// Feature columns in order; `None` takes every other column.
    pub features: Option<Vec<String>>,
    /// Number of base classes; defaults to 60 % of the classes (at least 1).
    pub n_base: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label: "label".into(),
            domain: "domain".into(),
            features: None,
            n_base: None,
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CoreError::Csv {
            row: 0,
            message: format!("missing column {name:?}"),
        })
}

/// Reads a rectangular CSV with a header row into a vector-mode dataset
/// (`features × 1 × 1` per row). Classes and domains get ids in sorted name
/// order.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CoreError::io(path, e))?;
    let headers = reader.headers().map_err(|e| CoreError::io(path, e))?.clone();
    let label_col = column(&headers, &schema.label)?;
    let domain_col = column(&headers, &schema.domain)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| column(&headers, n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != label_col && i != domain_col).collect(),
    };
    if feature_cols.is_empty() {
        return Err(CoreError::Csv {
            row: 0,
            message: "no feature columns".into(),
        });
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CoreError::Csv {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(CoreError::Csv {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let features = feature_cols
            .iter()
            .map(|&c| {
                let cell = record[c].trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CoreError::Csv {
                        row,
                        message: format!("column {:?}: {cell:?} is not a finite number", &headers[c]),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((record[label_col].trim().to_string(), record[domain_col].trim().to_string(), features));
    }
    if rows.is_empty() {
        return Err(CoreError::Csv {
            row: 0,
            message: "file has no data rows".into(),
        });
    }

    let class_ids: BTreeMap<&str, usize> = index_names(rows.iter().map(|r| r.0.as_str()));
    let domain_ids: BTreeMap<&str, usize> = index_names(rows.iter().map(|r| r.1.as_str()));
    let n_classes = class_ids.len();
    let n_base = schema
        .n_base
        .unwrap_or_else(|| (n_classes * 6 / 10).max(1));
    let (base, novel) = if n_classes == 1 && schema.n_base.is_none() {
        (vec![0], vec![])
    } else {
        split_base_novel(n_classes, n_base)?
    };

    let mut cells = vec![vec![Vec::new(); n_classes]; domain_ids.len()];
    for (label, domain, features) in &rows {
        cells[domain_ids[domain.as_str()]][class_ids[label.as_str()]].extend_from_slice(features);
    }
    let manifest = DatasetManifest {
        image_shape: [feature_cols.len(), 1, 1],
        classes: entries(&class_ids)
            .into_iter()
            .map(|(id, name)| ClassEntry { id, name })
            .collect(),
        base,
        novel,
        domains: entries(&domain_ids)
            .into_iter()
            .map(|(id, name)| DomainEntry { id, name })
            .collect(),
        samples_per_cell: None,
        files: Vec::new(),
        generator: None,
    };
    Dataset::new(manifest, cells)
}

fn index_names<'a>(names: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut map: BTreeMap<&str, usize> = names.map(|n| (n, 0)).collect();
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

fn entries(map: &BTreeMap<&str, usize>) -> Vec<(usize, String)> {
    map.iter().map(|(n, &i)| (i, n.to_string())).collect()
}
