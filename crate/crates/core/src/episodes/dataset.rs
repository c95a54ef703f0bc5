use std::fs;
use std::path::{Path, PathBuf};

use afa_tensor::{load_tensor_file, save_tensor_file, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub id: usize,
    pub name: String,
}

/// One rank-4 tensor file holding every sample of a (domain, class) cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFile {
    pub domain: usize,
    pub class: usize,
    pub count: usize,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `[C, H, W]` of a single sample.
    pub image_shape: [usize; 3],
    pub classes: Vec<ClassEntry>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub domains: Vec<DomainEntry>,
    /// Set when every cell has the same count.
    #[serde(default)]
    pub samples_per_cell: Option<usize>,
    pub files: Vec<CellFile>,
    /// Generator parameters, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.image_shape.contains(&0) {
            return Err(CoreError::config("image shape has a zero extent"));
        }
        let n = self.classes.len();
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(CoreError::config(format!("class ids must be 0..{n} in order")));
            }
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.id != i {
                return Err(CoreError::config("domain ids must be contiguous from 0"));
            }
        }
        let mut seen = vec![false; n];
        for &c in self.base.iter().chain(&self.novel) {
            if c >= n {
                return Err(CoreError::config(format!("class {c} is not declared")));
            }
            if seen[c] {
                return Err(CoreError::config(format!("class {c} listed in both base and novel")));
            }
            seen[c] = true;
        }
        for f in &self.files {
            if f.class >= n || f.domain >= self.domains.len() {
                return Err(CoreError::config(format!("file {} references an undeclared cell", f.path)));
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.files.iter().map(|f| f.count).sum()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| {
                CoreError::config(format!(
                    "unknown domain {name:?}; available: {}",
                    self.domains.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join(", ")
                ))
            })
    }

    pub fn sample_len(&self) -> usize {
        self.image_shape.iter().product()
    }
}

/// First `n_base` class ids are base, the rest novel.
pub fn split_base_novel(classes: usize, n_base: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_base == 0 || n_base >= classes {
        return Err(CoreError::config(format!(
            "n_base must be in 1..{classes}, got {n_base}"
        )));
    }
    Ok(((0..n_base).collect(), (n_base..classes).collect()))
}

/// In-memory dataset: one flat block of samples per (domain, class) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `cells[domain][class]`: `count × sample_len` values, f32-exact.
    cells: Vec<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(mut manifest: DatasetManifest, cells: Vec<Vec<Vec<f64>>>) -> Result<Dataset> {
        let len = manifest.sample_len();
        if cells.len() != manifest.domains.len()
            || cells.iter().any(|d| d.len() != manifest.classes.len())
        {
            return Err(CoreError::config("cell grid does not match declared domains × classes"));
        }
        let mut files = Vec::new();
        for (d, row) in cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if cell.len() % len != 0 {
                    return Err(CoreError::config(format!("cell ({d}, {c}) is not a whole number of samples")));
                }
                files.push(CellFile {
                    domain: d,
                    class: c,
                    count: cell.len() / len,
                    path: format!(
                        "{}/class{:03}.afat",
                        sanitize(&manifest.domains[d].name),
                        c
                    ),
                });
            }
        }
        let first = files.first().map(|f| f.count);
        manifest.samples_per_cell = first.filter(|&n| files.iter().all(|f| f.count == n));
        manifest.files = files;
        manifest.validate()?;
        let cells = cells
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.into_iter().map(|v| v as f32 as f64).collect()).collect())
            .collect();
        Ok(Dataset { manifest, cells })
    }

    pub fn count(&self, domain: usize, class: usize) -> usize {
        self.cells[domain][class].len() / self.manifest.sample_len()
    }

    pub fn sample(&self, domain: usize, class: usize, index: usize) -> &[f64] {
        let len = self.manifest.sample_len();
        &self.cells[domain][class][index * len..(index + 1) * len]
    }

    pub fn cell_tensor(&self, domain: usize, class: usize) -> Tensor {
        let [c, h, w] = self.manifest.image_shape;
        Tensor::new(&[self.count(domain, class), c, h, w], self.cells[domain][class].clone())
            .expect("validated cell")
    }

    /// Writes `manifest.json` plus one AFAT file per cell.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        for f in &self.manifest.files {
            let path = dir.join(&f.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
            }
            if f.count == 0 {
                continue;
            }
            save_tensor_file(&path, &self.cell_tensor(f.domain, f.class))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| CoreError::io(&path, e))?;
        Ok(path)
    }

    /// Loads a manifest (file or containing directory) and its tensors,
    /// checking every file against the declared shape and count.
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(&manifest_path).map_err(|e| CoreError::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| CoreError::Json {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
        manifest.validate()?;
        let mut cells = vec![vec![Vec::new(); manifest.classes.len()]; manifest.domains.len()];
        for f in &manifest.files {
            if f.count == 0 {
                continue;
            }
            let path = dir.join(&f.path);
            let t = load_tensor_file(&path).map_err(|e| match e {
                afa_tensor::TensorError::Io { .. } => CoreError::Tensor(e),
                other => CoreError::io(&path, other),
            })?;
            let [c, h, w] = manifest.image_shape;
            if t.shape() != [f.count, c, h, w] {
                return Err(CoreError::io(
                    &path,
                    format!("expected shape {:?}, found {:?}", [f.count, c, h, w], t.shape()),
                ));
            }
            cells[f.domain][f.class] = t.into_data();
        }
        Dataset::new(manifest, cells)
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
