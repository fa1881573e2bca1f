//! Region-feature store: a JSON index plus a flat little-endian `f32` file
//! of `features ‖ box` rows.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{ModelError, VisualInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEntry {
    /// First row in the binary file.
    pub offset: usize,
    pub num_regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegionIndex {
    region_feat_dim: usize,
    images: IndexMap<String, RegionEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStore {
    feat_dim: usize,
    images: IndexMap<String, RegionEntry>,
    rows: Vec<f32>,
}

impl RegionStore {
    pub fn new(feat_dim: usize) -> Self {
        Self {
            feat_dim,
            images: IndexMap::new(),
            rows: Vec::new(),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn contains(&self, image_ref: &str) -> bool {
        self.images.contains_key(image_ref)
    }

    fn row_width(&self) -> usize {
        self.feat_dim + 4
    }

    /// Stores (or replaces) an image. Values are kept at `f32` precision.
    pub fn insert(&mut self, image_ref: &str, vis: &VisualInput) -> Result<(), ModelError> {
        if vis.features.ncols() != self.feat_dim
            || vis.boxes.ncols() != 4
            || vis.boxes.nrows() != vis.features.nrows()
        {
            return Err(ModelError::Shape(format!(
                "image `{image_ref}`: features {:?} and boxes {:?} do not fit feature dim {}",
                vis.features.dim(),
                vis.boxes.dim(),
                self.feat_dim
            )));
        }
        let offset = self.rows.len() / self.row_width();
        for r in 0..vis.features.nrows() {
            self.rows
                .extend(vis.features.row(r).iter().map(|&v| v as f32));
            self.rows.extend(vis.boxes.row(r).iter().map(|&v| v as f32));
        }
        self.images.insert(
            image_ref.to_string(),
            RegionEntry {
                offset,
                num_regions: vis.features.nrows(),
            },
        );
        Ok(())
    }

    pub fn get(&self, image_ref: &str) -> Option<VisualInput> {
        let entry = self.images.get(image_ref)?;
        let w = self.row_width();
        let start = entry.offset * w;
        let block = &self.rows[start..start + entry.num_regions * w];
        let all = Array2::from_shape_fn((entry.num_regions, w), |(r, c)| block[r * w + c] as f64);
        Some(VisualInput {
            features: all.slice(s![.., ..self.feat_dim]).to_owned(),
            boxes: all.slice(s![.., self.feat_dim..]).to_owned(),
        })
    }

    pub fn save(
        &self,
        index_path: impl AsRef<Path>,
        bin_path: impl AsRef<Path>,
    ) -> Result<(), ModelError> {
        let index = RegionIndex {
            region_feat_dim: self.feat_dim,
            images: self.images.clone(),
        };
        fs::write(index_path, serde_json::to_vec_pretty(&index)?)?;
        let bytes: Vec<u8> = self.rows.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(bin_path, bytes)?;
        Ok(())
    }

    pub fn load(
        index_path: impl AsRef<Path>,
        bin_path: impl AsRef<Path>,
    ) -> Result<Self, ModelError> {
        let index: RegionIndex = serde_json::from_slice(&fs::read(index_path)?)?;
        let bytes = fs::read(bin_path)?;
        if bytes.len() % 4 != 0 {
            return Err(ModelError::Regions(
                "binary length is not a multiple of 4".into(),
            ));
        }
        let rows: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let width = index.region_feat_dim + 4;
        let total_rows = rows.len() / width;
        for (name, e) in &index.images {
            if e.offset + e.num_regions > total_rows {
                return Err(ModelError::Regions(format!(
                    "image `{name}` points past the end of the binary"
                )));
            }
        }
        Ok(Self {
            feat_dim: index.region_feat_dim,
            images: index.images,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_through_files() {
        let mut store = RegionStore::new(2);
        let a = VisualInput {
            features: array![[0.5, -1.25], [3.0, 0.125]],
            boxes: array![[0.0, 0.0, 0.5, 0.5], [0.25, 0.25, 1.0, 1.0]],
        };
        let b = VisualInput {
            features: array![[1.0, 2.0]],
            boxes: array![[0.1, 0.2, 0.3, 0.4]],
        };
        store.insert("a", &a).unwrap();
        store.insert("b", &b).unwrap();
        assert_eq!(store.get("a").unwrap(), a);

        let dir = tempfile::tempdir().unwrap();
        let (ip, bp) = (
            dir.path().join("regions.json"),
            dir.path().join("regions.bin"),
        );
        store.save(&ip, &bp).unwrap();
        assert_eq!(fs::metadata(&bp).unwrap().len(), 3 * 6 * 4);
        let loaded = RegionStore::load(&ip, &bp).unwrap();
        assert_eq!(loaded, store);
        // f32 storage
        assert_eq!(loaded.get("b").unwrap().boxes[[0, 0]], 0.1f32 as f64);
        assert!(loaded.get("c").is_none());
    }
}
