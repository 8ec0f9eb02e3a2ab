//! Exhaustive nearest-neighbour search over a photo gallery and recall@k.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

pub type PhotoId = usize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Euclidean distance on raw embeddings.
    #[default]
    Euclidean,
    /// `1 - cos(q, e)`.
    Cosine,
}

#[derive(Clone, Debug)]
pub struct GalleryIndex {
    embeddings: Tensor,
    photo_ids: Vec<PhotoId>,
    row_of: HashMap<PhotoId, usize>,
    metric: Metric,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub photo_id: PhotoId,
    pub distance: f64,
}

impl GalleryIndex {
    pub fn new(embeddings: Tensor, photo_ids: Vec<PhotoId>) -> Result<Self> {
        Self::with_metric(embeddings, photo_ids, Metric::Euclidean)
    }

    pub fn with_metric(embeddings: Tensor, photo_ids: Vec<PhotoId>, metric: Metric) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != photo_ids.len() {
            return Err(Error::ShapeMismatch {
                op: "gallery_index",
                lhs: embeddings.shape().to_vec(),
                rhs: vec![photo_ids.len()],
            });
        }
        if photo_ids.is_empty() {
            return Err(Error::arg("gallery must contain at least one photo"));
        }
        let mut row_of = HashMap::with_capacity(photo_ids.len());
        for (row, &id) in photo_ids.iter().enumerate() {
            if row_of.insert(id, row).is_some() {
                return Err(Error::arg(format!("duplicate photo id {id} in gallery")));
            }
        }
        Ok(GalleryIndex {
            embeddings,
            photo_ids,
            row_of,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.photo_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photo_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn contains(&self, id: PhotoId) -> bool {
        self.row_of.contains_key(&id)
    }

    fn distance(&self, query: &[f64], row: usize) -> f64 {
        let e = self.embeddings.row(row);
        match self.metric {
            Metric::Euclidean => sq_dist(query, e).sqrt(),
            Metric::Cosine => {
                let dot: f64 = query.iter().zip(e).map(|(a, b)| a * b).sum();
                let nq = query.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                1.0 - dot / (nq * ne).max(1e-12)
            }
        }
    }

    /// The `k` nearest photos, ascending by distance, ties by photo id.
    pub fn retrieve_topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 || k > self.len() {
            return Err(Error::arg(format!("k must be in 1..={}, got {k}", self.len())));
        }
        if query.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "retrieve_topk",
                lhs: vec![query.len()],
                rhs: vec![self.dim()],
            });
        }
        let mut hits: Vec<Hit> = (0..self.len())
            .map(|row| Hit {
                photo_id: self.photo_ids[row],
                distance: self.distance(query, row),
            })
            .collect();
        let order = |a: &Hit, b: &Hit| -> Ordering {
            a.distance
                .total_cmp(&b.distance)
                .then(a.photo_id.cmp(&b.photo_id))
        };
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// Fraction of queries whose target is among their `k` nearest photos.
    pub fn recall_at_k(&self, queries: &Tensor, targets: &[PhotoId], k: usize) -> Result<f64> {
        if queries.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "recall_at_k",
                lhs: queries.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&missing) = targets.iter().find(|t| !self.contains(**t)) {
            return Err(Error::arg(format!("target photo id {missing} not in gallery")));
        }
        if targets.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (qi, &target) in targets.iter().enumerate() {
            if self
                .retrieve_topk(queries.row(qi), k)?
                .iter()
                .any(|h| h.photo_id == target)
            {
                hits += 1;
            }
        }
        Ok(hits as f64 / targets.len() as f64)
    }
}

/// One evaluation result, as written to metrics JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub run_id: String,
    pub k: usize,
    pub recall: f64,
    pub n_gallery: usize,
    pub n_queries: usize,
    pub seed: u64,
}
