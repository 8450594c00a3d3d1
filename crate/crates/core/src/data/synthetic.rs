use crate::error::{DdclError, Result};
use crate::numerics::{Matrix, SeededRng};

use super::LabeledDataset;

/// Isotropic Gaussian clusters with centres on a regular simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobParams {
    pub k: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around each centre.
    pub spread: f64,
    /// Euclidean distance between any two centres.
    pub separation: f64,
}

impl BlobParams {
    pub fn new(k: usize, per_class: usize, dim: usize, spread: f64) -> Self {
        Self { k, per_class, dim, spread, separation: 1.0 }
    }

    /// Simplex vertices `(s/√2)·e_c` re-centred at the origin, one row per class.
    pub fn centers(&self) -> Matrix {
        let scale = self.separation / 2f64.sqrt();
        let mut c = Matrix::zeros(self.k, self.dim);
        let shift = scale / self.k as f64;
        for i in 0..self.k {
            let row = c.row_mut(i);
            for (j, v) in row.iter_mut().enumerate().take(self.k) {
                *v = if i == j { scale - shift } else { -shift };
            }
        }
        c
    }
}

pub fn generate_blobs(params: &BlobParams, seed: u64) -> Result<LabeledDataset> {
    if params.k < 2 {
        return Err(DdclError::invalid("k", "blobs need at least two classes"));
    }
    if params.dim < params.k {
        return Err(DdclError::invalid("dim", "simplex centres need dim >= k"));
    }
    if params.per_class == 0 {
        return Err(DdclError::invalid("per_class", "must be positive"));
    }
    if !(params.spread >= 0.0 && params.spread.is_finite()) {
        return Err(DdclError::invalid("spread", "must be finite and non-negative"));
    }
    if !(params.separation > 0.0 && params.separation.is_finite()) {
        return Err(DdclError::invalid("separation", "must be finite and positive"));
    }
    let centers = params.centers();
    let mut rng = SeededRng::new(seed);
    let n = params.k * params.per_class;
    let mut data = Vec::with_capacity(n * params.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % params.k;
        labels.push(c);
        for &mu in centers.row(c) {
            data.push(mu + params.spread * rng.normal());
        }
    }
    let names = (0..params.dim).map(|j| format!("x{j}")).collect();
    LabeledDataset::new(Matrix::new(n, params.dim, data)?, labels, names)
}

/// Topics whose documents draw tokens from a topic-specific Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusParams {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub tokens_per_doc: usize,
    pub dim: usize,
    /// Mixture components per topic.
    pub subtopics: usize,
    pub topic_spread: f64,
    pub subtopic_spread: f64,
    pub token_noise: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            topics: 20,
            docs_per_topic: 50,
            tokens_per_doc: 32,
            dim: 64,
            subtopics: 3,
            topic_spread: 1.0,
            subtopic_spread: 0.5,
            token_noise: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Matrix>,
    pub topics: Vec<usize>,
    pub dim: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// All tokens stacked in document order.
    pub fn stacked_tokens(&self) -> Matrix {
        let total: usize = self.docs.iter().map(Matrix::rows).sum();
        let mut data = Vec::with_capacity(total * self.dim);
        for d in &self.docs {
            data.extend_from_slice(d.as_slice());
        }
        Matrix::from_vec_unchecked(total, self.dim, data)
    }
}

pub fn generate_corpus(params: &CorpusParams, seed: u64) -> Result<Corpus> {
    if params.topics == 0 || params.docs_per_topic == 0 || params.tokens_per_doc == 0 {
        return Err(DdclError::invalid("corpus", "topics, docs and tokens must be positive"));
    }
    if params.dim == 0 || params.subtopics == 0 {
        return Err(DdclError::invalid("corpus", "dim and subtopics must be positive"));
    }
    for (name, v) in [
        ("topic_spread", params.topic_spread),
        ("subtopic_spread", params.subtopic_spread),
        ("token_noise", params.token_noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(DdclError::invalid(name, "must be finite and non-negative"));
        }
    }
    let root = SeededRng::new(seed);
    let mut centers_rng = root.split(0);
    let mut tokens_rng = root.split(1);
    let dim = params.dim;

    let mut sub_centers: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.topics);
    for _ in 0..params.topics {
        let topic: Vec<f64> = (0..dim).map(|_| params.topic_spread * centers_rng.normal()).collect();
        let subs = (0..params.subtopics)
            .map(|_| topic.iter().map(|t| t + params.subtopic_spread * centers_rng.normal()).collect())
            .collect();
        sub_centers.push(subs);
    }

    let n_docs = params.topics * params.docs_per_topic;
    let mut docs = Vec::with_capacity(n_docs);
    let mut topics = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let t = i % params.topics;
        topics.push(t);
        let mut data = Vec::with_capacity(params.tokens_per_doc * dim);
        for _ in 0..params.tokens_per_doc {
            let s = &sub_centers[t][tokens_rng.index(params.subtopics)];
            data.extend(s.iter().map(|c| c + params.token_noise * tokens_rng.normal()));
        }
        docs.push(Matrix::from_vec_unchecked(params.tokens_per_doc, dim, data));
    }
    Ok(Corpus { docs, topics, dim })
}

/// Gaussian-mixture latent tokens with a fixed set of group centres and a
/// fresh sample per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStreamParams {
    pub groups: usize,
    pub dim: usize,
    pub tokens_per_epoch: usize,
    /// Standard deviation of the group centres per coordinate.
    pub center_scale: f64,
    /// Standard deviation of tokens around their group centre.
    pub spread: f64,
}

impl Default for TokenStreamParams {
    fn default() -> Self {
        Self { groups: 8, dim: 32, tokens_per_epoch: 4096, center_scale: 1.0, spread: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct TokenStream {
    params: TokenStreamParams,
    centers: Matrix,
    root: SeededRng,
}

impl TokenStream {
    pub fn new(params: TokenStreamParams, seed: u64) -> Result<Self> {
        if params.groups == 0 || params.dim == 0 || params.tokens_per_epoch == 0 {
            return Err(DdclError::invalid("token_stream", "groups, dim and tokens must be positive"));
        }
        if !(params.center_scale >= 0.0 && params.spread >= 0.0)
            || !params.center_scale.is_finite()
            || !params.spread.is_finite()
        {
            return Err(DdclError::invalid("token_stream", "scales must be finite and non-negative"));
        }
        let root = SeededRng::new(seed);
        let mut rng = root.split(0);
        let data = (0..params.groups * params.dim)
            .map(|_| params.center_scale * rng.normal())
            .collect();
        let centers = Matrix::from_vec_unchecked(params.groups, params.dim, data);
        Ok(Self { params, centers, root })
    }

    pub fn params(&self) -> &TokenStreamParams {
        &self.params
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    /// Tokens for `epoch`; the same epoch always yields the same sample.
    pub fn epoch(&self, epoch: usize) -> LabeledDataset {
        let p = &self.params;
        let mut rng = self.root.split(epoch as u64 + 1);
        let mut data = Vec::with_capacity(p.tokens_per_epoch * p.dim);
        let mut labels = Vec::with_capacity(p.tokens_per_epoch);
        for _ in 0..p.tokens_per_epoch {
            let g = rng.index(p.groups);
            labels.push(g);
            data.extend(self.centers.row(g).iter().map(|c| c + p.spread * rng.normal()));
        }
        let names = (0..p.dim).map(|j| format!("z{j}")).collect();
        LabeledDataset {
            x: Matrix::from_vec_unchecked(p.tokens_per_epoch, p.dim, data),
            y: labels,
            feature_names: names,
        }
    }
}
