use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Rgb,
    Luminance,
    Ab,
    Synthetic(usize),
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewKind::Rgb => write!(f, "rgb"),
            ViewKind::Luminance => write!(f, "l"),
            ViewKind::Ab => write!(f, "ab"),
            ViewKind::Synthetic(k) => write!(f, "synthetic-{k}"),
        }
    }
}

/// Name, flattened dimensionality and value range of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSpec {
    pub kind: ViewKind,
    pub dim: usize,
    pub range: (f64, f64),
}

/// `N` aligned samples across `M` views. View `m` stores an `N x dim_m`
/// row-major array; row `i` of every view is sample id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    len: usize,
    specs: Vec<ViewSpec>,
    views: Vec<Vec<f64>>,
    labels: Option<Vec<u32>>,
}

/// Rows of a dataset selected by id, one `[n, dim_m]` tensor per view.
#[derive(Clone, Debug)]
pub struct MultiViewBatch {
    pub ids: Vec<usize>,
    pub views: Vec<Tensor>,
}

impl MultiViewBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

const MVDS_MAGIC: &[u8; 8] = b"MVDS0001";

impl MultiViewDataset {
    pub fn new(
        specs: Vec<ViewSpec>,
        views: Vec<Vec<f64>>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if specs.is_empty() || specs.len() != views.len() {
            return Err(Error::invalid(format!(
                "{} view specs for {} view arrays",
                specs.len(),
                views.len()
            )));
        }
        let len = views[0].len().checked_div(specs[0].dim).unwrap_or(0);
        for (s, v) in specs.iter().zip(&views) {
            if s.dim == 0 || v.len() != len * s.dim {
                return Err(Error::invalid(format!(
                    "view {} holds {} values, expected {len} x {}",
                    s.kind,
                    v.len(),
                    s.dim
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::invalid(format!(
                    "{} labels for {len} samples",
                    l.len()
                )));
            }
        }
        Ok(MultiViewDataset {
            len,
            specs,
            views,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_views(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[ViewSpec] {
        &self.specs
    }

    pub fn view(&self, m: usize) -> &[f64] {
        &self.views[m]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn sample(&self, m: usize, id: usize) -> &[f64] {
        let d = self.specs[m].dim;
        &self.views[m][id * d..(id + 1) * d]
    }

    /// Keep only view `m`, e.g. for single-view metric inputs.
    pub fn single_view(&self, m: usize) -> Result<MultiViewDataset> {
        if m >= self.num_views() {
            return Err(Error::invalid(format!("view {m} out of range")));
        }
        MultiViewDataset::new(
            vec![self.specs[m].clone()],
            vec![self.views[m].clone()],
            self.labels.clone(),
        )
    }

    /// View `m` as an `[N, dim]` tensor.
    pub fn view_tensor(&self, m: usize) -> Tensor {
        Tensor::new(vec![self.len, self.specs[m].dim], self.views[m].clone())
            .expect("consistent view")
    }

    pub fn batch(&self, ids: &[usize]) -> Result<MultiViewBatch> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len) {
            return Err(Error::invalid(format!(
                "sample id {bad} out of range 0..{}",
                self.len
            )));
        }
        let views = (0..self.num_views())
            .map(|m| {
                let d = self.specs[m].dim;
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    data.extend_from_slice(self.sample(m, i));
                }
                Tensor::new(vec![ids.len(), d], data).expect("batch shape")
            })
            .collect();
        Ok(MultiViewBatch {
            ids: ids.to_vec(),
            views,
        })
    }

    /// Serialize as MVDS: magic `MVDS0001`; u64 LE counts `N`, `M`, each
    /// view dimension, label count (0 or `N`); each view's `N x dim` f64 LE
    /// array in view order; labels as u32 LE.
    pub fn to_mvds_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MVDS_MAGIC);
        let put = |v: u64, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
        put(self.len as u64, &mut out);
        put(self.num_views() as u64, &mut out);
        for s in &self.specs {
            put(s.dim as u64, &mut out);
        }
        put(self.labels.as_ref().map_or(0, Vec::len) as u64, &mut out);
        for v in &self.views {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(l) = &self.labels {
            for x in l {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_mvds_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MVDS_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad MVDS magic".into(),
            });
        }
        let n = r.u64()? as usize;
        let m = r.u64()? as usize;
        let mut dims = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            dims.push(r.u64()? as usize);
        }
        let nlabels = r.u64()? as usize;
        if nlabels != 0 && nlabels != n {
            return Err(Error::Format {
                offset: r.pos as u64 - 8,
                msg: format!("label count {nlabels} is neither 0 nor {n}"),
            });
        }
        let mut views = Vec::with_capacity(m);
        for &d in &dims {
            let count = n.checked_mul(d).ok_or_else(|| Error::Format {
                offset: r.pos as u64,
                msg: "view size overflow".into(),
            })?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format {
                offset: r.pos as u64,
                msg: "view size overflow".into(),
            })?)?;
            views.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        let labels = if nlabels > 0 {
            let raw = r.take(nlabels * 4)?;
            Some(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after MVDS payload".into(),
            });
        }
        let specs = dims
            .iter()
            .enumerate()
            .map(|(k, &dim)| ViewSpec {
                kind: ViewKind::Synthetic(k),
                dim,
                range: (f64::NEG_INFINITY, f64::INFINITY),
            })
            .collect();
        MultiViewDataset::new(specs, views, labels)
    }

    pub fn save_mvds(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_mvds_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_mvds(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_mvds_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Seeded epoch shuffler with drop-last batching.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={len}"
            )));
        }
        Ok(BatchSampler {
            len,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    /// Sample ids of every batch of `epoch`; the trailing partial batch is dropped.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut ids: Vec<usize> = (0..self.len).collect();
        ids.shuffle(&mut rng::stream(self.seed, &[tag::SHUFFLE, epoch]));
        ids.chunks_exact(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Batches of the first epoch of a seeded shuffle.
pub fn minibatches(
    ds: &MultiViewDataset,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = MultiViewBatch> + '_> {
    let sampler = BatchSampler::new(ds.len(), batch_size, seed)?;
    Ok(sampler
        .epoch(0)
        .into_iter()
        .map(move |ids| ds.batch(&ids).expect("sampler ids in range")))
}
