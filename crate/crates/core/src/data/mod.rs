//! Dataset containers, fold planning, sequence views, and the two-domain
//! batch sampler.
//!
//! An epoch is one fixed-length multichannel window with a class label y,
//! a domain id d (the recording/subject it came from), and its position k
//! inside that recording. Sequence views stack L+1 consecutive epochs from
//! one domain for the staging phase. Batches for pre-training come from
//! exactly two domains with at least two samples each, which is what the
//! per-domain score estimation needs.

pub mod format;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub use format::{read_dataset, write_dataset, DatasetReader};
pub use synth::{synth_generate, SynthConfig};

pub const CLASS_NAMES: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];
pub const N_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub channels: usize,
    pub samples_per_epoch: usize,
    pub sample_rate_hz: f64,
    pub class_names: Vec<String>,
    pub domains: Vec<u16>,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct EpochSample {
    pub d: u16,
    pub y: u8,
    pub k: u32,
    /// (channels, time) signal.
    pub signal: Matrix,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub epochs: Vec<EpochSample>,
}

impl Dataset {
    /// Structural checks: labels in range, domains declared, shapes match
    /// the header, within-domain time ordering.
    pub fn validate(&self) -> Result<()> {
        if self.header.epochs != self.epochs.len() {
            return Err(Error::Corrupt {
                detail: format!(
                    "header says {} epochs, found {}",
                    self.header.epochs,
                    self.epochs.len()
                ),
            });
        }
        let n_classes = self.header.class_names.len();
        let mut last_k: std::collections::BTreeMap<u16, u32> = Default::default();
        for (i, e) in self.epochs.iter().enumerate() {
            if e.y as usize >= n_classes {
                return Err(Error::LabelOutOfRange {
                    kind: "class",
                    value: e.y as u32,
                    max: n_classes as u32 - 1,
                });
            }
            if !self.header.domains.contains(&e.d) {
                return Err(Error::LabelOutOfRange {
                    kind: "domain",
                    value: e.d as u32,
                    max: *self.header.domains.iter().max().unwrap_or(&0) as u32,
                });
            }
            if e.signal.rows() != self.header.channels
                || e.signal.cols() != self.header.samples_per_epoch
            {
                return Err(Error::Dim {
                    context: "Dataset",
                    detail: format!("epoch {i} signal shape mismatch"),
                });
            }
            if !e.signal.is_finite() {
                return Err(Error::NonFinite { context: "Dataset" });
            }
            if let Some(&prev) = last_k.get(&e.d) {
                if e.k <= prev {
                    return Err(Error::Corrupt {
                        detail: format!("domain {} epochs out of time order at index {i}", e.d),
                    });
                }
            }
            last_k.insert(e.d, e.k);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Epoch indices grouped by domain, in dataset order.
    pub fn indices_by_domain(&self) -> Vec<(u16, Vec<usize>)> {
        let mut out: Vec<(u16, Vec<usize>)> = self
            .header
            .domains
            .iter()
            .map(|&d| (d, Vec::new()))
            .collect();
        for (i, e) in self.epochs.iter().enumerate() {
            if let Some(slot) = out.iter_mut().find(|(d, _)| *d == e.d) {
                slot.1.push(i);
            }
        }
        out.retain(|(_, v)| !v.is_empty());
        out
    }

    /// Restrict to the given domains, preserving order.
    pub fn restrict_to_domains(&self, domains: &[u16]) -> Dataset {
        let epochs: Vec<EpochSample> = self
            .epochs
            .iter()
            .filter(|e| domains.contains(&e.d))
            .cloned()
            .collect();
        let mut header = self.header.clone();
        header.domains = self
            .header
            .domains
            .iter()
            .copied()
            .filter(|d| domains.contains(d))
            .collect();
        header.epochs = epochs.len();
        Dataset { header, epochs }
    }
}

/// L+1 consecutive epochs from one domain; `indices` point into the
/// dataset's epoch list and the target is the final epoch's label.
#[derive(Debug, Clone)]
pub struct SequenceView {
    pub indices: Vec<usize>,
    pub domain: u16,
    pub target: u8,
}

/// All length-(l+1) windows whose epochs are consecutive in k within one
/// domain. Gaps in k or domain changes break windows; nothing ever spans
/// a boundary.
pub fn sequence_views(ds: &Dataset, l: usize) -> Vec<SequenceView> {
    let mut out = Vec::new();
    for (domain, idxs) in ds.indices_by_domain() {
        if idxs.len() < l + 1 {
            continue;
        }
        for w in idxs.windows(l + 1) {
            let contiguous = w
                .windows(2)
                .all(|p| ds.epochs[p[1]].k == ds.epochs[p[0]].k + 1);
            if contiguous {
                out.push(SequenceView {
                    indices: w.to_vec(),
                    domain,
                    target: ds.epochs[*w.last().unwrap()].y,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub train: Vec<u16>,
    pub val: Vec<u16>,
    pub test: Vec<u16>,
}

/// Domain-level k-fold split. Domains are shuffled once by `seed`, cut
/// into k test chunks (each domain tests exactly once across folds), and
/// the remainder is divided train:val at roughly 15:4, with at least one
/// validation domain.
pub fn kfold_split(domains: &[u16], k: usize, fold: usize, seed: u64) -> Result<FoldPlan> {
    let m = domains.len();
    let mut unique = domains.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != m {
        return Err(Error::InvalidArg {
            context: "kfold_split",
            detail: "duplicate domain ids".into(),
        });
    }
    if k < 2 || k > m {
        return Err(Error::InvalidArg {
            context: "kfold_split",
            detail: format!("k = {k} with {m} domains"),
        });
    }
    if fold >= k {
        return Err(Error::InvalidArg {
            context: "kfold_split",
            detail: format!("fold {fold} >= k {k}"),
        });
    }
    if m < 3 {
        return Err(Error::InvalidArg {
            context: "kfold_split",
            detail: "need at least 3 domains for train/val/test".into(),
        });
    }

    let mut order = unique;
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);

    // Chunk sizes m/k, the first m % k chunks one larger.
    let base = m / k;
    let extra = m % k;
    let mut start = 0;
    let mut test = Vec::new();
    for c in 0..=fold {
        let size = base + usize::from(c < extra);
        if c == fold {
            test = order[start..start + size].to_vec();
        }
        start += size;
    }

    let remaining: Vec<u16> = order.iter().copied().filter(|d| !test.contains(d)).collect();
    let val_count = (((m - test.len()) as f64) * 4.0 / 19.0)
        .round()
        .max(1.0) as usize;
    let val_count = val_count.min(remaining.len() - 1);
    // Rotate so different folds validate on different domains.
    let offset = (fold * val_count) % remaining.len();
    let mut val = Vec::with_capacity(val_count);
    for i in 0..val_count {
        val.push(remaining[(offset + i) % remaining.len()]);
    }
    let train: Vec<u16> = remaining
        .iter()
        .copied()
        .filter(|d| !val.contains(d))
        .collect();
    Ok(FoldPlan { train, val, test })
}

/// Batch sampler drawing every batch from exactly two distinct domains,
/// each contributing at least two samples.
pub struct TwoDomainSampler {
    pools: Vec<(u16, Vec<usize>)>,
    batch_size: usize,
}

impl TwoDomainSampler {
    pub fn new(ds: &Dataset, batch_size: usize) -> Result<Self> {
        if batch_size < 4 {
            return Err(Error::InvalidArg {
                context: "TwoDomainSampler",
                detail: format!("batch_size {batch_size} < 4"),
            });
        }
        let pools: Vec<(u16, Vec<usize>)> = ds
            .indices_by_domain()
            .into_iter()
            .filter(|(_, v)| v.len() >= 2)
            .collect();
        if pools.len() < 2 {
            return Err(Error::InsufficientSamples {
                context: "TwoDomainSampler",
                need: 2,
                got: pools.len(),
            });
        }
        Ok(TwoDomainSampler { pools, batch_size })
    }

    /// Draw one batch of epoch indices. The two domains are a uniformly
    /// random unordered pair; the batch splits as evenly between them as
    /// their pools allow, without replacement within the batch.
    pub fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        let e = self.pools.len();
        let a = rng.usize_below(e);
        let mut b = rng.usize_below(e - 1);
        if b >= a {
            b += 1;
        }
        let (pa, pb) = (&self.pools[a].1, &self.pools[b].1);
        let half = self.batch_size / 2;
        let na = half.clamp(2, pa.len());
        let nb = (self.batch_size - na).clamp(2, pb.len());

        let mut batch = Vec::with_capacity(na + nb);
        for (pool, n) in [(pa, na), (pb, nb)] {
            let mut scratch = pool.clone();
            rng.shuffle(&mut scratch);
            batch.extend_from_slice(&scratch[..n]);
        }
        batch
    }
}
