//! Pseudo-label generation from feature-map response statistics.
//!
//! Stage one walks the training set in inference mode and averages each conv
//! feature map's spatial mean response per class, giving the response
//! histogram h[f][m]. Stage two revisits every training image: for its own
//! class the pseudo-probability is pinned at the positive target; for any
//! other class m, a map whose response v lands inside the band
//! gamma*h[f][m] <= v <= h[f][m] contributes v/h[f][m], anything else
//! contributes the negative target; contributions are averaged over all maps.
//! The stored weak labels are never touched.

use std::io::Write;
use std::path::Path;

use crate::data::{Split, WeakDataset};
use crate::error::{Error, Result};
use crate::nn::{extract_feature_responses, Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A feature map's position: which conv layer, which output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMapId {
    pub layer: usize,
    pub channel: usize,
}

/// Mean response of every conv feature map per attribute class (h_f^m), plus
/// the per-class image counts the means were taken over.
#[derive(Debug, Clone)]
pub struct ResponseHistogram {
    maps: Vec<FeatureMapId>,
    /// values[f][m]
    values: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ResponseHistogram {
    pub fn maps(&self) -> &[FeatureMapId] {
        &self.maps
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn value(&self, map: usize, class: usize) -> f64 {
        self.values[map][class]
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, attributes: &[String]) -> std::io::Result<()> {
        write!(w, "map,layer,channel")?;
        for a in attributes {
            write!(w, ",{a}")?;
        }
        writeln!(w)?;
        for (f, id) in self.maps.iter().enumerate() {
            write!(w, "{f},{},{}", id.layer, id.channel)?;
            for m in 0..self.num_classes() {
                write!(w, ",{}", self.values[f][m])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Per-image pseudo-label probability vectors from one carving iteration.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub iteration: usize,
    pub gamma: f64,
    /// Row per train item, indexed by the item's position in the dataset.
    item_indices: Vec<usize>,
    item_ids: Vec<String>,
    labels: Vec<Vec<f64>>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Probability vector for the train item at dataset position `item`.
    pub fn for_item(&self, item: usize) -> Option<&[f64]> {
        self.item_indices
            .iter()
            .position(|&i| i == item)
            .map(|pos| self.labels[pos].as_slice())
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &str, &[f64])> {
        self.item_indices
            .iter()
            .zip(self.item_ids.iter())
            .zip(self.labels.iter())
            .map(|((&idx, id), probs)| (idx, id.as_str(), probs.as_slice()))
    }

    /// Stacks the vectors for a batch of dataset item indices into [B, M].
    pub fn target_rows(&self, items: &[usize], classes: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(items.len() * classes);
        for &item in items {
            let row = self.for_item(item).ok_or_else(|| {
                Error::InvalidInput(format!("no pseudo-labels for train item {item}"))
            })?;
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[items.len(), classes], data)
    }

    /// CSV dump: `image_id, class_0 ... class_{M-1}`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let m = self.labels.first().map_or(0, |r| r.len());
        write!(w, "image_id")?;
        for c in 0..m {
            write!(w, ",class_{c}")?;
        }
        writeln!(w)?;
        for (_, id, probs) in self.rows() {
            write!(w, "{id}")?;
            for p in probs {
                write!(w, ",{p}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_csv(&mut f)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Knobs of the carving pass; defaults follow the training procedure the
/// crate implements: band threshold 0.7, weak targets 0.95/0.05.
#[derive(Debug, Clone, Copy)]
pub struct CarveParams {
    pub gamma: f64,
    pub positive_target: f64,
    pub negative_target: f64,
    /// Histogram entries below this are treated as dead maps.
    pub epsilon: f64,
}

impl Default for CarveParams {
    fn default() -> Self {
        CarveParams {
            gamma: 0.7,
            positive_target: 0.95,
            negative_target: 0.05,
            epsilon: 1e-8,
        }
    }
}

const RESPONSE_BATCH: usize = 32;

/// Inference-mode responses of every train item, in dataset order:
/// (item index, flattened per-map responses).
fn collect_train_responses(
    net: &mut Network,
    dataset: &WeakDataset,
) -> Result<(Vec<FeatureMapId>, Vec<(usize, Vec<f64>)>)> {
    let items: Vec<usize> = dataset.split_indices(Split::Train);
    let prev_mode = net.mode();
    net.set_mode(Mode::Inference);
    let mut throwaway = Rng::from_seed(0); // inference consumes no randomness

    let mut map_ids: Vec<FeatureMapId> = Vec::new();
    let mut responses: Vec<(usize, Vec<f64>)> = Vec::with_capacity(items.len());

    for chunk in items.chunks(RESPONSE_BATCH) {
        let batch = dataset.stack_images(chunk)?;
        let (_, trace) = net.forward(&batch, &mut throwaway)?;
        let taps = extract_feature_responses(net, &trace);
        if map_ids.is_empty() {
            for tap in &taps {
                let channels = tap.means.first().map_or(0, |m| m.len());
                for channel in 0..channels {
                    map_ids.push(FeatureMapId {
                        layer: tap.layer,
                        channel,
                    });
                }
            }
        }
        for (bi, &item) in chunk.iter().enumerate() {
            let mut flat = Vec::with_capacity(map_ids.len());
            for tap in &taps {
                flat.extend_from_slice(&tap.means[bi]);
            }
            responses.push((item, flat));
        }
    }

    net.set_mode(prev_mode);
    Ok((map_ids, responses))
}

/// Builds the per-class mean response table over the training split, in
/// inference mode on the current parameters.
pub fn compute_response_histogram(
    net: &mut Network,
    dataset: &WeakDataset,
) -> Result<ResponseHistogram> {
    let classes = dataset.num_attributes();
    let (maps, responses) = collect_train_responses(net, dataset)?;
    if maps.is_empty() {
        return Err(Error::InvalidInput(
            "network has no convolutional feature maps to carve from".into(),
        ));
    }

    let mut sums = vec![vec![0.0; classes]; maps.len()];
    let mut counts = vec![0usize; classes];
    for (item, flat) in &responses {
        let label = dataset.items()[*item]
            .weak_label
            .expect("train item has a weak label");
        counts[label] += 1;
        for (f, &v) in flat.iter().enumerate() {
            sums[f][label] += v;
        }
    }
    for (m, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(dataset.attributes()[m].clone()));
        }
    }
    let values = sums
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(counts.iter())
                .map(|(&s, &n)| s / n as f64)
                .collect()
        })
        .collect();

    Ok(ResponseHistogram {
        maps,
        values,
        counts,
    })
}

/// Emits the pseudo-label probability vector for every train image.
pub fn generate_pseudo_labels(
    net: &mut Network,
    dataset: &WeakDataset,
    hist: &ResponseHistogram,
    params: &CarveParams,
    iteration: usize,
) -> Result<PseudoLabelSet> {
    if !(params.gamma > 0.0 && params.gamma <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "gamma {} not in (0, 1]",
            params.gamma
        )));
    }
    let classes = dataset.num_attributes();
    if hist.num_classes() != classes {
        return Err(Error::InvalidInput(format!(
            "histogram has {} classes, dataset has {classes}",
            hist.num_classes()
        )));
    }
    let (maps, responses) = collect_train_responses(net, dataset)?;
    if maps != hist.maps {
        return Err(Error::InvalidInput(
            "histogram feature maps do not match this network's taps".into(),
        ));
    }

    let n_maps = maps.len();
    let mut item_indices = Vec::with_capacity(responses.len());
    let mut item_ids = Vec::with_capacity(responses.len());
    let mut labels = Vec::with_capacity(responses.len());

    for (item, flat) in &responses {
        let observed = dataset.items()[*item]
            .weak_label
            .expect("train item has a weak label");
        let mut probs = vec![0.0; classes];
        for (m, prob) in probs.iter_mut().enumerate() {
            if m == observed {
                // every map contributes the same positive constant, so the
                // average is that constant, exactly
                *prob = params.positive_target;
                continue;
            }
            let mut acc = 0.0;
            for (f, &v) in flat.iter().enumerate() {
                let h = hist.values[f][m];
                acc += if h < params.epsilon {
                    params.negative_target
                } else if params.gamma * h <= v && v <= h {
                    v / h
                } else {
                    params.negative_target
                };
            }
            *prob = acc / n_maps as f64;
        }
        item_indices.push(*item);
        item_ids.push(dataset.items()[*item].id.clone());
        labels.push(probs);
    }

    Ok(PseudoLabelSet {
        iteration,
        gamma: params.gamma,
        item_indices,
        item_ids,
        labels,
    })
}

/// True at epochs where pseudo-labels are regenerated: the first time once
/// `warmup_epochs` have been reached, then every `period` epochs.
pub fn carving_schedule(epoch: usize, warmup_epochs: usize, period: usize) -> bool {
    debug_assert!(period >= 1);
    epoch >= warmup_epochs && (epoch - warmup_epochs) % period == 0
}
