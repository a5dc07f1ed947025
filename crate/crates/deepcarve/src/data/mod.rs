//! Weakly supervised dataset model and its on-disk format.
//!
//! Train and val items carry exactly one positive class label; test items
//! carry the full multi-label ground truth. Layout on disk:
//!
//! ```text
//! root/attributes.txt            one attribute name per line, order defines indices
//! root/train/<class>/*.pgm|png   weakly labeled by directory
//! root/val/<class>/*.pgm|png
//! root/test/images/*.pgm|png
//! root/test/labels.csv           image_id, semicolon-separated attribute names
//! ```
//!
//! Pixels are normalized to [0,1] as byte/255, so a write/load round trip is
//! bit-exact.

mod synth;

pub use synth::{generate_synthetic, Motif, SplitCounts, SynthSpec};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataItem {
    pub id: String,
    /// [C, H, W], values in [0, 1].
    pub pixels: Tensor,
    pub split: Split,
    /// Single positive class for train/val items.
    pub weak_label: Option<usize>,
    /// Sorted ground-truth attribute indices; test items only.
    pub full_labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct WeakDataset {
    attributes: Vec<String>,
    items: Vec<DataItem>,
    image_shape: [usize; 3],
}

impl WeakDataset {
    pub fn from_parts(attributes: Vec<String>, items: Vec<DataItem>) -> Result<WeakDataset> {
        if attributes.is_empty() {
            return Err(Error::InvalidInput("dataset has no attributes".into()));
        }
        if items.is_empty() {
            return Err(Error::InvalidInput("dataset has no items".into()));
        }
        let m = attributes.len();
        let shape = items[0].pixels.shape();
        if shape.len() != 3 {
            return Err(Error::BadShape {
                op: "dataset",
                expected: "[C, H, W] image tensors",
                shape: shape.to_vec(),
            });
        }
        let image_shape = [shape[0], shape[1], shape[2]];
        for item in &items {
            if item.pixels.shape() != image_shape {
                return Err(Error::InvalidInput(format!(
                    "image {} has shape {:?}, dataset uses {:?}",
                    item.id,
                    item.pixels.shape(),
                    image_shape
                )));
            }
            match item.split {
                Split::Train | Split::Val => {
                    let Some(label) = item.weak_label else {
                        return Err(Error::InvalidInput(format!(
                            "{} item {} has no weak label",
                            item.split.dir_name(),
                            item.id
                        )));
                    };
                    if label >= m {
                        return Err(Error::LabelOutOfRange { label, classes: m });
                    }
                }
                Split::Test => {
                    if item.full_labels.is_empty() {
                        return Err(Error::InvalidInput(format!(
                            "test item {} has no ground-truth labels",
                            item.id
                        )));
                    }
                    if item.full_labels.iter().any(|&l| l >= m) {
                        return Err(Error::LabelOutOfRange {
                            label: *item.full_labels.iter().max().unwrap(),
                            classes: m,
                        });
                    }
                }
            }
        }
        Ok(WeakDataset {
            attributes,
            items,
            image_shape,
        })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn items(&self) -> &[DataItem] {
        &self.items
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.items.iter().filter(|it| it.split == split).count()
    }

    /// Per-class item counts within a split (by weak label).
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_attributes()];
        for it in self.items.iter().filter(|it| it.split == split) {
            if let Some(l) = it.weak_label {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Stacks the given items into a [B, C, H, W] batch tensor.
    pub fn stack_images(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.items[i].pixels.data());
        }
        Tensor::from_vec(&[indices.len(), c, h, w], data)
    }

    pub fn weak_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .map(|&i| self.items[i].weak_label.expect("item has a weak label"))
            .collect()
    }

    /// Stable fingerprint of every item's id and weak label — the audit that
    /// training never rewrites the stored labels.
    pub fn weak_label_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for it in &self.items {
            h.write_str(&it.id);
            match it.weak_label {
                Some(l) => h.write_u64(l as u64 + 1),
                None => h.write_u64(0),
            };
        }
        h.finish()
    }
}

/// Row-normalized attribute co-occurrence counts over a split's ground truth.
/// Row i is over images containing attribute i; entry (i, j) is the fraction
/// of those that also contain j, so the diagonal is exactly 1 wherever the
/// row class is nonempty.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    size: usize,
    values: Vec<f64>,
    defined: Vec<bool>,
}

impl CooccurrenceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// False where no image in the split contains the row attribute.
    pub fn row_defined(&self, i: usize) -> bool {
        self.defined[i]
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, attributes: &[String]) -> std::io::Result<()> {
        write!(w, "attribute")?;
        for a in attributes {
            write!(w, ",{a}")?;
        }
        writeln!(w, ",defined")?;
        for i in 0..self.size {
            write!(w, "{}", attributes[i])?;
            for j in 0..self.size {
                write!(w, ",{}", self.value(i, j))?;
            }
            writeln!(w, ",{}", self.defined[i])?;
        }
        Ok(())
    }
}

/// Computes the co-occurrence matrix from a split's full labels.
pub fn cooccurrence(dataset: &WeakDataset, split: Split) -> Result<CooccurrenceMatrix> {
    let m = dataset.num_attributes();
    let labeled: Vec<&DataItem> = dataset
        .items
        .iter()
        .filter(|it| it.split == split && !it.full_labels.is_empty())
        .collect();
    if labeled.is_empty() {
        return Err(Error::InvalidInput(format!(
            "split '{}' has no items with full labels",
            split.dir_name()
        )));
    }
    let mut contain = vec![0usize; m];
    let mut joint = vec![0usize; m * m];
    for it in &labeled {
        for &i in &it.full_labels {
            contain[i] += 1;
            for &j in &it.full_labels {
                joint[i * m + j] += 1;
            }
        }
    }
    let mut values = vec![0.0; m * m];
    let mut defined = vec![false; m];
    for i in 0..m {
        if contain[i] == 0 {
            continue;
        }
        defined[i] = true;
        for j in 0..m {
            values[i * m + j] = joint[i * m + j] as f64 / contain[i] as f64;
        }
    }
    Ok(CooccurrenceMatrix {
        size: m,
        values,
        defined,
    })
}

/// One shuffled pass over a split; the short final batch is kept.
pub struct BatchIter<'a> {
    dataset: &'a WeakDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub struct Batch {
    pub images: Tensor,
    /// Dataset item indices, aligned with the batch rows.
    pub items: Vec<usize>,
}

pub fn batch_iterator<'a>(
    dataset: &'a WeakDataset,
    split: Split,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be >= 1".into()));
    }
    let mut order = dataset.split_indices(split);
    rng.shuffle(&mut order);
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let items = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.dataset.stack_images(&items).map(|images| Batch { images, items }))
    }
}

// ---------------------------------------------------------------------------
// on-disk format
// ---------------------------------------------------------------------------

fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (tensor, _) = decode_image(img);
    Ok(tensor)
}

fn decode_image(img: image::DynamicImage) -> (Tensor, usize) {
    use image::DynamicImage;
    let channels = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) => 1,
        _ => 3,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if channels == 1 {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(|b| b as f64 / 255.0)
            .collect()
    } else {
        // interleaved RGB -> planar CHW
        let rgb = img.to_rgb8().into_raw();
        let mut planar = vec![0.0; 3 * h * w];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = px[c] as f64 / 255.0;
            }
        }
        planar
    };
    (
        Tensor::from_vec(&[channels, h, w], data).expect("decoded image shape is valid"),
        channels,
    )
}

fn to_bytes(pixels: &Tensor) -> Vec<u8> {
    pixels
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes one image; grayscale becomes binary PGM (P5), RGB becomes PNG.
/// Returns the file name used.
fn write_image(dir: &Path, stem: &str, pixels: &Tensor) -> Result<String> {
    let [c, h, w] = [pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]];
    let bytes = to_bytes(pixels);
    if c == 1 {
        let name = format!("{stem}.pgm");
        let path = dir.join(&name);
        let mut out = Vec::with_capacity(bytes.len() + 32);
        out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        out.extend_from_slice(&bytes);
        fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(name)
    } else {
        let name = format!("{stem}.png");
        let path = dir.join(&name);
        // planar CHW -> interleaved
        let mut raw = vec![0u8; bytes.len()];
        for i in 0..h * w {
            for ch in 0..3 {
                raw[i * 3 + ch] = bytes[ch * h * w + i];
            }
        }
        image::save_buffer(
            &path,
            &raw,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(name)
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pgm") | Some("png")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads the directory layout documented at the top of this module.
pub fn load_dataset(root: &Path) -> Result<WeakDataset> {
    let attr_path = root.join("attributes.txt");
    let text = fs::read_to_string(&attr_path)
        .map_err(|e| Error::io(attr_path.display().to_string(), e))?;
    let attributes: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if attributes.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no attribute names",
            attr_path.display()
        )));
    }

    let mut items = Vec::new();

    for split in [Split::Train, Split::Val] {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            if split == Split::Train {
                return Err(Error::InvalidInput(format!(
                    "{} is missing",
                    split_dir.display()
                )));
            }
            continue;
        }
        for class_dir in sorted_entries(&split_dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let class_name = class_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let label = attributes
                .iter()
                .position(|a| *a == class_name)
                .ok_or_else(|| Error::UnknownAttribute(class_name.clone()))?;
            let mut count = 0;
            for file in sorted_entries(&class_dir)? {
                if !is_image_file(&file) {
                    continue;
                }
                items.push(DataItem {
                    id: format!("{}/{}/{}", split.dir_name(), class_name, stem_of(&file)),
                    pixels: read_image(&file)?,
                    split,
                    weak_label: Some(label),
                    full_labels: vec![],
                });
                count += 1;
            }
            if split == Split::Train && count == 0 {
                return Err(Error::EmptyClass(class_name));
            }
        }
        if split == Split::Train {
            // every attribute must have a class directory with images
            let counts = {
                let mut c = vec![0usize; attributes.len()];
                for it in items.iter().filter(|it| it.split == Split::Train) {
                    c[it.weak_label.unwrap()] += 1;
                }
                c
            };
            if let Some(m) = counts.iter().position(|&n| n == 0) {
                return Err(Error::EmptyClass(attributes[m].clone()));
            }
        }
    }

    let test_dir = root.join("test");
    if test_dir.is_dir() {
        let images_dir = test_dir.join("images");
        let labels_path = test_dir.join("labels.csv");
        let labels_text = fs::read_to_string(&labels_path)
            .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
        let mut labels: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (ln, line) in labels_text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id, names) = line.split_once(',').ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{}:{}: expected 'image_id, name;name'",
                    labels_path.display(),
                    ln + 1
                ))
            })?;
            let mut idxs = Vec::new();
            for name in names.split(';') {
                let name = name.trim();
                if name.is_empty() {
                    continue;
                }
                let idx = attributes
                    .iter()
                    .position(|a| a == name)
                    .ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
                if !idxs.contains(&idx) {
                    idxs.push(idx);
                }
            }
            idxs.sort_unstable();
            labels.insert(id.trim().to_string(), idxs);
        }
        for file in sorted_entries(&images_dir)? {
            if !is_image_file(&file) {
                continue;
            }
            let id = stem_of(&file);
            let full_labels = labels.get(&id).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("test image {id} has no row in labels.csv"))
            })?;
            items.push(DataItem {
                id,
                pixels: read_image(&file)?,
                split: Split::Test,
                weak_label: None,
                full_labels,
            });
        }
    }

    WeakDataset::from_parts(attributes, items)
}

/// Writes the dataset in the directory layout `load_dataset` reads.
pub fn write_dataset(dataset: &WeakDataset, root: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e));
    mkdir(root)?;
    let attr_path = root.join("attributes.txt");
    fs::write(&attr_path, dataset.attributes.join("\n") + "\n")
        .map_err(|e| Error::io(attr_path.display().to_string(), e))?;

    let mut labels_csv = String::new();
    for item in &dataset.items {
        match item.split {
            Split::Train | Split::Val => {
                let class = &dataset.attributes[item.weak_label.unwrap()];
                let dir = root.join(item.split.dir_name()).join(class);
                mkdir(&dir)?;
                // ids from the generator/loader look like "train/a/img_0001"
                let stem = item.id.rsplit('/').next().unwrap_or(&item.id).to_string();
                write_image(&dir, &stem, &item.pixels)?;
            }
            Split::Test => {
                let dir = root.join("test").join("images");
                mkdir(&dir)?;
                write_image(&dir, &item.id, &item.pixels)?;
                let names: Vec<&str> = item
                    .full_labels
                    .iter()
                    .map(|&l| dataset.attributes[l].as_str())
                    .collect();
                labels_csv.push_str(&format!("{},{}\n", item.id, names.join(";")));
            }
        }
    }
    if dataset.items.iter().any(|it| it.split == Split::Test) {
        let path = root.join("test").join("labels.csv");
        fs::write(&path, labels_csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f64) -> Tensor {
        Tensor::fill(&[1, 4, 4], v).unwrap()
    }

    fn test_item(id: &str, labels: Vec<usize>) -> DataItem {
        DataItem {
            id: id.into(),
            pixels: gray(0.5),
            split: Split::Test,
            weak_label: None,
            full_labels: labels,
        }
    }

    fn three_attr_dataset(items: Vec<DataItem>) -> WeakDataset {
        WeakDataset::from_parts(
            vec!["a".into(), "b".into(), "c".into()],
            items,
        )
        .unwrap()
    }

    #[test]
    fn invariants_enforced() {
        let items = vec![DataItem {
            id: "x".into(),
            pixels: gray(0.1),
            split: Split::Train,
            weak_label: None,
            full_labels: vec![],
        }];
        assert!(WeakDataset::from_parts(vec!["a".into()], items).is_err());

        let items = vec![test_item("t", vec![])];
        assert!(WeakDataset::from_parts(vec!["a".into()], items).is_err());
    }

    #[test]
    fn cooccurrence_lone_label() {
        let ds = three_attr_dataset(vec![test_item("t0", vec![1])]);
        let m = cooccurrence(&ds, Split::Test).unwrap();
        assert_eq!(m.value(1, 1), 1.0);
        assert_eq!(m.value(1, 0), 0.0);
        assert!(!m.row_defined(0) && m.row_defined(1));
    }

    #[test]
    fn cooccurrence_half_case() {
        // images {a,b} and {a}: entry (a,b) = 0.5, entry (b,a) = 1.0
        let ds = three_attr_dataset(vec![
            test_item("t0", vec![0, 1]),
            test_item("t1", vec![0]),
        ]);
        let m = cooccurrence(&ds, Split::Test).unwrap();
        assert_eq!(m.value(0, 1), 0.5);
        assert_eq!(m.value(1, 0), 1.0);
        assert_eq!(m.value(0, 0), 1.0);
        assert_eq!(m.value(1, 1), 1.0);
    }

    #[test]
    fn cooccurrence_without_full_labels_is_an_error() {
        let items = vec![DataItem {
            id: "x".into(),
            pixels: gray(0.1),
            split: Split::Train,
            weak_label: Some(0),
            full_labels: vec![],
        }];
        let ds = WeakDataset::from_parts(vec!["a".into()], items).unwrap();
        assert!(cooccurrence(&ds, Split::Train).is_err());
    }

    #[test]
    fn batches_partition_the_split() {
        let mut items: Vec<DataItem> = (0..10)
            .map(|i| DataItem {
                id: format!("i{i}"),
                pixels: gray(i as f64 / 10.0),
                split: Split::Train,
                weak_label: Some(i % 3),
                full_labels: vec![],
            })
            .collect();
        items.push(test_item("t", vec![0]));
        let ds = three_attr_dataset(items);

        let mut rng = Rng::from_seed(4);
        let batches: Vec<Batch> = batch_iterator(&ds, Split::Train, 3, &mut rng)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        let sizes: Vec<usize> = batches.iter().map(|b| b.items.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.items.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        // same seed, same order
        let again: Vec<Vec<usize>> =
            batch_iterator(&ds, Split::Train, 3, &mut Rng::from_seed(4))
                .unwrap()
                .map(|b| b.unwrap().items)
                .collect();
        let first: Vec<Vec<usize>> =
            batch_iterator(&ds, Split::Train, 3, &mut Rng::from_seed(4))
                .unwrap()
                .map(|b| b.unwrap().items)
                .collect();
        assert_eq!(again, first);
    }

    #[test]
    fn weak_label_hash_tracks_labels() {
        let make = |label| {
            three_attr_dataset(vec![
                DataItem {
                    id: "x".into(),
                    pixels: gray(0.2),
                    split: Split::Train,
                    weak_label: Some(label),
                    full_labels: vec![],
                },
                test_item("t", vec![0]),
            ])
        };
        assert_eq!(make(1).weak_label_hash(), make(1).weak_label_hash());
        assert_ne!(make(1).weak_label_hash(), make(2).weak_label_hash());
    }
}
