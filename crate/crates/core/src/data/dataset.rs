use std::path::Path;

use crate::autodiff::Tensor;
use crate::binio::{self, Reader};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TAED";
pub const LABEL_MAGIC: &[u8; 4] = b"TAEL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Samples `[N, ...]` with one integer label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.shape().len() < 2 {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: samples.shape().to_vec(),
                expected: "[N, ...sample dims]".into(),
            });
        }
        if labels.len() != samples.rows() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: samples.rows(),
                actual: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                class_count,
            });
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    /// Indices of every sample labelled `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given rows (order preserved). Errors if empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty dataset subset"));
        }
        Ok(Self {
            samples: self.samples.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// Samples and labels at `indices`, as a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.samples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Reads a `TAED` tensor file and a `TAEL` label file. With `class_count`
/// unset, the class count is `max(label) + 1`.
pub fn load_dataset(tensor_file: &Path, label_file: &Path, class_count: Option<usize>) -> Result<LabeledDataset> {
    let samples = read_tensor_file(tensor_file)?;
    let labels = read_label_file(label_file)?;
    if samples.shape().len() < 2 || labels.len() != samples.rows() {
        return Err(Error::LengthMismatch {
            what: "label file",
            expected: samples.rows(),
            actual: labels.len(),
        });
    }
    let c = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledDataset::new(samples, labels, c)
}

pub fn save_dataset(ds: &LabeledDataset, tensor_file: &Path, label_file: &Path) -> Result<()> {
    binio::write_file(tensor_file, &encode_tensor(ds.samples()))?;
    binio::write_file(label_file, &encode_labels(ds.labels()))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    decode_tensor(path, &binio::read_file(path)?)
}

pub fn read_label_file(path: &Path) -> Result<Vec<usize>> {
    decode_labels(path, &binio::read_file(path)?)
}

/// `TAED` bytes. Values are stored as `f32`.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        binio::put_u32(&mut out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(path, bytes);
    r.magic(TENSOR_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::BadDtype {
            path: r.path(),
            found: dtype,
        });
    }
    let ndim = r.u8("rank")? as usize;
    if ndim == 0 {
        return Err(r.malformed("rank must be at least 1"));
    }
    let dims = (0..ndim).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(r.malformed(format!("zero dimension in {dims:?}")));
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::DimOverflow {
            path: r.path(),
            dims: dims.clone(),
        })?;
    let payload = r.take(numel * 4, "data")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    r.finish()?;
    Tensor::new(dims.into_iter().map(|d| d as usize).collect(), data)
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    binio::put_u32(&mut out, labels.len());
    for &l in labels {
        binio::put_u32(&mut out, l);
    }
    out
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(path, bytes);
    r.magic(LABEL_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let count = r.u32("count")? as usize;
    let payload = r.take(count * 4, "labels")?;
    let labels = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    r.finish()?;
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> LabeledDataset {
        let samples = Tensor::new(vec![4, 2], vec![0.5, -1.0, 2.25, 3.0, 0.0, 1.5, -0.125, 8.0]).unwrap();
        LabeledDataset::new(samples, vec![0, 1, 1, 0], 2).unwrap()
    }

    #[test]
    fn handcrafted_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (t, l) = (dir.path().join("x.taed"), dir.path().join("y.tael"));
        let ds = fixture();
        save_dataset(&ds, &t, &l).unwrap();
        assert_eq!(load_dataset(&t, &l, Some(2)).unwrap(), ds);
        assert_eq!(load_dataset(&t, &l, None).unwrap(), ds);
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let bytes = encode_tensor(fixture().samples());
        let cut = &bytes[..bytes.len() - 5];
        let err = decode_tensor(Path::new("x.taed"), cut).unwrap_err();
        match err {
            Error::Truncated {
                section: "data",
                expected,
                actual,
                ..
            } => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 27);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err_string(cut).contains("expected 32 bytes, found 27"));
    }

    fn err_string(bytes: &[u8]) -> String {
        decode_tensor(Path::new("x.taed"), bytes).unwrap_err().to_string()
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = encode_tensor(fixture().samples());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_tensor(Path::new("t"), &bad_magic), Err(Error::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_tensor(Path::new("t"), &bad_version), Err(Error::BadVersion { found: 9, .. })));

        let mut bad_dtype = good.clone();
        bad_dtype[8] = 3;
        assert!(matches!(decode_tensor(Path::new("t"), &bad_dtype), Err(Error::BadDtype { found: 3, .. })));

        let mut huge = Vec::new();
        huge.extend_from_slice(TENSOR_MAGIC);
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&[0, 4]);
        for _ in 0..4 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_tensor(Path::new("t"), &huge), Err(Error::DimOverflow { .. })));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (t, l) = (dir.path().join("x.taed"), dir.path().join("y.tael"));
        save_dataset(&fixture(), &t, &l).unwrap();
        assert!(matches!(
            load_dataset(&t, &l, Some(1)),
            Err(Error::LabelOutOfRange { index: 1, label: 1, class_count: 1 })
        ));
    }

    #[test]
    fn label_count_must_match_samples() {
        let dir = tempfile::tempdir().unwrap();
        let (t, l) = (dir.path().join("x.taed"), dir.path().join("y.tael"));
        binio::write_file(&t, &encode_tensor(fixture().samples())).unwrap();
        binio::write_file(&l, &encode_labels(&[0, 1, 0])).unwrap();
        assert!(matches!(load_dataset(&t, &l, None), Err(Error::LengthMismatch { .. })));
    }
}
