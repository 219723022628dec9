//! Row-major feature matrices, zero-copy segmentation, and the per-clip
//! binary cache format.
//!
//! Cache layout: an ASCII header line `"{rows} {cols}\n"` followed by
//! `rows * cols` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Time-major matrix: one row per frame, one column per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!("{} {}\n", self.rows, self.cols);
        let mut out = Vec::with_capacity(header.len() + 4 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Cache("missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Cache("header is not utf-8".into()))?;
        let mut parts = header.split_whitespace().map(str::parse::<usize>);
        let (rows, cols) = match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(r)), Some(Ok(c)), None) => (r, c),
            _ => return Err(Error::Cache(format!("bad header `{header}`"))),
        };
        let body = &bytes[nl + 1..];
        if body.len() != 4 * rows * cols {
            return Err(Error::Cache(format!(
                "{rows}x{cols} body needs {} bytes, found {}",
                4 * rows * cols,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureMatrix::new(rows, cols, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureMatrix::from_bytes(&bytes)
            .map_err(|e| Error::Cache(format!("{}: {e}", path.display())))
    }
}

/// A borrowed run of consecutive rows of a [`FeatureMatrix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f32],
}

/// Overlapping fixed-length windows over a feature matrix. Segments borrow
/// from the source matrix.
#[derive(Debug, Clone)]
pub struct SegmentBatch<'a> {
    source: &'a FeatureMatrix,
    pub seg_len_frames: usize,
    pub hop_frames: usize,
    count: usize,
}

impl<'a> SegmentBatch<'a> {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn segment(&self, i: usize) -> Segment<'a> {
        assert!(i < self.count, "segment {i} out of {}", self.count);
        let cols = self.source.cols;
        let start = i * self.hop_frames * cols;
        Segment {
            rows: self.seg_len_frames,
            cols,
            data: &self.source.data[start..start + self.seg_len_frames * cols],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Segment<'a>> + '_ {
        (0..self.count).map(move |i| self.segment(i))
    }
}

/// Number of windows of `len` with stride `hop` that fit in `total`.
pub fn window_count(total: usize, len: usize, hop: usize) -> usize {
    if total < len || hop == 0 {
        0
    } else {
        (total - len) / hop + 1
    }
}

/// Slices `matrix` into `⌊(T − seg_len)/hop⌋ + 1` overlapping segments.
pub fn segment_features(matrix: &FeatureMatrix, seg_len_frames: usize, hop_frames: usize) -> Result<SegmentBatch<'_>> {
    if seg_len_frames == 0 || hop_frames == 0 {
        return Err(Error::InvalidArgument(
            "segment length and hop must be positive".into(),
        ));
    }
    if matrix.rows < seg_len_frames {
        return Err(Error::MatrixTooShort {
            rows: matrix.rows,
            needed: seg_len_frames,
        });
    }
    Ok(SegmentBatch {
        source: matrix,
        seg_len_frames,
        hop_frames,
        count: window_count(matrix.rows, seg_len_frames, hop_frames),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ramp(rows: usize, cols: usize) -> FeatureMatrix {
        FeatureMatrix::new(rows, cols, (0..rows * cols).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn audio_and_movement_segment_counts() {
        let audio = FeatureMatrix::zeros(399, 128);
        let b = segment_features(&audio, 39, 20).unwrap();
        assert_eq!(b.len(), 19);
        assert_eq!(b.segment(18).data.len(), 39 * 128);

        let movement = FeatureMatrix::zeros(300, 119);
        let b = segment_features(&movement, 30, 15).unwrap();
        assert_eq!(b.len(), 19);
        assert_eq!((b.segment(0).rows, b.segment(0).cols), (30, 119));
    }

    #[test]
    fn single_segment_equals_input() {
        let m = ramp(30, 5);
        let b = segment_features(&m, 30, 15).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.segment(0).data, m.data());
    }

    #[test]
    fn short_matrix_is_rejected() {
        let m = ramp(10, 3);
        assert!(matches!(
            segment_features(&m, 11, 5),
            Err(Error::MatrixTooShort { rows: 10, needed: 11 })
        ));
    }

    #[test]
    fn segments_borrow_source_storage() {
        let m = ramp(12, 2);
        let b = segment_features(&m, 4, 2).unwrap();
        let seg = b.segment(3);
        assert!(std::ptr::eq(seg.data.as_ptr(), &m.data()[3 * 2 * 2]));
    }

    #[test]
    fn corrupt_cache_is_rejected() {
        assert!(FeatureMatrix::from_bytes(b"2 2\n\0\0\0\0").is_err());
        assert!(FeatureMatrix::from_bytes(b"no header").is_err());
        assert!(FeatureMatrix::from_bytes(b"2 x\n").is_err());
    }

    proptest! {
        #[test]
        fn cache_bytes_reload_bit_exact(
            rows in 0usize..20,
            cols in 1usize..10,
            seed in any::<u32>(),
        ) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff))
                .collect();
            let m = FeatureMatrix::new(rows, cols, data).unwrap();
            let back = FeatureMatrix::from_bytes(&m.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn non_overlapping_segments_reproduce_rows(
            rows in 6usize..60,
            len in 1usize..6,
        ) {
            let m = ramp(rows, 3);
            // hop == len: segments tile the matrix without overlap.
            let b = segment_features(&m, len, len).unwrap();
            let joined: Vec<f32> = b.iter().flat_map(|s| s.data.iter().copied()).collect();
            prop_assert_eq!(&joined[..], &m.data()[..b.len() * len * 3]);
        }
    }
}
