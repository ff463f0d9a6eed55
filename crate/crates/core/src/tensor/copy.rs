//! Multi-slice copies between flat buffers.

use crate::error::TensorError;

use super::WriteMode;

/// One slice move. `src: None` writes zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyPair {
    pub dst: usize,
    pub src: Option<usize>,
}

/// Moves every listed slice of `slice_len` elements from `src` into `dst` in a
/// single call.
///
/// Overwriting copies require pairwise disjoint destinations. Accumulating
/// copies may repeat a destination; contributions are added in pair order.
pub fn batched_copy(
    dst: &mut [f64],
    src: &[f64],
    pairs: &[CopyPair],
    slice_len: usize,
    mode: WriteMode,
) -> Result<(), TensorError> {
    if pairs.is_empty() || slice_len == 0 {
        return Ok(());
    }
    for p in pairs {
        if p.dst + slice_len > dst.len() {
            return Err(TensorError::CopyRange {
                start: p.dst,
                end: p.dst + slice_len,
                len: dst.len(),
            });
        }
        if let Some(s) = p.src {
            if s + slice_len > src.len() {
                return Err(TensorError::CopyRange {
                    start: s,
                    end: s + slice_len,
                    len: src.len(),
                });
            }
        }
    }
    if mode == WriteMode::Overwrite {
        check_disjoint(pairs, slice_len)?;
    }
    for p in pairs {
        let d = &mut dst[p.dst..p.dst + slice_len];
        match (p.src, mode) {
            (Some(s), WriteMode::Overwrite) => d.copy_from_slice(&src[s..s + slice_len]),
            (Some(s), WriteMode::Accumulate) => {
                for (a, b) in d.iter_mut().zip(&src[s..s + slice_len]) {
                    *a += *b;
                }
            }
            (None, WriteMode::Overwrite) => d.fill(0.0),
            (None, WriteMode::Accumulate) => {}
        }
    }
    Ok(())
}

fn check_disjoint(pairs: &[CopyPair], slice_len: usize) -> Result<(), TensorError> {
    // Destinations are almost always produced in ascending order.
    let sorted = pairs.windows(2).all(|w| w[0].dst <= w[1].dst);
    let mut starts: Vec<usize> = pairs.iter().map(|p| p.dst).collect();
    if !sorted {
        starts.sort_unstable();
    }
    for w in starts.windows(2) {
        if w[0] + slice_len > w[1] {
            return Err(TensorError::Aliasing(w[1]));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(dst: usize, src: usize) -> CopyPair {
        CopyPair {
            dst,
            src: Some(src),
        }
    }

    #[test]
    fn moves_all_slices() {
        let src: Vec<f64> = (0..8).map(f64::from).collect();
        let mut dst = vec![0.0; 8];
        batched_copy(&mut dst, &src, &[pair(4, 0), pair(0, 4)], 4, WriteMode::Overwrite).unwrap();
        assert_eq!(dst, vec![4.0, 5.0, 6.0, 7.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn empty_is_noop() {
        let mut dst = vec![1.0; 4];
        batched_copy(&mut dst, &[], &[], 4, WriteMode::Overwrite).unwrap();
        assert_eq!(dst, vec![1.0; 4]);
    }

    #[test]
    fn same_content_is_unchanged() {
        let mut dst = vec![1.0, 2.0, 3.0];
        let src = dst.clone();
        batched_copy(&mut dst, &src, &[pair(0, 0)], 3, WriteMode::Overwrite).unwrap();
        assert_eq!(dst, src);
    }

    #[test]
    fn overlapping_destinations_rejected() {
        let src = vec![0.0; 8];
        let mut dst = vec![0.0; 8];
        let err = batched_copy(&mut dst, &src, &[pair(0, 0), pair(2, 4)], 4, WriteMode::Overwrite)
            .unwrap_err();
        assert_eq!(err, TensorError::Aliasing(2));
    }

    #[test]
    fn accumulate_allows_repeated_destination() {
        let src = vec![1.0, 2.0, 3.0, 4.0];
        let mut dst = vec![10.0, 10.0];
        batched_copy(&mut dst, &src, &[pair(0, 0), pair(0, 2)], 2, WriteMode::Accumulate).unwrap();
        assert_eq!(dst, vec![14.0, 16.0]);
    }

    #[test]
    fn zero_source_fills() {
        let mut dst = vec![5.0; 4];
        let pairs = [CopyPair { dst: 2, src: None }];
        batched_copy(&mut dst, &[], &pairs, 2, WriteMode::Overwrite).unwrap();
        assert_eq!(dst, vec![5.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut dst = vec![0.0; 4];
        let err = batched_copy(&mut dst, &[0.0; 4], &[pair(2, 0)], 4, WriteMode::Overwrite);
        assert!(matches!(err, Err(TensorError::CopyRange { .. })));
    }
}
