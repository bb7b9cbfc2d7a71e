//! Frame-major flattening of acoustic token grids.
//!
//! Token `(t, l)` becomes `grid[t][l] + (level_offset + l) * K_a` at flat
//! index `t * levels + l`, so every level owns a disjoint id range.

use vidtune_core::codec::AcousticTokenGrid;
use vidtune_core::{CoreError, Result};

pub fn flatten_grid(grid: &AcousticTokenGrid) -> Vec<u32> {
    flatten_with_offset(grid, 0)
}

/// Flattens with ids shifted as if the grid's first level were `level_offset`.
pub fn flatten_with_offset(grid: &AcousticTokenGrid, level_offset: usize) -> Vec<u32> {
    let k = grid.vocab_size() as u32;
    let levels = grid.n_levels();
    grid.tokens()
        .iter()
        .enumerate()
        .map(|(i, &tok)| tok + ((level_offset + i % levels) as u32) * k)
        .collect()
}

pub fn unflatten(flat: &[u32], levels: usize, vocab_size: usize) -> Result<AcousticTokenGrid> {
    unflatten_with_offset(flat, levels, vocab_size, 0)
}

pub fn unflatten_with_offset(flat: &[u32], levels: usize, vocab_size: usize, level_offset: usize) -> Result<AcousticTokenGrid> {
    if levels == 0 || flat.len() % levels != 0 {
        return Err(CoreError::Shape(format!(
            "flat length {} is not divisible by {levels} levels",
            flat.len()
        )));
    }
    let k = vocab_size as u32;
    let tokens = flat
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let base = ((level_offset + i % levels) as u32) * k;
            if id < base || id >= base + k {
                return Err(CoreError::Domain(format!(
                    "flat id {id} at index {i} is outside level {}'s range {base}..{}",
                    level_offset + i % levels,
                    base + k
                )));
            }
            Ok(id - base)
        })
        .collect::<Result<Vec<u32>>>()?;
    AcousticTokenGrid::new(tokens, flat.len() / levels, levels, vocab_size)
}

/// Id range of level `level` (absolute) for sequences whose acoustic ids
/// start at `base`.
pub fn level_range(base: usize, level: usize, vocab_size: usize) -> std::ops::Range<u32> {
    let lo = base + level * vocab_size;
    lo as u32..(lo + vocab_size) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_example() {
        let g = AcousticTokenGrid::from_rows(&[vec![1, 2], vec![3, 0]], 4).unwrap();
        assert_eq!(flatten_grid(&g), vec![1, 6, 3, 4]);
        assert_eq!(unflatten(&[1, 6, 3, 4], 2, 4).unwrap(), g);
    }

    #[test]
    fn offsets_shift_every_level() {
        let g = AcousticTokenGrid::from_rows(&[vec![1, 2], vec![3, 0]], 4).unwrap();
        assert_eq!(flatten_with_offset(&g, 2), vec![9, 14, 11, 12]);
        assert_eq!(unflatten_with_offset(&[9, 14, 11, 12], 2, 4, 2).unwrap(), g);
    }

    #[test]
    fn indivisible_length_is_a_shape_error() {
        assert!(matches!(unflatten(&[1, 2, 3], 2, 4), Err(CoreError::Shape(_))));
    }

    #[test]
    fn wrong_level_range_is_rejected() {
        assert!(matches!(unflatten(&[5, 6], 2, 4), Err(CoreError::Domain(_))));
    }

    proptest! {
        #[test]
        fn round_trip_and_bound(frames in 1usize..12, levels in 1usize..5, k in 2usize..20, seed in any::<u64>()) {
            let mut s = seed;
            let tokens: Vec<u32> = (0..frames * levels)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 33) % k as u64) as u32
                })
                .collect();
            let g = AcousticTokenGrid::new(tokens, frames, levels, k).unwrap();
            let flat = flatten_grid(&g);
            prop_assert_eq!(flat.len(), frames * levels);
            prop_assert!(flat.iter().all(|&t| (t as usize) < levels * k));
            prop_assert_eq!(unflatten(&flat, levels, k).unwrap(), g);
        }
    }
}
