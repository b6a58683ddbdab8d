use crate::error::{MosaError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `N` binary masks that partition the entries of a `rows × cols` matrix.
///
/// Stored as an owner index per entry; the dense 0/1 masks are materialised
/// once for use in forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    rows: usize,
    cols: usize,
    seed: u64,
    owner: Vec<u16>,
    masks: Vec<Tensor>,
}

/// Sorts entries by a fresh uniform score (ties broken by entry index) and
/// returns the entry indices in ascending score order.
fn rank_by_score(len: usize, rng: &mut Rng) -> Vec<usize> {
    let scores: Vec<f64> = (0..len).map(|_| rng.uniform()).collect();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Splits a `rows × cols` matrix into `n` disjoint, exhaustive, balanced masks.
///
/// Every entry gets a `Uniform(0, 1)` score; the entry of rank `k` (0-based,
/// ascending) goes to mask `floor(k n / (rows cols))`. This is the N-quantile
/// rule on the scores with exact balance and without dropping the maximum.
pub fn split_masks(rows: usize, cols: usize, n: usize, rng: &mut Rng) -> Result<MaskSet> {
    let len = rows * cols;
    if n == 0 || n > len || n > u16::MAX as usize {
        return Err(MosaError::Config(format!(
            "cannot split a {rows}x{cols} matrix into {n} experts (need 1 <= N <= {len})"
        )));
    }
    let seed = rng.seed();
    let order = rank_by_score(len, rng);
    let mut owner = vec![0u16; len];
    for (k, &entry) in order.iter().enumerate() {
        owner[entry] = (k * n / len) as u16;
    }
    Ok(MaskSet::build(rows, cols, n, seed, owner))
}

impl MaskSet {
    fn build(rows: usize, cols: usize, n: usize, seed: u64, owner: Vec<u16>) -> Self {
        let masks = (0..n)
            .map(|i| {
                let data = owner.iter().map(|&o| if o as usize == i { 1.0 } else { 0.0 }).collect();
                Tensor::new([rows, cols], data).expect("mask shape")
            })
            .collect();
        MaskSet { rows, cols, seed, owner, masks }
    }

    /// Rebuilds a mask set from explicit boolean masks, checking that they
    /// form a partition.
    pub fn from_bitmaps(rows: usize, cols: usize, seed: u64, bitmaps: &[Vec<bool>]) -> Result<Self> {
        let len = rows * cols;
        if bitmaps.is_empty() || bitmaps.len() > u16::MAX as usize {
            return Err(MosaError::Invariant(format!("{} masks is not a valid expert count", bitmaps.len())));
        }
        let mut owner = vec![u16::MAX; len];
        for (i, bits) in bitmaps.iter().enumerate() {
            if bits.len() != len {
                return Err(MosaError::Invariant(format!(
                    "mask {i} has {} entries, expected {len}",
                    bits.len()
                )));
            }
            for (e, &b) in bits.iter().enumerate() {
                if b {
                    if owner[e] != u16::MAX {
                        return Err(MosaError::Invariant(format!(
                            "masks {} and {i} overlap at entry {e}",
                            owner[e]
                        )));
                    }
                    owner[e] = i as u16;
                }
            }
        }
        if let Some(e) = owner.iter().position(|&o| o == u16::MAX) {
            return Err(MosaError::Invariant(format!("entry {e} belongs to no mask")));
        }
        Ok(MaskSet::build(rows, cols, bitmaps.len(), seed, owner))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_experts(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, i: usize) -> &Tensor {
        &self.masks[i]
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    /// Expert that owns flat entry `e`.
    pub fn owner(&self, e: usize) -> usize {
        self.owner[e] as usize
    }

    pub fn bitmap(&self, i: usize) -> Vec<bool> {
        self.owner.iter().map(|&o| o as usize == i).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_experts()];
        for &o in &self.owner {
            c[o as usize] += 1;
        }
        c
    }

    /// Entries owned by any of `experts`.
    pub fn union(&self, experts: &[usize]) -> Vec<bool> {
        let mut on = vec![false; self.num_experts()];
        for &e in experts {
            on[e] = true;
        }
        self.owner.iter().map(|&o| on[o as usize]).collect()
    }

    /// Re-derives the partition properties from the materialised masks.
    pub fn validate(&self) -> Result<()> {
        let len = self.rows * self.cols;
        let mut cover = vec![0u32; len];
        for (i, m) in self.masks.iter().enumerate() {
            if m.numel() != len {
                return Err(MosaError::Invariant(format!("mask {i} has the wrong size")));
            }
            for (e, &v) in m.data().iter().enumerate() {
                if v == 1.0 {
                    cover[e] += 1;
                } else if v != 0.0 {
                    return Err(MosaError::Invariant(format!("mask {i} is not binary at {e}")));
                }
            }
        }
        if let Some(e) = cover.iter().position(|&c| c != 1) {
            return Err(MosaError::Invariant(format!(
                "entry {e} is covered by {} masks",
                cover[e]
            )));
        }
        Ok(())
    }
}

/// A single fixed pruning mask keeping a fraction of entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainMask {
    keep: Tensor,
    retained: usize,
}

impl RetainMask {
    /// Keeps the `round(fraction · rows · cols)` entries with the lowest
    /// uniform scores (at least one).
    pub fn random(rows: usize, cols: usize, fraction: f64, rng: &mut Rng) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(MosaError::Config(format!("retain fraction {fraction} not in (0, 1]")));
        }
        let len = rows * cols;
        let k = ((fraction * len as f64).round() as usize).clamp(1, len);
        let order = rank_by_score(len, rng);
        let mut data = vec![0.0; len];
        for &e in &order[..k] {
            data[e] = 1.0;
        }
        Ok(RetainMask { keep: Tensor::new([rows, cols], data)?, retained: k })
    }

    pub fn from_bitmap(rows: usize, cols: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(MosaError::Invariant("retain mask size mismatch".into()));
        }
        let data: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let retained = bits.iter().filter(|&&b| b).count();
        Ok(RetainMask { keep: Tensor::new([rows, cols], data)?, retained })
    }

    pub fn mask(&self) -> &Tensor {
        &self.keep
    }

    pub fn retained(&self) -> usize {
        self.retained
    }

    pub fn bitmap(&self) -> Vec<bool> {
        self.keep.data().iter().map(|&v| v == 1.0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_expert_is_all_ones() {
        let m = split_masks(5, 3, 1, &mut Rng::new(0)).unwrap();
        assert!(m.mask(0).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_by_two_into_four() {
        let m = split_masks(2, 2, 4, &mut Rng::new(11)).unwrap();
        m.validate().unwrap();
        for i in 0..4 {
            assert_eq!(m.mask(i).data().iter().filter(|&&v| v == 1.0).count(), 1);
        }
        let mut owners: Vec<usize> = (0..4).map(|e| m.owner(e)).collect();
        owners.sort();
        assert_eq!(owners, vec![0, 1, 2, 3]);
    }

    #[test]
    fn vit_b_shape_quarters() {
        let m = split_masks(768, 64, 4, &mut Rng::new(5)).unwrap();
        assert_eq!(m.counts(), vec![12_288; 4]);
    }

    #[test]
    fn out_of_range_expert_count() {
        assert!(matches!(split_masks(2, 2, 5, &mut Rng::new(0)), Err(MosaError::Config(_))));
        assert!(matches!(split_masks(2, 2, 0, &mut Rng::new(0)), Err(MosaError::Config(_))));
    }

    #[test]
    fn bitmaps_reject_overlap_and_gaps() {
        let ok = MaskSet::from_bitmaps(1, 2, 0, &[vec![true, false], vec![false, true]]);
        assert!(ok.is_ok());
        let overlap = MaskSet::from_bitmaps(1, 2, 0, &[vec![true, true], vec![false, true]]);
        assert!(matches!(overlap, Err(MosaError::Invariant(_))));
        let gap = MaskSet::from_bitmaps(1, 2, 0, &[vec![true, false], vec![false, false]]);
        assert!(matches!(gap, Err(MosaError::Invariant(_))));
    }

    #[test]
    fn retain_count_is_rounded_fraction() {
        let r = RetainMask::random(768, 64, 0.25, &mut Rng::new(1)).unwrap();
        assert_eq!(r.retained(), 12_288);
        let r = RetainMask::random(3, 3, 0.5, &mut Rng::new(1)).unwrap();
        assert_eq!(r.retained(), 5); // round(4.5) rounds away from zero
        assert!(RetainMask::random(3, 3, 0.0, &mut Rng::new(1)).is_err());
    }
}
