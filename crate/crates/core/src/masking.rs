//! Attention-guided token masking.
//!
//! Tokens are laid out frame-major, then in raster order inside each frame.
//! Every frame keeps its own visible budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-frame probability weights over patch positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    frames: usize,
    patches: usize,
    weights: Vec<f32>,
}

impl AttentionMap {
    /// Builds a map from `frames × patches` weights, renormalizing each
    /// frame. All-zero frames become uniform.
    pub fn new(frames: usize, patches: usize, weights: Vec<f32>) -> Result<Self> {
        if frames == 0 || patches == 0 || weights.len() != frames * patches {
            return Err(Error::dim(format!(
                "attention map {frames}x{patches} given {} weights",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMask("attention weights must be finite and non-negative".into()));
        }
        let mut weights = weights;
        for row in weights.chunks_exact_mut(patches) {
            let s: f64 = row.iter().map(|&w| w as f64).sum();
            if s > 0.0 {
                row.iter_mut().for_each(|w| *w = (*w as f64 / s) as f32);
            } else {
                row.iter_mut().for_each(|w| *w = 1.0 / patches as f32);
            }
        }
        Ok(Self { frames, patches, weights })
    }

    pub fn uniform(frames: usize, patches: usize) -> Self {
        Self::new(frames, patches, vec![1.0; frames * patches]).expect("non-empty uniform map")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn token_count(&self) -> usize {
        self.frames * self.patches
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.weights[t * self.patches..(t + 1) * self.patches]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
}

/// Boolean visibility over the token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    visible: Vec<bool>,
    ratio_bits: u32,
    seed: Option<u64>,
}

impl TokenMask {
    pub fn from_visible(visible: Vec<bool>, ratio: f32, seed: Option<u64>) -> Result<Self> {
        if !visible.iter().any(|&v| v) {
            return Err(Error::InvalidMask("mask has no visible token".into()));
        }
        Ok(Self {
            visible,
            ratio_bits: ratio.to_bits(),
            seed,
        })
    }

    pub fn all_visible(tokens: usize) -> Self {
        Self {
            visible: vec![true; tokens],
            ratio_bits: 0f32.to_bits(),
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn ratio(&self) -> f32 {
        f32::from_bits(self.ratio_bits)
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.visible[i]
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Indices of visible tokens in ascending order.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| self.visible[i]).collect()
    }
}

/// `k` masks with pairwise-disjoint visible sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DisjointMaskSet {
    masks: Vec<TokenMask>,
}

impl DisjointMaskSet {
    pub fn masks(&self) -> &[TokenMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn check_ratio(r: f32) -> Result<()> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("masking ratio {r} outside (0, 1)")))
    }
}

/// Visible tokens per frame: `(1 − r)·n` rounded half up, never below 1.
pub fn visible_per_frame(patches: usize, r: f32) -> usize {
    let keep = (1.0 - r as f64) * patches as f64;
    // The epsilon absorbs f32 noise in `r` so exact halves round up.
    let rounded = (keep + 0.5 + 1e-6).floor() as usize;
    rounded.clamp(1, patches.max(1))
}

/// Draws visible tokens per frame without replacement, each draw
/// proportional to the remaining attention mass.
pub fn sample_mask(attn: &AttentionMap, r: f32, rng: &mut impl Rng) -> Result<TokenMask> {
    check_ratio(r)?;
    let keep = visible_per_frame(attn.patches, r);
    let mut visible = vec![false; attn.token_count()];
    for t in 0..attn.frames {
        let mut w: Vec<f64> = attn.frame(t).iter().map(|&v| v as f64).collect();
        for _ in 0..keep {
            let total: f64 = w.iter().sum();
            let pick = if total > 0.0 {
                let u = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = None;
                for (i, &wi) in w.iter().enumerate() {
                    if wi <= 0.0 {
                        continue;
                    }
                    acc += wi;
                    if u < acc {
                        chosen = Some(i);
                        break;
                    }
                }
                // Rounding can leave `u` just past the last bucket.
                chosen.unwrap_or_else(|| w.iter().rposition(|&x| x > 0.0).expect("positive mass"))
            } else {
                let free: Vec<usize> = (0..attn.patches).filter(|&i| !visible[t * attn.patches + i]).collect();
                free[rng.gen_range(0..free.len())]
            };
            visible[t * attn.patches + pick] = true;
            w[pick] = 0.0;
        }
    }
    TokenMask::from_visible(visible, r, None)
}

/// [`sample_mask`] with a fresh generator, recording the seed on the mask.
pub fn sample_mask_seeded(attn: &AttentionMap, r: f32, seed: u64) -> Result<TokenMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = sample_mask(attn, r, &mut rng)?;
    m.seed = Some(seed);
    Ok(m)
}

/// Greedy round-robin split: per frame, patches sorted by attention
/// (descending, ties by ascending index) are dealt to the `k` masks in turn,
/// and each mask keeps its first `visible_per_frame` patches.
pub fn disjoint_masks(attn: &AttentionMap, k: usize, r: f32) -> Result<DisjointMaskSet> {
    check_ratio(r)?;
    if k == 0 {
        return Err(Error::config("disjoint_masks needs k >= 1"));
    }
    let keep = visible_per_frame(attn.patches, r);
    if k * keep > attn.patches {
        return Err(Error::config(format!(
            "{k} masks of {keep} visible patches exceed {} patches per frame",
            attn.patches
        )));
    }
    let mut visible = vec![vec![false; attn.token_count()]; k];
    for t in 0..attn.frames {
        let w = attn.frame(t);
        let mut order: Vec<usize> = (0..attn.patches).collect();
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        for (rank, &p) in order.iter().take(k * keep).enumerate() {
            visible[rank % k][t * attn.patches + p] = true;
        }
    }
    let masks = visible
        .into_iter()
        .map(|v| TokenMask::from_visible(v, r, None))
        .collect::<Result<_>>()?;
    Ok(DisjointMaskSet { masks })
}

/// Keeps the visible rows of `tokens` on the tape, returning the retained
/// token indices alongside.
pub fn apply_mask(tape: &mut Tape, tokens: Var, mask: &TokenMask) -> Result<(Var, Vec<usize>)> {
    let rows = tape.shape(tokens).first().copied().unwrap_or(0);
    if rows != mask.len() {
        return Err(Error::InvalidMask(format!(
            "mask over {} tokens applied to {rows} rows",
            mask.len()
        )));
    }
    let idx = mask.visible_indices();
    if idx.is_empty() {
        return Err(Error::InvalidMask("mask has no visible token".into()));
    }
    let out = tape.gather_rows(tokens, &idx)?;
    Ok((out, idx))
}

/// Plain-tensor counterpart of [`apply_mask`].
pub fn select_rows(tokens: &Tensor, mask: &TokenMask) -> Result<(Tensor, Vec<usize>)> {
    let (rows, cols) = tokens.dims2()?;
    if rows != mask.len() {
        return Err(Error::InvalidMask(format!(
            "mask over {} tokens applied to {rows} rows",
            mask.len()
        )));
    }
    let idx = mask.visible_indices();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in &idx {
        data.extend_from_slice(tokens.row(i));
    }
    Ok((Tensor::new(vec![idx.len(), cols], data)?, idx))
}

/// Writes `rows` back to positions `indices` of a zero `[total × cols]`
/// matrix.
pub fn scatter_rows(rows: &Tensor, indices: &[usize], total: usize) -> Result<Tensor> {
    let (m, cols) = rows.dims2()?;
    if m != indices.len() {
        return Err(Error::dim(format!("{m} rows but {} indices", indices.len())));
    }
    let mut out = Tensor::zeros(&[total, cols]);
    for (r, &i) in indices.iter().enumerate() {
        if i >= total {
            return Err(Error::Index(format!("row index {i} outside {total}")));
        }
        out.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(rows.row(r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frequencies(attn: &[f32], draws: usize, seed: u64) -> Vec<f64> {
        let n = attn.len();
        let map = AttentionMap::new(1, n, attn.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; n];
        // r chosen so exactly one patch per frame stays visible.
        let r = 1.0 - 1.0 / n as f32;
        for _ in 0..draws {
            let m = sample_mask(&map, r, &mut rng).unwrap();
            for i in m.visible_indices() {
                counts[i] += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn desk_budget_is_three_per_frame() {
        assert_eq!(visible_per_frame(16, 0.8), 3);
        let m = sample_mask_seeded(&AttentionMap::uniform(4, 16), 0.8, 1).unwrap();
        assert_eq!(m.visible_count(), 12);
        assert_eq!(m.seed(), Some(1));
        for t in 0..4 {
            assert_eq!(m.visible()[t * 16..(t + 1) * 16].iter().filter(|&&v| v).count(), 3);
        }
    }

    #[test]
    fn exact_halves_round_up_and_budget_never_hits_zero() {
        assert_eq!(visible_per_frame(2, 0.75), 1);
        assert_eq!(visible_per_frame(4, 0.5), 2);
        assert_eq!(visible_per_frame(4, 0.875), 1);
        assert_eq!(visible_per_frame(16, 0.99), 1);
    }

    #[test]
    fn ratio_outside_open_interval_is_rejected() {
        let map = AttentionMap::uniform(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(sample_mask(&map, r, &mut rng), Err(Error::Config(_))));
        }
    }

    #[test]
    fn selection_follows_attention_law() {
        let f = frequencies(&[0.7, 0.1, 0.1, 0.1], 100_000, 7);
        assert!((f[0] - 0.7).abs() < 0.01, "{f:?}");
        for p in &f[1..] {
            assert!((p - 0.1).abs() < 0.01, "{f:?}");
        }
    }

    #[test]
    fn uniform_attention_selects_uniformly() {
        let f = frequencies(&[0.25; 4], 100_000, 8);
        for p in f {
            assert!((p - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn zero_mass_patches_are_used_only_when_needed() {
        let map = AttentionMap::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_mask(&map, 0.5, &mut rng).unwrap();
        assert!(m.is_visible(0));
        assert_eq!(m.visible_count(), 2);
    }

    #[test]
    fn round_robin_example() {
        let map = AttentionMap::new(1, 4, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let set = disjoint_masks(&map, 2, 0.5).unwrap();
        assert_eq!(set.masks()[0].visible_indices(), vec![0, 2]);
        assert_eq!(set.masks()[1].visible_indices(), vec![1, 3]);
    }

    #[test]
    fn single_mask_is_top_selection() {
        let w = vec![0.05, 0.3, 0.1, 0.25, 0.2, 0.1];
        let map = AttentionMap::new(1, 6, w).unwrap();
        let set = disjoint_masks(&map, 1, 0.5).unwrap();
        assert_eq!(set.masks()[0].visible_indices(), vec![1, 3, 4]);
    }

    #[test]
    fn ties_break_by_index() {
        let map = AttentionMap::uniform(1, 4);
        let set = disjoint_masks(&map, 2, 0.5).unwrap();
        assert_eq!(set.masks()[0].visible_indices(), vec![0, 2]);
        assert_eq!(set.masks()[1].visible_indices(), vec![1, 3]);
    }

    #[test]
    fn over_capacity_is_a_config_error() {
        let map = AttentionMap::uniform(1, 4);
        assert!(matches!(disjoint_masks(&map, 3, 0.5), Err(Error::Config(_))));
        assert!(matches!(disjoint_masks(&map, 0, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn apply_and_scatter_round_trip() {
        let tokens = Tensor::from_fn(&[4, 3], |i| i as f32);
        let mask = TokenMask::from_visible(vec![false, true, false, true], 0.5, None).unwrap();
        let (kept, idx) = select_rows(&tokens, &mask).unwrap();
        assert_eq!(idx, vec![1, 3]);
        let back = scatter_rows(&kept, &idx, 4).unwrap();
        for &i in &idx {
            assert_eq!(back.row(i), tokens.row(i));
        }
        assert_eq!(back.row(0), &[0.0; 3]);

        let full = TokenMask::all_visible(4);
        assert_eq!(select_rows(&tokens, &full).unwrap().0, tokens);

        let one = TokenMask::from_visible(vec![false, false, true, false], 0.75, None).unwrap();
        let (row, idx) = select_rows(&tokens, &one).unwrap();
        assert_eq!((row.shape(), idx), (&[1usize, 3][..], vec![2]));
    }

    #[test]
    fn tape_mask_matches_tensor_mask() {
        let tokens = Tensor::from_fn(&[4, 2], |i| i as f32 * 0.5);
        let mask = TokenMask::from_visible(vec![true, false, false, true], 0.5, None).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&tokens);
        let (out, idx) = apply_mask(&mut tape, v, &mask).unwrap();
        assert_eq!(idx, vec![0, 3]);
        assert_eq!(tape.to_tensor(out), select_rows(&tokens, &mask).unwrap().0);
        let short = TokenMask::all_visible(3);
        assert!(matches!(apply_mask(&mut tape, v, &short), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(matches!(
            TokenMask::from_visible(vec![false; 4], 0.5, None),
            Err(Error::InvalidMask(_))
        ));
    }

    proptest! {
        #[test]
        fn masks_reproduce_from_seed(seed in any::<u64>(), w in prop::collection::vec(0.0f32..1.0, 32)) {
            let map = AttentionMap::new(2, 16, w).unwrap();
            let a = sample_mask_seeded(&map, 0.8, seed).unwrap();
            let b = sample_mask_seeded(&map, 0.8, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn disjoint_sets_never_overlap(w in prop::collection::vec(0.0f32..1.0, 64), k in 1usize..=5) {
            let map = AttentionMap::new(4, 16, w).unwrap();
            let set = disjoint_masks(&map, k, 0.8).unwrap();
            for i in 0..k {
                prop_assert_eq!(set.masks()[i].visible_count(), 12);
                for j in i + 1..k {
                    let a = set.masks()[i].visible();
                    let b = set.masks()[j].visible();
                    prop_assert!(a.iter().zip(b).all(|(x, y)| !(*x && *y)));
                }
            }
        }
    }
}
