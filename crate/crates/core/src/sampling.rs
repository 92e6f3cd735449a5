//! LR/HR training pairs from simulated second-stage acquisitions.
//!
//! Planes are taken at fixed `x` from `(nx, ny, nz)` volumes, with rows
//! indexed by `y` and columns by `z`. A patch is addressed by its frame,
//! slab `x`, and the top-left `(row, col)` offset inside the plane.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchMeta {
    /// 1-based frame number.
    pub frame: usize,
    pub slab: usize,
    pub row: usize,
    pub col: usize,
    pub flip_rows: bool,
    pub flip_cols: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub size: usize,
    pub channels: usize,
    /// Channel-major `channels x size x size`.
    pub lr: Vec<f32>,
    pub hr: Vec<f32>,
    pub meta: PatchMeta,
}

impl PatchPair {
    pub fn lr_channel(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.lr[c * n..(c + 1) * n]
    }

    pub fn center(&self) -> &[f32] {
        self.lr_channel(self.channels / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchGrid {
    pub patch_size: usize,
    /// Defaults to half the patch size when absent.
    pub stride: Option<usize>,
    /// Patches whose HR foreground fraction is below this are dropped.
    pub min_foreground: f32,
    /// Foreground pixels exceed this fraction of the HR volume maximum.
    pub foreground_threshold: f32,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self { patch_size: 64, stride: None, min_foreground: 0.05, foreground_threshold: 0.01 }
    }
}

impl PatchGrid {
    pub fn new(patch_size: usize, stride: usize) -> Self {
        Self { patch_size, stride: Some(stride), ..Default::default() }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.patch_size / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride() == 0 {
            return Err(Error::Config("patch size and stride must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_foreground) || !(0.0..1.0).contains(&self.foreground_threshold) {
            return Err(Error::Config("foreground fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Context window `k-L ..= k+L`, clamped to `[1, num_frames]`.
pub fn temporal_window(k: usize, l: usize, num_frames: usize) -> Vec<usize> {
    (0..=2 * l).map(|i| (k + i).saturating_sub(l).clamp(1, num_frames.max(1))).collect()
}

/// Context half-width for interleave `n`: `n / 2` rounded half up.
pub fn default_context(n_interleave: usize) -> usize {
    n_interleave.div_ceil(2)
}

/// Patch offsets along an axis of length `n`: a regular grid plus one patch
/// flush with the far edge.
pub fn patch_offsets(n: usize, p: usize, stride: usize) -> Result<Vec<usize>> {
    if p == 0 || p > n {
        return Err(Error::Shape(format!("patch size {p} does not fit a plane side of {n}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let mut out: Vec<usize> = (0..=n - p).step_by(stride).collect();
    if *out.last().unwrap() != n - p {
        out.push(n - p);
    }
    Ok(out)
}

fn read_patch(v: &Volume, x: usize, row: usize, col: usize, p: usize, out: &mut Vec<f32>) {
    for y in row..row + p {
        for z in col..col + p {
            out.push(v.get(x, y, z));
        }
    }
}

/// Flips a `p x p` image in place.
pub fn flip_image(img: &mut [f32], p: usize, rows: bool, cols: bool) {
    if rows {
        for r in 0..p / 2 {
            let (top, bottom) = img.split_at_mut((p - 1 - r) * p);
            top[r * p..(r + 1) * p].swap_with_slice(&mut bottom[..p]);
        }
    }
    if cols {
        for row in img.chunks_mut(p) {
            row.reverse();
        }
    }
}

/// Applies the given flips to every channel of the pair and records them.
pub fn flip_pair(mut pair: PatchPair, rows: bool, cols: bool) -> PatchPair {
    let p = pair.size;
    for c in pair.lr.chunks_mut(p * p) {
        flip_image(c, p, rows, cols);
    }
    flip_image(&mut pair.hr, p, rows, cols);
    pair.meta.flip_rows ^= rows;
    pair.meta.flip_cols ^= cols;
    pair
}

/// Flips each spatial axis independently with probability 1/2.
pub fn augment_flip(pair: PatchPair, seed: u64) -> PatchPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_bool(0.5);
    let cols = rng.random_bool(0.5);
    flip_pair(pair, rows, cols)
}

/// Lazily materialised training set over a frame sequence.
///
/// `lr_frames[k-1]` is the interpolated second-stage volume of frame `k` and
/// `hr_frames[k-1]` the axis-swapped interpolated frame.
#[derive(Debug, Clone)]
pub struct PairSet {
    lr_frames: Vec<Volume>,
    hr_frames: Vec<Volume>,
    context: usize,
    patch_size: usize,
    index: Vec<PatchMeta>,
}

impl PairSet {
    /// Indexes every patch of the frames in `targets` (1-based positions).
    pub fn new(
        lr_frames: Vec<Volume>,
        hr_frames: Vec<Volume>,
        targets: &[usize],
        context: usize,
        grid: &PatchGrid,
    ) -> Result<Self> {
        grid.validate()?;
        if lr_frames.len() != hr_frames.len() || lr_frames.is_empty() {
            return Err(Error::Shape("LR and HR frame sequences must be nonempty and of equal length".into()));
        }
        let shape = hr_frames[0].shape();
        if lr_frames.iter().chain(&hr_frames).any(|v| v.shape() != shape) {
            return Err(Error::Shape("all training volumes must share one shape".into()));
        }
        let [nx, ny, nz] = shape;
        let p = grid.patch_size;
        let rows = patch_offsets(ny, p, grid.stride())?;
        let cols = patch_offsets(nz, p, grid.stride())?;
        let n = lr_frames.len();
        if let Some(&k) = targets.iter().find(|&&k| k == 0 || k > n) {
            return Err(Error::State(format!("target frame {k} outside 1..={n}")));
        }
        let mut index: Vec<PatchMeta> = targets
            .par_iter()
            .flat_map_iter(|&k| {
                let hr = &hr_frames[k - 1];
                let cut = grid.foreground_threshold * hr.max();
                let need = (grid.min_foreground * (p * p) as f32).ceil() as usize;
                let mut metas = Vec::new();
                let mut buf = Vec::with_capacity(p * p);
                for x in 0..nx {
                    for &row in &rows {
                        for &col in &cols {
                            buf.clear();
                            read_patch(hr, x, row, col, p, &mut buf);
                            if buf.iter().filter(|&&v| v > cut).count() >= need {
                                metas.push(PatchMeta { frame: k, slab: x, row, col, flip_rows: false, flip_cols: false });
                            }
                        }
                    }
                }
                metas
            })
            .collect();
        index.sort();
        Ok(Self { lr_frames, hr_frames, context, patch_size: p, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[PatchMeta] {
        &self.index
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        2 * self.context + 1
    }

    pub fn num_frames(&self) -> usize {
        self.lr_frames.len()
    }

    /// Reads the pair at `meta`, applying the flips it records.
    pub fn read(&self, meta: &PatchMeta) -> PatchPair {
        let p = self.patch_size;
        let window = temporal_window(meta.frame, self.context, self.lr_frames.len());
        let mut lr = Vec::with_capacity(window.len() * p * p);
        for &f in &window {
            read_patch(&self.lr_frames[f - 1], meta.slab, meta.row, meta.col, p, &mut lr);
        }
        let mut hr = Vec::with_capacity(p * p);
        read_patch(&self.hr_frames[meta.frame - 1], meta.slab, meta.row, meta.col, p, &mut hr);
        let base = PatchPair {
            size: p,
            channels: window.len(),
            lr,
            hr,
            meta: PatchMeta { flip_rows: false, flip_cols: false, ..*meta },
        };
        flip_pair(base, meta.flip_rows, meta.flip_cols)
    }

    pub fn get(&self, i: usize) -> PatchPair {
        self.read(&self.index[i])
    }

    /// All HR volumes; the denoiser trains on their planes.
    pub fn hr_frames(&self) -> &[Volume] {
        &self.hr_frames
    }
}

/// All pairs of frame `k` in canonical order.
///
/// `s_tilde_seq[i]` belongs to frame `i + 1`; `f_tilde_t` is frame `k`'s
/// axis-swapped interpolated volume.
pub fn extract_pairs(
    s_tilde_seq: &[Volume],
    f_tilde_t: &Volume,
    k: usize,
    l: usize,
    grid: &PatchGrid,
) -> Result<Vec<PatchPair>> {
    let n = s_tilde_seq.len();
    if k == 0 || k > n {
        return Err(Error::State(format!("frame {k} outside 1..={n}")));
    }
    // only frame k's HR volume is ever read
    let mut hr = s_tilde_seq.to_vec();
    hr[k - 1] = f_tilde_t.clone();
    let set = PairSet::new(s_tilde_seq.to_vec(), hr, &[k], l, grid)?;
    Ok((0..set.len()).map(|i| set.get(i)).collect())
}

/// Writes pairs as `<stem>.jsonl` (one meta record per line) and
/// `<stem>.bin` (lr then hr payloads, little-endian f32).
pub fn write_dataset(dir: impl AsRef<Path>, stem: &str, pairs: &[PatchPair]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut meta = BufWriter::new(fs::File::create(dir.join(format!("{stem}.jsonl")))?);
    let mut bin = BufWriter::new(fs::File::create(dir.join(format!("{stem}.bin")))?);
    let mut offset = 0u64;
    for p in pairs {
        let record = serde_json::json!({
            "meta": p.meta,
            "size": p.size,
            "channels": p.channels,
            "offset": offset,
        });
        writeln!(meta, "{record}")?;
        for v in p.lr.iter().chain(&p.hr) {
            bin.write_all(&v.to_le_bytes())?;
        }
        offset += ((p.lr.len() + p.hr.len()) * 4) as u64;
    }
    meta.flush()?;
    bin.flush()?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PatchPair>> {
    #[derive(Deserialize)]
    struct Record {
        meta: PatchMeta,
        size: usize,
        channels: usize,
        offset: u64,
    }
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(format!("{stem}.jsonl")))?;
    let bin = fs::read(dir.join(format!("{stem}.bin")))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: Record = serde_json::from_str(line)?;
        let n = r.size * r.size;
        let start = r.offset as usize;
        let end = start + (r.channels + 1) * n * 4;
        let bytes = bin
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("dataset payload truncated at offset {start}")))?;
        let vals: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(PatchPair {
            size: r.size,
            channels: r.channels,
            lr: vals[..r.channels * n].to_vec(),
            hr: vals[r.channels * n..].to_vec(),
            meta: r.meta,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3], frame: f32) -> Volume {
        Volume::from_fn(shape, [1.0; 3], |x, y, z| 1.0 + frame * 1000.0 + x as f32 * 100.0 + y as f32 + z as f32 * 0.01)
            .unwrap()
    }

    #[test]
    fn window_examples() {
        assert_eq!(temporal_window(5, 2, 10), vec![3, 4, 5, 6, 7]);
        assert_eq!(temporal_window(1, 2, 10), vec![1, 1, 1, 2, 3]);
        assert_eq!(temporal_window(10, 1, 10), vec![9, 10, 10]);
        assert_eq!(temporal_window(4, 0, 10), vec![4]);
    }

    #[test]
    fn context_for_interleave() {
        assert_eq!(default_context(1), 1);
        assert_eq!(default_context(2), 1);
        assert_eq!(default_context(3), 2);
        assert_eq!(default_context(4), 2);
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(patch_offsets(64, 64, 7).unwrap(), vec![0]);
        assert_eq!(patch_offsets(96, 64, 32).unwrap(), vec![0, 32]);
        assert_eq!(patch_offsets(100, 64, 32).unwrap(), vec![0, 32, 36]);
        assert!(matches!(patch_offsets(32, 64, 32), Err(Error::Shape(_))));

        let shape = [2, 96, 96];
        let seq = vec![ramp(shape, 0.0), ramp(shape, 1.0)];
        let pairs = extract_pairs(&seq, &seq[0], 1, 1, &PatchGrid::new(64, 32)).unwrap();
        assert_eq!(pairs.len(), 2 * 4);
    }

    #[test]
    fn channels_follow_window_and_align_with_hr() {
        let shape = [3, 10, 12];
        let seq: Vec<Volume> = (0..4).map(|f| ramp(shape, f as f32)).collect();
        let hr = ramp(shape, 1.0);
        let grid = PatchGrid { min_foreground: 0.0, ..PatchGrid::new(6, 4) };
        let pairs = extract_pairs(&seq, &hr, 2, 1, &grid).unwrap();
        for p in &pairs {
            assert_eq!(p.channels, 3);
            let m = p.meta;
            for (c, f) in [1usize, 2, 3].iter().enumerate() {
                let ch = p.lr_channel(c);
                assert_eq!(ch[0], seq[f - 1].get(m.slab, m.row, m.col));
                assert_eq!(ch[6 * 6 - 1], seq[f - 1].get(m.slab, m.row + 5, m.col + 5));
            }
            assert_eq!(p.center(), &p.hr[..]);
        }
        let mut metas: Vec<PatchMeta> = pairs.iter().map(|p| p.meta).collect();
        let sorted = {
            metas.sort();
            metas.clone()
        };
        assert_eq!(pairs.iter().map(|p| p.meta).collect::<Vec<_>>(), sorted);
    }

    #[test]
    fn background_patches_dropped() {
        let shape = [1, 8, 16];
        let v = Volume::from_fn(shape, [1.0; 3], |_, _, z| if z < 8 { 1.0 } else { 0.0 }).unwrap();
        let pairs = extract_pairs(&[v.clone()], &v, 1, 0, &PatchGrid::new(8, 8)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].meta.col, 0);
    }

    #[test]
    fn flips() {
        let shape = [1, 4, 4];
        let v = ramp(shape, 0.0);
        let grid = PatchGrid::new(4, 4);
        let pair = extract_pairs(&[v.clone()], &v, 1, 0, &grid).unwrap().remove(0);
        let both = flip_pair(pair.clone(), true, true);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(both.hr[r * 4 + c], pair.hr[(3 - r) * 4 + (3 - c)]);
            }
        }
        assert_eq!(flip_pair(both.clone(), true, true), pair);

        let none = (0..64u64)
            .find(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                !rng.random_bool(0.5) && !rng.random_bool(0.5)
            })
            .unwrap();
        assert_eq!(augment_flip(pair.clone(), none), pair);
        assert_eq!(augment_flip(pair.clone(), 9), augment_flip(pair.clone(), 9));
    }

    #[test]
    fn unflipping_rereads_sources() {
        let shape = [2, 8, 8];
        let seq: Vec<Volume> = (0..3).map(|f| ramp(shape, f as f32)).collect();
        let set = PairSet::new(seq.clone(), seq.clone(), &[1, 2, 3], 1, &PatchGrid::new(4, 4)).unwrap();
        for i in 0..set.len() {
            let aug = augment_flip(set.get(i), i as u64);
            assert_eq!(set.read(&aug.meta), aug);
            let m = aug.meta;
            let restored = flip_pair(aug, m.flip_rows, m.flip_cols);
            assert_eq!(restored, set.get(i));
        }
    }

    #[test]
    fn dataset_dump_roundtrip() {
        let shape = [2, 8, 8];
        let seq: Vec<Volume> = (0..2).map(|f| ramp(shape, f as f32)).collect();
        let pairs = extract_pairs(&seq, &seq[1], 2, 1, &PatchGrid::new(4, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "pairs", &pairs).unwrap();
        assert_eq!(read_dataset(dir.path(), "pairs").unwrap(), pairs);
    }
}
