//! HSV color content of foreground frames and the per-color feature
//! vectors consumed by the utility model.
//!
//! Hue lives on `[0, 180)`, saturation and value on `[0, 256)`. Frames are
//! ingested as sparse quantized histograms rather than raw pixel lists; a
//! histogram with steps `(1, 1, 1)` is exactly the pixel multiset.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HUE_RANGE: u16 = 180;
pub const SV_RANGE: u16 = 256;

/// A color expressed as a union of half-open hue intervals `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[u16; 2]>", into = "Vec<[u16; 2]>")]
pub struct HueRange {
    intervals: Vec<(u16, u16)>,
}

impl HueRange {
    pub fn new(intervals: impl IntoIterator<Item = (u16, u16)>) -> Result<Self> {
        let mut intervals: Vec<(u16, u16)> = intervals.into_iter().collect();
        if intervals.is_empty() {
            return Err(Error::input("hue range has no intervals"));
        }
        for &(lo, hi) in &intervals {
            if lo >= hi || hi > HUE_RANGE {
                return Err(Error::input(format!(
                    "hue interval [{lo}, {hi}) outside [0, {HUE_RANGE})"
                )));
            }
        }
        intervals.sort_unstable();
        for pair in intervals.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::input(format!(
                    "hue intervals [{}, {}) and [{}, {}) overlap",
                    pair[0].0, pair[0].1, pair[1].0, pair[1].1
                )));
            }
        }
        Ok(Self { intervals })
    }

    /// Red as used throughout the evaluation: `[0,10) ∪ [170,180)`.
    pub fn red() -> Self {
        Self::new([(0, 10), (170, 180)]).expect("static range")
    }

    pub fn intervals(&self) -> &[(u16, u16)] {
        &self.intervals
    }

    #[inline]
    pub fn contains(&self, hue: u16) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= hue && hue < hi)
    }

    /// Every interval boundary falls on a multiple of `step`, so a hue cell
    /// of width `step` lies entirely inside or entirely outside the range.
    pub fn aligned_to(&self, step: u16) -> bool {
        self.intervals.iter().all(|&(lo, hi)| lo % step == 0 && hi % step == 0)
    }
}

impl TryFrom<Vec<[u16; 2]>> for HueRange {
    type Error = Error;

    fn try_from(v: Vec<[u16; 2]>) -> Result<Self> {
        HueRange::new(v.into_iter().map(|[lo, hi]| (lo, hi)))
    }
}

impl From<HueRange> for Vec<[u16; 2]> {
    fn from(r: HueRange) -> Self {
        r.intervals.into_iter().map(|(lo, hi)| [lo, hi]).collect()
    }
}

/// Named colors a query may reference, ordered by name.
pub type Palette = BTreeMap<String, HueRange>;

/// Saturation × value discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct BinGrid {
    sat_bin_size: u16,
    val_bin_size: u16,
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    sat_bin_size: u16,
    val_bin_size: u16,
}

impl TryFrom<GridSpec> for BinGrid {
    type Error = Error;

    fn try_from(g: GridSpec) -> Result<Self> {
        BinGrid::new(g.sat_bin_size, g.val_bin_size)
    }
}

impl From<BinGrid> for GridSpec {
    fn from(g: BinGrid) -> Self {
        GridSpec {
            sat_bin_size: g.sat_bin_size,
            val_bin_size: g.val_bin_size,
        }
    }
}

impl Default for BinGrid {
    /// 8 × 8 bins (`s = v = 32`).
    fn default() -> Self {
        Self {
            sat_bin_size: 32,
            val_bin_size: 32,
        }
    }
}

impl BinGrid {
    pub fn new(sat_bin_size: u16, val_bin_size: u16) -> Result<Self> {
        for (name, size) in [("saturation", sat_bin_size), ("value", val_bin_size)] {
            if size == 0 || !SV_RANGE.is_multiple_of(size) {
                return Err(Error::config(format!(
                    "{name} bin size {size} does not divide {SV_RANGE}"
                )));
            }
        }
        Ok(Self {
            sat_bin_size,
            val_bin_size,
        })
    }

    pub fn sat_bin_size(&self) -> u16 {
        self.sat_bin_size
    }

    pub fn val_bin_size(&self) -> u16 {
        self.val_bin_size
    }

    pub fn n_sat_bins(&self) -> usize {
        (SV_RANGE / self.sat_bin_size) as usize
    }

    pub fn n_val_bins(&self) -> usize {
        (SV_RANGE / self.val_bin_size) as usize
    }
}

/// Bin index `i` with `i·s ≤ saturation < (i+1)·s`.
pub fn sat_bin(saturation: u16, grid: &BinGrid) -> Result<usize> {
    if saturation >= SV_RANGE {
        return Err(Error::input(format!("saturation {saturation} outside [0, 256)")));
    }
    Ok((saturation / grid.sat_bin_size) as usize)
}

/// Bin index `j` with `j·v ≤ value < (j+1)·v`.
pub fn val_bin(value: u16, grid: &BinGrid) -> Result<usize> {
    if value >= SV_RANGE {
        return Err(Error::input(format!("value {value} outside [0, 256)")));
    }
    Ok((value / grid.val_bin_size) as usize)
}

/// Dense row-major `B_S × B_V` matrix over saturation/value bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvMatrix {
    n_sat: usize,
    n_val: usize,
    data: Vec<f64>,
}

impl SvMatrix {
    pub fn zeros(grid: &BinGrid) -> Self {
        let (n_sat, n_val) = (grid.n_sat_bins(), grid.n_val_bins());
        Self {
            n_sat,
            n_val,
            data: vec![0.0; n_sat * n_val],
        }
    }

    pub fn from_rows(n_sat: usize, n_val: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_sat * n_val {
            return Err(Error::Format(format!(
                "matrix has {} entries, expected {}x{}",
                data.len(),
                n_sat,
                n_val
            )));
        }
        Ok(Self { n_sat, n_val, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_sat, self.n_val)
    }

    pub fn matches(&self, grid: &BinGrid) -> bool {
        self.shape() == (grid.n_sat_bins(), grid.n_val_bins())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_val + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.data[i * self.n_val + j] = x;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Elementwise product summed over all bins.
    #[inline]
    pub fn dot(&self, other: &SvMatrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Histogram cell widths along hue, saturation and value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u16; 3]", into = "[u16; 3]")]
pub struct Quantization {
    pub hue_step: u16,
    pub sat_step: u16,
    pub val_step: u16,
}

impl Quantization {
    pub const EXACT: Quantization = Quantization {
        hue_step: 1,
        sat_step: 1,
        val_step: 1,
    };

    pub fn new(hue_step: u16, sat_step: u16, val_step: u16) -> Result<Self> {
        if hue_step == 0 || !HUE_RANGE.is_multiple_of(hue_step) {
            return Err(Error::config(format!("hue step {hue_step} does not divide 180")));
        }
        for step in [sat_step, val_step] {
            if step == 0 || !SV_RANGE.is_multiple_of(step) {
                return Err(Error::config(format!("step {step} does not divide 256")));
            }
        }
        Ok(Self {
            hue_step,
            sat_step,
            val_step,
        })
    }

    fn cell_limits(&self) -> (u16, u16, u16) {
        (
            HUE_RANGE / self.hue_step,
            SV_RANGE / self.sat_step,
            SV_RANGE / self.val_step,
        )
    }
}

impl Default for Quantization {
    fn default() -> Self {
        Self {
            hue_step: 1,
            sat_step: 32,
            val_step: 32,
        }
    }
}

impl fmt::Display for Quantization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{}]", self.hue_step, self.sat_step, self.val_step)
    }
}

impl TryFrom<[u16; 3]> for Quantization {
    type Error = Error;

    fn try_from(q: [u16; 3]) -> Result<Self> {
        Quantization::new(q[0], q[1], q[2])
    }
}

impl From<Quantization> for [u16; 3] {
    fn from(q: Quantization) -> Self {
        [q.hue_step, q.sat_step, q.val_step]
    }
}

/// Cell coordinates `(h_cell, s_cell, v_cell)` in histogram units.
pub type Cell = (u16, u16, u16);

/// Sparse quantized HSV histogram of a frame's foreground pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsvHistogram {
    quant: Quantization,
    counts: BTreeMap<Cell, u64>,
    total: u64,
}

impl HsvHistogram {
    pub fn empty(quant: Quantization) -> Self {
        Self {
            quant,
            counts: BTreeMap::new(),
            total: 0,
        }
    }

    /// Builds a histogram from explicit cells, checking ranges and that the
    /// declared total matches the cell counts. Repeated cells accumulate.
    pub fn from_cells(quant: Quantization, cells: impl IntoIterator<Item = (Cell, u64)>, total: u64) -> Result<Self> {
        let mut hist = Self::empty(quant);
        for (cell, count) in cells {
            hist.add_cell(cell, count)?;
        }
        if hist.total != total {
            return Err(Error::input(format!(
                "histogram declares {total} pixels but cells sum to {}",
                hist.total
            )));
        }
        Ok(hist)
    }

    /// Quantizes a raw pixel list.
    pub fn from_pixels(quant: Quantization, pixels: &[(u16, u16, u16)]) -> Result<Self> {
        let mut hist = Self::empty(quant);
        for &px in pixels {
            hist.add_pixel(px, 1)?;
        }
        Ok(hist)
    }

    pub fn add_pixel(&mut self, (h, s, v): (u16, u16, u16), count: u64) -> Result<()> {
        if h >= HUE_RANGE || s >= SV_RANGE || v >= SV_RANGE {
            return Err(Error::input(format!("pixel ({h},{s},{v}) out of HSV range")));
        }
        let q = self.quant;
        self.add_cell((h / q.hue_step, s / q.sat_step, v / q.val_step), count)
    }

    pub fn add_cell(&mut self, cell: Cell, count: u64) -> Result<()> {
        let (hl, sl, vl) = self.quant.cell_limits();
        if cell.0 >= hl || cell.1 >= sl || cell.2 >= vl {
            return Err(Error::input(format!(
                "cell {cell:?} out of range for quantization {}",
                self.quant
            )));
        }
        if count > 0 {
            *self.counts.entry(cell).or_insert(0) += count;
            self.total += count;
        }
        Ok(())
    }

    pub fn quant(&self) -> Quantization {
        self.quant
    }

    pub fn total_fg_pixels(&self) -> u64 {
        self.total
    }

    pub fn cells(&self) -> impl Iterator<Item = (Cell, u64)> + '_ {
        self.counts.iter().map(|(&c, &n)| (c, n))
    }

    fn check_hue_alignment(&self, color: &HueRange) -> Result<()> {
        if color.aligned_to(self.quant.hue_step) {
            Ok(())
        } else {
            Err(Error::config(format!(
                "hue range {:?} not aligned to histogram hue step {}",
                color.intervals(),
                self.quant.hue_step
            )))
        }
    }
}

/// Fraction of foreground pixels whose hue lies in `color`; 0 for an empty
/// foreground.
pub fn hue_fraction(hist: &HsvHistogram, color: &HueRange) -> Result<f64> {
    hist.check_hue_alignment(color)?;
    if hist.total == 0 {
        return Ok(0.0);
    }
    let step = hist.quant.hue_step;
    let in_range: u64 = hist
        .cells()
        .filter(|((h, _, _), _)| color.contains(h * step))
        .map(|(_, n)| n)
        .sum();
    Ok(in_range as f64 / hist.total as f64)
}

/// Features of one color within one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorFeatures {
    pub hue_fraction: f64,
    pub pf: SvMatrix,
    pub hue_pixel_count: u64,
}

/// The shedder's only view of a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub per_color: BTreeMap<String, ColorFeatures>,
    pub total_fg_pixels: u64,
}

impl FrameFeatures {
    pub fn color(&self, name: &str) -> Option<&ColorFeatures> {
        self.per_color.get(name)
    }
}

/// Computes hue fraction and the pixel-fraction matrix for every color.
///
/// The grid's bin sizes must be multiples of the histogram's saturation and
/// value steps so each cell maps to exactly one bin.
pub fn extract_features(hist: &HsvHistogram, colors: &Palette, grid: &BinGrid) -> Result<FrameFeatures> {
    let q = hist.quant;
    if !grid.sat_bin_size.is_multiple_of(q.sat_step) || !grid.val_bin_size.is_multiple_of(q.val_step) {
        return Err(Error::config(format!(
            "grid ({}, {}) not aligned to histogram quantization {}",
            grid.sat_bin_size, grid.val_bin_size, q
        )));
    }
    for color in colors.values() {
        hist.check_hue_alignment(color)?;
    }

    let sat_div = grid.sat_bin_size / q.sat_step;
    let val_div = grid.val_bin_size / q.val_step;
    let n_val = grid.n_val_bins();

    let mut per_color = BTreeMap::new();
    for (name, color) in colors {
        let mut pf = SvMatrix::zeros(grid);
        let mut hue_pixels = 0u64;
        {
            let data = pf.data_mut();
            for ((h, s, v), n) in hist.cells() {
                if color.contains(h * q.hue_step) {
                    let i = (s / sat_div) as usize;
                    let j = (v / val_div) as usize;
                    data[i * n_val + j] += n as f64;
                    hue_pixels += n;
                }
            }
            if hue_pixels > 0 {
                let denom = hue_pixels as f64;
                data.iter_mut().for_each(|x| *x /= denom);
            }
        }
        let hue_fraction = if hist.total == 0 {
            0.0
        } else {
            hue_pixels as f64 / hist.total as f64
        };
        per_color.insert(
            name.clone(),
            ColorFeatures {
                hue_fraction,
                pf,
                hue_pixel_count: hue_pixels,
            },
        );
    }

    Ok(FrameFeatures {
        per_color,
        total_fg_pixels: hist.total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid32() -> BinGrid {
        BinGrid::new(32, 32).unwrap()
    }

    fn palette_red_blue() -> Palette {
        let mut p = Palette::new();
        p.insert("red".into(), HueRange::red());
        p.insert("blue".into(), HueRange::new([(100, 130)]).unwrap());
        p
    }

    #[test]
    fn sat_and_val_bins() {
        let g = grid32();
        assert_eq!(sat_bin(0, &g).unwrap(), 0);
        assert_eq!(sat_bin(255, &g).unwrap(), 7);
        assert_eq!(sat_bin(64, &g).unwrap(), 2);
        assert_eq!(val_bin(0, &g).unwrap(), 0);
        assert_eq!(val_bin(31, &g).unwrap(), 0);
        assert_eq!(val_bin(200, &g).unwrap(), 6);
        assert!(sat_bin(256, &g).is_err());
        assert!(val_bin(300, &g).is_err());
    }

    #[test]
    fn grid_must_divide_256() {
        assert!(BinGrid::new(30, 32).is_err());
        assert!(BinGrid::new(32, 0).is_err());
        let g = BinGrid::new(16, 64).unwrap();
        assert_eq!((g.n_sat_bins(), g.n_val_bins()), (16, 4));
    }

    #[test]
    fn hue_range_validation() {
        assert!(HueRange::new(Vec::<(u16, u16)>::new()).is_err());
        assert!(HueRange::new([(10, 10)]).is_err());
        assert!(HueRange::new([(170, 181)]).is_err());
        assert!(HueRange::new([(0, 20), (10, 30)]).is_err());
        let r = HueRange::red();
        assert!(r.contains(0) && r.contains(9) && r.contains(175));
        assert!(!r.contains(10) && !r.contains(169));
    }

    #[test]
    fn hue_fraction_examples() {
        let q = Quantization::EXACT;
        let red = HueRange::red();
        let hist = HsvHistogram::from_pixels(q, &[(5, 10, 10), (5, 20, 20), (60, 1, 1), (110, 2, 2)]).unwrap();
        assert_eq!(hue_fraction(&hist, &red).unwrap(), 0.5);

        let empty = HsvHistogram::empty(q);
        assert_eq!(hue_fraction(&empty, &red).unwrap(), 0.0);

        let all = HsvHistogram::from_pixels(q, &[(1, 0, 0), (175, 0, 0)]).unwrap();
        assert_eq!(hue_fraction(&all, &red).unwrap(), 1.0);
    }

    #[test]
    fn extract_two_red_two_blue() {
        let hist = HsvHistogram::from_pixels(
            Quantization::default(),
            &[(3, 250, 250), (175, 250, 250), (110, 40, 40), (120, 90, 10)],
        )
        .unwrap();
        let f = extract_features(&hist, &palette_red_blue(), &grid32()).unwrap();
        let red = f.color("red").unwrap();
        assert_eq!(red.hue_fraction, 0.5);
        assert_eq!(red.hue_pixel_count, 2);
        assert_eq!(red.pf.get(7, 7), 1.0);
        assert_eq!(red.pf.sum(), 1.0);
        let blue = f.color("blue").unwrap();
        assert_eq!(blue.pf.get(1, 1), 0.5);
        assert_eq!(blue.pf.get(2, 0), 0.5);
    }

    #[test]
    fn extract_without_color_pixels_is_zero() {
        let hist = HsvHistogram::from_pixels(Quantization::EXACT, &[(110, 40, 40)]).unwrap();
        let f = extract_features(&hist, &palette_red_blue(), &grid32()).unwrap();
        let red = f.color("red").unwrap();
        assert_eq!(red.hue_fraction, 0.0);
        assert_eq!(red.pf.sum(), 0.0);

        let single = HsvHistogram::from_pixels(Quantization::EXACT, &[(2, 0, 0)]).unwrap();
        let f = extract_features(&single, &palette_red_blue(), &grid32()).unwrap();
        assert_eq!(f.color("red").unwrap().pf.get(0, 0), 1.0);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let hist = HsvHistogram::empty(Quantization::new(1, 64, 32).unwrap());
        assert!(matches!(
            extract_features(&hist, &palette_red_blue(), &grid32()),
            Err(Error::Config(_))
        ));
        let coarse_hue = HsvHistogram::empty(Quantization::new(20, 32, 32).unwrap());
        assert!(matches!(
            hue_fraction(&coarse_hue, &HueRange::red()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn histogram_total_must_match() {
        let q = Quantization::default();
        assert!(HsvHistogram::from_cells(q, [((0, 7, 7), 3)], 4).is_err());
        assert!(HsvHistogram::from_cells(q, [((0, 8, 0), 1)], 1).is_err());
        let h = HsvHistogram::from_cells(q, [((0, 7, 7), 3), ((0, 7, 7), 1)], 4).unwrap();
        assert_eq!(h.cells().count(), 1);
    }

    fn pixel() -> impl Strategy<Value = (u16, u16, u16)> {
        (0u16..180, 0u16..256, 0u16..256)
    }

    proptest! {
        #[test]
        fn bins_partition_the_range(x in 0u16..256, size in prop::sample::select(vec![1u16, 2, 4, 8, 16, 32, 64, 128, 256])) {
            let g = BinGrid::new(size, size).unwrap();
            let i = sat_bin(x, &g).unwrap();
            prop_assert!(i * size as usize <= x as usize && (x as usize) < (i + 1) * size as usize);
            prop_assert!(i < g.n_sat_bins());
            prop_assert_eq!(val_bin(x, &g).unwrap(), i);
        }

        #[test]
        fn pf_normalized_and_coarsening_sound(pixels in prop::collection::vec(pixel(), 0..200)) {
            let grid = grid32();
            let palette = palette_red_blue();
            let exact = HsvHistogram::from_pixels(Quantization::EXACT, &pixels).unwrap();
            let coarse = HsvHistogram::from_pixels(Quantization::new(1, 32, 32).unwrap(), &pixels).unwrap();
            let fe = extract_features(&exact, &palette, &grid).unwrap();
            let fc = extract_features(&coarse, &palette, &grid).unwrap();
            prop_assert_eq!(&fe, &fc);
            for cf in fe.per_color.values() {
                prop_assert!(cf.pf.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
                if cf.hue_pixel_count > 0 {
                    prop_assert!((cf.pf.sum() - 1.0).abs() < 1e-9);
                } else {
                    prop_assert_eq!(cf.pf.sum(), 0.0);
                }
            }
        }

        #[test]
        fn features_match_direct_pixel_count(pixels in prop::collection::vec(pixel(), 1..100)) {
            let grid = grid32();
            let red = HueRange::red();
            let mut palette = Palette::new();
            palette.insert("red".into(), red.clone());
            let hist = HsvHistogram::from_pixels(Quantization::EXACT, &pixels).unwrap();
            let f = extract_features(&hist, &palette, &grid).unwrap();
            let cf = f.color("red").unwrap();
            let reds: Vec<_> = pixels.iter().filter(|p| red.contains(p.0)).collect();
            prop_assert_eq!(cf.hue_pixel_count as usize, reds.len());
            for i in 0..8 {
                for j in 0..8 {
                    let n = reds.iter().filter(|p| (p.1 / 32) as usize == i && (p.2 / 32) as usize == j).count();
                    let expect = if reds.is_empty() { 0.0 } else { n as f64 / reds.len() as f64 };
                    prop_assert!((cf.pf.get(i, j) - expect).abs() < 1e-12);
                }
            }
        }
    }
}
