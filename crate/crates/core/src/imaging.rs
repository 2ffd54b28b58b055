//! White-blood-cell nucleus segmentation and patch extraction.
//!
//! Pipeline: RGB -> HSV, Otsu threshold on saturation, binary opening with a
//! disk, distance-transform watershed to split touching nuclei, small-blob
//! removal, then a 200x200 crop around each remaining centroid.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of every extracted cell patch.
pub const PATCH_SIDE: usize = 200;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("pixel buffer holds {found} bytes, expected {expected} for {width}x{height} RGB")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        found: usize,
    },
}

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = width * height * 3;
        if width == 0 || height == 0 || pixels.len() != expected {
            return Err(ImagingError::BufferSize {
                width,
                height,
                expected,
                found: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Reads an 8-bit PNG or BMP (any colour type is converted to RGB).
    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let img = image::open(path).map_err(|source| ImagingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImagingError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Per-pixel hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsvImage {
    pub width: usize,
    pub height: usize,
    pub hue: Vec<f32>,
    pub saturation: Vec<f32>,
    pub value: Vec<f32>,
}

/// Hexcone RGB -> HSV for channels in `[0, 1]`.
pub fn rgb_to_hsv_pixel(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    (if h >= 360.0 { 0.0 } else { h }, s, max)
}

/// Inverse of [`rgb_to_hsv_pixel`]; hue is taken modulo 360.
pub fn hsv_to_rgb_pixel(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h = h.rem_euclid(360.0) / 60.0;
    let sector = (h.floor() as i32).clamp(0, 5);
    let f = h - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn rgb_to_hsv(img: &RgbImage) -> HsvImage {
    let n = img.width * img.height;
    let mut out = HsvImage {
        width: img.width,
        height: img.height,
        hue: Vec::with_capacity(n),
        saturation: Vec::with_capacity(n),
        value: Vec::with_capacity(n),
    };
    for px in img.pixels.chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv_pixel(px[0] as f32 / 255.0, px[1] as f32 / 255.0, px[2] as f32 / 255.0);
        out.hue.push(h);
        out.saturation.push(s);
        out.value.push(v);
    }
    out
}

pub fn hsv_to_rgb(img: &HsvImage) -> RgbImage {
    let mut pixels = Vec::with_capacity(img.hue.len() * 3);
    for i in 0..img.hue.len() {
        let (r, g, b) = hsv_to_rgb_pixel(img.hue[i], img.saturation[i], img.value[i]);
        pixels.extend([r, g, b].map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    RgbImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Bin index for a value in `[0, 1]`. Bins are right-closed, `(k/B, (k+1)/B]`,
/// with 0 folded into bin 0, so `bin(v) <= k` exactly when `v <= (k+1)/B`.
pub fn otsu_bin(v: f32, bins: usize) -> usize {
    let scaled = (v.clamp(0.0, 1.0) as f64) * bins as f64;
    (scaled.ceil() as usize).saturating_sub(1).min(bins - 1)
}

/// Histogram of a `[0, 1]` channel with [`otsu_bin`] binning.
pub fn histogram(channel: &[f32], bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    for &v in channel {
        hist[otsu_bin(v, bins)] += 1;
    }
    hist
}

/// Compares `a/b` with `c/d` exactly for non-negative integers, `b, d > 0`.
fn cmp_fractions(mut a: u128, mut b: u128, mut c: u128, mut d: u128) -> Ordering {
    let mut flipped = false;
    loop {
        let (qa, ra) = (a / b, a % b);
        let (qc, rc) = (c / d, c % d);
        let ord = qa.cmp(&qc);
        if ord != Ordering::Equal {
            return if flipped { ord.reverse() } else { ord };
        }
        match (ra == 0, rc == 0) {
            (true, true) => return Ordering::Equal,
            (true, false) => return if flipped { Ordering::Greater } else { Ordering::Less },
            (false, true) => return if flipped { Ordering::Less } else { Ordering::Greater },
            (false, false) => {
                // a/b vs c/d with equal integer parts reduces to d/rc vs b/ra.
                (a, b, c, d) = (b, ra, d, rc);
                flipped = !flipped;
            }
        }
    }
}

/// Otsu cut on a histogram: the last background bin `k` maximising the
/// between-class variance, lowest `k` on ties.
///
/// Variances are compared exactly as `(S0*n1 - S1*n0)^2 / (n0*n1)`, which is
/// proportional to the between-class variance for a fixed pixel count.
pub fn otsu_cut(hist: &[u64]) -> Result<usize, ImagingError> {
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    let weighted: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for (k, &c) in hist.iter().enumerate().take(hist.len().saturating_sub(1)) {
        n0 += c as u128;
        s0 += k as u128 * c as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = weighted - s0;
        let diff = (s0 * n1).abs_diff(s1 * n0);
        let num = diff * diff;
        let den = n0 * n1;
        if num == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, bn, bd)) => cmp_fractions(num, den, bn, bd) == Ordering::Greater,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
        .ok_or_else(|| ImagingError::Degenerate("histogram has fewer than two occupied bins".into()))
}

/// Otsu threshold of a `[0, 1]` channel. Foreground is `v > threshold`.
pub fn otsu_threshold(channel: &[f32], bins: usize) -> Result<f32, ImagingError> {
    if bins < 2 {
        return Err(ImagingError::Degenerate(format!("{bins} histogram bins")));
    }
    let k = otsu_cut(&histogram(channel, bins))?;
    Ok(((k + 1) as f64 / bins as f64) as f32)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Pixels of `channel` strictly above `threshold`.
    pub fn from_threshold(width: usize, height: usize, channel: &[f32], threshold: f32) -> Self {
        Self {
            width,
            height,
            bits: channel.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Half-widths of a digital disk, indexed by row offset `dy + radius`.
fn disk_half_widths(radius: usize) -> Vec<usize> {
    let r = radius as i64;
    (-r..=r).map(|dy| ((r * r - dy * dy) as f64).sqrt().floor() as usize).collect()
}

fn row_prefix_counts(mask: &BinaryMask, want: bool) -> Vec<u32> {
    let w = mask.width;
    let mut pre = vec![0u32; (w + 1) * mask.height];
    for y in 0..mask.height {
        let row = &mask.bits[y * w..(y + 1) * w];
        let p = &mut pre[y * (w + 1)..(y + 1) * (w + 1)];
        for x in 0..w {
            p[x + 1] = p[x] + (row[x] == want) as u32;
        }
    }
    pre
}

/// Disk erosion; pixels outside the image count as background.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let hw = disk_half_widths(radius);
    let falses = row_prefix_counts(mask, false);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.bits[y * w + x] {
                continue;
            }
            let mut keep = true;
            for (i, &half) in hw.iter().enumerate() {
                let yy = y as i64 + i as i64 - radius as i64;
                if yy < 0 || yy >= h as i64 || x < half || x + half >= w {
                    keep = false;
                    break;
                }
                let p = &falses[yy as usize * (w + 1)..];
                if p[x + half + 1] - p[x - half] > 0 {
                    keep = false;
                    break;
                }
            }
            out.bits[y * w + x] = keep;
        }
    }
    out
}

/// Disk dilation clipped to the image.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let hw = disk_half_widths(radius);
    let trues = row_prefix_counts(mask, true);
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut hit = false;
            for (i, &half) in hw.iter().enumerate() {
                let yy = y as i64 + i as i64 - radius as i64;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                let lo = x.saturating_sub(half);
                let hi = (x + half).min(w - 1);
                let p = &trues[yy as usize * (w + 1)..];
                if p[hi + 1] - p[lo] > 0 {
                    hit = true;
                    break;
                }
            }
            out.bits[y * w + x] = hit;
        }
    }
    out
}

/// Erosion followed by dilation with a disk of the given radius.
pub fn binary_opening(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

/// Integer label raster; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelImage {
    pub fn label_count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }
}

fn neighbours8(idx: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((idx / w) as i64, (idx % w) as i64);
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
        .into_iter()
        .filter_map(move |(dy, dx)| {
            let (yy, xx) = (y + dy, x + dx);
            (yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64).then(|| yy as usize * w + xx as usize)
        })
}

/// 8-connected component labelling in raster order of first pixel.
pub fn connected_components(mask: &BinaryMask) -> LabelImage {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for n in neighbours8(i, w, h) {
                if mask.bits[n] && labels[n] == 0 {
                    labels[n] = next;
                    queue.push_back(n);
                }
            }
        }
    }
    LabelImage {
        width: w,
        height: h,
        labels,
    }
}

/// Exact squared Euclidean distance of every foreground pixel to the nearest
/// background pixel, with everything outside the image treated as background.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<u64> {
    // Work on a grid padded by one background pixel on every side.
    let (w, h) = (mask.width + 2, mask.height + 2);
    const INF: f64 = 1e18;
    let mut grid = vec![0.0f64; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.bits[y * mask.width + x] {
                grid[(y + 1) * w + x + 1] = INF;
            }
        }
    }
    let mut buf = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        edt_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        buf[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&buf[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    let mut d = Vec::with_capacity(mask.width * mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            d.push(grid[(y + 1) * w + x + 1].round() as u64);
        }
    }
    d
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Sliding-window maximum over a `(2r+1)^2` square, separable, clipped at borders.
fn max_filter_square(values: &[u64], w: usize, h: usize, r: usize) -> Vec<u64> {
    fn pass(src: &[u64], dst: &mut [u64], len: usize, r: usize) {
        let mut dq: VecDeque<usize> = VecDeque::new();
        let mut next = 0;
        for i in 0..len {
            let hi = (i + r).min(len - 1);
            while next <= hi {
                while dq.back().is_some_and(|&b| src[b] <= src[next]) {
                    dq.pop_back();
                }
                dq.push_back(next);
                next += 1;
            }
            while dq.front().is_some_and(|&f| f + r < i) {
                dq.pop_front();
            }
            dst[i] = src[*dq.front().expect("window never empty")];
        }
    }
    let mut tmp = vec![0u64; w * h];
    for y in 0..h {
        pass(&values[y * w..(y + 1) * w], &mut tmp[y * w..(y + 1) * w], w, r);
    }
    let mut out = vec![0u64; w * h];
    let mut col = vec![0u64; h];
    let mut col_out = vec![0u64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = tmp[y * w + x];
        }
        pass(&col, &mut col_out, h, r);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    out
}

/// Marker-controlled watershed on the negated distance map.
///
/// Markers are distance-map peaks (maximal within a `min_marker_distance`
/// window) kept greedily in order of decreasing distance if at least
/// `min_marker_distance` from every marker already kept in the same
/// connected component. A component without a surviving peak gets its
/// deepest pixel as a marker, so every foreground pixel ends up labelled.
pub fn watershed_split(mask: &BinaryMask, min_marker_distance: usize) -> LabelImage {
    let (w, h) = (mask.width, mask.height);
    let components = connected_components(mask);
    let dist = squared_distance_transform(mask);
    let peaks = max_filter_square(&dist, w, h, min_marker_distance);

    let mut candidates: Vec<usize> = (0..w * h).filter(|&i| mask.bits[i] && dist[i] == peaks[i]).collect();
    candidates.sort_by(|&a, &b| dist[b].cmp(&dist[a]).then(a.cmp(&b)));

    let n_comp = components.label_count();
    let mut kept: Vec<Vec<usize>> = vec![Vec::new(); n_comp + 1];
    let min_d2 = (min_marker_distance * min_marker_distance) as i64;
    for &c in &candidates {
        let comp = components.labels[c] as usize;
        let (cy, cx) = ((c / w) as i64, (c % w) as i64);
        let far = kept[comp].iter().all(|&m| {
            let (my, mx) = ((m / w) as i64, (m % w) as i64);
            (my - cy).pow(2) + (mx - cx).pow(2) >= min_d2
        });
        if far {
            kept[comp].push(c);
        }
    }
    let mut deepest = vec![None::<usize>; n_comp + 1];
    for i in 0..w * h {
        let comp = components.labels[i] as usize;
        if comp != 0 && deepest[comp].is_none_or(|d| dist[i] > dist[d]) {
            deepest[comp] = Some(i);
        }
    }
    let mut markers: Vec<usize> = Vec::new();
    for comp in 1..=n_comp {
        if kept[comp].is_empty() {
            markers.push(deepest[comp].expect("component has pixels"));
        } else {
            markers.extend(&kept[comp]);
        }
    }
    markers.sort_unstable();

    let mut labels = vec![0u32; w * h];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (k, &m) in markers.iter().enumerate() {
        labels[m] = k as u32 + 1;
        heap.push((dist[m], std::cmp::Reverse(seq), m));
        seq += 1;
    }
    while let Some((_, _, i)) = heap.pop() {
        for n in neighbours8(i, w, h) {
            if mask.bits[n] && labels[n] == 0 {
                labels[n] = labels[i];
                heap.push((dist[n], std::cmp::Reverse(seq), n));
                seq += 1;
            }
        }
    }
    LabelImage {
        width: w,
        height: h,
        labels,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub label: u32,
    pub area: usize,
    /// Mean (row, col) of member pixels.
    pub centroid: (f64, f64),
    pub pixels: Vec<(usize, usize)>,
}

/// Blobs with at least `min_area` pixels, ordered by centroid (row, col).
pub fn filter_blobs(labels: &LabelImage, min_area: usize) -> Vec<Blob> {
    let n = labels.label_count();
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != 0 {
            members[l as usize].push((i / labels.width, i % labels.width));
        }
    }
    let mut blobs: Vec<Blob> = members
        .into_iter()
        .enumerate()
        .skip(1)
        .filter(|(_, px)| !px.is_empty() && px.len() >= min_area)
        .map(|(label, pixels)| {
            let area = pixels.len();
            let (sr, sc) = pixels
                .iter()
                .fold((0u64, 0u64), |(a, b), &(r, c)| (a + r as u64, b + c as u64));
            Blob {
                label: label as u32,
                area,
                centroid: (sr as f64 / area as f64, sc as f64 / area as f64),
                pixels,
            }
        })
        .collect();
    blobs.sort_by(|a, b| {
        a.centroid
            .0
            .total_cmp(&b.centroid.0)
            .then(a.centroid.1.total_cmp(&b.centroid.1))
            .then(a.label.cmp(&b.label))
    });
    blobs
}

/// A fixed 200x200 RGB crop centred on one segmented nucleus.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchImage {
    image: RgbImage,
    pub source: String,
    pub centroid: (f64, f64),
}

impl PatchImage {
    pub fn new(image: RgbImage, source: impl Into<String>, centroid: (f64, f64)) -> Result<Self, ImagingError> {
        if image.width != PATCH_SIDE || image.height != PATCH_SIDE {
            return Err(ImagingError::BufferSize {
                width: image.width,
                height: image.height,
                expected: PATCH_SIDE * PATCH_SIDE * 3,
                found: image.pixels.len(),
            });
        }
        Ok(Self {
            image,
            source: source.into(),
            centroid,
        })
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn pixels(&self) -> &[u8] {
        &self.image.pixels
    }

    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let img = RgbImage::load(path)?;
        let c = (PATCH_SIDE / 2) as f64;
        Self::new(img, path.display().to_string(), (c, c))
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// 200x200 window whose centre pixel (100, 100) is the rounded centroid;
/// out-of-bounds pixels are filled by reflection.
pub fn crop_patch(img: &RgbImage, centroid: (f64, f64), source: &str) -> PatchImage {
    let half = (PATCH_SIDE / 2) as i64;
    let (cy, cx) = (centroid.0.round() as i64, centroid.1.round() as i64);
    let mut pixels = Vec::with_capacity(PATCH_SIDE * PATCH_SIDE * 3);
    for dy in 0..PATCH_SIDE as i64 {
        let sy = reflect_index(cy - half + dy, img.height);
        for dx in 0..PATCH_SIDE as i64 {
            let sx = reflect_index(cx - half + dx, img.width);
            pixels.extend_from_slice(&img.get(sy, sx));
        }
    }
    PatchImage {
        image: RgbImage {
            width: PATCH_SIDE,
            height: PATCH_SIDE,
            pixels,
        },
        source: source.to_string(),
        centroid,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    pub opening_radius: usize,
    pub min_marker_distance: usize,
    pub min_area: usize,
    pub otsu_bins: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            opening_radius: 5,
            min_marker_distance: 20,
            min_area: 800,
            otsu_bins: 256,
        }
    }
}

/// Nuclei found in one field, before cropping.
pub fn segment_blobs(img: &RgbImage, params: &SegmentationParams) -> Vec<Blob> {
    let hsv = rgb_to_hsv(img);
    let threshold = match otsu_threshold(&hsv.saturation, params.otsu_bins) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("segmentation skipped: {e}");
            return Vec::new();
        }
    };
    let mask = BinaryMask::from_threshold(img.width, img.height, &hsv.saturation, threshold);
    let opened = binary_opening(&mask, params.opening_radius);
    let labels = watershed_split(&opened, params.min_marker_distance);
    filter_blobs(&labels, params.min_area)
}

/// Full field segmentation: one patch per retained nucleus, ordered by centroid.
pub fn segment_field(img: &RgbImage, field_id: &str, params: &SegmentationParams) -> Vec<PatchImage> {
    segment_blobs(img, params)
        .iter()
        .map(|b| crop_patch(img, b.centroid, field_id))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Greedy one-to-one matching of detections to truth by ascending distance.
///
/// Precision is reported as 0 when nothing was predicted; recall as 0 when
/// there is no truth.
pub fn segmentation_score(predicted: &[(f64, f64)], truth: &[(f64, f64)], match_radius: f64) -> SegmentationScore {
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt();
            if d <= match_radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    score_from_counts(tp, predicted.len() - tp, truth.len() - tp)
}

pub fn score_from_counts(tp: usize, fp: usize, fn_: usize) -> SegmentationScore {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    SegmentationScore {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    }
}
