//! Color renderings of masks, predictions and weight maps, laid out as
//! side-by-side comparison panels.

use crate::error::{ensure, Result};
use crate::imagery::{FloatImage, LabelMask, WeightMap};

const PALETTE: [[u8; 3]; 8] = [
    [20, 20, 20],
    [230, 200, 40],
    [40, 160, 220],
    [200, 60, 60],
    [70, 180, 90],
    [160, 90, 200],
    [240, 140, 40],
    [200, 200, 200],
];
const GAP: usize = 2;
const GAP_COLOR: [u8; 3] = [255, 255, 255];

/// Interleaved RGB tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

pub fn mask_tile(mask: &LabelMask) -> Tile {
    let rgb = mask
        .labels()
        .iter()
        .flat_map(|&l| PALETTE[l as usize % PALETTE.len()])
        .collect();
    Tile {
        width: mask.width(),
        height: mask.height(),
        rgb,
    }
}

pub fn image_tile(img: &FloatImage) -> Tile {
    let bytes = img.to_bytes();
    let rgb = if img.channels() == 3 {
        bytes
    } else {
        bytes.iter().flat_map(|&b| [b, b, b]).collect()
    };
    Tile {
        width: img.width(),
        height: img.height(),
        rgb,
    }
}

/// Heat rendering normalized to the map's maximum: black, red, yellow, white.
pub fn weight_tile(map: &WeightMap) -> Tile {
    let max = map.weights().iter().copied().fold(0.0f32, f32::max);
    let rgb = map
        .weights()
        .iter()
        .flat_map(|&w| {
            let t = if max > 0.0 { f64::from(w / max) } else { 0.0 };
            let ch = |lo: f64| ((t * 3.0 - lo).clamp(0.0, 1.0) * 255.0).round() as u8;
            [ch(0.0), ch(1.0), ch(2.0)]
        })
        .collect();
    Tile {
        width: map.width(),
        height: map.height(),
        rgb,
    }
}

/// Equal-height tiles joined left to right with a thin white separator.
pub fn hstack(tiles: &[Tile]) -> Result<Tile> {
    ensure!(!tiles.is_empty(), "panel needs at least one tile");
    let height = tiles[0].height;
    ensure!(
        tiles.iter().all(|t| t.height == height),
        "panel tiles must share a height"
    );
    let width = tiles.iter().map(|t| t.width).sum::<usize>() + GAP * (tiles.len() - 1);
    let mut rgb = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for (i, t) in tiles.iter().enumerate() {
            if i > 0 {
                (0..GAP).for_each(|_| rgb.extend_from_slice(&GAP_COLOR));
            }
            rgb.extend_from_slice(&t.rgb[y * t.width * 3..(y + 1) * t.width * 3]);
        }
    }
    Ok(Tile { width, height, rgb })
}

/// Nearest-neighbour enlargement, for legibility of small scenes.
pub fn upscale(tile: &Tile, factor: usize) -> Tile {
    let (w, h) = (tile.width * factor, tile.height * factor);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let src = ((y / factor) * tile.width + x / factor) * 3;
            rgb.extend_from_slice(&tile.rgb[src..src + 3]);
        }
    }
    Tile {
        width: w,
        height: h,
        rgb,
    }
}

/// image | ground truth | baseline | weighted | weight map.
pub fn comparison_panel(
    image: &FloatImage,
    truth: &LabelMask,
    baseline: &LabelMask,
    weighted: &LabelMask,
    weights: &WeightMap,
) -> Result<Tile> {
    hstack(&[
        image_tile(image),
        mask_tile(truth),
        mask_tile(baseline),
        mask_tile(weighted),
        weight_tile(weights),
    ])
}
