use serde::{Deserialize, Serialize};

use super::MediaError;

pub const TOKENS_PER_TILE: u64 = 256;
pub const DEFAULT_MAX_TILES: u32 = 12;

/// Tiling of an image into 448x448 crops, plus an optional global thumbnail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub rows: u32,
    pub cols: u32,
    pub thumbnail: bool,
    pub token_count: u64,
}

impl TilePlan {
    fn new(rows: u32, cols: u32) -> Self {
        let tiles = rows as u64 * cols as u64;
        let thumbnail = tiles > 1;
        Self {
            rows,
            cols,
            thumbnail,
            token_count: TOKENS_PER_TILE * (tiles + thumbnail as u64),
        }
    }

    pub fn tiles(&self) -> u32 {
        self.rows * self.cols
    }
}

/// Chooses the grid whose aspect ratio best matches the image.
///
/// Among grids with `rows * cols <= max_tiles`, minimizes
/// `|ln((cols/rows) / (width/height))|`; ties go to fewer tiles, then fewer rows.
pub fn plan_image_tiles(width: u32, height: u32, max_tiles: u32) -> Result<TilePlan, MediaError> {
    if width == 0 || height == 0 {
        return Err(MediaError::EmptyImage { width, height });
    }
    if max_tiles == 0 {
        return Err(MediaError::NoTiles);
    }
    let target = (width as f64 / height as f64).ln();
    let mut best: Option<(f64, u32, u32, u32)> = None;
    for rows in 1..=max_tiles {
        for cols in 1..=max_tiles / rows {
            let err = ((cols as f64 / rows as f64).ln() - target).abs();
            let key = (err, rows * cols, rows, cols);
            let better = match best {
                None => true,
                Some((e, area, r, _)) => err < e || (err == e && (key.1, key.2) < (area, r)),
            };
            if better {
                best = Some(key);
            }
        }
    }
    let (_, _, rows, cols) = best.expect("max_tiles >= 1 yields at least the 1x1 grid");
    Ok(TilePlan::new(rows, cols))
}

/// Video frames are never patched: one tile, no thumbnail.
pub fn plan_video_frame_tile() -> TilePlan {
    TilePlan::new(1, 1)
}
