//! File output helpers: directories, text files and color-mapped masks.

use std::path::Path;

use crate::{CliError, CliResult};

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Distinct colors for the first classes; background is black.
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

pub fn class_color(class: u8) -> [u8; 3] {
    match PALETTE.get(class as usize) {
        Some(&c) => c,
        // Spread the remaining classes over the color cube.
        None => {
            let h = (class as u32).wrapping_mul(2_654_435_761);
            [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
        }
    }
}

/// Binary PPM (`P6`) rendering of a class map.
pub fn mask_to_ppm(mask: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(mask.len() * 3);
    for &c in mask {
        out.extend_from_slice(&class_color(c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_has_header_and_three_bytes_per_pixel() {
        let ppm = mask_to_ppm(&[0, 1, 2, 9, 9, 0], 2, 3);
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 18);
        assert_eq!(&ppm[header.len()..header.len() + 3], &[0, 0, 0]);
    }

    #[test]
    fn palette_colors_are_distinct() {
        let colors: Vec<_> = (0..=255u8).map(class_color).collect();
        for i in 0..PALETTE.len() {
            for j in 0..i {
                assert_ne!(colors[i], colors[j]);
            }
        }
    }
}
