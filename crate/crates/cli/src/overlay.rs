//! PNG renderings of a label mask over its CT slice: the windowed image in
//! gray, the organ outline in green and lesions filled in translucent red.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use image::{imageops, Rgb, RgbImage};
use ndarray::{ArrayView2, Axis};

use liverseg_core::preprocess::WindowSpec;
use liverseg_core::volume::{LabelVolume, Volume, LESION};

const CONTOUR: Rgb<u8> = Rgb([40, 220, 60]);
const LESION_TINT: [f64; 3] = [230.0, 40.0, 40.0];
const LESION_ALPHA: f64 = 0.55;

/// A foreground pixel with a background 4-neighbour or on the border.
fn on_outline(labels: ArrayView2<u8>, y: usize, x: usize) -> bool {
    let (h, w) = labels.dim();
    if labels[[y, x]] == 0 {
        return false;
    }
    y == 0 || x == 0 || y + 1 == h || x + 1 == w || [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|&p| labels[p] == 0)
}

pub fn render_slice(image: ArrayView2<i16>, labels: ArrayView2<u8>, window: &WindowSpec, zoom: u32) -> RgbImage {
    let (h, w) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let g = window.apply(f64::from(image[[y, x]])) * 255.0;
        if on_outline(labels, y, x) {
            return CONTOUR;
        }
        if labels[[y, x]] == LESION {
            let mix = |c: f64| ((1.0 - LESION_ALPHA) * g + LESION_ALPHA * c).round() as u8;
            return Rgb([mix(LESION_TINT[0]), mix(LESION_TINT[1]), mix(LESION_TINT[2])]);
        }
        let g = g.round() as u8;
        Rgb([g, g, g])
    });
    let zoom = zoom.max(1);
    imageops::resize(&img, img.width() * zoom, img.height() * zoom, imageops::FilterType::Nearest)
}

/// Writes `<name>_z<slice>.png` under `<out>/overlay` for each requested
/// slice, or for every slice with foreground when `slices` is empty.
pub fn render_slices(
    image: &Volume,
    mask: &LabelVolume,
    slices: &[usize],
    zoom: u32,
    window: &WindowSpec,
    out: &Path,
    name: &str,
) -> Result<Vec<PathBuf>> {
    let depth = image.dim().0;
    let chosen: Vec<usize> = if slices.is_empty() {
        (0..depth).filter(|&z| mask.labels().index_axis(Axis(0), z).iter().any(|&l| l != 0)).collect()
    } else {
        slices.to_vec()
    };
    if let Some(z) = chosen.iter().find(|&&z| z >= depth) {
        bail!("slice {z} outside a volume of depth {depth}");
    }
    let dir = out.join("overlay");
    fs::create_dir_all(&dir)?;
    chosen
        .iter()
        .map(|&z| {
            let rgb = render_slice(image.voxels().index_axis(Axis(0), z), mask.labels().index_axis(Axis(0), z), window, zoom);
            let path = dir.join(format!("{name}_z{z:03}.png"));
            rgb.save(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn outline_lesion_and_background_colors() {
        let image = Array2::from_elem((5, 5), 40i16);
        let mut labels = Array2::zeros((5, 5));
        labels.slice_mut(ndarray::s![1..4, 1..4]).fill(1);
        labels[[2, 2]] = LESION;
        let img = render_slice(image.view(), labels.view(), &WindowSpec::default(), 1);
        assert_eq!(*img.get_pixel(1, 1), CONTOUR);
        assert_eq!(*img.get_pixel(0, 0), Rgb([128, 128, 128]));
        let p = img.get_pixel(2, 2);
        assert!(p[0] > p[1] && p[0] > p[2]);
        assert_eq!(render_slice(image.view(), labels.view(), &WindowSpec::default(), 3).dimensions(), (15, 15));
    }
}
