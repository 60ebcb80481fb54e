//! 8-bit PNG exports with plain-text numeric sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".txt");
    PathBuf::from(name)
}

fn save_image<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Write `map` as a grayscale PNG scaled linearly from its minimum (black) to
/// its maximum (white), and the two values to `<path>.txt`.
pub fn write_map_png(path: &Path, map: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    let (min, max) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite(format!("{} has non-finite values", path.display())));
    }
    let (h, w) = map.dim();
    let range = max - min;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        let level = if range > 0.0 {
            ((v - min) / range * 255.0).round()
        } else {
            0.0
        };
        Luma([level as u8])
    });
    save_image(&img, path)?;
    let side = sidecar(path);
    fs::write(&side, format!("min\t{min:e}\nmax\t{max:e}\n")).map_err(|e| Error::io(&side, e))?;
    Ok((min, max))
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: i64 = 40;

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>, thick: i64) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let x = a.0 + (b.0 - a.0) * s / steps;
        let y = a.1 + (b.1 - a.1) * s / steps;
        for dx in -thick / 2..=thick / 2 {
            for dy in -thick / 2..=thick / 2 {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}

/// Dice-versus-ensemble-size plot: one gray polyline per image and the mean
/// in black. The x axis is the index of each size (sizes are evenly spaced
/// regardless of value); the y range is written to the sidecar.
pub fn write_curve_png(path: &Path, curves: &[(String, Vec<(usize, f64)>)], mean: &[(usize, f64)]) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let all = curves
        .iter()
        .flat_map(|(_, c)| c.iter())
        .chain(mean.iter())
        .map(|p| p.1);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-3 {
        lo -= 0.05;
        hi += 0.05;
    }
    let n = mean.len().max(2) as i64;
    let (x0, x1) = (MARGIN, PLOT_W as i64 - MARGIN);
    let (y0, y1) = (PLOT_H as i64 - MARGIN, MARGIN);
    let pos = |k: usize, v: f64| {
        let x = x0 + (x1 - x0) * k as i64 / (n - 1);
        let y = y0 + ((y1 - y0) as f64 * (v - lo) / (hi - lo)).round() as i64;
        (x, y)
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (x0, y0), (x1, y0), axis, 1);
    draw_line(&mut img, (x0, y0), (x0, y1), axis, 1);
    for k in 0..n as usize {
        let (x, _) = pos(k, lo);
        draw_line(&mut img, (x, y0), (x, y0 + 5), axis, 1);
    }
    for (_, curve) in curves {
        for (k, w) in curve.windows(2).enumerate() {
            draw_line(&mut img, pos(k, w[0].1), pos(k + 1, w[1].1), Rgb([170, 170, 170]), 1);
        }
    }
    for (k, w) in mean.windows(2).enumerate() {
        draw_line(&mut img, pos(k, w[0].1), pos(k + 1, w[1].1), Rgb([0, 0, 0]), 3);
    }
    for (k, p) in mean.iter().enumerate() {
        let c = pos(k, p.1);
        draw_line(&mut img, (c.0 - 3, c.1), (c.0 + 3, c.1), Rgb([200, 30, 30]), 5);
    }
    save_image(&img, path)?;
    let sizes: Vec<String> = mean.iter().map(|p| p.0.to_string()).collect();
    let side = sidecar(path);
    fs::write(
        &side,
        format!("x_sizes\t{}\ny_min\t{lo:e}\ny_max\t{hi:e}\n", sizes.join(",")),
    )
    .map_err(|e| Error::io(&side, e))
}
