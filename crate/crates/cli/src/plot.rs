//! Minimal raster line plot of a perception–distortion sweep: RMSE on the
//! horizontal axis, perceptual score on the vertical one.

use bigans_core::metrics::PlanePoint;
use image::{Rgb, RgbImage};

const MARGIN: i64 = 32;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const LINE: Rgb<u8> = Rgb([30, 90, 200]);
const MARK: Rgb<u8> = Rgb([200, 40, 40]);
/// The ξ = 0 end of the curve.
const START: Rgb<u8> = Rgb([20, 150, 60]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment.
fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn marker(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, x + dx, y + dy, c);
        }
    }
}

/// Padded `[lo, hi]` so a flat series still gets a usable scale.
fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Pixel coordinates of each point, in input order.
pub fn plot_coordinates(points: &[PlanePoint], width: u32, height: u32) -> Vec<(i64, i64)> {
    let (x_lo, x_hi) = span(points.iter().map(|p| p.rmse));
    let (y_lo, y_hi) = span(points.iter().map(|p| p.perceptual));
    let (w, h) = (width as i64 - 2 * MARGIN, height as i64 - 2 * MARGIN);
    points
        .iter()
        .map(|p| {
            let fx = (p.rmse - x_lo) / (x_hi - x_lo);
            let fy = (p.perceptual - y_lo) / (y_hi - y_lo);
            (MARGIN + (fx * w as f64).round() as i64, MARGIN + h - (fy * h as f64).round() as i64)
        })
        .collect()
}

pub fn render_plane_plot(points: &[PlanePoint], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let (w, h) = (width as i64, height as i64);
    for k in 1..4 {
        let gx = MARGIN + k * (w - 2 * MARGIN) / 4;
        let gy = MARGIN + k * (h - 2 * MARGIN) / 4;
        line(&mut img, (gx, MARGIN), (gx, h - MARGIN), GRID);
        line(&mut img, (MARGIN, gy), (w - MARGIN, gy), GRID);
    }
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);
    let xy = plot_coordinates(points, width, height);
    for pair in xy.windows(2) {
        line(&mut img, pair[0], pair[1], LINE);
    }
    for (i, &p) in xy.iter().enumerate() {
        marker(&mut img, p, if i == 0 { START } else { MARK });
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Vec<PlanePoint> {
        (0..11)
            .map(|i| PlanePoint { xi: i as f64 / 10.0, perceptual: 3.0 + 0.1 * i as f64, rmse: 10.0 - 0.5 * i as f64 })
            .collect()
    }

    #[test]
    fn points_land_inside_the_frame() {
        let xy = plot_coordinates(&pts(), 200, 100);
        for &(x, y) in &xy {
            assert!((MARGIN..=200 - MARGIN).contains(&x));
            assert!((MARGIN..=100 - MARGIN).contains(&y));
        }
        // Lower RMSE plots further left, higher score further up.
        assert!(xy[10].0 < xy[0].0);
        assert!(xy[10].1 < xy[0].1);
    }

    #[test]
    fn markers_are_drawn() {
        let p = pts();
        let img = render_plane_plot(&p, 200, 100);
        let xy = plot_coordinates(&p, 200, 100);
        assert_eq!(*img.get_pixel(xy[0].0 as u32, xy[0].1 as u32), START);
        assert_eq!(*img.get_pixel(xy[5].0 as u32, xy[5].1 as u32), MARK);
    }

    #[test]
    fn flat_and_empty_series_do_not_panic() {
        let flat = vec![PlanePoint { xi: 0.0, perceptual: 1.0, rmse: 2.0 }; 3];
        render_plane_plot(&flat, 64, 64);
        render_plane_plot(&[], 64, 64);
    }

    #[test]
    fn bresenham_hits_both_ends() {
        let mut img = RgbImage::from_pixel(10, 10, WHITE);
        line(&mut img, (1, 8), (7, 2), AXIS);
        assert_eq!(*img.get_pixel(1, 8), AXIS);
        assert_eq!(*img.get_pixel(7, 2), AXIS);
        assert_eq!(img.pixels().filter(|p| **p == AXIS).count(), 7);
    }
}
