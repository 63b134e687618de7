//! Minimal raster line plots for loss and objective curves.

use std::path::Path;

use ndarray::Array2;
use pdnet_core::ImageTensor;

use crate::failure::CmdResult;

const WIDTH: usize = 480;
const HEIGHT: usize = 320;
const MARGIN: usize = 24;

/// Draws `points` on a white canvas with a log-scaled y axis when every value
/// is positive. Written as PNG or PGM depending on the extension.
pub fn line_plot(points: &[(f64, f64)], path: &Path) -> CmdResult<()> {
    let mut canvas = Array2::from_elem((HEIGHT, WIDTH), 255.0);
    for c in MARGIN..WIDTH - MARGIN {
        canvas[[HEIGHT - MARGIN, c]] = 0.0;
    }
    for r in MARGIN..=HEIGHT - MARGIN {
        canvas[[r, MARGIN]] = 0.0;
    }

    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.len() >= 2 {
        let log = finite.iter().all(|&(_, y)| y > 0.0);
        let ys: Vec<f64> = finite.iter().map(|&(_, y)| if log { y.log10() } else { y }).collect();
        let (x0, x1) = (finite[0].0, finite[finite.len() - 1].0);
        let (y0, y1) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        let span_x = (x1 - x0).max(f64::EPSILON);
        let span_y = (y1 - y0).max(f64::EPSILON);
        let inner_w = (WIDTH - 2 * MARGIN - 1) as f64;
        let inner_h = (HEIGHT - 2 * MARGIN - 1) as f64;
        let to_px = |x: f64, y: f64| {
            let c = MARGIN as f64 + 1.0 + (x - x0) / span_x * inner_w;
            let r = (HEIGHT - MARGIN) as f64 - 1.0 - (y - y0) / span_y * inner_h;
            (r.round() as i64, c.round() as i64)
        };
        let pixels: Vec<(i64, i64)> = finite.iter().zip(&ys).map(|(&(x, _), &y)| to_px(x, y)).collect();
        for pair in pixels.windows(2) {
            draw_line(&mut canvas, pair[0], pair[1]);
        }
    }
    ImageTensor::new(canvas).save(path)?;
    Ok(())
}

fn draw_line(canvas: &mut Array2<f64>, (r0, c0): (i64, i64), (r1, c1): (i64, i64)) {
    let (dr, dc) = ((r1 - r0).abs(), -(c1 - c0).abs());
    let (sr, sc) = (if r0 < r1 { 1 } else { -1 }, if c0 < c1 { 1 } else { -1 });
    let (mut r, mut c, mut err) = (r0, c0, dr + dc);
    loop {
        if let Some(px) = canvas.get_mut([r as usize, c as usize]) {
            *px = 0.0;
        }
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}
