//! Server-side stroke rasterization.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// A brush stroke as sent by a client: polyline in pixel coordinates plus a
/// brush radius in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeRequest {
    pub frame: usize,
    pub class: u32,
    pub points: Vec<[i64; 2]>,
    #[serde(default)]
    pub radius: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StrokeError {
    #[error("stroke has no points")]
    Empty,
    #[error("brush radius {0} exceeds the limit of {MAX_RADIUS}")]
    RadiusTooLarge(u32),
    #[error("stroke covers no pixel inside the {0}x{1} image")]
    OutOfBounds(u32, u32),
}

pub const MAX_RADIUS: u32 = 64;

/// Integer line walk between two points, endpoints included.
fn line(a: [i64; 2], b: [i64; 2], out: &mut Vec<[i64; 2]>) {
    let (dx, dy) = ((b[0] - a[0]).abs(), -(b[1] - a[1]).abs());
    let (sx, sy) = ((b[0] - a[0]).signum(), (b[1] - a[1]).signum());
    let (mut x, mut y, mut err) = (a[0], a[1], dx + dy);
    loop {
        out.push([x, y]);
        if x == b[0] && y == b[1] {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Pixels covered by the polyline dilated with a Euclidean disc
/// (`dx² + dy² <= r²`), clipped to the image, sorted and unique.
pub fn rasterize_stroke(points: &[[i64; 2]], radius: u32, width: u32, height: u32) -> Result<Vec<[u32; 2]>, StrokeError> {
    if points.is_empty() {
        return Err(StrokeError::Empty);
    }
    if radius > MAX_RADIUS {
        return Err(StrokeError::RadiusTooLarge(radius));
    }
    let mut spine = Vec::new();
    if points.len() == 1 {
        spine.push(points[0]);
    }
    for pair in points.windows(2) {
        line(pair[0], pair[1], &mut spine);
    }
    let r = radius as i64;
    let mut set = BTreeSet::new();
    for [x, y] in spine {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && px < width as i64 && py < height as i64 {
                    set.insert((py as u32, px as u32));
                }
            }
        }
    }
    if set.is_empty() {
        return Err(StrokeError::OutOfBounds(width, height));
    }
    Ok(set.into_iter().map(|(y, x)| [x, y]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_radius_zero_is_one_pixel() {
        assert_eq!(rasterize_stroke(&[[3, 4]], 0, 10, 10).unwrap(), vec![[3, 4]]);
    }

    #[test]
    fn horizontal_line_includes_both_endpoints() {
        let px = rasterize_stroke(&[[2, 5], [7, 5]], 0, 10, 10).unwrap();
        assert_eq!(px.len(), 6);
        assert!(px.iter().all(|p| p[1] == 5));
    }

    #[test]
    fn radius_one_disc_is_a_plus() {
        let px = rasterize_stroke(&[[5, 5]], 1, 11, 11).unwrap();
        assert_eq!(px, vec![[5, 4], [4, 5], [5, 5], [6, 5], [5, 6]]);
    }

    #[test]
    fn diagonal_line_is_connected() {
        let px = rasterize_stroke(&[[0, 0], [4, 2]], 0, 10, 10).unwrap();
        assert_eq!(px.len(), 5);
        assert!(px.contains(&[0, 0]) && px.contains(&[4, 2]));
    }

    #[test]
    fn clipping_and_outside_strokes() {
        let px = rasterize_stroke(&[[0, 0]], 2, 10, 10).unwrap();
        assert!(px.iter().all(|p| p[0] < 10 && p[1] < 10));
        assert_eq!(px.len(), 6);
        assert_eq!(rasterize_stroke(&[[-5, -5], [-1, -9]], 1, 10, 10), Err(StrokeError::OutOfBounds(10, 10)));
        assert_eq!(rasterize_stroke(&[], 1, 10, 10), Err(StrokeError::Empty));
    }

    #[test]
    fn disc_area_matches_lattice_count() {
        for r in 0..6i64 {
            let count = (-r..=r).flat_map(|y| (-r..=r).map(move |x| (x, y))).filter(|(x, y)| x * x + y * y <= r * r).count();
            let px = rasterize_stroke(&[[20, 20]], r as u32, 40, 40).unwrap();
            assert_eq!(px.len(), count);
        }
    }
}
