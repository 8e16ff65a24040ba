use super::shapes::P3;
use super::Image;

/// Orthographic camera looking at the origin. The view window `[-1, 1]²`
/// fills the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    /// Rotation about the vertical axis, radians.
    pub azimuth: f64,
    /// Tilt above the horizontal plane, radians.
    pub elevation: f64,
}

impl Camera {
    /// Camera-frame point `(u, v, w)` (w toward the viewer) in world space.
    fn to_world(self, c: P3) -> P3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        // tilt about x, then turn about y
        let y = c[1] * ce + c[2] * se;
        let z = -c[1] * se + c[2] * ce;
        let x = c[0];
        [x * ca + z * sa, y, -x * sa + z * ca]
    }
}

const MAX_STEPS: usize = 160;
const HIT: f64 = 1e-4;

/// Sphere-traces `sdf` (which must describe geometry inside the unit ball)
/// and shades hits by depth: near surfaces are bright, background is 0.
pub fn render_depth(sdf: &dyn Fn(P3) -> f64, size: usize, camera: Camera) -> Image {
    let mut pixels = vec![0u8; size * size * 3];
    for i in 0..size {
        let v = 1.0 - (2 * i + 1) as f64 / size as f64;
        for j in 0..size {
            let u = -1.0 + (2 * j + 1) as f64 / size as f64;
            if u * u + v * v > 1.0 {
                continue;
            }
            let entry = (1.0 - u * u - v * v).sqrt();
            let mut t = 0.0;
            // rays that exhaust the step budget are grazing the surface
            let mut hit = Some(t);
            for _ in 0..MAX_STEPS {
                let w = entry - t;
                if w < -entry {
                    hit = None;
                    break;
                }
                let d = sdf(camera.to_world([u, v, w]));
                if d < HIT {
                    break;
                }
                t += d.max(HIT);
            }
            let hit = hit.map(|_| t);
            if let Some(t) = hit {
                // depth measured from the near plane w = 1
                let depth = (1.0 - entry + t) / 2.0;
                let shade = (1.0 - 0.75 * depth).clamp(0.2, 1.0);
                let value = (shade * 255.0).round() as u8;
                let at = (i * size + j) * 3;
                pixels[at..at + 3].fill(value);
            }
        }
    }
    Image {
        height: size,
        width: size,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::super::shapes::sd_box;
    use super::*;

    fn foreground(img: &Image) -> Vec<bool> {
        img.pixels.chunks(3).map(|p| p[0] > 0).collect()
    }

    #[test]
    fn axis_aligned_unit_cube_covers_a_quarter() {
        let img = render_depth(
            &|p| sd_box(p, [0.5, 0.5, 0.5]),
            64,
            Camera {
                azimuth: 0.0,
                elevation: 0.0,
            },
        );
        let fg = foreground(&img);
        let frac = fg.iter().filter(|&&b| b).count() as f64 / fg.len() as f64;
        assert!((frac - 0.25).abs() / 0.25 < 0.05, "{frac}");
        // the square is centered: pixels 16..48 in both directions
        for i in 0..64 {
            for j in 0..64 {
                let inside = (16..48).contains(&i) && (16..48).contains(&j);
                assert_eq!(fg[i * 64 + j], inside, "pixel {i},{j}");
            }
        }
    }

    #[test]
    fn sphere_depth_is_brightest_at_center() {
        let img = render_depth(
            &|p| super::super::shapes::norm(p) - 0.8,
            33,
            Camera {
                azimuth: 1.0,
                elevation: 0.3,
            },
        );
        let center = img.pixels[(16 * 33 + 16) * 3];
        let edge = img.pixels[(16 * 33 + 4) * 3];
        assert!(center > edge && edge > 0);
    }
}
