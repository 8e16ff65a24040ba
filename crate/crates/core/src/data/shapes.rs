use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type P3 = [f64; 3];

/// Built-in procedural shape families, in class-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Capsule,
    Cross,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Sphere,
        Family::Cube,
        Family::Cylinder,
        Family::Cone,
        Family::Torus,
        Family::Pyramid,
        Family::Capsule,
        Family::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Cube => "cube",
            Family::Cylinder => "cylinder",
            Family::Cone => "cone",
            Family::Torus => "torus",
            Family::Pyramid => "pyramid",
            Family::Capsule => "capsule",
            Family::Cross => "cross",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::param(format!("unknown shape family {s:?}")))
    }
}

/// A concrete shape instance with its proportions fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere,
    /// Half extents.
    Cuboid(P3),
    Cylinder { radius: f64, half_height: f64 },
    /// Apex at `+height/2` on the y axis, base disc at `-height/2`.
    Cone { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
    /// Square base of half side `half_base` at `-height/2`, apex above.
    Pyramid { half_base: f64, height: f64 },
    Capsule { radius: f64, half_length: f64 },
    /// Three orthogonal bars through the origin.
    Cross { half_length: f64, half_thickness: f64 },
}

impl Shape {
    /// Draws an instance of `family` with random proportions.
    pub fn random(family: Family, rng: &mut RngStream) -> Shape {
        let mut u = |lo: f64, hi: f64| rng.uniform_in(lo, hi);
        match family {
            Family::Sphere => Shape::Sphere,
            Family::Cube => Shape::Cuboid([u(0.5, 1.0), u(0.5, 1.0), u(0.5, 1.0)]),
            Family::Cylinder => Shape::Cylinder {
                radius: u(0.35, 0.8),
                half_height: u(0.5, 1.0),
            },
            Family::Cone => Shape::Cone {
                radius: u(0.5, 0.9),
                height: u(1.0, 2.0),
            },
            Family::Torus => Shape::Torus {
                major: u(0.6, 0.85),
                minor: u(0.15, 0.3),
            },
            Family::Pyramid => Shape::Pyramid {
                half_base: u(0.5, 0.9),
                height: u(0.8, 1.6),
            },
            Family::Capsule => Shape::Capsule {
                radius: u(0.3, 0.5),
                half_length: u(0.4, 0.8),
            },
            Family::Cross => Shape::Cross {
                half_length: 1.0,
                half_thickness: u(0.12, 0.28),
            },
        }
    }

    /// Signed distance (or a lower bound on it outside convex polytopes).
    pub fn sdf(&self, p: P3) -> f64 {
        let [x, y, z] = p;
        match *self {
            Shape::Sphere => norm(p) - 1.0,
            Shape::Cuboid(h) => sd_box(p, h),
            Shape::Cylinder { radius, half_height } => {
                let dx = (x * x + z * z).sqrt() - radius;
                let dy = y.abs() - half_height;
                dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
            }
            Shape::Cone { radius, height } => sd_capped_cone(p, height / 2.0, radius, 0.0),
            Shape::Torus { major, minor } => {
                let q = (x * x + z * z).sqrt() - major;
                (q * q + y * y).sqrt() - minor
            }
            Shape::Pyramid { half_base, height } => {
                let h2 = height / 2.0;
                let slant = (height * height + half_base * half_base).sqrt();
                // faces: base plane plus four sloped planes through the apex
                let side = |t: f64| (height * t.abs() + half_base * (y - h2)) / slant;
                (-y - h2).max(side(x)).max(side(z))
            }
            Shape::Capsule { radius, half_length } => {
                let cy = y.clamp(-half_length, half_length);
                norm([x, y - cy, z]) - radius
            }
            Shape::Cross {
                half_length: l,
                half_thickness: t,
            } => sd_box(p, [l, t, t])
                .min(sd_box(p, [t, l, t]))
                .min(sd_box(p, [t, t, l])),
        }
    }

    /// `n` surface points, uniform with respect to surface area.
    pub fn sample_surface(&self, n: usize, rng: &mut RngStream) -> Vec<P3> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if let Some(p) = self.surface_point(rng) {
                out.push(p);
            }
        }
        out
    }

    fn surface_point(&self, rng: &mut RngStream) -> Option<P3> {
        match *self {
            Shape::Sphere => Some(unit_vector(rng)),
            Shape::Cuboid(h) => Some(box_surface(h, rng)),
            Shape::Cylinder { radius, half_height } => {
                let side = TAU * radius * 2.0 * half_height;
                let cap = PI * radius * radius;
                let pick = rng.uniform() * (side + 2.0 * cap);
                if pick < side {
                    let a = rng.uniform() * TAU;
                    let y = rng.uniform_in(-half_height, half_height);
                    Some([radius * a.cos(), y, radius * a.sin()])
                } else {
                    let (dx, dz) = disc(radius, rng);
                    let y = if pick < side + cap { half_height } else { -half_height };
                    Some([dx, y, dz])
                }
            }
            Shape::Cone { radius, height } => {
                let lateral = PI * radius * (radius * radius + height * height).sqrt();
                let base = PI * radius * radius;
                let h2 = height / 2.0;
                if rng.uniform() * (lateral + base) < lateral {
                    // distance from the apex grows like sqrt(u) for uniform area
                    let s = rng.uniform().sqrt();
                    let a = rng.uniform() * TAU;
                    Some([s * radius * a.cos(), h2 - s * height, s * radius * a.sin()])
                } else {
                    let (dx, dz) = disc(radius, rng);
                    Some([dx, -h2, dz])
                }
            }
            Shape::Torus { major, minor } => {
                let u = rng.uniform() * TAU;
                let v = rng.uniform() * TAU;
                let w = (major + minor * v.cos()) / (major + minor);
                if rng.uniform() > w {
                    return None;
                }
                let r = major + minor * v.cos();
                Some([r * u.cos(), minor * v.sin(), r * u.sin()])
            }
            Shape::Pyramid { half_base, height } => {
                let h2 = height / 2.0;
                let b = 2.0 * half_base;
                let base = b * b;
                let face = 0.5 * b * (height * height + half_base * half_base).sqrt();
                let pick = rng.uniform() * (base + 4.0 * face);
                if pick < base {
                    return Some([
                        rng.uniform_in(-half_base, half_base),
                        -h2,
                        rng.uniform_in(-half_base, half_base),
                    ]);
                }
                let corners = [
                    [-half_base, -h2, -half_base],
                    [half_base, -h2, -half_base],
                    [half_base, -h2, half_base],
                    [-half_base, -h2, half_base],
                ];
                let f = (((pick - base) / face) as usize).min(3);
                Some(triangle(
                    [0.0, h2, 0.0],
                    corners[f],
                    corners[(f + 1) % 4],
                    rng,
                ))
            }
            Shape::Capsule { radius, half_length } => {
                let side = TAU * radius * 2.0 * half_length;
                let caps = 4.0 * PI * radius * radius;
                if rng.uniform() * (side + caps) < side {
                    let a = rng.uniform() * TAU;
                    let y = rng.uniform_in(-half_length, half_length);
                    Some([radius * a.cos(), y, radius * a.sin()])
                } else {
                    let n = unit_vector(rng);
                    let shift = if n[1] >= 0.0 { half_length } else { -half_length };
                    Some([radius * n[0], radius * n[1] + shift, radius * n[2]])
                }
            }
            Shape::Cross {
                half_length: l,
                half_thickness: t,
            } => {
                let bars = [[l, t, t], [t, l, t], [t, t, l]];
                let which = rng.below(3);
                let p = box_surface(bars[which], rng);
                let hidden = bars
                    .iter()
                    .enumerate()
                    .any(|(j, h)| j != which && sd_box(p, *h) < -1e-9);
                (!hidden).then_some(p)
            }
        }
    }
}

pub fn norm(p: P3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn sd_box(p: P3, h: P3) -> f64 {
    let q = [p[0].abs() - h[0], p[1].abs() - h[1], p[2].abs() - h[2]];
    let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
    outside + q[0].max(q[1]).max(q[2]).min(0.0)
}

fn sd_capped_cone(p: P3, h: f64, r1: f64, r2: f64) -> f64 {
    let qx = (p[0] * p[0] + p[2] * p[2]).sqrt();
    let qy = p[1];
    let (k1x, k1y) = (r2, h);
    let (k2x, k2y) = (r2 - r1, 2.0 * h);
    let cax = qx - qx.min(if qy < 0.0 { r1 } else { r2 });
    let cay = qy.abs() - h;
    let t = (((k1x - qx) * k2x + (k1y - qy) * k2y) / (k2x * k2x + k2y * k2y)).clamp(0.0, 1.0);
    let cbx = qx - k1x + k2x * t;
    let cby = qy - k1y + k2y * t;
    let s = if cbx < 0.0 && cay < 0.0 { -1.0 } else { 1.0 };
    s * (cax * cax + cay * cay).min(cbx * cbx + cby * cby).sqrt()
}

fn unit_vector(rng: &mut RngStream) -> P3 {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = norm(v);
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn disc(radius: f64, rng: &mut RngStream) -> (f64, f64) {
    let r = radius * rng.uniform().sqrt();
    let a = rng.uniform() * TAU;
    (r * a.cos(), r * a.sin())
}

fn triangle(a: P3, b: P3, c: P3, rng: &mut RngStream) -> P3 {
    let (mut u, mut v) = (rng.uniform(), rng.uniform());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    std::array::from_fn(|i| a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i]))
}

fn box_surface(h: P3, rng: &mut RngStream) -> P3 {
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.uniform() * total;
    let mut axis = 2;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = i;
            break;
        }
        pick -= a;
    }
    let mut p = [0.0; 3];
    for (i, slot) in p.iter_mut().enumerate() {
        *slot = if i == axis {
            if rng.uniform() < 0.5 {
                -h[i]
            } else {
                h[i]
            }
        } else {
            rng.uniform_in(-h[i], h[i])
        };
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_points_lie_on_the_surface() {
        let mut rng = RngStream::new(5);
        for family in Family::ALL {
            let shape = Shape::random(family, &mut rng);
            for p in shape.sample_surface(300, &mut rng) {
                let d = shape.sdf(p);
                assert!(d.abs() < 1e-6, "{family}: sdf {d} at {p:?}");
            }
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!(matches!("blob".parse::<Family>(), Err(Error::Parameter(_))));
    }

    #[test]
    fn sdf_sign_at_origin() {
        let mut rng = RngStream::new(2);
        for family in Family::ALL {
            let shape = Shape::random(family, &mut rng);
            let inside = shape.sdf([0.0, 0.0, 0.0]);
            if family == Family::Torus {
                assert!(inside > 0.0);
            } else {
                assert!(inside < 0.0, "{family}");
            }
            assert!(shape.sdf([5.0, 5.0, 5.0]) > 0.0);
        }
    }
}
