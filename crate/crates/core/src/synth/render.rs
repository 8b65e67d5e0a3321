//! Anti-aliased stick-figure rasterizer.

use hdnet_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{GenConfig, Person};
use crate::geometry::CameraIntrinsics;
use crate::skeleton::Skeleton;

/// Projected radius, in native pixels, of a sphere of `radius_mm` at depth `z`.
pub fn joint_radius_px(radius_mm: f64, focal: f64, z: f64) -> f64 {
    radius_mm * focal / z
}

enum Shape {
    Disk { c: [f64; 2], r: f64 },
    Capsule { a: [f64; 2], b: [f64; 2], r: f64 },
}

struct Primitive {
    depth: f64,
    shape: Shape,
    colour: [f64; 3],
}

impl Shape {
    fn distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            Shape::Disk { c, r } => (p[0] - c[0]).hypot(p[1] - c[1]) - r,
            Shape::Capsule { a, b, r } => {
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy) - r
            }
        }
    }

    fn extent(&self) -> [f64; 4] {
        match *self {
            Shape::Disk { c, r } => [c[0] - r, c[1] - r, c[0] + r, c[1] + r],
            Shape::Capsule { a, b, r } => [
                a[0].min(b[0]) - r,
                a[1].min(b[1]) - r,
                a[0].max(b[0]) + r,
                a[1].max(b[1]) + r,
            ],
        }
    }
}

fn side_colour(name: &str) -> [f64; 3] {
    if name.starts_with("left") {
        [0.9, 0.35, 0.2]
    } else if name.starts_with("right") {
        [0.2, 0.45, 0.95]
    } else {
        [0.35, 0.85, 0.4]
    }
}

fn person_primitives(cfg: &GenConfig, skel: &Skeleton, camera: &CameraIntrinsics, p: &Person, gain: f64) -> Vec<Primitive> {
    let f = camera.focal();
    let names = skel.joint_names();
    let head = skel.index_of("head");
    let tint = |c: [f64; 3], k: f64| c.map(|x| (x * gain * k).min(1.0));
    let mut out = Vec::with_capacity(skel.num_joints() + skel.edges().len());
    for &(a, b) in skel.edges() {
        let z = 0.5 * (p.pose3d[a][2] + p.pose3d[b][2]);
        // Limbs take the colour of their outer joint.
        let outer = if names[a].starts_with("left") || names[a].starts_with("right") { a } else { b };
        out.push(Primitive {
            depth: z,
            shape: Shape::Capsule {
                a: p.pose2d[a],
                b: p.pose2d[b],
                r: joint_radius_px(cfg.limb_radius_mm, f, z),
            },
            colour: tint(side_colour(&names[outer]), 0.8),
        });
    }
    for (j, name) in names.iter().enumerate() {
        let z = p.pose3d[j][2];
        let radius = if Some(j) == head { cfg.head_radius_mm } else { cfg.joint_radius_mm };
        out.push(Primitive {
            // Joints sit on top of the limbs meeting them.
            depth: z - radius,
            shape: Shape::Disk {
                c: p.pose2d[j],
                r: joint_radius_px(radius, f, z),
            },
            colour: tint(side_colour(name), 1.0),
        });
    }
    out
}

/// Paints `persons` far-first over a smooth random background and quantizes
/// the result to 8 bits.
pub(super) fn render_scene(
    cfg: &GenConfig,
    skel: &Skeleton,
    camera: &CameraIntrinsics,
    persons: &[Person],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let s = cfg.image_size;
    let k = cfg.pixel_scale;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
    let grad = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let shade = grad[0] * (x as f64 / s as f64 - 0.5) + grad[1] * (y as f64 / s as f64 - 0.5);
            for c in 0..3 {
                img[(c * s + y) * s + x] = (base[c] + shade).clamp(0.0, 1.0);
            }
        }
    }

    let mut prims: Vec<Primitive> = Vec::new();
    for p in persons {
        let gain = rng.gen_range(0.85..1.05);
        prims.extend(person_primitives(cfg, skel, camera, p, gain));
    }
    prims.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    for prim in &prims {
        let [x0, y0, x1, y1] = prim.shape.extent();
        // Stored pixel `x` is centred on native coordinate `x·k`.
        let lo = |v: f64| ((v / k).floor() as i64 - 1).clamp(0, s as i64) as usize;
        let hi = |v: f64| ((v / k).ceil() as i64 + 2).clamp(0, s as i64) as usize;
        for y in lo(y0)..hi(y1) {
            for x in lo(x0)..hi(x1) {
                let d = prim.shape.distance([x as f64 * k, y as f64 * k]);
                let cover = (0.5 - d / k).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for c in 0..3 {
                        let v = &mut img[(c * s + y) * s + x];
                        *v = cover * prim.colour[c] + (1.0 - cover) * *v;
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = (*v * 255.0).round() / 255.0;
    }
    Tensor::new(&[3, s, s], img).expect("image shape")
}
