//! Z-buffered triangle rasterizer with deferred Lambertian shading.
//!
//! Colour, labels, depth and object ids all come from one visibility pass, so
//! a labelled pixel is always one where the cup is the nearest surface.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::{ClutterShape, SceneSpec, Texture};

type V3 = Vector3<f64>;

pub const OBJECT_NONE: u16 = 0;
pub const OBJECT_WALLS: u16 = 1;
pub const OBJECT_TABLE: u16 = 2;
pub const OBJECT_CUP: u16 = 3;
/// Clutter item `k` gets id `OBJECT_CLUTTER + k`.
pub const OBJECT_CLUTTER: u16 = 4;

/// Label codes in [`Frame::label`].
pub const WRAP_GRASP: u8 = 1;
pub const CONTAIN: u8 = 2;

const NEAR: f64 = 1e-3;
const SEGMENTS: usize = 48;
const TABLE_THICKNESS: f64 = 0.04;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W×3`.
    pub data: Vec<u8>,
}

/// Binary masks stored channel-major `C×H×W`; channel 0 is wrap-grasp and
/// channel 1 is contain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMasks {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMasks {
    pub const CHANNELS: usize = 2;

    pub fn get(&self, channel: usize, row: usize, col: usize) -> bool {
        self.data[(channel * self.height + row) * self.width + col] != 0
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn channel_count(&self, channel: usize) -> usize {
        let n = self.height * self.width;
        self.data[channel * n..(channel + 1) * n]
            .iter()
            .filter(|&&v| v != 0)
            .count()
    }

    /// Label image encoding: `R = wrap·255`, `G = contain·255`, `B = 0`.
    pub fn to_rgb(&self) -> RgbImage {
        let n = self.height * self.width;
        let mut data = vec![0u8; n * 3];
        for i in 0..n {
            data[3 * i] = self.data[i] * 255;
            data[3 * i + 1] = self.data[n + i] * 255;
        }
        RgbImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let n = img.height * img.width;
        let mut data = vec![0u8; 2 * n];
        for i in 0..n {
            data[i] = u8::from(img.data[3 * i] >= 128);
            data[n + i] = u8::from(img.data[3 * i + 1] >= 128);
        }
        Self {
            height: img.height,
            width: img.width,
            data,
        }
    }
}

/// Everything produced by one visibility pass.
#[derive(Clone, Debug)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// Camera-space depth along the view axis; `INFINITY` where nothing was hit.
    pub depth: Vec<f64>,
    pub object: Vec<u16>,
    /// 0, [`WRAP_GRASP`] or [`CONTAIN`].
    pub label: Vec<u8>,
    pub rgb: RgbImage,
}

impl Frame {
    pub fn labels(&self) -> LabelMasks {
        let n = self.height * self.width;
        let mut data = vec![0u8; 2 * n];
        for (i, &l) in self.label.iter().enumerate() {
            match l {
                WRAP_GRASP => data[i] = 1,
                CONTAIN => data[n + i] = 1,
                _ => {}
            }
        }
        LabelMasks {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Opaque,
    /// Double-sided: front faces are the outer wall, back faces the inner wall.
    CupWall,
    CupFloor,
}

struct Surface {
    object: u16,
    kind: Kind,
    outer: usize,
    inner: usize,
}

#[derive(Clone, Copy)]
struct Vertex {
    p: V3,
    n: V3,
    local: V3,
}

struct Tri {
    v: [Vertex; 3],
    surface: usize,
}

struct Mesh {
    textures: Vec<Texture>,
    surfaces: Vec<Surface>,
    tris: Vec<Tri>,
}

impl Mesh {
    fn surface(
        &mut self,
        object: u16,
        kind: Kind,
        outer: &Texture,
        inner: Option<&Texture>,
    ) -> usize {
        self.textures.push(outer.clone());
        let o = self.textures.len() - 1;
        let i = match inner {
            Some(t) => {
                self.textures.push(t.clone());
                self.textures.len() - 1
            }
            None => o,
        };
        self.surfaces.push(Surface {
            object,
            kind,
            outer: o,
            inner: i,
        });
        self.surfaces.len() - 1
    }

    fn tri(&mut self, surface: usize, v: [Vertex; 3]) {
        self.tris.push(Tri { v, surface });
    }

    /// Planar quad `a b c d` (in order around the boundary) with normal `n`.
    fn quad(&mut self, surface: usize, pts: [V3; 4], n: V3, origin: V3, rot: &Rotation3<f64>) {
        let vert = |p: V3| Vertex {
            p,
            n,
            local: rot.inverse() * (p - origin),
        };
        let [a, b, c, d] = pts.map(vert);
        self.tri(surface, [a, b, c]);
        self.tri(surface, [a, c, d]);
    }

    /// Axis-aligned (in local frame) box; `faces` selects which of
    /// `-x +x -y +y -z +z` to emit and `inward` flips the normals.
    #[allow(clippy::too_many_arguments)]
    fn cuboid(
        &mut self,
        surface: usize,
        center: V3,
        half: V3,
        rot: &Rotation3<f64>,
        origin: V3,
        faces: [bool; 6],
        inward: bool,
    ) {
        for (f, &emit) in faces.iter().enumerate() {
            if !emit {
                continue;
            }
            let axis = f / 2;
            let sign = if f % 2 == 0 { -1.0 } else { 1.0 };
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut n = V3::zeros();
            n[axis] = sign;
            let corner = |su: f64, sv: f64| {
                let mut p = n.component_mul(&half);
                p[u] = su * half[u];
                p[v] = sv * half[v];
                center + rot * p
            };
            let pts = [
                corner(-1.0, -1.0),
                corner(1.0, -1.0),
                corner(1.0, 1.0),
                corner(-1.0, 1.0),
            ];
            let nw = rot * if inward { -n } else { n };
            self.quad(surface, pts, nw, origin, rot);
        }
    }

    /// Surface of revolution through `(radius, z)` rings around `center`.
    fn revolve(&mut self, surface: usize, center: V3, rings: &[(f64, f64)], rot: &Rotation3<f64>) {
        for k in 0..rings.len() - 1 {
            let (r0, z0) = rings[k];
            let (r1, z1) = rings[k + 1];
            let (dr, dz) = (r1 - r0, z1 - z0);
            let len = dr.hypot(dz);
            for j in 0..SEGMENTS {
                let th = |j: usize| std::f64::consts::TAU * j as f64 / SEGMENTS as f64;
                let vtx = |r: f64, z: f64, t: f64| {
                    let (s, c) = t.sin_cos();
                    let local = V3::new(r * c, r * s, z);
                    Vertex {
                        p: center + rot * local,
                        n: rot * V3::new(c * dz / len, s * dz / len, -dr / len),
                        local,
                    }
                };
                let (ta, tb) = (th(j), th(j + 1));
                let a = vtx(r0, z0, ta);
                let b = vtx(r0, z0, tb);
                let c = vtx(r1, z1, tb);
                let d = vtx(r1, z1, ta);
                self.tri(surface, [a, b, c]);
                self.tri(surface, [a, c, d]);
            }
        }
    }

    /// Horizontal disk at height `z` (local), facing `up` or down.
    fn disk(
        &mut self,
        surface: usize,
        center: V3,
        radius: f64,
        z: f64,
        up: bool,
        rot: &Rotation3<f64>,
    ) {
        let n = rot * V3::new(0.0, 0.0, if up { 1.0 } else { -1.0 });
        let hub_local = V3::new(0.0, 0.0, z);
        let hub = Vertex {
            p: center + rot * hub_local,
            n,
            local: hub_local,
        };
        for j in 0..SEGMENTS {
            let rim = |j: usize| {
                let (s, c) = (std::f64::consts::TAU * j as f64 / SEGMENTS as f64).sin_cos();
                let local = V3::new(radius * c, radius * s, z);
                Vertex {
                    p: center + rot * local,
                    n,
                    local,
                }
            };
            self.tri(surface, [hub, rim(j), rim(j + 1)]);
        }
    }

    fn sphere(&mut self, surface: usize, center: V3, radius: f64) {
        let stacks = SEGMENTS / 2;
        let vtx = |i: usize, j: usize| {
            let phi = std::f64::consts::PI * i as f64 / stacks as f64;
            let th = std::f64::consts::TAU * j as f64 / SEGMENTS as f64;
            let n = V3::new(phi.sin() * th.cos(), phi.sin() * th.sin(), phi.cos());
            Vertex {
                p: center + radius * n,
                n,
                local: radius * n,
            }
        };
        for i in 0..stacks {
            for j in 0..SEGMENTS {
                let (a, b, c, d) = (vtx(i, j), vtx(i + 1, j), vtx(i + 1, j + 1), vtx(i, j + 1));
                if i > 0 {
                    self.tri(surface, [a, b, d]);
                }
                if i + 1 < stacks {
                    self.tri(surface, [b, c, d]);
                }
            }
        }
    }
}

fn build_mesh(scene: &SceneSpec) -> Mesh {
    let mut m = Mesh {
        textures: Vec::new(),
        surfaces: Vec::new(),
        tris: Vec::new(),
    };
    let id = Rotation3::identity();

    // Room: floor and four walls, visible from inside only.
    let w = &scene.walls;
    let s = m.surface(OBJECT_WALLS, Kind::Opaque, &w.texture, None);
    let [x0, x1, y0, y1] = w.room;
    let center = V3::new(
        0.5 * (x0 + x1),
        0.5 * (y0 + y1),
        0.5 * (w.floor_z + w.height),
    );
    let half = V3::new(
        0.5 * (x1 - x0),
        0.5 * (y1 - y0),
        0.5 * (w.height - w.floor_z),
    );
    m.cuboid(
        s,
        center,
        half,
        &id,
        V3::zeros(),
        [true, true, true, true, true, false],
        true,
    );

    // Table slab.
    let t = &scene.table;
    let [ex, ey] = t.extent();
    let s = m.surface(OBJECT_TABLE, Kind::Opaque, &t.texture, None);
    let origin = V3::new(t.center[0], t.center[1], 0.0);
    m.cuboid(
        s,
        V3::new(t.center[0], t.center[1], -0.5 * TABLE_THICKNESS),
        V3::new(0.5 * ex, 0.5 * ey, 0.5 * TABLE_THICKNESS),
        &id,
        origin,
        [true, true, true, true, false, true],
        false,
    );

    if let Some(cup) = &scene.cup {
        let base = V3::new(cup.x, cup.y, 0.0);
        let p = &cup.profile;
        let rings: Vec<(f64, f64)> = p
            .radii
            .iter()
            .copied()
            .zip(p.heights.iter().copied())
            .collect();
        let wall = m.surface(
            OBJECT_CUP,
            Kind::CupWall,
            &cup.outer_texture,
            Some(&cup.inner_texture),
        );
        m.revolve(wall, base, &rings, &id);
        let floor = m.surface(OBJECT_CUP, Kind::CupFloor, &cup.inner_texture, None);
        m.disk(
            floor,
            base,
            p.radius_at(p.split_height),
            p.split_height,
            true,
            &id,
        );
    }

    for (k, c) in scene.clutter.iter().enumerate() {
        let object = OBJECT_CLUTTER + k as u16;
        let s = m.surface(object, Kind::Opaque, &c.texture, None);
        let rot = Rotation3::from_axis_angle(&V3::z_axis(), c.yaw);
        let base = V3::new(c.x, c.y, 0.0);
        match c.shape {
            ClutterShape::Box => {
                let half = V3::from(c.scale) * 0.5;
                m.cuboid(
                    s,
                    base + V3::new(0.0, 0.0, half.z),
                    half,
                    &rot,
                    base,
                    [true; 6],
                    false,
                );
            }
            ClutterShape::Sphere => {
                let r = 0.5 * c.scale[0];
                m.sphere(s, base + V3::new(0.0, 0.0, r), r);
            }
            ClutterShape::Cylinder => {
                let (r, h) = (0.5 * c.scale[0], c.scale[2]);
                m.revolve(s, base, &[(r, 0.0), (r, h)], &rot);
                m.disk(s, base, r, h, true, &rot);
                m.disk(s, base, r, 0.0, false, &rot);
            }
        }
    }
    m
}

#[derive(Clone, Copy)]
struct Fragment {
    surface: usize,
    front: bool,
    p: V3,
    n: V3,
    local: V3,
}

/// Camera-space vertex: `c` in camera coordinates plus carried attributes.
#[derive(Clone, Copy)]
struct CamVertex {
    c: V3,
    v: Vertex,
}

fn lerp_vertex(a: &CamVertex, b: &CamVertex, t: f64) -> CamVertex {
    CamVertex {
        c: a.c + (b.c - a.c) * t,
        v: Vertex {
            p: a.v.p + (b.v.p - a.v.p) * t,
            n: a.v.n + (b.v.n - a.v.n) * t,
            local: a.v.local + (b.v.local - a.v.local) * t,
        },
    }
}

/// Sutherland-Hodgman against the plane `z = NEAR`.
fn clip_near(poly: &[CamVertex; 3]) -> Vec<CamVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = &poly[i];
        let b = &poly[(i + 1) % 3];
        let (ina, inb) = (a.c.z >= NEAR, b.c.z >= NEAR);
        if ina {
            out.push(*a);
        }
        if ina != inb {
            let t = (NEAR - a.c.z) / (b.c.z - a.c.z);
            out.push(lerp_vertex(a, b, t));
        }
    }
    out
}

/// Renders colour, labels, depth and object ids in one pass.
pub fn render_frame(scene: &SceneSpec) -> Frame {
    let cam = &scene.camera;
    let [h, w] = cam.image_size;
    let [right, up, fwd] = cam.basis();
    let eye = V3::from(cam.position);
    let (cx, cy, f) = (0.5 * w as f64, 0.5 * h as f64, cam.focal);

    let mesh = build_mesh(scene);
    let mut depth = vec![f64::INFINITY; h * w];
    let mut frags: Vec<Option<Fragment>> = vec![None; h * w];

    for tri in &mesh.tris {
        let surf = &mesh.surfaces[tri.surface];
        let [a, b, c] = tri.v.map(|v| v.p);
        let mut g = (b - a).cross(&(c - a));
        if g.norm_squared() == 0.0 {
            continue;
        }
        if g.dot(&(tri.v[0].n + tri.v[1].n + tri.v[2].n)) < 0.0 {
            g = -g;
        }
        let front = g.dot(&(eye - a)) > 0.0;
        if !front && surf.kind != Kind::CupWall {
            continue;
        }

        let cv = tri.v.map(|v| {
            let d = v.p - eye;
            CamVertex {
                c: V3::new(d.dot(&right), d.dot(&up), d.dot(&fwd)),
                v,
            }
        });
        let poly = clip_near(&cv);
        for k in 1..poly.len().saturating_sub(1) {
            let t = [poly[0], poly[k], poly[k + 1]];
            let s = t.map(|v| (cx + f * v.c.x / v.c.z, cy - f * v.c.y / v.c.z));
            let iz = t.map(|v| 1.0 / v.c.z);
            let area =
                (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[2].0 - s[0].0) * (s[1].1 - s[0].1);
            if area.abs() < 1e-12 {
                continue;
            }
            let min_x = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max_x = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let min_y = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let max_y = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let c0 = (min_x - 0.5).ceil().max(0.0) as usize;
            let c1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
            let r0 = (min_y - 0.5).ceil().max(0.0) as usize;
            let r1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
            if c1 < 0.0 || r1 < 0.0 {
                continue;
            }
            let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| {
                (q.0 - p.0) * (y - p.1) - (x - p.0) * (q.1 - p.1)
            };
            for row in r0..=r1 as usize {
                let y = row as f64 + 0.5;
                for col in c0..=c1 as usize {
                    let x = col as f64 + 0.5;
                    let b0 = edge(s[1], s[2], x, y) / area;
                    let b1 = edge(s[2], s[0], x, y) / area;
                    let b2 = 1.0 - b0 - b1;
                    if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                        continue;
                    }
                    let inv = b0 * iz[0] + b1 * iz[1] + b2 * iz[2];
                    let z = 1.0 / inv;
                    let idx = row * w + col;
                    if z >= depth[idx] {
                        continue;
                    }
                    depth[idx] = z;
                    let l = [b0 * iz[0] * z, b1 * iz[1] * z, b2 * iz[2] * z];
                    let mix = |g: fn(&Vertex) -> V3| {
                        g(&t[0].v) * l[0] + g(&t[1].v) * l[1] + g(&t[2].v) * l[2]
                    };
                    frags[idx] = Some(Fragment {
                        surface: tri.surface,
                        front,
                        p: mix(|v| v.p),
                        n: mix(|v| v.n),
                        local: mix(|v| v.local),
                    });
                }
            }
        }
    }

    let background = scene.walls.texture.base_color;
    let lights: Vec<(V3, f64)> = scene
        .lights
        .iter()
        .map(|l| (V3::from(l.position), l.intensity))
        .collect();
    let mut rgb = vec![0u8; h * w * 3];
    let mut object = vec![OBJECT_NONE; h * w];
    let mut label = vec![0u8; h * w];
    for (idx, frag) in frags.iter().enumerate() {
        let colour = match frag {
            None => background,
            Some(fr) => {
                let surf = &mesh.surfaces[fr.surface];
                object[idx] = surf.object;
                label[idx] = match (surf.kind, fr.front) {
                    (Kind::CupWall, true) => WRAP_GRASP,
                    (Kind::CupWall, false) | (Kind::CupFloor, _) => CONTAIN,
                    _ => 0,
                };
                let tex = if fr.front { surf.outer } else { surf.inner };
                let albedo = mesh.textures[tex].albedo(fr.local.into());
                let mut n = fr.n.try_normalize(1e-12).unwrap_or_else(V3::z);
                if !fr.front {
                    n = -n;
                }
                let mut light = scene.ambient;
                for (pos, intensity) in &lights {
                    if let Some(dir) = (pos - fr.p).try_normalize(1e-12) {
                        light += intensity * n.dot(&dir).max(0.0);
                    }
                }
                albedo.map(|a| a * light)
            }
        };
        for ch in 0..3 {
            rgb[3 * idx + ch] = (colour[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    Frame {
        height: h,
        width: w,
        depth,
        object,
        label,
        rgb: RgbImage {
            height: h,
            width: w,
            data: rgb,
        },
    }
}

pub fn render(scene: &SceneSpec) -> RgbImage {
    render_frame(scene).rgb
}

pub fn render_labels(scene: &SceneSpec) -> LabelMasks {
    render_frame(scene).labels()
}

/// RGB image and labels from a single pass.
pub fn render_sample(scene: &SceneSpec) -> (RgbImage, LabelMasks) {
    let frame = render_frame(scene);
    let labels = frame.labels();
    (frame.rgb, labels)
}
