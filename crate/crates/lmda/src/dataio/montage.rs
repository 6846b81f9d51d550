//! 10-20 electrode positions projected onto the unit disk.
//!
//! Positions come from the azimuthal-equidistant projection of the 10-20
//! sphere: an electrode at inclination θ (degrees from the vertex) and
//! azimuth φ (degrees from the nasion, positive toward the right ear) maps
//! to radius θ/90 and direction φ. Intermediate sites (F3, F4, P3, P4) are
//! spherical midpoints of their 10-20 neighbours, which matches how they
//! are placed on a real head.

use std::collections::HashMap;

/// Case-insensitive lookup table from electrode name to unit-disk (x, y).
#[derive(Debug, Clone)]
pub struct Montage {
    names: Vec<String>,
    positions: Vec<(f64, f64)>,
    index: HashMap<String, usize>,
}

impl Montage {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, (f64, f64))>) -> Self {
        let mut names = Vec::new();
        let mut positions = Vec::new();
        let mut index = HashMap::new();
        for (name, pos) in pairs {
            index.insert(name.to_ascii_lowercase(), names.len());
            names.push(name);
            positions.push(pos);
        }
        Montage { names, positions, index }
    }

    pub fn lookup(&self, name: &str) -> Option<(f64, f64)> {
        self.index.get(&name.to_ascii_lowercase()).map(|&i| self.positions[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Unit vector on the head sphere; x toward the right ear, y toward the
/// nasion, z up through the vertex.
fn sphere(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let th = theta_deg.to_radians();
    let ph = phi_deg.to_radians();
    [th.sin() * ph.sin(), th.sin() * ph.cos(), th.cos()]
}

fn project(v: [f64; 3]) -> (f64, f64) {
    let theta = v[2].clamp(-1.0, 1.0).acos();
    let r = theta / std::f64::consts::FRAC_PI_2;
    let az = v[0].atan2(v[1]);
    let (x, y) = (r * az.sin(), r * az.cos());
    // snap tiny projection residue so vertex-exact sites stay exact
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    (snap(x), snap(y))
}

fn midpoint(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    let s = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    [s[0] / n, s[1] / n, s[2] / n]
}

/// The built-in 22-site 10-20 montage.
pub fn builtin_montage() -> Montage {
    // (name, inclination from vertex, azimuth from nasion toward right ear)
    let direct: &[(&str, f64, f64)] = &[
        ("Cz", 0.0, 0.0),
        ("Fz", 45.0, 0.0),
        ("Pz", 45.0, 180.0),
        ("C3", 45.0, -90.0),
        ("C4", 45.0, 90.0),
        ("Fpz", 90.0, 0.0),
        ("Fp1", 90.0, -18.0),
        ("Fp2", 90.0, 18.0),
        ("F7", 90.0, -54.0),
        ("F8", 90.0, 54.0),
        ("T7", 90.0, -90.0),
        ("T8", 90.0, 90.0),
        ("P7", 90.0, -126.0),
        ("P8", 90.0, 126.0),
        ("O1", 90.0, -162.0),
        ("O2", 90.0, 162.0),
        ("Oz", 90.0, 180.0),
        ("POz", 67.5, 180.0),
    ];
    let mut pairs: Vec<(String, (f64, f64))> =
        direct.iter().map(|&(n, th, ph)| (n.to_string(), project(sphere(th, ph)))).collect();
    let mids: &[(&str, (f64, f64), (f64, f64))] = &[
        ("F3", (45.0, 0.0), (90.0, -54.0)),
        ("F4", (45.0, 0.0), (90.0, 54.0)),
        ("P3", (45.0, 180.0), (90.0, -126.0)),
        ("P4", (45.0, 180.0), (90.0, 126.0)),
    ];
    for &(n, a, b) in mids {
        pairs.push((n.to_string(), project(midpoint(sphere(a.0, a.1), sphere(b.0, b.1)))));
    }
    Montage::from_pairs(pairs)
}
