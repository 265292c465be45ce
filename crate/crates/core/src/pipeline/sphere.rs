//! Direction sets on the unit sphere.

use std::collections::HashMap;

use crate::error::{invalid, Result};

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Subdivided icosahedron: `10 · 4^level + 2` vertices.
pub fn icosphere(level: usize) -> Vec<[f64; 3]> {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = [
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                let (u, v) = (verts[a], verts[b]);
                verts.push(normalize([u[0] + v[0], u[1] + v[1], u[2] + v[2]]));
                verts.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    verts
}

/// `n` directions (n even) as `n/2` Fibonacci points on the upper hemisphere
/// followed by their antipodes, so entry `i + n/2` is `-entry i`.
pub fn antipodal_fibonacci(n: usize) -> Result<Vec<[f64; 3]>> {
    if n == 0 || n % 2 != 0 {
        return Err(invalid!("direction count must be even and positive, got {n}"));
    }
    let half = n / 2;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut out: Vec<[f64; 3]> = (0..half)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / half as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    let neg: Vec<[f64; 3]> = out.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
    out.extend(neg);
    Ok(out)
}
