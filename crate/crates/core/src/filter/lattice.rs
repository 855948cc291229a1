//! Permutohedral lattice for approximate Gaussian filtering in O(N·d).
//!
//! Points (already divided by their bandwidths) are embedded into the
//! hyperplane `sum(x) = 0` of R^{d+1}, splatted onto the vertices of their
//! enclosing simplex with barycentric weights, blurred along each of the d+1
//! lattice directions and sliced back with the same weights.
//!
//! Each direction is blurred with `BLUR_PASSES` applications of the
//! `[1, 2, 1] / 4` kernel on a lattice refined by `REFINEMENT`; the vertex set
//! is grown by `CLOSURE_RADIUS` rings of neighbors so mass that leaves the
//! splatted simplices is not dropped immediately. Blurring runs once in
//! forward and once in reverse direction order and the two are averaged,
//! which keeps the operator exactly symmetric on the truncated vertex set.
//! The output is scaled so the lattice kernel carries the same total mass as
//! `exp(-|x|^2 / 2)`.

const EMPTY: u32 = u32::MAX;

/// Applications of `[1, 2, 1] / 4` per lattice direction.
pub const BLUR_PASSES: usize = 3;
/// Lattice refinement relative to the classic single-pass scaling.
pub const REFINEMENT: f64 = 1.63;
/// Rings of neighbor vertices added around the splatted simplices.
pub const CLOSURE_RADIUS: usize = 2;

/// Open-addressing table from integer lattice keys to dense vertex indices.
struct VertexTable {
    key_len: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
    mask: usize,
}

impl VertexTable {
    fn with_capacity(key_len: usize, capacity: usize) -> Self {
        let slots = (capacity * 2).next_power_of_two().max(16);
        VertexTable {
            key_len,
            keys: Vec::with_capacity(capacity * key_len),
            slots: vec![EMPTY; slots],
            mask: slots - 1,
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.key_len
    }

    #[inline]
    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &k in key {
            h ^= k as u32 as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h ^ (h >> 29)) as usize
    }

    #[inline]
    fn key(&self, index: usize) -> &[i32] {
        &self.keys[index * self.key_len..(index + 1) * self.key_len]
    }

    fn find(&self, key: &[i32]) -> Option<u32> {
        let mut slot = Self::hash(key) & self.mask;
        loop {
            let entry = self.slots[slot];
            if entry == EMPTY {
                return None;
            }
            if self.key(entry as usize) == key {
                return Some(entry);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    fn insert(&mut self, key: &[i32]) -> u32 {
        if (self.len() + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let mut slot = Self::hash(key) & self.mask;
        loop {
            let entry = self.slots[slot];
            if entry == EMPTY {
                let index = self.len() as u32;
                self.keys.extend_from_slice(key);
                self.slots[slot] = index;
                return index;
            }
            if self.key(entry as usize) == key {
                return entry;
            }
            slot = (slot + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let size = self.slots.len() * 2;
        self.slots = vec![EMPTY; size];
        self.mask = size - 1;
        for index in 0..self.len() {
            let mut slot = Self::hash(self.key(index)) & self.mask;
            while self.slots[slot] != EMPTY {
                slot = (slot + 1) & self.mask;
            }
            self.slots[slot] = index as u32;
        }
    }
}

/// Writes the key of the neighbor of `key` one step along `direction`.
#[inline]
fn step(key: &[i32], direction: usize, sign: i32, out: &mut [i32]) {
    let d = key.len();
    for i in 0..d {
        out[i] = key[i] - sign;
    }
    if direction < d {
        out[direction] = key[direction] + sign * d as i32;
    }
}

/// A lattice built over a fixed set of whitened points.
#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    num_points: usize,
    num_vertices: usize,
    /// Vertex index per (point, simplex corner).
    offsets: Vec<u32>,
    /// Barycentric weight per (point, simplex corner).
    weights: Vec<f64>,
    /// Per direction and vertex: the two neighbors along that direction.
    neighbors: Vec<[u32; 2]>,
}

/// Length scale of the embedding relative to whitened feature units.
fn embedding_scale(dim: usize) -> f64 {
    REFINEMENT * (2.0f64 / 3.0).sqrt() * (dim + 1) as f64
}

/// Multiplier mapping the splat-blur-slice response onto the unnormalized
/// Gaussian sum `sum_j exp(-|f_i - f_j|^2 / 2) v_j`.
///
/// The embedding is an isometry scaled by `embedding_scale`, and the lattice
/// has one vertex per `(d+1)^{d-1/2}` units of hyperplane volume. The blur
/// preserves mass, so matching the Gaussian's integral `(2 pi)^{d/2}` fixes
/// the scale.
pub fn output_scale(dim: usize) -> f64 {
    let d = dim as f64;
    let vertex_volume = (d + 1.0).powf(d - 0.5) / embedding_scale(dim).powf(d);
    (2.0 * std::f64::consts::PI).powf(d / 2.0) / vertex_volume
}

impl Lattice {
    /// Builds the lattice over `features` (row-major, `dim` values per point).
    pub fn build(features: &[f64], dim: usize) -> Self {
        assert!(dim >= 1, "lattice dimension must be positive");
        let n = features.len() / dim;
        let d = dim;
        let d1 = d + 1;

        let scale: Vec<f64> = (0..d)
            .map(|i| embedding_scale(d) / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        // canonical[r * d1 + j]: coordinate offset of simplex corner r for rank j
        let mut canonical = vec![0i32; d1 * d1];
        for r in 0..d1 {
            for j in 0..d1 {
                canonical[r * d1 + j] = if j <= d - r {
                    r as i32
                } else {
                    r as i32 - d1 as i32
                };
            }
        }

        let mut table = VertexTable::with_capacity(d, 2 * n * d1);
        let mut offsets = vec![0u32; n * d1];
        let mut weights = vec![0f64; n * d1];

        let mut elevated = vec![0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0f64; d1 + 1];
        let mut key = vec![0i32; d];

        for k in 0..n {
            let f = &features[k * d..(k + 1) * d];

            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // nearest remainder-0 point
            let mut sum = 0i32;
            for i in 0..d1 {
                let v = elevated[i] / d1 as f64;
                let up = v.ceil() * d1 as f64;
                let down = v.floor() * d1 as f64;
                rem0[i] = if up - elevated[i] < elevated[i] - down {
                    up as i32
                } else {
                    down as i32
                };
                sum += rem0[i];
            }
            sum /= d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }

            if sum > 0 {
                for i in 0..d1 {
                    if rank[i] >= d1 as i32 - sum {
                        rem0[i] -= d1 as i32;
                        rank[i] += sum - d1 as i32;
                    } else {
                        rank[i] += sum;
                    }
                }
            } else if sum < 0 {
                for i in 0..d1 {
                    if rank[i] < -sum {
                        rem0[i] += d1 as i32;
                        rank[i] += d1 as i32 + sum;
                    } else {
                        rank[i] += sum;
                    }
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) / d1 as f64;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d + 1 - r] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            for r in 0..d1 {
                for i in 0..d {
                    key[i] = rem0[i] + canonical[r * d1 + rank[i] as usize];
                }
                offsets[k * d1 + r] = table.insert(&key);
                weights[k * d1 + r] = bary[r];
            }
        }

        let mut current = vec![0i32; d];
        let mut next = vec![0i32; d];
        for _ in 0..CLOSURE_RADIUS {
            let count = table.len();
            for v in 0..count {
                current.copy_from_slice(table.key(v));
                for j in 0..d1 {
                    for sign in [-1, 1] {
                        step(&current, j, sign, &mut next);
                        table.insert(&next);
                    }
                }
            }
        }

        let m = table.len();
        let mut neighbors = vec![[EMPTY; 2]; d1 * m];
        for j in 0..d1 {
            for v in 0..m {
                current.copy_from_slice(table.key(v));
                step(&current, j, -1, &mut next);
                let a = table.find(&next).unwrap_or(EMPTY);
                step(&current, j, 1, &mut next);
                let b = table.find(&next).unwrap_or(EMPTY);
                neighbors[j * m + v] = [a, b];
            }
        }

        Lattice {
            dim: d,
            num_points: n,
            num_vertices: m,
            offsets,
            weights,
            neighbors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Filters `values` (`num_points x channels`, row-major).
    pub fn apply(&self, values: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(values.len(), self.num_points * channels);
        let d1 = self.dim + 1;
        let m = self.num_vertices;
        let c = channels;

        let mut splat = vec![0f64; m * c];
        for k in 0..self.num_points {
            let v = &values[k * c..(k + 1) * c];
            for r in 0..d1 {
                let o = self.offsets[k * d1 + r] as usize * c;
                let w = self.weights[k * d1 + r];
                for (dst, &src) in splat[o..o + c].iter_mut().zip(v) {
                    *dst += w * src;
                }
            }
        }

        let mut scratch = vec![0f64; m * c];
        let mut forward = splat.clone();
        for j in 0..d1 {
            for _ in 0..BLUR_PASSES {
                self.blur(j, &forward, &mut scratch, c);
                std::mem::swap(&mut forward, &mut scratch);
            }
        }
        let mut reverse = splat;
        for j in (0..d1).rev() {
            for _ in 0..BLUR_PASSES {
                self.blur(j, &reverse, &mut scratch, c);
                std::mem::swap(&mut reverse, &mut scratch);
            }
        }

        let scale = 0.5 * output_scale(self.dim);
        let mut out = vec![0f64; self.num_points * c];
        for k in 0..self.num_points {
            let dst = &mut out[k * c..(k + 1) * c];
            for r in 0..d1 {
                let o = self.offsets[k * d1 + r] as usize * c;
                let w = self.weights[k * d1 + r] * scale;
                for ch in 0..c {
                    dst[ch] += w * (forward[o + ch] + reverse[o + ch]);
                }
            }
        }
        out
    }

    fn blur(&self, direction: usize, src: &[f64], dst: &mut [f64], c: usize) {
        let m = self.num_vertices;
        let nb = &self.neighbors[direction * m..(direction + 1) * m];
        for (v, &[a, b]) in nb.iter().enumerate() {
            let out = &mut dst[v * c..(v + 1) * c];
            let center = &src[v * c..(v + 1) * c];
            for ch in 0..c {
                out[ch] = 0.5 * center[ch];
            }
            if a != EMPTY {
                let s = &src[a as usize * c..(a as usize + 1) * c];
                for ch in 0..c {
                    out[ch] += 0.25 * s[ch];
                }
            }
            if b != EMPTY {
                let s = &src[b as usize * c..(b as usize + 1) * c];
                for ch in 0..c {
                    out[ch] += 0.25 * s[ch];
                }
            }
        }
    }
}
