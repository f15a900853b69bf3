use super::NumericsError;

/// Dimensions covered by the embedded direction-number table.
pub const SOBOL_MAX_DIM: usize = 8;

const BITS: usize = 32;

/// Joe-Kuo "new-joe-kuo-6" parameters (s, a, m) for dimensions 2..=8;
/// dimension 1 is the base-2 van der Corput sequence.
const JOE_KUO: [(usize, u32, [u32; 5]); 7] = [
    (1, 0, [1, 0, 0, 0, 0]),
    (2, 1, [1, 3, 0, 0, 0]),
    (3, 1, [1, 3, 1, 0, 0]),
    (3, 2, [1, 1, 1, 0, 0]),
    (4, 1, [1, 1, 3, 3, 0]),
    (4, 4, [1, 3, 5, 13, 0]),
    (5, 2, [1, 1, 5, 5, 17]),
];

fn direction_numbers(dim_index: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim_index == 0 {
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = 1u32 << (31 - c);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim_index - 1];
    for c in 0..s {
        v[c] = m[c] << (31 - c);
    }
    for c in s..BITS {
        let mut val = v[c - s] ^ (v[c - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                val ^= v[c - k];
            }
        }
        v[c] = val;
    }
    v
}

/// First `n` points of the standard Sobol construction in `[0,1)^dim`,
/// starting at index 1 when `skip_origin` is set (index 0 is the
/// all-zeros point).
pub fn sobol_points(
    dim: usize,
    n: usize,
    skip_origin: bool,
) -> Result<Vec<Vec<f64>>, NumericsError> {
    if dim == 0 || dim > SOBOL_MAX_DIM {
        return Err(NumericsError::UnsupportedDimension {
            dim,
            max: SOBOL_MAX_DIM,
        });
    }
    let dirs: Vec<[u32; BITS]> = (0..dim).map(direction_numbers).collect();
    let skip = usize::from(skip_origin);
    let mut points = Vec::with_capacity(n);
    for i in skip..skip + n {
        let mut point = Vec::with_capacity(dim);
        for d in dirs.iter() {
            let mut acc = 0u32;
            let mut bits = i;
            let mut k = 0;
            while bits != 0 {
                if bits & 1 == 1 {
                    acc ^= d[k];
                }
                bits >>= 1;
                k += 1;
            }
            point.push(acc as f64 / 4294967296.0);
        }
        points.push(point);
    }
    Ok(points)
}

/// Affine map of unit-cube points into the box `Π [lo_i, hi_i]`.
pub fn scale_to_box(
    points: &[Vec<f64>],
    bounds: &[(f64, f64)],
) -> Result<Vec<Vec<f64>>, NumericsError> {
    for &(lo, hi) in bounds {
        if hi <= lo {
            return Err(NumericsError::DegenerateBounds { lo, hi });
        }
    }
    points
        .iter()
        .map(|p| {
            if p.len() != bounds.len() {
                return Err(NumericsError::DimensionMismatch {
                    point_dim: p.len(),
                    bounds_dim: bounds.len(),
                });
            }
            Ok(p.iter()
                .zip(bounds)
                .map(|(&u, &(lo, hi))| lo + u * (hi - lo))
                .collect())
        })
        .collect()
}
