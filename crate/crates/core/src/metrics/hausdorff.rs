//! Surface distances between binary masks.

use crate::error::{shape_err, Error, Result};

/// Foreground voxels with at least one 6-connected background neighbour;
/// voxels on the volume edge count as boundary.
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [h, w, d] = shape;
    let at = |x: usize, y: usize, z: usize| mask[(x * w + y) * d + z];
    let mut out = vec![false; mask.len()];
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if !at(x, y, z) {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == h || y + 1 == w || z + 1 == d;
                out[(x * w + y) * d + z] = edge
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
            }
        }
    }
    out
}

/// One pass of the lower-envelope distance transform along a line:
/// `out[p] = min_q f[q] + (step * (p - q))^2`.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let w2 = step * step;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let s = ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let d = step * (p as f64 - q as f64);
        *o = f[q] + d * d;
    }
}

/// Squared Euclidean distance (in spacing units) from every voxel to the
/// nearest `true` voxel of `target`; infinite when `target` is empty.
pub fn squared_distance_transform(target: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = shape;
    let mut f: Vec<f64> = target.iter().map(|&t| if t { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let strides = [w * d, d, 1];
    let extents = [h, w, d];
    for axis in 0..3 {
        let n = extents[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..extents[others[0]] {
            for j in 0..extents[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for k in 0..n {
                    line[k] = f[base + k * strides[axis]];
                }
                edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
                for k in 0..n {
                    f[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    f
}

/// Linear-interpolated percentile of unsorted values (0..=100).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed(from: &[bool], to_sq: &[f64]) -> Vec<f64> {
    from.iter().zip(to_sq).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()).collect()
}

/// Symmetric Hausdorff distance in mm between the boundaries of two masks.
/// `percentile` 100 gives the classic maximum, 95 the HD95 variant. Either
/// mask empty yields `Ok(None)`.
pub fn hausdorff_distance(pred: &[bool], gt: &[bool], shape: [usize; 3], spacing: [f64; 3], pct: f64) -> Result<Option<f64>> {
    let n: usize = shape.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(shape_err!("hausdorff: masks of {} and {} voxels for shape {shape:?}", pred.len(), gt.len()));
    }
    if !(0.0..=100.0).contains(&pct) || spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("percentile {pct} / spacing {spacing:?}")));
    }
    let (bp, bg) = (boundary(pred, shape), boundary(gt, shape));
    if !bp.contains(&true) || !bg.contains(&true) {
        return Ok(None);
    }
    let to_g = squared_distance_transform(&bg, shape, spacing);
    let to_p = squared_distance_transform(&bp, shape, spacing);
    let mut a = directed(&bp, &to_g);
    let mut b = directed(&bg, &to_p);
    Ok(Some(percentile(&mut a, pct).max(percentile(&mut b, pct))))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn idx(s: [usize; 3], x: usize, y: usize, z: usize) -> usize {
        (x * s[1] + y) * s[2] + z
    }

    /// Exhaustive pairwise reference with the same summation order.
    fn brute(pred: &[bool], gt: &[bool], s: [usize; 3], sp: [f64; 3], pct: f64) -> Option<f64> {
        let pts = |m: &[bool]| -> Vec<[f64; 3]> {
            let b = boundary(m, s);
            (0..m.len()).filter(|&i| b[i]).map(|i| [(i / (s[1] * s[2])) as f64, ((i / s[2]) % s[1]) as f64, (i % s[2]) as f64]).collect()
        };
        let (a, b) = (pts(pred), pts(gt));
        if a.is_empty() || b.is_empty() {
            return None;
        }
        let dir = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Vec<f64> {
            from.iter()
                .map(|p| {
                    to.iter()
                        .map(|q| {
                            let d: Vec<f64> = (0..3).map(|k| sp[k] * (p[k] - q[k])).collect();
                            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let (mut x, mut y) = (dir(&a, &b), dir(&b, &a));
        Some(percentile(&mut x, pct).max(percentile(&mut y, pct)))
    }

    #[test]
    fn identical_masks() {
        let s = [4, 4, 4];
        let mut m = vec![false; 64];
        m[idx(s, 1, 2, 1)] = true;
        m[idx(s, 2, 2, 1)] = true;
        assert_eq!(hausdorff_distance(&m, &m, s, [1.0; 3], 95.0).unwrap(), Some(0.0));
    }

    #[test]
    fn single_voxels_three_apart() {
        let s = [6, 3, 3];
        let mut a = vec![false; 54];
        let mut b = vec![false; 54];
        a[idx(s, 1, 1, 1)] = true;
        b[idx(s, 4, 1, 1)] = true;
        assert_eq!(hausdorff_distance(&a, &b, s, [1.0; 3], 100.0).unwrap(), Some(3.0));
    }

    #[test]
    fn offset_cubes() {
        let s = [6, 6, 6];
        let cube = |o: usize| {
            let mut m = vec![false; 216];
            for x in 1 + o..3 + o {
                for y in 1..3 {
                    for z in 1..3 {
                        m[idx(s, x, y, z)] = true;
                    }
                }
            }
            m
        };
        assert_eq!(hausdorff_distance(&cube(0), &cube(1), s, [1.0; 3], 100.0).unwrap(), Some(1.0));
    }

    #[test]
    fn empty_is_undefined() {
        let a = vec![false; 8];
        let mut b = vec![false; 8];
        b[0] = true;
        assert_eq!(hausdorff_distance(&a, &b, [2, 2, 2], [1.0; 3], 95.0).unwrap(), None);
        assert!(hausdorff_distance(&a, &b[..4], [2, 2, 2], [1.0; 3], 95.0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&mut [3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&mut [5.0], 95.0), 5.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_exhaustive(
            h in 1usize..7, w in 1usize..7, d in 1usize..7,
            bits_a in proptest::collection::vec(any::<bool>(), 216),
            bits_b in proptest::collection::vec(any::<bool>(), 216),
            sp in proptest::sample::select(vec![[1.0, 1.0, 1.0], [2.0, 1.0, 3.0], [1.0, 4.0, 1.0]]),
            pct in proptest::sample::select(vec![95.0, 100.0]),
        ) {
            let s = [h, w, d];
            let n = h * w * d;
            let (a, b) = (&bits_a[..n], &bits_b[..n]);
            let got = hausdorff_distance(a, b, s, sp, pct).unwrap();
            prop_assert_eq!(got, brute(a, b, s, sp, pct));
            prop_assert_eq!(got, hausdorff_distance(b, a, s, sp, pct).unwrap());
            if let Some(v) = got {
                let scaled = hausdorff_distance(a, b, s, sp.map(|x| 2.0 * x), pct).unwrap().unwrap();
                prop_assert!((scaled - 2.0 * v).abs() <= 1e-12 * v.max(1.0));
            }
        }
    }
}
