//! Exact Euclidean distance transform by separable lower envelopes of
//! parabolas. All arithmetic is integral: squared distances are exact and
//! envelope intersections are compared as rationals.

use std::cmp::Ordering;

/// `num / den` with `den > 0`.
#[derive(Clone, Copy, Debug)]
enum Bound {
    NegInf,
    At(i128, i128),
    PosInf,
}

impl Bound {
    fn cmp_value(self, x: i128) -> Ordering {
        match self {
            Bound::NegInf => Ordering::Less,
            Bound::PosInf => Ordering::Greater,
            Bound::At(n, d) => n.cmp(&(x * d)),
        }
    }

    fn le(self, other: Bound) -> bool {
        match (self, other) {
            (Bound::NegInf, _) | (_, Bound::PosInf) => true,
            (_, Bound::NegInf) | (Bound::PosInf, _) => false,
            (Bound::At(a, b), Bound::At(c, d)) => a * d <= c * b,
        }
    }
}

/// One-dimensional squared distance transform
/// `out[x] = min_q (x - q)² + f[q]` over finite `f[q]`.
/// Positions with no finite sample anywhere stay `None`.
fn envelope_1d(f: &[Option<u64>], out: &mut [Option<u64>]) {
    let mut verts: Vec<(i128, i128)> = Vec::with_capacity(f.len());
    let mut bounds: Vec<Bound> = Vec::with_capacity(f.len() + 1);
    for (q, fq) in f.iter().enumerate() {
        let Some(fq) = *fq else { continue };
        let (q, fq) = (q as i128, fq as i128);
        loop {
            let Some(&(p, fp)) = verts.last() else {
                verts.push((q, fq));
                bounds.clear();
                bounds.push(Bound::NegInf);
                bounds.push(Bound::PosInf);
                break;
            };
            let s = Bound::At((fq + q * q) - (fp + p * p), 2 * (q - p));
            let k = verts.len() - 1;
            if s.le(bounds[k]) {
                verts.pop();
                bounds.pop();
                continue;
            }
            bounds[k + 1] = s;
            verts.push((q, fq));
            bounds.push(Bound::PosInf);
            break;
        }
    }
    if verts.is_empty() {
        out.fill(None);
        return;
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let xi = x as i128;
        while bounds[k + 1].cmp_value(xi) == Ordering::Less {
            k += 1;
        }
        let (q, fq) = verts[k];
        *o = Some(((xi - q) * (xi - q) + fq) as u64);
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` seed
/// of an `h×w` grid, or `None` when there are no seeds.
pub fn squared_distance_to_set(seeds: &[bool], h: usize, w: usize) -> Option<Vec<u64>> {
    assert_eq!(seeds.len(), h * w);
    if !seeds.iter().any(|&s| s) {
        return None;
    }
    let mut cols = vec![None; h * w];
    let mut fin = vec![None; h];
    let mut fout = vec![None; h];
    for x in 0..w {
        for y in 0..h {
            fin[y] = seeds[y * w + x].then_some(0);
        }
        envelope_1d(&fin, &mut fout);
        for y in 0..h {
            cols[y * w + x] = fout[y];
        }
    }
    let mut out = vec![0u64; h * w];
    let mut rout = vec![None; w];
    for y in 0..h {
        envelope_1d(&cols[y * w..(y + 1) * w], &mut rout);
        for x in 0..w {
            out[y * w + x] = rout[x].expect("a seed exists, so every row has finite entries");
        }
    }
    Some(out)
}

/// Mask pixels that touch a non-mask pixel through a 4-neighbour or lie on
/// the image border.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
        }
    }
    out
}

/// Squared distance from every pixel to the boundary of `mask`; all zero
/// for an empty mask.
pub fn squared_distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<u64> {
    squared_distance_to_set(&boundary(mask, h, w), h, w).unwrap_or_else(|| vec![0; h * w])
}

/// Euclidean distance from every pixel to the boundary of `mask`.
pub fn distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    squared_distance_transform(mask, h, w)
        .into_iter()
        .map(|d| (d as f64).sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn brute(mask: &[bool], h: usize, w: usize) -> Vec<u64> {
        let b = boundary(mask, h, w);
        let pts: Vec<(i64, i64)> = (0..h * w).filter(|&i| b[i]).map(|i| ((i / w) as i64, (i % w) as i64)).collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                pts.iter().map(|&(py, px)| ((y - py).pow(2) + (x - px).pow(2)) as u64).min().unwrap_or(0)
            })
            .collect()
    }

    #[test]
    fn single_center_pixel() {
        let mut m = vec![false; 9];
        m[4] = true;
        assert_eq!(squared_distance_transform(&m, 3, 3), vec![2, 1, 2, 1, 0, 1, 2, 1, 2]);
    }

    #[test]
    fn empty_mask_is_zero() {
        assert_eq!(squared_distance_transform(&[false; 12], 3, 4), vec![0; 12]);
    }

    #[test]
    fn full_mask_boundary_is_the_border() {
        let d = squared_distance_transform(&[true; 25], 5, 5);
        assert_eq!(d[12], 4);
        assert_eq!(d[6], 1);
        assert_eq!(d[0], 0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let mask = &bits[..h * w];
            prop_assert_eq!(squared_distance_transform(mask, h, w), brute(mask, h, w));
        }

        #[test]
        fn sparse_seeds_match_brute_force(h in 1usize..20, w in 1usize..20, seeds in proptest::collection::vec((0usize..400, any::<bool>()), 1..4)) {
            let mut s = vec![false; h * w];
            for (i, _) in &seeds {
                s[i % (h * w)] = true;
            }
            let d = squared_distance_to_set(&s, h, w).unwrap();
            for i in 0..h * w {
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                let best = (0..h * w).filter(|&j| s[j]).map(|j| (((j / w) as i64 - y).pow(2) + ((j % w) as i64 - x).pow(2)) as u64).min().unwrap();
                prop_assert_eq!(d[i], best);
            }
        }
    }
}
