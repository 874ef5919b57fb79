//! Row permutations used to express patching, windowing, merging and
//! upsampling as gathers. Grids are `[d, h, w]` in row-major order.

use std::sync::Arc;

fn flat(grid: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * grid[1] + y) * grid[2] + x
}

fn cells(grid: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..grid[0]).flat_map(move |z| (0..grid[1]).flat_map(move |y| (0..grid[2]).map(move |x| (z, y, x))))
}

/// Element indices turning a `[c, D, H, W]` volume into `[N, c·p³]` patch
/// rows; features are ordered `(channel, dz, dy, dx)`.
pub fn patch_index(channels: usize, spatial: [usize; 3], p: usize) -> Vec<usize> {
    let grid = spatial.map(|s| s / p);
    let vox = spatial.iter().product::<usize>();
    let mut out = Vec::with_capacity(channels * vox);
    for (gz, gy, gx) in cells(grid) {
        for c in 0..channels {
            for dz in 0..p {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(c * vox + flat(spatial, gz * p + dz, gy * p + dy, gx * p + dx));
                    }
                }
            }
        }
    }
    out
}

/// Token positions after a cyclic shift by `shift`: entry `q` names the
/// original token that lands at position `q`.
pub fn cyclic_shift(grid: [usize; 3], shift: [usize; 3]) -> Vec<usize> {
    cells(grid)
        .map(|(z, y, x)| {
            flat(
                grid,
                (z + shift[0]) % grid[0],
                (y + shift[1]) % grid[1],
                (x + shift[2]) % grid[2],
            )
        })
        .collect()
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row order grouping tokens by window after an optional cyclic shift.
/// Row `r = window · T + local` holds the original token `out[r]`.
pub fn window_order(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Vec<usize> {
    let shifted = cyclic_shift(grid, shift);
    let wins = [0, 1, 2].map(|a| grid[a] / window[a]);
    let mut out = Vec::with_capacity(grid.iter().product());
    for (a, b, c) in cells(wins) {
        for (i, j, k) in cells(window) {
            out.push(shifted[flat(grid, a * window[0] + i, b * window[1] + j, c * window[2] + k)]);
        }
    }
    out
}

/// For each coarse token of a halved grid, the eight fine tokens it merges,
/// in `(dz, dy, dx)` order.
pub fn merge_rows(grid: [usize; 3]) -> Vec<usize> {
    let coarse = grid.map(|g| g / 2);
    let mut out = Vec::with_capacity(grid.iter().product());
    for (z, y, x) in cells(coarse) {
        for (dz, dy, dx) in cells([2, 2, 2]) {
            out.push(flat(grid, 2 * z + dz, 2 * y + dy, 2 * x + dx));
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling: source coarse token of every fine token.
pub fn upsample_rows(coarse: [usize; 3]) -> Vec<usize> {
    let fine = coarse.map(|g| 2 * g);
    cells(fine).map(|(z, y, x)| flat(coarse, z / 2, y / 2, x / 2)).collect()
}

/// Expands row indices to element indices for rows of `width` values.
pub fn expand_rows(rows: &[usize], width: usize) -> Arc<[usize]> {
    rows.iter()
        .flat_map(|&r| (0..width).map(move |c| r * width + c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_perm(p: &[usize]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
    }

    #[test]
    fn shift_is_bijection_with_inverse() {
        let grid = [4, 6, 8];
        for shift in [[0, 0, 0], [2, 3, 4], [1, 5, 7]] {
            let s = cyclic_shift(grid, shift);
            assert!(is_perm(&s));
            let back = cyclic_shift(grid, [grid[0] - shift[0], grid[1] - shift[1], grid[2] - shift[2]]);
            let composed: Vec<usize> = back.iter().map(|&i| s[i]).collect();
            assert_eq!(composed, (0..s.len()).collect::<Vec<_>>());
            let inv = invert(&s);
            assert!(inv.iter().enumerate().all(|(i, &j)| s[j] == i));
        }
    }

    #[test]
    fn windows_partition_tokens() {
        let order = window_order([4, 4, 4], [2, 2, 2], [1, 1, 1]);
        assert!(is_perm(&order));
        let plain = window_order([4, 4, 4], [2, 2, 2], [0, 0, 0]);
        // first window holds the 2x2x2 corner block
        let mut first: Vec<usize> = plain[..8].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 4, 5, 16, 17, 20, 21]);
    }

    #[test]
    fn merge_matches_nested_loops() {
        let grid = [4, 2, 6];
        let rows = merge_rows(grid);
        let mut expect = Vec::new();
        for z in 0..2 {
            for y in 0..1 {
                for x in 0..3 {
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                expect.push(((2 * z + dz) * 2 + 2 * y + dy) * 6 + 2 * x + dx);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(rows, expect);
        assert!(is_perm(&rows));
    }

    #[test]
    fn patches_cover_volume_once() {
        let idx = patch_index(2, [4, 2, 2], 2);
        assert!(is_perm(&idx));
        assert_eq!(&idx[..8], &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(idx[8], 16);
    }

    #[test]
    fn upsample_repeats_each_token_eight_times() {
        let rows = upsample_rows([2, 1, 3]);
        assert_eq!(rows.len(), 48);
        for t in 0..6 {
            assert_eq!(rows.iter().filter(|&&r| r == t).count(), 8);
        }
    }
}
