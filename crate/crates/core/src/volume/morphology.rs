//! Binary morphology with the 3×3×3 cube structuring element.

use super::LabelMap;

/// Separable running max (`grow`) or min (`!grow`) over ±1 voxel per axis.
/// Outside the grid counts as background for dilation and as foreground for
/// erosion, so that closing never removes voxels.
fn cube_filter(label: &LabelMap, grow: bool) -> LabelMap {
    let g = label.grid;
    let mut cur: Vec<bool> = label.data.iter().map(|&v| v != 0).collect();
    for a in 0..3 {
        let stride = match a {
            0 => 1,
            1 => g.dims[0],
            _ => g.dims[0] * g.dims[1],
        };
        let n = g.dims[a];
        let next: Vec<bool> = (0..cur.len())
            .map(|idx| {
                let t = g.coords(idx)[a];
                let mut acc = cur[idx];
                for (ok, q) in [(t > 0, idx.wrapping_sub(stride)), (t + 1 < n, idx + stride)] {
                    if ok {
                        acc = if grow { acc || cur[q] } else { acc && cur[q] };
                    }
                }
                acc
            })
            .collect();
        cur = next;
    }
    LabelMap {
        grid: g,
        data: cur.into_iter().map(u8::from).collect(),
        probability: None,
    }
}

pub fn dilate(label: &LabelMap) -> LabelMap {
    cube_filter(label, true)
}

pub fn erode(label: &LabelMap) -> LabelMap {
    cube_filter(label, false)
}

/// Dilation followed by erosion; fills one-voxel gaps and notches.
pub fn closing(label: &LabelMap) -> LabelMap {
    erode(&dilate(label))
}
