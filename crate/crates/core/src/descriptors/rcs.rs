use std::f64::consts::PI;

use super::{compute_lrf, DescriptorConfig, IndexedCloud};
use crate::error::Result;

/// Rotational contour signatures: the patch is expressed in its local frame,
/// rotated about the frame's x-axis in `rcs_views` steps spanning half a
/// turn, and each rotated copy is projected on its xy-plane. Per angular
/// sector the largest projected radius (relative to the support radius) is
/// recorded; empty sectors read 0.
pub fn rcs_signature(
    surface: &IndexedCloud,
    center: usize,
    cfg: &DescriptorConfig,
) -> Result<Vec<f64>> {
    let r = cfg.support_radius;
    let lrf = compute_lrf(surface, center, r)?;
    let local: Vec<_> = surface
        .neighbors(center, r)
        .iter()
        .map(|&(j, _)| lrf.to_local(surface.cloud().point(j)))
        .collect();
    let views = cfg.rcs_views;
    let sectors = cfg.rcs_sectors;
    let sector_width = 2.0 * PI / sectors as f64;
    let mut out = vec![0.0f64; views * sectors];
    for k in 0..views {
        let (s, c) = (k as f64 * PI / views as f64).sin_cos();
        let signature = &mut out[k * sectors..(k + 1) * sectors];
        for q in &local {
            let u = q.x;
            let v = q.y * c - q.z * s;
            let rho = (u * u + v * v).sqrt();
            if rho == 0.0 {
                continue;
            }
            let angle = v.atan2(u).rem_euclid(2.0 * PI);
            let sector = ((angle / sector_width) as usize).min(sectors - 1);
            signature[sector] = signature[sector].max(rho / r);
        }
    }
    Ok(out)
}
