use super::{DescriptorConfig, IndexedCloud, MIN_PATCH_NEIGHBORS};
use crate::error::{Error, Result};

/// Continuous bin coordinate of `v` over `[lo, hi]` with `n` bins, measured
/// from the first bin center and clamped to the grid. Returns the lower cell
/// and the interpolation weight of the upper one.
fn bilinear_coord(v: f64, lo: f64, hi: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let c = ((v - lo) / (hi - lo) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i = (c.floor() as usize).min(n - 2);
    (i, c - i as f64)
}

/// Spin image over (radial distance α, signed elevation β) with bilinear
/// voting, β-major, normalized to unit mass.
pub fn spin_image(
    surface: &IndexedCloud,
    center: usize,
    cfg: &DescriptorConfig,
) -> Result<Vec<f64>> {
    let normals = surface.cloud().normals().ok_or(Error::MissingNormals)?;
    let r = cfg.support_radius;
    let hood = surface.neighbors(center, r);
    if hood.len() < MIN_PATCH_NEIGHBORS {
        return Err(Error::DegeneratePatch {
            index: center,
            neighbors: hood.len(),
        });
    }
    let (n_alpha, n_beta) = (cfg.si_radial_bins, cfg.si_elevation_bins);
    let p = surface.cloud().point(center);
    let n = normals[center];
    let mut image = vec![0.0; n_alpha * n_beta];
    for &(j, _) in &hood {
        let delta = surface.cloud().point(j) - p;
        let beta = n.dot(&delta);
        let alpha = (delta.norm_squared() - beta * beta).max(0.0).sqrt();
        let (ia, fa) = bilinear_coord(alpha, 0.0, r, n_alpha);
        let (ib, fb) = bilinear_coord(beta, -r, r, n_beta);
        let ia1 = (ia + 1).min(n_alpha - 1);
        let ib1 = (ib + 1).min(n_beta - 1);
        image[ib * n_alpha + ia] += (1.0 - fa) * (1.0 - fb);
        image[ib * n_alpha + ia1] += fa * (1.0 - fb);
        image[ib1 * n_alpha + ia] += (1.0 - fa) * fb;
        image[ib1 * n_alpha + ia1] += fa * fb;
    }
    let mass: f64 = image.iter().sum();
    image.iter_mut().for_each(|v| *v /= mass);
    Ok(image)
}
