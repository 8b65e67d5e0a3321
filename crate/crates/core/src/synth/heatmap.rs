use crate::error::{positive, Result};
use crate::model::HeatmapStack;

/// Sum-normalized Gaussian per joint, centred exactly on the sub-cell
/// location. Joints outside the `[0, W−1] × [0, H−1]` grid get an all-zero
/// map and a `true` truncation flag.
pub fn render_gt_heatmaps(points: &[[f64; 2]], height: usize, width: usize, sigma: f64) -> Result<(HeatmapStack, Vec<bool>)> {
    let sigma = positive("heatmap sigma", sigma)?;
    let plane = height * width;
    let mut values = vec![0.0; points.len() * plane];
    let mut truncated = Vec::with_capacity(points.len());
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (j, &[u, v]) in points.iter().enumerate() {
        let inside = (0.0..=(width - 1) as f64).contains(&u) && (0.0..=(height - 1) as f64).contains(&v);
        truncated.push(!inside);
        if !inside {
            continue;
        }
        // Separable: the 2D map is the outer product of two 1D profiles.
        let gx: Vec<f64> = (0..width).map(|x| (-(x as f64 - u).powi(2) * inv).exp()).collect();
        let gy: Vec<f64> = (0..height).map(|y| (-(y as f64 - v).powi(2) * inv).exp()).collect();
        let total = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
        let out = &mut values[j * plane..][..plane];
        for (y, row) in out.chunks_mut(width).enumerate() {
            for (x, o) in row.iter_mut().enumerate() {
                *o = gy[y] * gx[x] / total;
            }
        }
    }
    Ok((HeatmapStack::new(points.len(), height, width, values)?, truncated))
}
