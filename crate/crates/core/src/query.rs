//! Open-vocabulary queries in the compact feature space.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::map::GaussianMap;
use crate::raster::{FeatureMap, Raster};

const MIN_FEATURE_NORM: f64 = 1e-6;

/// Label value for pixels without any rendered feature.
pub const VOID: usize = usize::MAX;

fn unit_query(q: &[f64]) -> Result<Vec<f64>> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroQuery);
    }
    Ok(q.iter().map(|v| v / n).collect())
}

/// Cosine against a unit query, rounded to single precision so that
/// rescaling the query cannot change the result through last-bit rounding.
fn cosine_unit(f: &[f64], q_unit: &[f64]) -> Option<f64> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < MIN_FEATURE_NORM {
        return None;
    }
    let c = f.iter().zip(q_unit).map(|(a, b)| a * b).sum::<f64>() / n;
    Some(c.clamp(-1.0, 1.0) as f32 as f64)
}

/// Per-pixel cosine similarity between rendered features and the query.
/// Pixels with no feature score 0.
pub fn relevancy_map(feat: &FeatureMap, q: &[f64]) -> Result<Raster> {
    if q.len() != feat.channels {
        return Err(Error::DimensionMismatch {
            expected: feat.channels,
            found: q.len(),
        });
    }
    let qu = unit_query(q)?;
    let mut out = Raster::zeros(feat.width, feat.height, 1);
    for p in 0..feat.pixel_count() {
        out.data[p] = cosine_unit(feat.pixel(p), &qu).unwrap_or(0.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization3D {
    /// Selected Gaussians with their scores, in map order.
    pub selected: Vec<(u64, f64)>,
    pub centroid: Option<Vector3<f64>>,
}

/// Gaussians whose feature cosine with the query exceeds `threshold`, and
/// their opacity-weighted centroid.
pub fn localize_3d(map: &GaussianMap, q: &[f64], threshold: f64) -> Result<Localization3D> {
    if q.len() != map.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: map.feature_dim,
            found: q.len(),
        });
    }
    let qu = unit_query(q)?;
    let mut selected = Vec::new();
    let mut wsum = 0.0;
    let mut acc = Vector3::zeros();
    for g in &map.gaussians {
        let Some(s) = cosine_unit(&g.feature, &qu) else {
            continue;
        };
        if s > threshold {
            selected.push((g.id, s));
            let w = g.opacity();
            wsum += w;
            acc += g.position * w;
        }
    }
    let centroid = (!selected.is_empty() && wsum > 0.0).then(|| acc / wsum);
    Ok(Localization3D { selected, centroid })
}

/// Per-pixel argmax of cosine over the label queries; lowest index wins
/// ties and featureless pixels get [`VOID`].
pub fn segment(feat: &FeatureMap, labels: &[Vec<f64>]) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    let units: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| {
            if l.len() != feat.channels {
                Err(Error::DimensionMismatch {
                    expected: feat.channels,
                    found: l.len(),
                })
            } else {
                unit_query(l)
            }
        })
        .collect::<Result<_>>()?;
    Ok((0..feat.pixel_count())
        .map(|p| {
            let f = feat.pixel(p);
            let mut best = (f64::NEG_INFINITY, VOID);
            for (i, u) in units.iter().enumerate() {
                match cosine_unit(f, u) {
                    None => return VOID,
                    Some(s) if s > best.0 => best = (s, i),
                    _ => {}
                }
            }
            best.1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_and_orthogonal() {
        let f = FeatureMap::from_data(2, 1, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(relevancy_map(&f, &[2.0, 0.0]).unwrap().data, vec![1.0, 1.0]);
        assert_eq!(relevancy_map(&f, &[0.0, 3.0]).unwrap().data, vec![0.0, 0.0]);
        assert!(matches!(
            relevancy_map(&f, &[0.0, 0.0]),
            Err(Error::ZeroQuery)
        ));
    }

    #[test]
    fn segment_rules() {
        let f = FeatureMap::from_data(3, 1, 2, vec![1.0, 0.0, 0.0, 0.0, 0.3, 0.2]).unwrap();
        assert_eq!(segment(&f, &[vec![0.0, 1.0]]).unwrap(), vec![0, VOID, 0]);
        assert_eq!(
            segment(&f, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0, VOID, 0]
        );
        assert!(segment(&f, &[]).is_err());
    }
}
