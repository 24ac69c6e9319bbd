//! Concept activation vectors from centroid differences, their spatially
//! pooled form, and the rectified, rescaled weights used for attribution.
//!
//! CAV file layout:
//!
//! ```text
//! magic    8 bytes  "CAVLCAVF"
//! version  u32 LE
//! header   u64 LE length, then JSON {layer, concept, positives, negatives, range}
//! tensor   u32 LE rank, rank x u64 LE dims, prod(dims) x f64 LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conceptmap::NormalizationRange;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::checkpoint::{write_json_header, write_tensor, Reader};
use crate::model::Model;
use crate::tensor::{ops, Tensor};

pub const CAV_MAGIC: &[u8; 8] = b"CAVLCAVF";
pub const CAV_VERSION: u32 = 1;

/// Images per forward batch when streaming activations into a running sum.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub layer: String,
    pub concept: String,
    /// Concept centroid minus negative centroid, `HxWxK`.
    pub direction: Tensor,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledCav {
    pub layer: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPooledCav {
    pub layer: String,
    pub values: Vec<f64>,
    /// No channel had a positive pooled value; all weights are zero.
    pub inactive: bool,
}

/// Activations of `layer` for every image, in input order.
pub fn collect_activations(model: &Model, images: &[Tensor], layer: &str) -> Result<Vec<Tensor>> {
    model.check_explainable(layer)?;
    exec::try_map_slice(images, |img| {
        let (_, mut cap) = model.forward_with_capture(img, &[layer])?;
        Ok(cap.remove(layer).expect("captured layer"))
    })
}

/// Mean activation of each requested layer without holding every activation
/// in memory. Summation runs in image order regardless of parallelism.
pub fn mean_activations(model: &Model, images: &[Tensor], layers: &[&str]) -> Result<BTreeMap<String, Tensor>> {
    if images.is_empty() {
        return Err(Error::Empty("image set"));
    }
    let mut sums: BTreeMap<String, Tensor> = BTreeMap::new();
    for chunk in images.chunks(CHUNK) {
        let caps = exec::try_map_slice(chunk, |img| Ok::<_, Error>(model.forward_with_capture(img, layers)?.1))?;
        for cap in caps {
            for (name, act) in cap {
                match sums.get_mut(&name) {
                    Some(s) => s.axpy(1.0, &act)?,
                    None => {
                        sums.insert(name, act);
                    }
                }
            }
        }
    }
    let n = images.len() as f64;
    Ok(sums.into_iter().map(|(k, v)| (k, v.scale(1.0 / n))).collect())
}

fn check_same_shapes(what: &'static str, set: &[Tensor], shape: &[usize]) -> Result<()> {
    match set.iter().find(|t| t.shape() != shape) {
        Some(t) => Err(Error::shape(
            "compute_cav",
            format!("{what} activation has shape {:?}, expected {:?}", t.shape(), shape),
        )),
        None => Ok(()),
    }
}

/// Difference of the positive and negative activation centroids.
pub fn compute_cav(layer: &str, concept: &str, positives: &[Tensor], negatives: &[Tensor]) -> Result<Cav> {
    let first = positives.first().ok_or(Error::Empty("positive activations"))?;
    if negatives.is_empty() {
        return Err(Error::Empty("negative activations"));
    }
    check_same_shapes("positive", positives, first.shape())?;
    check_same_shapes("negative", negatives, first.shape())?;
    let pos = Tensor::mean_of(positives)?;
    let neg = Tensor::mean_of(negatives)?;
    Ok(Cav {
        layer: layer.to_string(),
        concept: concept.to_string(),
        direction: pos.sub(&neg)?,
        positives: positives.len(),
        negatives: negatives.len(),
    })
}

/// CAV from precomputed centroids.
pub fn cav_from_centroids(
    layer: &str,
    concept: &str,
    positive_mean: &Tensor,
    negative_mean: &Tensor,
    counts: (usize, usize),
) -> Result<Cav> {
    Ok(Cav {
        layer: layer.to_string(),
        concept: concept.to_string(),
        direction: positive_mean.sub(negative_mean)?,
        positives: counts.0,
        negatives: counts.1,
    })
}

/// Spatial mean of each channel of the CAV.
pub fn pool_cav(cav: &Cav) -> Result<PooledCav> {
    Ok(PooledCav {
        layer: cav.layer.clone(),
        values: ops::gap(&cav.direction)?.into_data(),
    })
}

/// ReLU followed by min-max rescaling. When every rectified entry is zero
/// the result is all zeros and marked inactive; when every entry is the same
/// positive value the result is all ones.
pub fn normalize_pooled(pooled: &PooledCav) -> NormalizedPooledCav {
    let r: Vec<f64> = pooled.values.iter().map(|v| v.max(0.0)).collect();
    let max = r.iter().copied().fold(0.0, f64::max);
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    let (values, inactive) = if r.is_empty() || max <= 0.0 {
        (vec![0.0; r.len()], true)
    } else if max == min {
        (vec![1.0; r.len()], false)
    } else {
        (r.iter().map(|v| (v - min) / (max - min)).collect(), false)
    };
    NormalizedPooledCav {
        layer: pooled.layer.clone(),
        values,
        inactive,
    }
}

/// A CAV together with the concept-map range calibrated for it, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct CavArtifact {
    pub cav: Cav,
    pub range: Option<NormalizationRange>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layer: String,
    concept: String,
    positives: usize,
    negatives: usize,
    range: Option<NormalizationRange>,
}

pub fn to_bytes(artifact: &CavArtifact) -> Result<Vec<u8>> {
    let cav = &artifact.cav;
    let mut out = Vec::new();
    out.extend_from_slice(CAV_MAGIC);
    out.extend_from_slice(&CAV_VERSION.to_le_bytes());
    write_json_header(
        &mut out,
        &Header {
            layer: cav.layer.clone(),
            concept: cav.concept.clone(),
            positives: cav.positives,
            negatives: cav.negatives,
            range: artifact.range,
        },
    )?;
    write_tensor(&mut out, &cav.direction);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<CavArtifact> {
    let mut r = Reader::new(bytes, path);
    r.magic(CAV_MAGIC, CAV_VERSION)?;
    let h: Header = r.json()?;
    let direction = r.tensor()?;
    r.finish()?;
    if direction.hwc().is_none() {
        return Err(Error::format(path, format!("CAV direction has shape {:?}", direction.shape())));
    }
    Ok(CavArtifact {
        cav: Cav {
            layer: h.layer,
            concept: h.concept,
            direction,
            positives: h.positives,
            negatives: h.negatives,
        },
        range: h.range,
    })
}

pub fn save(artifact: &CavArtifact, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(artifact)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CavArtifact> {
    let path = path.as_ref();
    from_bytes(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn same_sets_give_zero_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[2, 3, 2])).collect();
        let cav = compute_cav("l", "c", &set, &set).unwrap();
        assert!(cav.direction.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pair_is_exact_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[2, 2, 3]);
        let b = random(&mut rng, &[2, 2, 3]);
        let cav = compute_cav("l", "c", std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert_eq!(cav.direction, a.sub(&b).unwrap());
    }

    #[test]
    fn matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos: Vec<Tensor> = (0..10).map(|_| random(&mut rng, &[3, 3, 4])).collect();
        let neg: Vec<Tensor> = (0..10).map(|_| random(&mut rng, &[3, 3, 4])).collect();
        let cav = compute_cav("l", "c", &pos, &neg).unwrap();
        for i in 0..36 {
            let p: f64 = pos.iter().map(|t| t.data()[i]).sum::<f64>() / 10.0;
            let n: f64 = neg.iter().map(|t| t.data()[i]).sum::<f64>() / 10.0;
            assert!((cav.direction.data()[i] - (p - n)).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_sets_are_rejected() {
        let a = Tensor::zeros(&[2, 2, 1]);
        let b = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(compute_cav("l", "c", &[], std::slice::from_ref(&a)), Err(Error::Empty(_))));
        assert!(matches!(compute_cav("l", "c", std::slice::from_ref(&a), &[]), Err(Error::Empty(_))));
        assert!(matches!(compute_cav("l", "c", &[a], &[b]), Err(Error::Shape { .. })));
    }

    #[test]
    fn pooling_hand_case() {
        let cav = Cav {
            layer: "l".into(),
            concept: "c".into(),
            direction: Tensor::new(vec![2, 2, 1], vec![1.0, -1.0, 3.0, 1.0]).unwrap(),
            positives: 1,
            negatives: 1,
        };
        assert_eq!(pool_cav(&cav).unwrap().values, vec![1.0]);
        let constant = Cav {
            direction: Tensor::new(vec![3, 3, 2], [0.5, -2.0].repeat(9)).unwrap(),
            ..cav
        };
        assert_eq!(pool_cav(&constant).unwrap().values, vec![0.5, -2.0]);
    }

    fn pooled(values: Vec<f64>) -> PooledCav {
        PooledCav {
            layer: "l".into(),
            values,
        }
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_pooled(&pooled(vec![-2.0, 0.0, 4.0, 1.0]));
        assert_eq!(n.values, vec![0.0, 0.0, 1.0, 0.25]);
        assert!(!n.inactive);
        let n = normalize_pooled(&pooled(vec![-1.0, 0.0, -3.0]));
        assert_eq!(n.values, vec![0.0; 3]);
        assert!(n.inactive);
        let once = normalize_pooled(&pooled(vec![0.3, 0.9, 0.5]));
        assert_eq!(once.values[0], 0.0);
        let twice = normalize_pooled(&pooled(once.values.clone()));
        assert_eq!(once.values, twice.values);
        assert_eq!(normalize_pooled(&pooled(vec![2.0, 2.0])).values, vec![1.0, 1.0]);
    }

    #[test]
    fn file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let art = CavArtifact {
            cav: Cav {
                layer: "conv6".into(),
                concept: "tag-Z".into(),
                direction: random(&mut rng, &[4, 4, 3]),
                positives: 120,
                negatives: 500,
            },
            range: Some(NormalizationRange { lower: 0.5, upper: 2.0 }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cav");
        save(&art, &path).unwrap();
        assert_eq!(load(&path).unwrap(), art);
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3], &path), Err(Error::Format { .. })));
    }
}
