use std::path::PathBuf;
use std::sync::Arc;

use super::{analytic_saliency, default_sigma, read_map, Sample, TaskStream};
use crate::error::{Result, SamError};
use crate::saliency::SaliencyPredictor;

/// Source of target saliency maps.
#[derive(Clone)]
pub enum SaliencyOracle {
    /// `<dir>/<sample id>.f32` or `<dir>/<sample id>.pgm`.
    PrecomputedFiles { dir: PathBuf, overwrite: bool },
    /// Gaussian at the generator-recorded shape centroid; `sigma` in pixels,
    /// `None` for the generator default.
    SyntheticCentroidGaussian { sigma: Option<f32> },
    /// Pseudo-labels from a saliency network that is never trained further.
    FrozenPredictor(Arc<SaliencyPredictor>),
}

impl std::fmt::Debug for SaliencyOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PrecomputedFiles { dir, overwrite } => f
                .debug_struct("PrecomputedFiles")
                .field("dir", dir)
                .field("overwrite", overwrite)
                .finish(),
            Self::SyntheticCentroidGaussian { sigma } => f
                .debug_struct("SyntheticCentroidGaussian")
                .field("sigma", sigma)
                .finish(),
            Self::FrozenPredictor(_) => f.write_str("FrozenPredictor"),
        }
    }
}

impl SaliencyOracle {
    fn resolve(&self, sample: &Sample, stream: &TaskStream) -> Result<Option<Vec<f32>>> {
        match self {
            Self::PrecomputedFiles { dir, overwrite } => {
                if sample.saliency.is_some() && !overwrite {
                    return Ok(None);
                }
                let candidates = ["f32", "pgm"].map(|ext| dir.join(format!("{}.{ext}", sample.id)));
                let Some(path) = candidates.iter().find(|p| p.exists()) else {
                    return Err(SamError::MissingSaliency {
                        sample: sample.id.clone(),
                        path: candidates[0].clone(),
                    });
                };
                let (size, map) = read_map(path)?;
                if size != stream.size {
                    return Err(SamError::shape(format!(
                        "{}: map is {}×{}, stream is {}×{}",
                        path.display(),
                        size.height,
                        size.width,
                        stream.size.height,
                        stream.size.width
                    )));
                }
                Ok(Some(map))
            }
            Self::SyntheticCentroidGaussian { sigma } => {
                let meta = sample.meta.ok_or_else(|| {
                    SamError::data(format!(
                        "sample `{}` has no shape centroid for the synthetic oracle",
                        sample.id
                    ))
                })?;
                let sigma = sigma.unwrap_or_else(|| default_sigma(stream.size));
                Ok(Some(analytic_saliency(stream.size, meta.centroid, sigma)))
            }
            Self::FrozenPredictor(_) => unreachable!("batched separately"),
        }
    }
}

/// Populates `saliency` on every train and test sample of `stream`.
pub fn attach_saliency(stream: &TaskStream, oracle: &SaliencyOracle) -> Result<TaskStream> {
    let mut out = stream.clone();
    if let SaliencyOracle::FrozenPredictor(pred) = oracle {
        for task in &mut out.tasks {
            for part in [&mut task.train, &mut task.test] {
                for chunk in part.chunks_mut(32) {
                    let refs: Vec<&Sample> = chunk.iter().collect();
                    let maps = pred.predict_maps(&refs, stream.size)?;
                    for (s, m) in chunk.iter_mut().zip(maps) {
                        s.saliency = Some(m);
                    }
                }
            }
        }
        return Ok(out);
    }
    for task in &mut out.tasks {
        for s in task.train.iter_mut().chain(task.test.iter_mut()) {
            if let Some(map) = oracle.resolve(s, stream)? {
                s.saliency = Some(map);
            }
        }
    }
    Ok(out)
}
