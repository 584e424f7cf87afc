//! Embedding export: encoder representations per subject, raw or projected
//! onto the split's top two principal axes.

use std::io::Write as IoWrite;
use std::path::Path;

use nalgebra::DMatrix;

use crate::autodiff::{mlp_forward, Graph, Tensor};
use crate::data::{Dataset, Split};

use super::model::SurvModel;
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingProjection {
    /// All encoder coordinates.
    Raw,
    /// Two principal components of the split's centered representations.
    Pca2,
}

#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingExport {
    /// Names of the coordinate columns.
    pub columns: Vec<String>,
    pub rows: Vec<EmbeddingRow>,
    /// Principal axes (unit vectors in encoder space) when projected.
    pub axes: Option<Vec<Vec<f64>>>,
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Fixes each axis's sign so its largest-magnitude coordinate is positive.
fn orient(mut axis: Vec<f64>) -> Vec<f64> {
    let lead = axis
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).expect("finite"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if axis[lead] < 0.0 {
        for v in &mut axis {
            *v = -*v;
        }
    }
    axis
}

pub fn export_embeddings(
    model: &SurvModel,
    dataset: &Dataset,
    split: Split,
    projection: EmbeddingProjection,
) -> Result<EmbeddingExport, PipelineError> {
    let samples = dataset.subset(split);
    if samples.is_empty() {
        return Err(PipelineError::SplitTooSmall { split: split_name(split), need: 1, got: 0 });
    }
    let mut graph = Graph::new();
    let nodes = model.insert(&mut graph);
    let d = samples[0].features.len();
    let mut flat = Vec::with_capacity(samples.len() * d);
    for s in &samples {
        flat.extend_from_slice(&s.features);
    }
    let x = graph.constant(Tensor::from_vec(samples.len(), d, flat)?);
    let r = mlp_forward(&mut graph, &nodes.encoder, x, false)?;
    let embeddings = graph.value(r);
    let n = embeddings.rows();
    let dim = embeddings.cols();

    let (columns, coords, axes) = match projection {
        EmbeddingProjection::Raw => {
            let columns = (0..dim).map(|j| format!("e{j}")).collect();
            let coords: Vec<Vec<f64>> = (0..n).map(|i| embeddings.row(i).to_vec()).collect();
            (columns, coords, None)
        }
        EmbeddingProjection::Pca2 => {
            if n < 2 {
                return Err(PipelineError::ProjectionTooSmall {
                    what: "subjects",
                    need: 2,
                    got: n,
                });
            }
            if dim < 2 {
                return Err(PipelineError::ProjectionTooSmall {
                    what: "encoder dimensions",
                    need: 2,
                    got: dim,
                });
            }
            let mut centered = embeddings.data().to_vec();
            for j in 0..dim {
                let mean = (0..n).map(|i| centered[i * dim + j]).sum::<f64>() / n as f64;
                for i in 0..n {
                    centered[i * dim + j] -= mean;
                }
            }
            let xc = DMatrix::from_row_slice(n, dim, &centered);
            let cov = (xc.transpose() * &xc) / (n as f64 - 1.0);
            let eigen = cov.symmetric_eigen();
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| {
                eigen.eigenvalues[b].partial_cmp(&eigen.eigenvalues[a]).expect("finite")
            });
            let axes: Vec<Vec<f64>> = order[..2]
                .iter()
                .map(|&j| orient(eigen.eigenvectors.column(j).iter().copied().collect()))
                .collect();
            let coords: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    axes.iter()
                        .map(|axis| {
                            (0..dim).map(|j| centered[i * dim + j] * axis[j]).sum::<f64>()
                        })
                        .collect()
                })
                .collect();
            (vec!["pc0".to_string(), "pc1".to_string()], coords, Some(axes))
        }
    };

    let rows = samples
        .iter()
        .zip(coords)
        .map(|(s, coords)| EmbeddingRow {
            id: s.id.clone(),
            time: s.time,
            event: s.event,
            coords,
        })
        .collect();
    Ok(EmbeddingExport { columns, rows, axes })
}

/// Writes `id,time,event,<coords...>` with full-precision floats.
pub fn write_embeddings_csv(export: &EmbeddingExport, path: &Path) -> Result<(), PipelineError> {
    let mut file = std::fs::File::create(path)?;
    let mut header = vec!["id".to_string(), "time".to_string(), "event".to_string()];
    header.extend(export.columns.iter().cloned());
    writeln!(file, "{}", header.join(","))?;
    for row in &export.rows {
        write!(file, "{},{:.16e},{}", row.id, row.time, u8::from(row.event))?;
        for c in &row.coords {
            write!(file, ",{c:.16e}")?;
        }
        writeln!(file)?;
    }
    Ok(())
}
