//! Dataset persistence: a binary `EDN1` container plus a JSON sidecar.
//!
//! Container layout (little-endian): magic `EDN1`, `u32` fields `m`, `n`,
//! `p`, then one row-major `f64` block per machine:
//!
//! | problem | block shape | contents |
//! |---------|-------------|----------|
//! | lasso   | `n x (p+1)` | sample rows `x_ji` followed by `y_ji` |
//! | spca    | `p x p`     | `G_j = (1/n) sum_i B_ji B_ji^T` |
//! | quad    | `p x (p+1)` | rows of `A_j` followed by `b_j` |
//!
//! The sidecar records the generating spec and the container's SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::problems::{LocalLoss, LossKind, Problem, ProblemSpec, SmoothLossSet};

pub const MAGIC: &[u8; 4] = b"EDN1";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub spec: ProblemSpec,
    pub m: u32,
    pub n: u32,
    pub p: u32,
    pub block_rows: u32,
    pub block_cols: u32,
    pub sha256: String,
}

/// Paths of a written dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub container: PathBuf,
    pub sidecar: PathBuf,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn block_of(loss: &LossKind) -> DMatrix<f64> {
    match loss {
        LossKind::LeastSquares { design, targets } => {
            let (n, p) = design.shape();
            let mut block = DMatrix::zeros(n, p + 1);
            block.columns_mut(0, p).copy_from(design);
            block.column_mut(p).copy_from(targets);
            block
        }
        LossKind::NegativeQuadraticForm { gram } => gram.clone(),
        LossKind::Quadratic { hessian, linear } => {
            let p = hessian.nrows();
            let mut block = DMatrix::zeros(p, p + 1);
            block.columns_mut(0, p).copy_from(hessian);
            block.column_mut(p).copy_from(linear);
            block
        }
    }
}

/// Serializes `problem` (generated from `spec`) to container bytes.
pub fn encode(spec: &ProblemSpec, problem: &Problem) -> Result<(Vec<u8>, Sidecar)> {
    let blocks: Vec<DMatrix<f64>> = problem.losses.losses().iter().map(|l| block_of(l.kind())).collect();
    let (rows, cols) = blocks[0].shape();
    let n = match spec {
        ProblemSpec::Lasso(s) => s.n,
        ProblemSpec::Spca(s) => s.n,
        ProblemSpec::Quad(s) => s.p,
    };
    let to_u32 = |field: &str, v: usize| {
        u32::try_from(v).map_err(|_| Error::spec(field, "does not fit the container's u32 header"))
    };
    let (m, n, p) = (to_u32("m", problem.m())?, to_u32("n", n)?, to_u32("p", problem.dim())?);

    let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * rows * cols * blocks.len());
    bytes.extend_from_slice(MAGIC);
    for v in [m, n, p] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for block in &blocks {
        for r in 0..rows {
            for c in 0..cols {
                bytes.extend_from_slice(&block[(r, c)].to_le_bytes());
            }
        }
    }
    let sidecar = Sidecar {
        format: "EDN1".into(),
        spec: spec.clone(),
        m,
        n,
        p,
        block_rows: to_u32("block_rows", rows)?,
        block_cols: to_u32("block_cols", cols)?,
        sha256: hex(&Sha256::digest(&bytes)),
    };
    Ok((bytes, sidecar))
}

/// Generates the problem from `spec` and writes `<stem>.edn` and `<stem>.json`
/// under `dir`.
pub fn write_dataset(spec: &ProblemSpec, dir: &Path, stem: &str) -> Result<(Problem, DatasetFiles)> {
    spec.validate()?;
    let problem = spec.generate()?;
    let (bytes, sidecar) = encode(spec, &problem)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = DatasetFiles {
        container: dir.join(format!("{stem}.edn")),
        sidecar: dir.join(format!("{stem}.json")),
    };
    fs::write(&files.container, &bytes).map_err(|e| Error::io(&files.container, e))?;
    let mut json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::io(&files.sidecar, e.into()))?;
    json.push('\n');
    fs::write(&files.sidecar, json).map_err(|e| Error::io(&files.sidecar, e))?;
    Ok((problem, files))
}

/// Reads a container and its sidecar (`<container>` with extension `.json`).
pub fn read_dataset(container: &Path) -> Result<(ProblemSpec, Problem)> {
    let sidecar_path = container.with_extension("json");
    let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: sidecar_path.clone(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(container).map_err(|e| Error::io(container, e))?;
    let problem = decode(&bytes, &sidecar).map_err(|reason| Error::Format {
        path: container.to_path_buf(),
        reason,
    })?;
    Ok((sidecar.spec, problem?))
}

fn decode(bytes: &[u8], sidecar: &Sidecar) -> std::result::Result<Result<Problem>, String> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err("missing EDN1 magic".into());
    }
    if hex(&Sha256::digest(bytes)) != sidecar.sha256 {
        return Err("checksum does not match sidecar".into());
    }
    let field = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let (m, n, p) = (field(0), field(1), field(2));
    if (m, n, p) != (sidecar.m, sidecar.n, sidecar.p) {
        return Err("header disagrees with sidecar".into());
    }
    let (rows, cols) = (sidecar.block_rows as usize, sidecar.block_cols as usize);
    let block_len = 8 * rows * cols;
    if bytes.len() != HEADER_LEN + block_len * m as usize {
        return Err(format!("expected {} blocks of {rows}x{cols}", m));
    }
    let p = p as usize;
    let losses = bytes[HEADER_LEN..]
        .chunks_exact(block_len)
        .map(|chunk| {
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let block = DMatrix::from_row_slice(rows, cols, &values);
            match &sidecar.spec {
                ProblemSpec::Lasso(_) => LocalLoss::least_squares(
                    block.columns(0, p).into_owned(),
                    DVector::from_column_slice(block.column(p).as_slice()),
                ),
                ProblemSpec::Spca(_) => LocalLoss::negative_quadratic_form(block),
                ProblemSpec::Quad(_) => LocalLoss::quadratic(
                    block.columns(0, p).into_owned(),
                    DVector::from_column_slice(block.column(p).as_slice()),
                ),
            }
        })
        .collect::<Result<Vec<_>>>();
    let regularizer = match &sidecar.spec {
        ProblemSpec::Lasso(s) => crate::problems::Regularizer::L1 { theta: s.theta },
        ProblemSpec::Spca(s) => crate::problems::Regularizer::L1Ball {
            theta: s.theta,
            radius: 1.0,
        },
        ProblemSpec::Quad(s) => s.regularizer,
    };
    Ok(losses.and_then(|l| Problem::new(SmoothLossSet::new(l)?, regularizer)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{LassoGenSpec, QuadGenSpec, Regularizer, SpcaGenSpec};

    fn specs() -> Vec<ProblemSpec> {
        vec![
            ProblemSpec::Lasso(LassoGenSpec {
                m: 3,
                n: 7,
                p: 5,
                s: 2,
                theta: 0.01,
                noise_std: 0.1,
                seed: 11,
                covariance_decay: 0.5,
            }),
            ProblemSpec::Spca(SpcaGenSpec {
                m: 2,
                n: 3,
                p: 6,
                q: 4,
                nnz: 5,
                theta: 0.1,
                seed: 2,
            }),
            ProblemSpec::Quad(QuadGenSpec {
                m: 2,
                p: 4,
                sigma2: 0.5,
                seed: 9,
                regularizer: Regularizer::L1 { theta: 0.2 },
            }),
        ]
    }

    #[test]
    fn round_trip_reproduces_problem() {
        let dir = tempfile::tempdir().unwrap();
        for (k, spec) in specs().into_iter().enumerate() {
            let (problem, files) = write_dataset(&spec, dir.path(), &format!("d{k}")).unwrap();
            let (spec_back, problem_back) = read_dataset(&files.container).unwrap();
            assert_eq!(spec_back, spec);
            assert_eq!(problem_back, problem);
        }
    }

    #[test]
    fn rewriting_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = &specs()[0];
        let (_, a) = write_dataset(spec, dir.path(), "a").unwrap();
        let (_, b) = write_dataset(spec, dir.path(), "b").unwrap();
        assert_eq!(fs::read(a.container).unwrap(), fs::read(b.container).unwrap());
    }

    #[test]
    fn corrupted_container_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (_, files) = write_dataset(&specs()[2], dir.path(), "q").unwrap();
        let mut bytes = fs::read(&files.container).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&files.container, bytes).unwrap();
        assert!(matches!(read_dataset(&files.container), Err(Error::Format { .. })));
    }
}
