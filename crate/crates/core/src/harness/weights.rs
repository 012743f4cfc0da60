//! Weight-file I/O: the URA codebook factors `D`, `W` and the learnt decoder.
//!
//! The file is a single JSON object:
//!
//! ```text
//! { "header": { "version", "n", "d", "layers", "init_scheme",
//!               "cnn": { "in_channels", "hidden", "kernel" } },
//!   "D": [[f64; d]; n], "W": [[f64; d]; d],
//!   "scalars": [ { "gamma", "eta", "alpha", "tau", "rho",
//!                  "step_k", "step_pi", "step_sigma" }; layers ],
//!   "cnn": [ { "conv1_weight", "conv1_bias", "conv2_weight", "conv2_bias" }; layers ] }
//! ```
//!
//! Scalars are stored raw (before squashing). CNN tensors are flattened
//! row-major: `conv1_weight[hidden][in][kernel]`, `conv2_weight[hidden][kernel]`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decoder::{Cnn, DecoderMode, DecoderParams, LayerParams, PostprocConfig, RawScalars, DEFAULT_K_MAX_FLOOR};
use crate::ura_codebook::{synthesize, BaseMatrix, InitScheme, ShearMatrix, UraCodebook};
use crate::{Error, Result};

pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnShape {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightHeader {
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub init_scheme: InitScheme,
    pub cnn: CnnShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CnnTensors {
    conv1_weight: Vec<f64>,
    conv1_bias: Vec<f64>,
    conv2_weight: Vec<f64>,
    conv2_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    header: WeightHeader,
    #[serde(rename = "D")]
    d_rows: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    w_rows: Vec<Vec<f64>>,
    scalars: Vec<RawScalars>,
    cnn: Vec<CnnTensors>,
}

/// Validated contents of a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub header: WeightHeader,
    pub base: BaseMatrix,
    pub shear: ShearMatrix,
    pub layers: Vec<LayerParams>,
}

impl WeightFile {
    /// Packs a learnt decoder (all layers must share one CNN shape).
    pub fn new(base: BaseMatrix, shear: ShearMatrix, params: &DecoderParams) -> Result<Self> {
        if params.mode != DecoderMode::Learnt {
            return Err(Error::InvalidArgument(
                "only learnt decoders are stored in weight files".into(),
            ));
        }
        if shear.d() != base.d() {
            return Err(Error::shape("W", base.d(), shear.d()));
        }
        let first = params.layers.first().ok_or(Error::Empty("decoder layers"))?;
        let cnn = CnnShape {
            in_channels: first.cnn.in_channels(),
            hidden: first.cnn.hidden(),
            kernel: first.cnn.kernel(),
        };
        for l in &params.layers {
            let shape = CnnShape {
                in_channels: l.cnn.in_channels(),
                hidden: l.cnn.hidden(),
                kernel: l.cnn.kernel(),
            };
            if shape != cnn {
                return Err(Error::shape("cnn", format!("{cnn:?}"), format!("{shape:?}")));
            }
        }
        Ok(Self {
            header: WeightHeader {
                version: WEIGHTS_VERSION,
                n: base.n(),
                d: base.d(),
                layers: params.layers.len(),
                init_scheme: base.scheme(),
                cnn,
            },
            base,
            shear,
            layers: params.layers.clone(),
        })
    }

    pub fn codebook(&self) -> Result<UraCodebook> {
        synthesize(&self.base, &self.shear)
    }

    pub fn params(&self) -> DecoderParams {
        DecoderParams {
            mode: DecoderMode::Learnt,
            layers: self.layers.clone(),
            postproc: PostprocConfig::default(),
            k_max_floor: DEFAULT_K_MAX_FLOOR,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
        let raw = RawFile {
            header: self.header,
            d_rows: rows(self.base.matrix()),
            w_rows: rows(self.shear.matrix()),
            scalars: self.layers.iter().map(|l| l.raw).collect(),
            cnn: self
                .layers
                .iter()
                .map(|l| CnnTensors {
                    conv1_weight: l.cnn.w1().to_vec(),
                    conv1_bias: l.cnn.b1().to_vec(),
                    conv2_weight: l.cnn.w2().to_vec(),
                    conv2_bias: l.cnn.b2(),
                })
                .collect(),
        };
        if raw.scalars.iter().flat_map(|s| s.to_array()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder scalars".into()));
        }
        serde_json::to_string(&raw).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        // check the version before the schema so old files get a clear error
        if let Some(v) = value.pointer("/header/version").and_then(|v| v.as_u64()) {
            if v != WEIGHTS_VERSION as u64 {
                return Err(Error::Version {
                    found: v as u32,
                    expected: WEIGHTS_VERSION,
                });
            }
        }
        let raw: RawFile = serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))?;
        let h = raw.header;
        let base = matrix_from_rows("D", &raw.d_rows, h.n, h.d)?;
        let shear = matrix_from_rows("W", &raw.w_rows, h.d, h.d)?;
        if raw.scalars.len() != h.layers {
            return Err(Error::shape("scalars", h.layers, raw.scalars.len()));
        }
        if raw.cnn.len() != h.layers {
            return Err(Error::shape("cnn", h.layers, raw.cnn.len()));
        }
        if raw.scalars.iter().flat_map(|s| s.to_array()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalars".into()));
        }
        let mut layers = Vec::with_capacity(h.layers);
        for (s, t) in raw.scalars.into_iter().zip(raw.cnn) {
            let cnn = Cnn::from_parts(
                h.cnn.in_channels,
                h.cnn.hidden,
                h.cnn.kernel,
                t.conv1_weight,
                t.conv1_bias,
                t.conv2_weight,
                t.conv2_bias,
            )?;
            layers.push(LayerParams { raw: s, cnn });
        }
        Ok(Self {
            header: h,
            base: BaseMatrix::from_matrix(base, h.init_scheme)?,
            shear: ShearMatrix::from_matrix(shear)?,
            layers,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::shape(format!("{field} rows"), nrows, rows.len()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::shape(format!("{field} row {i}"), ncols, r.len()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(field.to_string()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Reads a weight file and returns the synthesised codebook with the
/// decoder parameters.
pub fn load_weights(path: &Path) -> Result<(UraCodebook, DecoderParams)> {
    let wf = WeightFile::read(path)?;
    Ok((wf.codebook()?, wf.params()))
}
