//! ONNX graph execution through an independent runtime (tract).

use std::path::{Path, PathBuf};

use half::f16;
use tract_onnx::prelude::{
    tvec, DatumType, Framework, InferenceFact, InferenceModelExt, IntoTValue, SimplePlan, TypedFact,
    TypedModel,
};

use crate::error::{RegenError, Result};
use crate::onnx::Precision;
use crate::tensor::{Shape, Tensor};

type Plan = SimplePlan<TypedFact, Box<dyn tract_onnx::prelude::TypedOp>, TypedModel>;

fn rt(e: impl std::fmt::Display) -> RegenError {
    RegenError::Runtime(e.to_string())
}

/// A loaded, shape-specialized graph with one image input and one output.
pub struct OnnxSession {
    path: PathBuf,
    input: Shape,
    precision: Precision,
    plan: Plan,
}

impl std::fmt::Debug for OnnxSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxSession")
            .field("path", &self.path)
            .field("input", &self.input)
            .field("precision", &self.precision)
            .finish()
    }
}

impl OnnxSession {
    pub fn load(path: &Path, input: Shape, precision: Precision) -> Result<Self> {
        let dt = match precision {
            Precision::Fp32 => DatumType::F32,
            Precision::Fp16 => DatumType::F16,
        };
        let fact = InferenceFact::dt_shape(dt, [input.n, input.c, input.h, input.w]);
        let plan = tract_onnx::onnx()
            .model_for_path(path)
            .map_err(rt)?
            .with_input_fact(0, fact)
            .map_err(rt)?
            .into_optimized()
            .map_err(rt)?
            .into_runnable()
            .map_err(rt)?;
        Ok(OnnxSession {
            path: path.to_path_buf(),
            input,
            precision,
            plan,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Run on an `f32` tensor; fp16 graphs convert at the boundary.
    /// Returns the output flattened to `n x c x h x w` (trailing dims padded with 1).
    pub fn run(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        x.expect_shape(self.input)?;
        let dims = self.input.dims();
        let input = match self.precision {
            Precision::Fp32 => tract_onnx::prelude::Tensor::from_shape(&dims, x.data()),
            Precision::Fp16 => {
                let h: Vec<f16> = x.data().iter().map(|&v| f16::from_f32(v)).collect();
                tract_onnx::prelude::Tensor::from_shape(&dims, &h)
            }
        }
        .map_err(rt)?;
        let outputs = self.plan.run(tvec!(input.into_tvalue())).map_err(rt)?;
        let out = outputs
            .first()
            .ok_or_else(|| RegenError::Runtime("graph produced no outputs".into()))?;
        let shape = out.shape().to_vec();
        let data: Vec<f32> = match out.datum_type() {
            DatumType::F32 => out.as_slice::<f32>().map_err(rt)?.to_vec(),
            DatumType::F16 => out
                .as_slice::<f16>()
                .map_err(rt)?
                .iter()
                .map(|v| v.to_f32())
                .collect(),
            other => {
                return Err(RegenError::Runtime(format!(
                    "unsupported output element type {other:?}"
                )))
            }
        };
        let mut d = [1usize; 4];
        match shape.len() {
            0 => {}
            1..=4 => d[..shape.len()].copy_from_slice(&shape),
            _ => {
                // fold trailing dims into the last axis
                d[..3].copy_from_slice(&shape[..3]);
                d[3] = shape[3..].iter().product();
            }
        }
        Tensor::from_vec(Shape::new(d[0], d[1], d[2], d[3]), data)
    }
}
