use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{he_uniform, Binding, Params, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const CONV_LAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub image_channels: usize,
    pub image_size: usize,
    pub width: usize,
    pub classes: usize,
}

impl ClassifierSpec {
    /// Flattened penultimate feature length.
    pub fn feature_dim(&self) -> usize {
        let s = self.image_size >> CONV_LAYERS;
        self.width * s * s
    }
}

/// Four 3×3 conv + ReLU + 2×2 max-pool stages followed by a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskClassifierWeights {
    spec: ClassifierSpec,
    params: Params,
}

impl TaskClassifierWeights {
    pub fn init(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        if !spec.image_size.is_multiple_of(1 << CONV_LAYERS) || spec.image_size == 0 {
            return Err(Error::geometry(
                "classifier",
                format!("image size {} not divisible by 16", spec.image_size),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let mut cin = spec.image_channels;
        for l in 0..CONV_LAYERS {
            p.insert(
                format!("conv{l}.w"),
                he_uniform(&mut rng, &[spec.width, cin, 3, 3], cin * 9),
            );
            p.insert(format!("conv{l}.b"), Tensor::zeros(&[spec.width]));
            cin = spec.width;
        }
        let f = spec.feature_dim();
        p.insert("head.w", he_uniform(&mut rng, &[f, spec.classes], f));
        p.insert("head.b", Tensor::zeros(&[spec.classes]));
        Ok(Self {
            spec: spec.clone(),
            params: p,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    /// Appends the classifier; returns `(logits, penultimate features)`.
    pub fn forward(&self, g: &mut Graph, b: &Binding<'_>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let sp = &self.spec;
        if s.len() != 4 || s[1] != sp.image_channels || s[2] != sp.image_size || s[3] != sp.image_size {
            return Err(Error::geometry("classifier", format!("input {s:?} for {sp:?}")));
        }
        let mut y = x;
        for l in 0..CONV_LAYERS {
            let w = b.param(g, &self.params, &format!("conv{l}.w"))?;
            let bias = b.param(g, &self.params, &format!("conv{l}.b"))?;
            let z = g.conv2d(y, w, Some(bias), 1, 1)?;
            let z = g.relu(z);
            y = g.max_pool2x2(z)?;
        }
        let feats = g.reshape(y, &[s[0], sp.feature_dim()])?;
        let w = b.param(g, &self.params, "head.w")?;
        let bias = b.param(g, &self.params, "head.b")?;
        let logits = g.linear(feats, w, bias)?;
        Ok((logits, feats))
    }
}

impl Weights for TaskClassifierWeights {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn from_params(params: Params) -> Result<Self> {
        let c0 = params.get("conv0.w")?.shape().to_vec();
        let head = params.get("head.w")?.shape().to_vec();
        let cells = head[0] / c0[0].max(1);
        let side = (cells as f64).sqrt().round() as usize;
        let spec = ClassifierSpec {
            image_channels: c0[1],
            image_size: side << CONV_LAYERS,
            width: c0[0],
            classes: head[1],
        };
        let reference = TaskClassifierWeights::init(&spec, 0)?;
        if params.len() != reference.params.len()
            || reference
                .params
                .iter()
                .any(|(k, t)| params.get(k).map(|p| p.shape() != t.shape()).unwrap_or(true))
        {
            return Err(Error::Malformed("classifier parameter set does not match".into()));
        }
        Ok(Self { spec, params })
    }
}
