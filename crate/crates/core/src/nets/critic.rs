use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{he_uniform, Binding, Params, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriticSpec {
    pub image_channels: usize,
    pub widths: [usize; 3],
    pub embed_dim: usize,
    /// Width of the domain head (number of source domains).
    pub domains: usize,
}

/// Three stride-2 3×3 convs with ReLU, global average pooling, a linear
/// embedding and a linear domain head used only while pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticWeights {
    spec: CriticSpec,
    params: Params,
}

impl CriticWeights {
    pub fn init(spec: &CriticSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let mut cin = spec.image_channels;
        for (l, &w) in spec.widths.iter().enumerate() {
            p.insert(format!("conv{l}.w"), he_uniform(&mut rng, &[w, cin, 3, 3], cin * 9));
            p.insert(format!("conv{l}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        p.insert("embed.w", he_uniform(&mut rng, &[cin, spec.embed_dim], cin));
        p.insert("embed.b", Tensor::zeros(&[spec.embed_dim]));
        p.insert(
            "head.w",
            he_uniform(&mut rng, &[spec.embed_dim, spec.domains], spec.embed_dim),
        );
        p.insert("head.b", Tensor::zeros(&[spec.domains]));
        Self {
            spec: spec.clone(),
            params: p,
        }
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    /// Appends `φ(x)`, one unnormalized `embed_dim` row per image.
    pub fn embed(&self, g: &mut Graph, b: &Binding<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.spec.image_channels {
            return Err(Error::geometry("critic", format!("input {s:?}")));
        }
        let mut y = x;
        for l in 0..self.spec.widths.len() {
            let w = b.param(g, &self.params, &format!("conv{l}.w"))?;
            let bias = b.param(g, &self.params, &format!("conv{l}.b"))?;
            let z = g.conv2d(y, w, Some(bias), 2, 1)?;
            y = g.relu(z);
        }
        let pooled = g.global_avg_pool(y)?;
        let w = b.param(g, &self.params, "embed.w")?;
        let bias = b.param(g, &self.params, "embed.b")?;
        g.linear(pooled, w, bias)
    }

    /// Domain logits on top of the embedding.
    pub fn domain_logits(&self, g: &mut Graph, b: &Binding<'_>, x: Var) -> Result<(Var, Var)> {
        let e = self.embed(g, b, x)?;
        let w = b.param(g, &self.params, "head.w")?;
        let bias = b.param(g, &self.params, "head.b")?;
        Ok((g.linear(e, w, bias)?, e))
    }
}

impl Weights for CriticWeights {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn from_params(params: Params) -> Result<Self> {
        let c: Vec<Vec<usize>> = (0..3)
            .map(|l| params.get(&format!("conv{l}.w")).map(|t| t.shape().to_vec()))
            .collect::<Result<_>>()?;
        let head = params.get("head.w")?.shape().to_vec();
        let spec = CriticSpec {
            image_channels: c[0][1],
            widths: [c[0][0], c[1][0], c[2][0]],
            embed_dim: head[0],
            domains: head[1],
        };
        let reference = CriticWeights::init(&spec, 0);
        if params.len() != reference.params.len()
            || reference
                .params
                .iter()
                .any(|(k, t)| params.get(k).map(|p| p.shape() != t.shape()).unwrap_or(true))
        {
            return Err(Error::Malformed("critic parameter set does not match".into()));
        }
        Ok(Self { spec, params })
    }
}
