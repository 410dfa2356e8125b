use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{he_uniform, Binding, DomainCode, Params, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const IN_EPS: f64 = 1e-5;
const RES_BLOCKS: usize = 2;

/// Architecture of the conditional conv/deconv generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub image_channels: usize,
    /// `K_s + K_n`, the one-hot code length.
    pub num_domains: usize,
    /// Stem, first and second down-sampling widths.
    pub widths: [usize; 3],
}

impl GeneratorSpec {
    pub fn input_channels(&self) -> usize {
        self.image_channels + self.num_domains
    }
}

/// Stem conv 7×7, two stride-2 down convs, two residual blocks, two stride-2
/// transposed convs and a 7×7 tanh output conv. Inner convs are followed by
/// instance norm (so they carry no bias) and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    spec: GeneratorSpec,
    params: Params,
}

fn norm_params(p: &mut Params, name: &str, ch: usize) {
    p.insert(format!("{name}.gain"), Tensor::full(&[ch], 1.0));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[ch]));
}

impl GeneratorWeights {
    /// He-uniform convs, unit-gain norms, and a zero output conv so the
    /// untrained generator maps every input to the zero image.
    pub fn init(spec: &GeneratorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = spec.widths;
        let cin = spec.input_channels();
        let mut p = Params::new();
        p.insert("stem.w", he_uniform(&mut rng, &[w0, cin, 7, 7], cin * 49));
        norm_params(&mut p, "stem.norm", w0);
        p.insert("down1.w", he_uniform(&mut rng, &[w1, w0, 3, 3], w0 * 9));
        norm_params(&mut p, "down1.norm", w1);
        p.insert("down2.w", he_uniform(&mut rng, &[w2, w1, 3, 3], w1 * 9));
        norm_params(&mut p, "down2.norm", w2);
        for r in 0..RES_BLOCKS {
            for c in 1..=2 {
                p.insert(
                    format!("res{r}.conv{c}.w"),
                    he_uniform(&mut rng, &[w2, w2, 3, 3], w2 * 9),
                );
                norm_params(&mut p, &format!("res{r}.norm{c}"), w2);
            }
        }
        // transposed conv weights are Cin × Cout × K × K
        p.insert("up1.w", he_uniform(&mut rng, &[w2, w1, 3, 3], w2 * 9));
        norm_params(&mut p, "up1.norm", w1);
        p.insert("up2.w", he_uniform(&mut rng, &[w1, w0, 3, 3], w1 * 9));
        norm_params(&mut p, "up2.norm", w0);
        p.insert("out.w", Tensor::zeros(&[spec.image_channels, w0, 7, 7]));
        p.insert("out.b", Tensor::zeros(&[spec.image_channels]));
        Self {
            spec: spec.clone(),
            params: p,
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn norm_relu(&self, g: &mut Graph, b: &Binding<'_>, x: Var, name: &str, relu: bool) -> Result<Var> {
        let gain = b.param(g, &self.params, &format!("{name}.gain"))?;
        let bias = b.param(g, &self.params, &format!("{name}.bias"))?;
        let y = g.instance_norm(x, gain, bias, IN_EPS)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    /// Appends `G(x, code)` to the graph, one code per batch row. The codes
    /// are expanded to constant `H×W` planes and concatenated to the image
    /// channels before the stem.
    pub fn forward(&self, g: &mut Graph, b: &Binding<'_>, x: Var, codes: &[DomainCode]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.spec.image_channels || s[0] != codes.len() {
            return Err(Error::shape(
                "generator",
                format!("input {s:?} with {} codes", codes.len()),
            ));
        }
        if let Some(c) = codes.iter().find(|c| c.len() != self.spec.num_domains) {
            return Err(Error::DomainCode {
                index: c.index(),
                len: self.spec.num_domains,
            });
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let k = self.spec.num_domains;
        let mut planes = Vec::with_capacity(n * k * h * w);
        for c in codes {
            for v in c.one_hot() {
                planes.extend(std::iter::repeat_n(v, h * w));
            }
        }
        let code = g.constant(Tensor::new(&[n, k, h, w], planes)?);
        let input = g.concat_channels(&[x, code])?;

        let p = &self.params;
        let w_stem = b.param(g, p, "stem.w")?;
        let y = g.conv2d(input, w_stem, None, 1, 3)?;
        let mut y = self.norm_relu(g, b, y, "stem.norm", true)?;
        for name in ["down1", "down2"] {
            let w = b.param(g, p, &format!("{name}.w"))?;
            let z = g.conv2d(y, w, None, 2, 1)?;
            y = self.norm_relu(g, b, z, &format!("{name}.norm"), true)?;
        }
        for r in 0..RES_BLOCKS {
            let w1 = b.param(g, p, &format!("res{r}.conv1.w"))?;
            let z = g.conv2d(y, w1, None, 1, 1)?;
            let z = self.norm_relu(g, b, z, &format!("res{r}.norm1"), true)?;
            let w2 = b.param(g, p, &format!("res{r}.conv2.w"))?;
            let z = g.conv2d(z, w2, None, 1, 1)?;
            let z = self.norm_relu(g, b, z, &format!("res{r}.norm2"), false)?;
            y = g.add(y, z)?;
        }
        for name in ["up1", "up2"] {
            let w = b.param(g, p, &format!("{name}.w"))?;
            let z = g.conv_transpose2d(y, w, None, 2, 1, 1)?;
            y = self.norm_relu(g, b, z, &format!("{name}.norm"), true)?;
        }
        let w_out = b.param(g, p, "out.w")?;
        let b_out = b.param(g, p, "out.b")?;
        let y = g.conv2d(y, w_out, Some(b_out), 1, 3)?;
        let out = g.tanh(y);
        if g.shape(out) != s.as_slice() {
            return Err(Error::shape(
                "generator",
                format!("output {:?} differs from input {s:?}", g.shape(out)),
            ));
        }
        Ok(out)
    }
}

impl Weights for GeneratorWeights {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn from_params(params: Params) -> Result<Self> {
        let stem = params.get("stem.w")?.shape().to_vec();
        let d1 = params.get("down1.w")?.shape().to_vec();
        let d2 = params.get("down2.w")?.shape().to_vec();
        let out = params.get("out.w")?.shape().to_vec();
        let image_channels = out[0];
        let spec = GeneratorSpec {
            image_channels,
            num_domains: stem[1]
                .checked_sub(image_channels)
                .ok_or_else(|| Error::Malformed("generator stem narrower than image".into()))?,
            widths: [stem[0], d1[0], d2[0]],
        };
        let reference = GeneratorWeights::init(&spec, 0);
        for (k, t) in reference.params.iter() {
            if params.get(k)?.shape() != t.shape() {
                return Err(Error::Malformed(format!("generator parameter `{k}` has wrong shape")));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Malformed("unexpected generator parameters".into()));
        }
        Ok(Self { spec, params })
    }
}
