//! The autoencoder with a partitioned latent code, and the swap of code parts.
//!
//! Both halves are plain MLPs: ReLU hidden layers, a linear code layer, and
//! a tanh output so decoded pixels stay in `[-1, 1]`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, glorot_uniform, Feeds, Graph, NodeId, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n` semantic parts of `m` dimensions each; part `k` is `[k*m, (k+1)*m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeLayout {
    pub n: usize,
    pub m: usize,
}

impl CodeLayout {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        let layout = CodeLayout { n, m };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 1 {
            return Err(Error::invalid(format!(
                "code layout needs n >= 2 and m >= 1, got n={} m={}",
                self.n, self.m
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n * self.m
    }

    pub fn part(&self, k: usize) -> std::ops::Range<usize> {
        k * self.m..(k + 1) * self.m
    }

    fn check_part(&self, k: usize) -> Result<()> {
        if k >= self.n {
            return Err(Error::invalid(format!("part {k} out of range (n = {})", self.n)));
        }
        Ok(())
    }
}

/// A latent code `[r_1, ..., r_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Code {
    values: Vec<f64>,
    layout: CodeLayout,
}

impl Code {
    pub fn new(values: Vec<f64>, layout: CodeLayout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::invalid(format!(
                "code of length {} does not match layout total {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(Code { values, layout })
    }

    pub fn zeros(layout: CodeLayout) -> Self {
        Code {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> CodeLayout {
        self.layout
    }

    pub fn part(&self, k: usize) -> &[f64] {
        &self.values[self.layout.part(k)]
    }
}

/// Exchanges part `k` of two codes. The inputs are left untouched.
///
/// ```
/// use dsd_core::model::{swap_part, Code, CodeLayout};
///
/// let layout = CodeLayout::new(2, 1).unwrap();
/// let a = Code::new(vec![1.0, 2.0], layout).unwrap();
/// let b = Code::new(vec![3.0, 4.0], layout).unwrap();
/// let (ha, hb) = swap_part(&a, &b, 1).unwrap();
/// assert_eq!(ha.values(), &[1.0, 4.0]);
/// assert_eq!(hb.values(), &[3.0, 2.0]);
/// ```
pub fn swap_part(a: &Code, b: &Code, k: usize) -> Result<(Code, Code)> {
    if a.layout != b.layout {
        return Err(Error::invalid(format!(
            "cannot swap between layouts {:?} and {:?}",
            a.layout, b.layout
        )));
    }
    a.layout.check_part(k)?;
    let range = a.layout.part(k);
    let mut ha = a.clone();
    let mut hb = b.clone();
    ha.values[range.clone()].copy_from_slice(&b.values[range.clone()]);
    hb.values[range.clone()].copy_from_slice(&a.values[range]);
    Ok((ha, hb))
}

/// Network shape, serialized as `model.json` next to the weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layout: CodeLayout,
    /// `[channels, height, width]`.
    pub image_shape: [usize; 3],
    /// Hidden widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    /// 16x16 RGB input, hidden widths 256 and 128, 3 parts of 5 dims.
    pub fn desk() -> Self {
        ModelConfig {
            layout: CodeLayout { n: 3, m: 5 },
            image_shape: [3, 16, 16],
            hidden: vec![256, 128],
        }
    }

    pub fn pixels(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.pixels() == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("image shape and hidden widths must be positive"));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.pixels()];
        w.extend(&self.hidden);
        w.push(self.layout.total());
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = self.encoder_widths();
        w.reverse();
        w
    }

    /// Name and shape of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, widths) in [("enc", self.encoder_widths()), ("dec", self.decoder_widths())] {
            for (i, pair) in widths.windows(2).enumerate() {
                let (w, b) = layer_names(prefix, i);
                out.push((w, vec![pair[0], pair[1]]));
                out.push((b, vec![pair[1]]));
            }
        }
        out
    }
}

fn layer_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b"))
}

/// Appends the encoder to `g`, reading images `[batch, pixels]` from `x`.
pub fn encoder_graph(g: &mut Graph, config: &ModelConfig, x: NodeId) -> NodeId {
    let layers = config.encoder_widths().len() - 1;
    let mut h = x;
    for i in 0..layers {
        let (w, b) = layer_names("enc", i);
        let (w, b) = (g.param(&w), g.param(&b));
        h = g.affine(h, w, b);
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    h
}

/// Appends the decoder to `g`, reading codes `[batch, total]` from `code`.
pub fn decoder_graph(g: &mut Graph, config: &ModelConfig, code: NodeId) -> NodeId {
    let layers = config.decoder_widths().len() - 1;
    let mut h = code;
    for i in 0..layers {
        let (w, b) = layer_names("dec", i);
        let (w, b) = (g.param(&w), g.param(&b));
        h = g.affine(h, w, b);
        h = if i + 1 < layers { g.relu(h) } else { g.tanh(h) };
    }
    h
}

/// Swaps part `k` between two batched code nodes using slices and concats,
/// so gradients flow through the exchange as a permutation.
pub fn swap_graph(g: &mut Graph, layout: CodeLayout, a: NodeId, b: NodeId, k: usize) -> (NodeId, NodeId) {
    assert!(k < layout.n, "part {k} out of range");
    let pieces = |g: &mut Graph, x: NodeId| -> Vec<NodeId> {
        (0..layout.n)
            .map(|p| {
                let r = layout.part(p);
                g.slice(x, r.start, r.end)
            })
            .collect()
    };
    let mut pa = pieces(g, a);
    let mut pb = pieces(g, b);
    std::mem::swap(&mut pa[k], &mut pb[k]);
    (g.concat(&pa), g.concat(&pb))
}

/// The autoencoder: configuration plus parameters `enc.*` and `dec.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct DsdModel {
    pub config: ModelConfig,
    pub params: Params,
}

impl DsdModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        for (name, shape) in config.param_shapes() {
            let t = match shape[..] {
                [fan_in, fan_out] => glorot_uniform(rng, fan_in, fan_out),
                _ => Tensor::zeros(&shape),
            };
            params.insert(name, t);
        }
        Ok(DsdModel { config, params })
    }

    pub fn layout(&self) -> CodeLayout {
        self.config.layout
    }

    /// Reshapes images to `[batch, pixels]`.
    pub fn as_batch(&self, images: &Tensor) -> Result<Tensor> {
        let p = self.config.pixels();
        let shape = images.shape();
        let batch = if shape.len() >= 3 && shape[shape.len() - 3..] == self.config.image_shape {
            shape[..shape.len() - 3].iter().product()
        } else if shape.len() == 2 && shape[1] == p {
            shape[0]
        } else {
            return Err(Error::ShapeMismatch {
                node: "encoder input".into(),
                detail: format!(
                    "expected images of shape {:?} or [batch, {p}], got {shape:?}",
                    self.config.image_shape
                ),
            });
        };
        images.clone().reshape(vec![batch, p])
    }

    /// Codes `[batch, total]` for images `[batch, pixels]` or `[batch, c, h, w]`.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.as_batch(images)?;
        let mut g = Graph::new();
        let xi = g.input("x");
        let code = encoder_graph(&mut g, &self.config, xi);
        g.mark_output("code", code);
        let mut out = g.forward(&Feeds::new().with_params(&self.params).with("x", &x))?;
        Ok(out.remove("code").unwrap())
    }

    /// Flat images `[batch, pixels]` for codes `[batch, total]`.
    pub fn decode_batch(&self, codes: &Tensor) -> Result<Tensor> {
        let total = self.layout().total();
        if codes.rank() != 2 || codes.shape()[1] != total {
            return Err(Error::ShapeMismatch {
                node: "decoder input".into(),
                detail: format!("expected codes [batch, {total}], got {:?}", codes.shape()),
            });
        }
        let mut g = Graph::new();
        let ci = g.input("code");
        let out = decoder_graph(&mut g, &self.config, ci);
        g.mark_output("image", out);
        let mut vals = g.forward(&Feeds::new().with_params(&self.params).with("code", codes))?;
        Ok(vals.remove("image").unwrap())
    }

    pub fn encode(&self, image: &Tensor) -> Result<Code> {
        if image.shape() != self.config.image_shape && image.shape() != [self.config.pixels()] {
            return Err(Error::ShapeMismatch {
                node: "encoder input".into(),
                detail: format!(
                    "expected an image of shape {:?}, got {:?}",
                    self.config.image_shape,
                    image.shape()
                ),
            });
        }
        let batch = image.clone().reshape(vec![1, self.config.pixels()])?;
        Code::new(self.encode_batch(&batch)?.into_data(), self.layout())
    }

    /// Decodes one code into a `[c, h, w]` image.
    pub fn decode(&self, code: &Code) -> Result<Tensor> {
        if code.layout() != self.layout() {
            return Err(Error::invalid(format!(
                "code layout {:?} does not match model layout {:?}",
                code.layout(),
                self.layout()
            )));
        }
        let codes = Tensor::matrix(1, code.values.len(), code.values.clone())?;
        self.decode_batch(&codes)?.reshape(self.config.image_shape.to_vec())
    }

    /// Writes `model.json` and `weights.dsdw` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("model.json"))?);
        serde_json::to_writer_pretty(&mut w, &self.config)?;
        w.write_all(b"\n")?;
        w.flush()?;
        checkpoint::save(dir.join("weights.dsdw"), &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ModelConfig = serde_json::from_reader(BufReader::new(File::open(dir.join("model.json"))?))?;
        let params = checkpoint::load(dir.join("weights.dsdw"))?;
        Self::from_parts(config, params)
    }

    /// Checks that `params` holds exactly the tensors `config` needs.
    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let mut kept = Params::new();
        for (name, shape) in config.param_shapes() {
            let got = params.require(&name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    got.shape()
                )));
            }
            kept.insert(name.clone(), got.clone());
        }
        Ok(DsdModel { config, params: kept })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layout: CodeLayout { n: 2, m: 2 },
            image_shape: [1, 2, 3],
            hidden: vec![5],
        }
    }

    #[test]
    fn layout_rejects_degenerate_shapes() {
        assert!(CodeLayout::new(1, 3).is_err());
        assert!(CodeLayout::new(2, 0).is_err());
        let l = CodeLayout::new(3, 5).unwrap();
        assert_eq!(l.total(), 15);
        assert_eq!(l.part(2), 10..15);
    }

    #[test]
    fn swap_examples() {
        let l = CodeLayout::new(2, 1).unwrap();
        let a = Code::new(vec![1.0, 2.0], l).unwrap();
        let b = Code::new(vec![3.0, 4.0], l).unwrap();
        let (ha, hb) = swap_part(&a, &b, 1).unwrap();
        assert_eq!((ha.values(), hb.values()), (&[1.0, 4.0][..], &[3.0, 2.0][..]));
        let (ra, rb) = swap_part(&ha, &hb, 1).unwrap();
        assert_eq!((ra, rb), (a.clone(), b.clone()));
        let (fa, fb) = swap_part(&a, &a, 0).unwrap();
        assert_eq!((fa, fb), (a.clone(), a.clone()));
    }

    #[test]
    fn swap_errors() {
        let l2 = CodeLayout::new(2, 1).unwrap();
        let l3 = CodeLayout::new(3, 1).unwrap();
        let a = Code::zeros(l2);
        let c = Code::zeros(l3);
        assert!(swap_part(&a, &c, 0).is_err());
        assert!(swap_part(&a, &a, 2).is_err());
        assert!(Code::new(vec![1.0], l2).is_err());
    }

    #[test]
    fn desk_model_encodes_to_fifteen_finite_values() {
        let model = DsdModel::new(ModelConfig::desk(), &mut rng_for(0, 1)).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.3);
        let code = model.encode(&img).unwrap();
        assert_eq!(code.values().len(), 15);
        assert!(code.values().iter().all(|v| v.is_finite()));
        assert_eq!(model.encode(&img).unwrap(), code);
    }

    #[test]
    fn decode_of_zero_code_is_finite_and_bounded() {
        let model = DsdModel::new(ModelConfig::desk(), &mut rng_for(0, 1)).unwrap();
        let img = model.decode(&Code::zeros(model.layout())).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        assert!(img.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        assert_eq!(model.decode(&Code::zeros(model.layout())).unwrap(), img);
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let model = DsdModel::new(tiny(), &mut rng_for(0, 1)).unwrap();
        assert!(model.encode(&Tensor::zeros(&[1, 3, 2])).is_err());
        let other = Code::zeros(CodeLayout::new(3, 1).unwrap());
        assert!(model.decode(&other).is_err());
        assert!(model.decode_batch(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn batch_and_single_encodings_agree() {
        let model = DsdModel::new(tiny(), &mut rng_for(4, 1)).unwrap();
        let x = Tensor::matrix(2, 6, (0..12).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let batch = model.encode_batch(&x).unwrap();
        for r in 0..2 {
            let single = model.encode(&Tensor::vector(x.row(r).to_vec())).unwrap();
            for (a, b) in single.values().iter().zip(batch.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = DsdModel::new(tiny(), &mut rng_for(2, 1)).unwrap();
        model.save(dir.path()).unwrap();
        let back = DsdModel::load(dir.path()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn from_parts_rejects_missing_tensors() {
        let model = DsdModel::new(tiny(), &mut rng_for(2, 1)).unwrap();
        let mut params = model.params.clone();
        params.remove("dec.0.w");
        assert!(DsdModel::from_parts(tiny(), params).is_err());
    }
}
