use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DetectorGeometry;
use crate::error::{Error, Result};
use crate::imgproc::ImageGray;
use crate::ndgrad::{Graph, Tensor, Var};

/// Stage-2/3/4 feature maps, `(B, ch_i, S_i, S_i)`.
pub type FeaturePyramid<'g> = [Var<'g>; 3];

/// Head outputs per scale, `(B, M * (5 + C), S_i, S_i)`.
pub type RawPredictions = [Tensor; 3];

const NAMES: [&str; 14] = [
    "stem.w", "stem.b", "stage2.w", "stage2.b", "stage3.w", "stage3.b", "stage4.w", "stage4.b",
    "head1.w", "head1.b", "head2.w", "head2.b", "head3.w", "head3.b",
];

/// Initial objectness bias, the logit of a 1% prior.
const OBJ_PRIOR_LOGIT: f64 = -4.595;

/// The single parameter set read by every forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub geometry: DetectorGeometry,
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// He-normal conv kernels, zero biases except the objectness prior.
    pub fn init(geometry: DetectorGeometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(NAMES.len());
        let mut in_ch = 1;
        for (i, &out_ch) in geometry.widths.iter().enumerate() {
            let fan_in = (in_ch * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w = (0..out_ch * in_ch * 9).map(|_| normal.sample(&mut rng)).collect();
            tensors.push((NAMES[2 * i].to_string(), Tensor::new([out_ch, in_ch, 3, 3], w)?));
            tensors.push((NAMES[2 * i + 1].to_string(), Tensor::zeros([out_ch])));
            in_ch = out_ch;
        }
        let hc = geometry.head_channels();
        for s in 0..3 {
            let ch = geometry.widths[s + 1];
            let normal = Normal::new(0.0, 0.01).expect("positive std");
            let w = (0..hc * ch).map(|_| normal.sample(&mut rng)).collect();
            let mut b = Tensor::zeros([hc]);
            for m in 0..geometry.m {
                b.data_mut()[geometry.slot_channel(m, 4)] = OBJ_PRIOR_LOGIT;
            }
            tensors.push((NAMES[8 + 2 * s].to_string(), Tensor::new([hc, ch, 1, 1], w)?));
            tensors.push((NAMES[9 + 2 * s].to_string(), b));
        }
        Ok(ModelParams { geometry, tensors })
    }

    /// Every tensor set to zero.
    pub fn zeros(geometry: DetectorGeometry) -> Result<Self> {
        let mut p = Self::init(geometry, 0)?;
        for (_, t) in &mut p.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks names and shapes against the geometry.
    pub fn validate(&self) -> Result<()> {
        let expect = Self::zeros(self.geometry.clone())?;
        if self.tensors.len() != expect.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                expect.tensors.len(),
                self.tensors.len()
            )));
        }
        for ((n, t), (en, et)) in self.tensors.iter().zip(&expect.tensors) {
            if n != en || t.shape() != et.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {n} {:?} does not match expected {en} {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Records every tensor as a constant.
    pub fn bind_constant<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    /// Forward without gradients: head outputs and the pyramid values.
    pub fn predict(&self, images: &[&ImageGray]) -> Result<(RawPredictions, [Tensor; 3])> {
        let g = Graph::new();
        let vars = self.bind_constant(&g);
        let x = g.constant(images_tensor(&self.geometry, images)?);
        let pyr = backbone_forward(&vars, x)?;
        let raw = head_forward(&self.geometry, &vars, &pyr)?;
        let t = |v: &Var<'_>| (*v.value()).clone();
        Ok(([t(&raw[0]), t(&raw[1]), t(&raw[2])], [t(&pyr[0]), t(&pyr[1]), t(&pyr[2])]))
    }
}

/// Stacks images into a `(B, 1, H, W)` tensor scaled to `[0, 1]`.
pub fn images_tensor(geom: &DetectorGeometry, images: &[&ImageGray]) -> Result<Tensor> {
    let n = geom.input;
    let mut data = Vec::with_capacity(images.len() * n * n);
    for img in images {
        if img.width() != n || img.height() != n {
            return Err(Error::Size(format!(
                "image is {}x{}, detector expects {n}x{n}",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.pixels().iter().map(|&p| p as f64 / 255.0));
    }
    Tensor::new([images.len(), 1, n, n], data)
}

/// Stem, then three stride-2 stages; returns the stage outputs.
pub fn backbone_forward<'g>(params: &[Var<'g>], x: Var<'g>) -> Result<FeaturePyramid<'g>> {
    let stem = x.conv2d(params[0], params[1], 2)?.relu();
    let s2 = stem.conv2d(params[2], params[3], 2)?.relu();
    let s3 = s2.conv2d(params[4], params[5], 2)?.relu();
    let s4 = s3.conv2d(params[6], params[7], 2)?.relu();
    Ok([s2, s3, s4])
}

/// One 1x1 conv per scale.
pub fn head_forward<'g>(
    geom: &DetectorGeometry,
    params: &[Var<'g>],
    pyramid: &FeaturePyramid<'g>,
) -> Result<[Var<'g>; 3]> {
    let mut out = Vec::with_capacity(3);
    for (s, feat) in pyramid.iter().enumerate() {
        let shape = feat.shape();
        let want = geom.grid(s);
        if shape.len() != 4 || shape[1] != geom.widths[s + 1] || shape[2] != want || shape[3] != want
        {
            return Err(Error::shape(
                "head_forward",
                &shape,
                &[shape.first().copied().unwrap_or(0), geom.widths[s + 1], want, want],
            ));
        }
        out.push(feat.conv2d(params[8 + 2 * s], params[9 + 2 * s], 1)?);
    }
    Ok([out[0], out[1], out[2]])
}
