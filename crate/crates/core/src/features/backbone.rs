//! Four-block convolutional backbone with a RoI-aligned region pathway.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureVector;
use crate::autograd::{Graph, RoiSpec, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{uniform_with_variance, Bound, Linear, ParamId, ParamStore};
use crate::types::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of the four conv blocks.
    pub channels: [usize; 4],
    pub strides: [usize; 4],
    /// Side of the RoI pooling lattice.
    pub grid: usize,
    /// Bilinear samples per lattice bin and axis.
    pub samples: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 16, 32],
            strides: [1, 2, 1, 2],
            grid: 5,
            samples: 2,
            feature_dim: 64,
            seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Spatial output of the conv stack for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub image_width: usize,
    pub image_height: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    convs: Vec<(ParamId, ParamId, usize)>,
    proj: Linear,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let fan_in = cin * 9;
            let w = params.add(
                format!("backbone.conv{i}.weight"),
                uniform_with_variance(&mut rng, vec![cout, cin, 3, 3], 2.0 / fan_in as f64),
            );
            let b = params.add(format!("backbone.conv{i}.bias"), Tensor::zeros(vec![cout]));
            convs.push((w, b, stride));
            cin = cout;
        }
        let pooled = cin * config.grid * config.grid;
        let proj = Linear::new(&mut params, "backbone.proj", pooled, config.feature_dim, true, 1.0, &mut rng);
        Self {
            config,
            params,
            convs,
            proj,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Zeroes the final affine layer.
    pub fn zero_projection(&mut self) {
        self.proj.zero(&mut self.params);
    }

    /// Conv stack on a `[3, H, W]` input node.
    pub fn map_node(&self, g: &mut Graph, bound: &Bound, input: Var) -> Var {
        let mut x = input;
        for (w, b, stride) in &self.convs {
            let y = g.conv2d(x, bound.var(*w), bound.var(*b), *stride, 1);
            x = g.relu(y);
        }
        x
    }

    /// Pools the region `b` (image pixels) of a map node and projects it to
    /// a `[1, feature_dim]` row.
    pub fn region_node(&self, g: &mut Graph, bound: &Bound, map: Var, b: &BBox) -> Var {
        let s = self.config.total_stride() as f64;
        let spec = RoiSpec {
            x0: b.x / s,
            y0: b.y / s,
            x1: b.right() / s,
            y1: b.bottom() / s,
            grid: self.config.grid,
            samples: self.config.samples,
        };
        let pooled = g.roi_align(map, spec);
        let len = g.value(pooled).len();
        let row = g.reshape(pooled, vec![1, len]);
        self.proj.forward(g, bound, row)
    }

    fn check_image(width: usize, height: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("image region"));
        }
        Ok(())
    }

    pub fn feature_map(&self, img: &RgbImage) -> Result<FeatureMap> {
        Self::check_image(img.width(), img.height())?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let input = g.constant(Tensor::new(vec![3, img.height(), img.width()], img.to_planar()));
        let map = self.map_node(&mut g, &bound, input);
        Ok(FeatureMap {
            tensor: g.value(map).clone(),
            image_width: img.width(),
            image_height: img.height(),
        })
    }

    /// Global pathway: the whole image pooled as one region.
    pub fn embed_image(&self, img: &RgbImage) -> Result<FeatureVector> {
        Self::check_image(img.width(), img.height())?;
        let full = BBox::new(0.0, 0.0, img.width() as f64, img.height() as f64)?;
        let map = self.feature_map(img)?;
        Ok(self.pool(&map, &[full])?.remove(0))
    }

    /// Region features of `boxes` (image pixels) from a precomputed map.
    pub fn pool(&self, map: &FeatureMap, boxes: &[BBox]) -> Result<Vec<FeatureVector>> {
        let (w, h) = (map.image_width as f64, map.image_height as f64);
        if let Some(b) = boxes.iter().find(|b| b.clip_to(w, h).is_none()) {
            return Err(Error::data(format!(
                "box {:?} lies outside the {w}x{h} frame",
                b.to_array()
            )));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let m = g.constant(map.tensor.clone());
        Ok(boxes
            .iter()
            .map(|b| {
                let v = self.region_node(&mut g, &bound, m, b);
                FeatureVector(g.value(v).data.clone())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::{max_rel_err, numeric_grad};
    use rand::Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.gen::<u8>()).collect();
        RgbImage::from_raw(w, h, data).unwrap()
    }

    #[test]
    fn deterministic_features() {
        let bb = Backbone::new(BackboneConfig::default());
        let img = noise_image(20, 16, 1);
        assert_eq!(bb.embed_image(&img).unwrap(), bb.embed_image(&img).unwrap());
        assert_eq!(bb.embed_image(&img).unwrap().len(), 64);
    }

    #[test]
    fn zero_image_and_zero_projection_give_zero_vector() {
        let mut bb = Backbone::new(BackboneConfig::default());
        bb.zero_projection();
        let v = bb.embed_image(&RgbImage::new(12, 12)).unwrap();
        assert!(v.0.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn empty_region_rejected() {
        let bb = Backbone::new(BackboneConfig::default());
        assert!(bb.embed_image(&RgbImage::new(0, 5)).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let bb = Backbone::new(BackboneConfig::default());
        let img = noise_image(10, 9, 3);
        let (w, h) = (img.width(), img.height());
        let full = BBox::new(0.0, 0.0, w as f64, h as f64).unwrap();
        let probe = |x: &[f64]| -> f64 {
            let mut g = Graph::new();
            let bound = bb.params().bind(&mut g);
            let input = g.constant(Tensor::new(vec![3, h, w], x.to_vec()));
            let map = bb.map_node(&mut g, &bound, input);
            let v = bb.region_node(&mut g, &bound, map, &full);
            g.value(v).data.iter().sum()
        };
        let x0 = img.to_planar();
        let mut g = Graph::new();
        let bound = bb.params().bind(&mut g);
        let input = g.variable(Tensor::new(vec![3, h, w], x0.clone()));
        let map = bb.map_node(&mut g, &bound, input);
        let v = bb.region_node(&mut g, &bound, map, &full);
        let s = g.sum(v);
        let analytic = g.backward(s).get(input).unwrap().to_vec();
        let numeric = numeric_grad(&x0, 1e-6, probe);
        let err = max_rel_err(&analytic, &numeric, 1e-7);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn pooling_is_shift_equivariant_on_interior_boxes() {
        let bb = Backbone::new(BackboneConfig::default());
        let base = noise_image(48, 40, 5);
        let shift = 8usize;
        let mut shifted = RgbImage::new(48, 40);
        for y in 0..40 {
            for x in 0..48 - shift {
                let px = [0, 1, 2].map(|c| base.get_u8(x, y, c));
                shifted.set_u8(x + shift, y, px);
            }
        }
        let b = BBox::new(10.0, 12.0, 14.0, 11.0).unwrap();
        let fa = bb.pool(&bb.feature_map(&base).unwrap(), &[b]).unwrap();
        let fb = bb
            .pool(&bb.feature_map(&shifted).unwrap(), &[b.translate(shift as f64, 0.0)])
            .unwrap();
        for (x, y) in fa[0].0.iter().zip(&fb[0].0) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn output_dim_independent_of_aspect_ratio() {
        let bb = Backbone::new(BackboneConfig::default());
        let map = bb.feature_map(&noise_image(32, 32, 2)).unwrap();
        let boxes = [
            BBox::new(1.0, 1.0, 30.0, 3.0).unwrap(),
            BBox::new(4.0, 2.0, 2.0, 25.0).unwrap(),
        ];
        for f in bb.pool(&map, &boxes).unwrap() {
            assert_eq!(f.len(), 64);
        }
        assert!(bb.pool(&map, &[BBox::new(40.0, 0.0, 3.0, 3.0).unwrap()]).is_err());
    }
}
