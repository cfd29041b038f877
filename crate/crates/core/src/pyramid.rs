//! Input projection and the strided-convolution temporal pyramid.
//!
//! Level 1 is a position-wise projection of the snippet features to the model
//! width. Every further level halves the temporal length (ceil division) with
//! a stride-2 convolution followed directly by layer normalization; there is
//! no nonlinearity in between.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coord::{level_length, make_reference_grid, GridMode, ReferenceGrid};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::timeline::FeatureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub model_dim: usize,
    pub num_levels: usize,
    /// Odd kernel size of the stride-2 convolutions.
    pub kernel_size: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            num_levels: 4,
            kernel_size: 3,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_levels == 0 {
            return Err(Error::Config(
                "pyramid.model_dim and pyramid.num_levels must be >= 1".into(),
            ));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "pyramid.kernel_size must be a positive odd integer, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Per-level feature matrices (`T_l x model_dim`) with their reference grids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
    pub grids: Vec<ReferenceGrid>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.rows).collect()
    }

    pub fn total_positions(&self) -> usize {
        self.levels.iter().map(|l| l.rows).sum()
    }
}

/// Lengths `T_1..T_L` for an input of `t0` snippets.
pub fn pyramid_lengths(t0: usize, num_levels: usize) -> Vec<usize> {
    (1..=num_levels).map(|l| level_length(t0, l)).collect()
}

/// Trainable parameters of the embedding and the downsampling stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidModule {
    pub cfg: PyramidConfig,
    pub channels: usize,
    pub embed: Linear,
    pub convs: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

impl PyramidModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        channels: usize,
        cfg: PyramidConfig,
    ) -> Self {
        let d = cfg.model_dim;
        let embed = Linear::new(store, rng, "pyramid.embed", channels, d);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for l in 2..=cfg.num_levels {
            convs.push(Linear::new(
                store,
                rng,
                &format!("pyramid.conv{l}"),
                cfg.kernel_size * d,
                d,
            ));
            norms.push(LayerNorm::new(store, &format!("pyramid.norm{l}"), d));
        }
        Self {
            cfg,
            channels,
            embed,
            convs,
            norms,
        }
    }

    /// Kernel-size-1 projection of the snippet features to the model width.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        input: &FeatureSequence<T>,
    ) -> Result<Var> {
        if input.meta.channels != self.channels {
            return Err(Error::Shape {
                name: format!("features of `{}`", input.meta.video_id),
                expected: format!("{} channels", self.channels),
                found: format!("{} channels", input.meta.channels),
            });
        }
        let x = g.constant(Tensor::from_vec(
            input.meta.num_features,
            input.meta.channels,
            input.values.clone(),
        ));
        Ok(self.embed.forward(g, x))
    }

    /// Builds levels `2..=L` from the level-1 embedding.
    ///
    /// With `normalize = false` the layer norms are skipped, leaving a purely
    /// linear map (used to check that no activation sits in the stack).
    pub fn build<T: Scalar>(&self, g: &mut Graph<'_, T>, z1: Var, normalize: bool) -> Vec<Var> {
        let k = self.cfg.kernel_size;
        let pad = (k - 1) / 2;
        let mut levels = vec![z1];
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let prev = *levels.last().unwrap();
            let out_rows = g.value(prev).rows.div_ceil(2);
            let cols = g.im2col(prev, k, 2, pad, out_rows);
            let z = conv.forward(g, cols);
            let z = if normalize { norm.forward(g, z) } else { z };
            levels.push(z);
        }
        levels
    }

    /// Graph-free pyramid construction for inspection and tests.
    pub fn pyramid<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &FeatureSequence<T>,
        base_scale: f64,
        mode: GridMode,
    ) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new(store);
        let z1 = self.embed(&mut g, input)?;
        let levels = self.build(&mut g, z1, true);
        let grids = (1..=self.cfg.num_levels)
            .map(|l| make_reference_grid(&input.meta, l, self.cfg.num_levels, base_scale, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid {
            levels: levels.iter().map(|v| g.value(*v).clone()).collect(),
            grids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use crate::timeline::VideoMeta;
    use rand::SeedableRng;

    fn video(t: usize, c: usize, values: Vec<f64>) -> FeatureSequence<f64> {
        let meta = VideoMeta {
            video_id: "v".into(),
            fps: 25.0,
            stride: 8,
            num_features: t,
            channels: c,
            duration_sec: t as f64 * 8.0 / 25.0,
        };
        FeatureSequence::new(meta, values).unwrap()
    }

    fn module(c: usize, d: usize, levels: usize) -> (ParamStore<f64>, PyramidModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PyramidConfig {
            model_dim: d,
            num_levels: levels,
            kernel_size: 3,
        };
        let m = PyramidModule::new(&mut store, &mut rng, c, cfg);
        (store, m)
    }

    #[test]
    fn embed_shapes_identity_and_zero() {
        let (store, m) = module(4, 16, 1);
        let input = video(8, 4, vec![0.0; 32]);
        let mut g = Graph::new(&store);
        let z = m.embed(&mut g, &input).unwrap();
        assert_eq!(g.value(z).shape(), (8, 16));
        assert!(g.value(z).data.iter().all(|v| *v == 0.0));

        let (mut store, m) = module(4, 4, 1);
        let mut eye = Tensor::zeros(4, 4);
        for i in 0..4 {
            eye.data[i * 5] = 1.0;
        }
        *store.get_mut(m.embed.weight) = eye;
        let vals: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let input = video(8, 4, vals.clone());
        let mut g = Graph::new(&store);
        let z = m.embed(&mut g, &input).unwrap();
        assert_eq!(g.value(z).data, vals);

        let wrong = video(8, 3, vec![0.0; 24]);
        assert!(m.embed(&mut Graph::new(&store), &wrong).is_err());
    }

    #[test]
    fn lengths_follow_ceil_halving() {
        assert_eq!(pyramid_lengths(16, 3), vec![16, 8, 4]);
        assert_eq!(pyramid_lengths(5, 3), vec![5, 3, 2]);
        for t0 in 1..70 {
            let (store, m) = module(2, 8, 4);
            let input = video(t0, 2, vec![0.5; 2 * t0]);
            let p = m
                .pyramid(&store, &input, 2.0, GridMode::UnitConsistent)
                .unwrap();
            let lens = p.lengths();
            assert_eq!(lens[0], t0);
            for l in 1..lens.len() {
                assert_eq!(lens[l], lens[l - 1].div_ceil(2));
                assert_eq!(p.grids[l].centers.len(), lens[l]);
            }
        }
    }

    #[test]
    fn normalized_levels_have_zero_mean_unit_variance() {
        let (store, m) = module(4, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals = uniform::<f64>(&mut rng, 16, 4, 30.0).data;
        let p = m
            .pyramid(&store, &video(16, 4, vals), 2.0, GridMode::UnitConsistent)
            .unwrap();
        for level in &p.levels[1..] {
            for r in 0..level.rows {
                let row = level.row(r);
                let mean = row.iter().sum::<f64>() / 16.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(
                    mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5,
                    "mean {mean} var {var}"
                );
            }
        }
    }

    #[test]
    fn stack_without_norm_is_linear() {
        let (store, m) = module(3, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = uniform::<f64>(&mut rng, 9, 3, 1.0).data;
        let b = uniform::<f64>(&mut rng, 9, 3, 1.0).data;
        let run = |vals: Vec<f64>| {
            let mut g = Graph::new(&store);
            let z1 = m.embed(&mut g, &video(9, 3, vals)).unwrap();
            let levels = m.build(&mut g, z1, false);
            levels
                .iter()
                .flat_map(|v| g.value(*v).data.clone())
                .collect::<Vec<_>>()
        };
        // biases are zero at init, so the map is linear rather than affine
        let fa = run(a.clone());
        let fb = run(b.clone());
        let fab = run(a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect());
        for ((x, y), z) in fa.iter().zip(&fb).zip(&fab) {
            let expect = 2.0 * x - 3.0 * y;
            assert!((z - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        }
    }
}
