//! Toy feature extractor.
//!
//! A deliberately small, fully deterministic stand-in for a convolutional
//! backbone: every spatial position is transformed independently by the same
//! affine maps (1x1 convolutions), so the architecture is
//!
//! ```text
//! raw (H x W x Dr) --backbone--> z (H x W x Dr) --add-on--> f (H x W x D)
//! ```
//!
//! with `backbone: z = Wb r + bb` and the two add-on layers
//! `u = W1 z + b1`, `f = W2 u + b2`. There are no nonlinearities; the point
//! is a differentiable, parameter-bearing map whose gradients are simple
//! enough to verify against finite differences exactly.
//!
//! The pooled embedding for the auxiliary loss is the global average of `z`
//! over positions — the backbone output, not the add-on output, so the
//! auxiliary loss shapes the backbone directly.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::density::FeatureGrid;
use crate::error::{Error, Result};

/// The two-stage position-wise affine feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    raw_dim: usize,
    out_dim: usize,
    /// Backbone weight, `Dr x Dr`.
    pub w_backbone: Array2<f64>,
    /// Backbone bias, `Dr`.
    pub b_backbone: Array1<f64>,
    /// First add-on weight, `D x Dr`.
    pub w_add1: Array2<f64>,
    /// First add-on bias, `D`.
    pub b_add1: Array1<f64>,
    /// Second add-on weight, `D x D`.
    pub w_add2: Array2<f64>,
    /// Second add-on bias, `D`.
    pub b_add2: Array1<f64>,
}

/// Intermediate activations kept for the backward pass, one sample.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input, `H x W x Dr`.
    pub raw: Array3<f64>,
    /// Backbone output, `H x W x Dr`.
    pub z: Array3<f64>,
    /// First add-on output, `H x W x D`.
    pub u: Array3<f64>,
}

/// Parameter gradients, same shapes as [`TinyNet`].
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub w_backbone: Array2<f64>,
    pub b_backbone: Array1<f64>,
    pub w_add1: Array2<f64>,
    pub b_add1: Array1<f64>,
    pub w_add2: Array2<f64>,
    pub b_add2: Array1<f64>,
}

impl TinyNet {
    /// Total parameter count for the given dimensions.
    pub fn param_count_for(raw_dim: usize, out_dim: usize) -> usize {
        raw_dim * raw_dim + raw_dim + out_dim * raw_dim + out_dim + out_dim * out_dim + out_dim
    }

    /// Identity initialization: backbone and second add-on are identity maps,
    /// the first add-on is the leading `D x Dr` slice of the identity, all
    /// biases zero. The whole net then reduces to projecting each feature
    /// vector onto its first `min(D, Dr)` coordinates (zero-padding if
    /// `D > Dr`).
    pub fn identity(raw_dim: usize, out_dim: usize) -> Result<Self> {
        if raw_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidInput("net dims must be positive".into()));
        }
        Ok(TinyNet {
            raw_dim,
            out_dim,
            w_backbone: Array2::eye(raw_dim),
            b_backbone: Array1::zeros(raw_dim),
            w_add1: Array2::from_shape_fn((out_dim, raw_dim), |(i, j)| {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }),
            b_add1: Array1::zeros(out_dim),
            w_add2: Array2::eye(out_dim),
            b_add2: Array1::zeros(out_dim),
        })
    }

    /// Identity initialization plus independent Gaussian noise of scale
    /// `noise` on every weight (biases stay zero).
    pub fn init(
        raw_dim: usize,
        out_dim: usize,
        noise: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let mut net = TinyNet::identity(raw_dim, out_dim)?;
        for w in [&mut net.w_backbone, &mut net.w_add1, &mut net.w_add2] {
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise * z;
            }
        }
        Ok(net)
    }

    /// Input dimensionality.
    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    /// Output (prototype-space) dimensionality.
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.raw_dim, self.out_dim)
    }

    /// All parameters in serialization order: backbone weight, backbone bias,
    /// first add-on weight and bias, second add-on weight and bias.
    pub fn params_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_backbone
            .iter()
            .chain(self.b_backbone.iter())
            .chain(self.w_add1.iter())
            .chain(self.b_add1.iter())
            .chain(self.w_add2.iter())
            .chain(self.b_add2.iter())
            .copied()
    }

    /// Rebuilds a net from the flat parameter vector of [`Self::params_iter`].
    pub fn from_params(raw_dim: usize, out_dim: usize, params: &[f64]) -> Result<Self> {
        let expect = Self::param_count_for(raw_dim, out_dim);
        if params.len() != expect {
            return Err(Error::DimensionMismatch {
                context: "net params",
                left: params.len(),
                right: expect,
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("net params".into()));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &params[at..at + n];
            at += n;
            s.to_vec()
        };
        let w_backbone = Array2::from_shape_vec((raw_dim, raw_dim), take(raw_dim * raw_dim))
            .expect("shape fixed above");
        let b_backbone = Array1::from_vec(take(raw_dim));
        let w_add1 = Array2::from_shape_vec((out_dim, raw_dim), take(out_dim * raw_dim))
            .expect("shape fixed above");
        let b_add1 = Array1::from_vec(take(out_dim));
        let w_add2 = Array2::from_shape_vec((out_dim, out_dim), take(out_dim * out_dim))
            .expect("shape fixed above");
        let b_add2 = Array1::from_vec(take(out_dim));
        Ok(TinyNet {
            raw_dim,
            out_dim,
            w_backbone,
            b_backbone,
            w_add1,
            b_add1,
            w_add2,
            b_add2,
        })
    }

    /// Runs the net over one raw grid, returning the feature grid and the
    /// cache needed for [`Self::backward`].
    pub fn forward(&self, raw: &Array3<f64>) -> Result<(FeatureGrid, ForwardCache)> {
        let (h, w, dr) = raw.dim();
        if dr != self.raw_dim {
            return Err(Error::DimensionMismatch {
                context: "net forward raw dim",
                left: dr,
                right: self.raw_dim,
            });
        }
        let flat = raw
            .view()
            .into_shape_with_order((h * w, dr))
            .expect("contiguous row-major grid");
        let z_flat = flat.dot(&self.w_backbone.t()) + &self.b_backbone;
        let u_flat = z_flat.dot(&self.w_add1.t()) + &self.b_add1;
        let f_flat = u_flat.dot(&self.w_add2.t()) + &self.b_add2;
        let z = z_flat
            .into_shape_with_order((h, w, dr))
            .expect("shape preserved");
        let u = u_flat
            .into_shape_with_order((h, w, self.out_dim))
            .expect("shape preserved");
        let f = f_flat
            .into_shape_with_order((h, w, self.out_dim))
            .expect("shape preserved");
        let grid = FeatureGrid::new(f)?;
        let cache = ForwardCache {
            raw: raw.clone(),
            z,
            u,
        };
        Ok((grid, cache))
    }

    /// Backpropagates a loss gradient to all parameters.
    ///
    /// `d_features` is the gradient w.r.t. the output grid (`H x W x D`);
    /// `d_embedding` is the optional gradient w.r.t. the pooled backbone
    /// embedding (`Dr`), which fans back into every position with weight
    /// `1/(H*W)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_features: &Array3<f64>,
        d_embedding: Option<&Array1<f64>>,
    ) -> Result<NetGrads> {
        let (h, w, dr) = cache.raw.dim();
        if d_features.dim() != (h, w, self.out_dim) {
            return Err(Error::DimensionMismatch {
                context: "net backward feature grad",
                left: d_features.len(),
                right: h * w * self.out_dim,
            });
        }
        let hw = h * w;
        let df = d_features
            .view()
            .into_shape_with_order((hw, self.out_dim))
            .expect("contiguous grad");
        let u = cache
            .u
            .view()
            .into_shape_with_order((hw, self.out_dim))
            .expect("contiguous cache");
        let z = cache
            .z
            .view()
            .into_shape_with_order((hw, dr))
            .expect("contiguous cache");
        let raw = cache
            .raw
            .view()
            .into_shape_with_order((hw, dr))
            .expect("contiguous cache");

        let w_add2 = df.t().dot(&u);
        let b_add2 = df.sum_axis(Axis(0));
        let du = df.dot(&self.w_add2);
        let w_add1 = du.t().dot(&z);
        let b_add1 = du.sum_axis(Axis(0));
        let mut dz = du.dot(&self.w_add1);
        if let Some(de) = d_embedding {
            if de.len() != dr {
                return Err(Error::DimensionMismatch {
                    context: "net backward embedding grad",
                    left: de.len(),
                    right: dr,
                });
            }
            let spread = de.mapv(|v| v / hw as f64);
            dz = dz + &spread;
        }
        let w_backbone = dz.t().dot(&raw);
        let b_backbone = dz.sum_axis(Axis(0));
        Ok(NetGrads {
            w_backbone,
            b_backbone,
            w_add1,
            b_add1,
            w_add2,
            b_add2,
        })
    }

    /// Gradient step with separate learning rates for the backbone and the
    /// add-on layers. Errors if any updated parameter would be non-finite.
    pub fn apply_step(&mut self, grads: &NetGrads, lr_backbone: f64, lr_addon: f64) -> Result<()> {
        self.w_backbone.scaled_add(-lr_backbone, &grads.w_backbone);
        self.b_backbone.scaled_add(-lr_backbone, &grads.b_backbone);
        self.w_add1.scaled_add(-lr_addon, &grads.w_add1);
        self.b_add1.scaled_add(-lr_addon, &grads.b_add1);
        self.w_add2.scaled_add(-lr_addon, &grads.w_add2);
        self.b_add2.scaled_add(-lr_addon, &grads.b_add2);
        if self.params_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("net params after step".into()));
        }
        Ok(())
    }
}

impl ForwardCache {
    /// Global average pooling of the backbone output: the `Dr`-dimensional
    /// embedding used by the auxiliary loss.
    pub fn embedding(&self) -> Array1<f64> {
        let (h, w, dr) = self.z.dim();
        let flat = self
            .z
            .view()
            .into_shape_with_order((h * w, dr))
            .expect("contiguous cache");
        flat.sum_axis(Axis(0)) / (h * w) as f64
    }
}

impl NetGrads {
    /// Zero gradients for the given net shape.
    pub fn zeros(net: &TinyNet) -> Self {
        NetGrads {
            w_backbone: Array2::zeros((net.raw_dim, net.raw_dim)),
            b_backbone: Array1::zeros(net.raw_dim),
            w_add1: Array2::zeros((net.out_dim, net.raw_dim)),
            b_add1: Array1::zeros(net.out_dim),
            w_add2: Array2::zeros((net.out_dim, net.out_dim)),
            b_add2: Array1::zeros(net.out_dim),
        }
    }

    /// Accumulates `other` scaled by `weight`.
    pub fn add_scaled(&mut self, other: &NetGrads, weight: f64) {
        self.w_backbone.scaled_add(weight, &other.w_backbone);
        self.b_backbone.scaled_add(weight, &other.b_backbone);
        self.w_add1.scaled_add(weight, &other.w_add1);
        self.b_add1.scaled_add(weight, &other.b_add1);
        self.w_add2.scaled_add(weight, &other.w_add2);
        self.b_add2.scaled_add(weight, &other.b_add2);
    }

    /// All gradient entries in the order of [`TinyNet::params_iter`].
    pub fn params_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_backbone
            .iter()
            .chain(self.b_backbone.iter())
            .chain(self.w_add1.iter())
            .chain(self.b_add1.iter())
            .chain(self.w_add2.iter())
            .chain(self.b_add2.iter())
            .copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_net_projects_onto_leading_slice() {
        let net = TinyNet::identity(6, 4).unwrap();
        let raw = Array3::from_shape_fn((2, 3, 6), |(i, j, k)| (i * 100 + j * 10 + k) as f64 * 0.1);
        let (grid, _) = net.forward(&raw).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(grid.values()[[i, j, k]], raw[[i, j, k]]);
                }
            }
        }
    }

    #[test]
    fn identity_net_pads_when_output_is_wider() {
        let net = TinyNet::identity(3, 5).unwrap();
        let raw = Array3::from_shape_fn((1, 1, 3), |(_, _, k)| k as f64 + 1.0);
        let (grid, _) = net.forward(&raw).unwrap();
        assert_eq!(grid.values()[[0, 0, 0]], 1.0);
        assert_eq!(grid.values()[[0, 0, 2]], 3.0);
        assert_eq!(grid.values()[[0, 0, 3]], 0.0);
        assert_eq!(grid.values()[[0, 0, 4]], 0.0);
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = crate::rng::SeedStream::new(11).derive("net/test");
        let net = TinyNet::init(5, 3, 0.1, &mut rng).unwrap();
        let flat: Vec<f64> = net.params_iter().collect();
        assert_eq!(flat.len(), net.param_count());
        let back = TinyNet::from_params(5, 3, &flat).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn embedding_is_positionwise_average() {
        let net = TinyNet::identity(2, 2).unwrap();
        let mut raw = Array3::zeros((1, 2, 2));
        raw[[0, 0, 0]] = 1.0;
        raw[[0, 1, 0]] = 3.0;
        raw[[0, 0, 1]] = -2.0;
        let (_, cache) = net.forward(&raw).unwrap();
        let e = cache.embedding();
        assert_relative_eq!(e[0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(e[1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn param_count_matches_shapes() {
        assert_eq!(TinyNet::param_count_for(4, 3), 16 + 4 + 12 + 3 + 9 + 3);
        let net = TinyNet::identity(4, 3).unwrap();
        assert_eq!(net.param_count(), net.params_iter().count());
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar loss L = sum of squares of features plus dot of embedding
        // with a fixed vector; checks the full chain including the pooled
        // embedding path.
        let mut rng = crate::rng::SeedStream::new(5).derive("net/fd");
        let net = TinyNet::init(4, 3, 0.2, &mut rng).unwrap();
        let raw = {
            use rand_distr::{Distribution, StandardNormal};
            Array3::from_shape_fn((2, 2, 4), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
        };
        let probe = Array1::from_vec(vec![0.3, -0.7, 0.2, 0.5]);

        let loss = |params: &[f64]| -> f64 {
            let n = TinyNet::from_params(4, 3, params).unwrap();
            let (grid, cache) = n.forward(&raw).unwrap();
            let sq: f64 = grid.values().iter().map(|v| v * v).sum();
            sq + cache.embedding().dot(&probe)
        };

        let (grid, cache) = net.forward(&raw).unwrap();
        let d_features = grid.values().mapv(|v| 2.0 * v);
        let grads = net.backward(&cache, &d_features, Some(&probe)).unwrap();

        let params: Vec<f64> = net.params_iter().collect();
        let analytic: Vec<f64> = grads.params_iter().collect();
        let h = 1e-6;
        for (idx, g) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert_relative_eq!(*g, fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}
