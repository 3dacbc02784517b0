//! Parameter management and the two learned layer kinds everything else is
//! assembled from.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, WindowSpec};

struct ParamInner<F: Scalar> {
    name: String,
    tensor: Tensor<F>,
    trainable: bool,
    frozen: bool,
}

impl<F: Scalar> ParamInner<F> {
    fn rebuild(&mut self, data: ArrayD<F>) {
        self.tensor = if self.trainable && !self.frozen {
            Tensor::leaf(data)
        } else {
            Tensor::constant(data)
        };
    }
}

/// A named value owned by a [`ParamStore`]. Holds the current leaf tensor;
/// replacing the data mints a fresh leaf so earlier graphs stay valid.
pub struct Param<F: Scalar> {
    inner: Rc<RefCell<ParamInner<F>>>,
}

impl<F: Scalar> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Param<F> {
    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    /// The current tensor, for use in a forward pass. All forwards between
    /// two updates see the same tensor identity, which is what ties
    /// [`crate::Gradients`] lookups to this parameter.
    pub fn value(&self) -> Tensor<F> {
        self.inner.borrow().tensor.clone()
    }

    pub fn data(&self) -> ArrayD<F> {
        self.inner.borrow().tensor.data().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().tensor.shape().to_vec()
    }

    pub fn set_data(&self, data: ArrayD<F>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.tensor.shape(),
            data.shape(),
            "parameter {} shape change",
            inner.name
        );
        inner.rebuild(data);
    }

    pub fn is_trainable(&self) -> bool {
        let inner = self.inner.borrow();
        inner.trainable && !inner.frozen
    }
}

/// Registry of parameters and buffers in creation order. Creation order is
/// the serialization order, so it must be deterministic.
pub struct ParamStore<F: Scalar> {
    entries: Vec<Param<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    fn register(&mut self, name: &str, data: ArrayD<F>, trainable: bool) -> Param<F> {
        assert!(
            self.entries.iter().all(|p| p.name() != name),
            "duplicate parameter name {name}"
        );
        let mut inner = ParamInner {
            name: name.to_string(),
            tensor: Tensor::zeros(&[]),
            trainable,
            frozen: false,
        };
        inner.rebuild(data);
        let p = Param {
            inner: Rc::new(RefCell::new(inner)),
        };
        self.entries.push(p.clone());
        p
    }

    /// A trainable parameter.
    pub fn create(&mut self, name: &str, data: ArrayD<F>) -> Param<F> {
        self.register(name, data, true)
    }

    /// Non-trainable state that is still checkpointed (e.g. power-iteration
    /// vectors).
    pub fn create_buffer(&mut self, name: &str, data: ArrayD<F>) -> Param<F> {
        self.register(name, data, false)
    }

    /// Freezing turns every parameter into a graph constant, so downstream
    /// backward passes skip the whole module.
    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &self.entries {
            let mut inner = p.inner.borrow_mut();
            inner.frozen = frozen;
            let data = inner.tensor.data().clone();
            inner.rebuild(data);
        }
    }

    pub fn trainable(&self) -> Vec<Param<F>> {
        self.entries
            .iter()
            .filter(|p| p.is_trainable())
            .cloned()
            .collect()
    }

    /// All entries (parameters and buffers) in creation order.
    pub fn entries(&self) -> Vec<(String, ArrayD<F>)> {
        self.entries.iter().map(|p| (p.name(), p.data())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Param<F>> {
        self.entries.iter().find(|p| p.name() == name).cloned()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.data().len()).sum()
    }

    /// Replaces every entry's data from `source`, matching by name. Every
    /// store entry must be present with an identical shape.
    pub fn load_entries(
        &mut self,
        source: &[(String, ArrayD<F>)],
    ) -> Result<(), String> {
        for p in &self.entries {
            let name = p.name();
            let found = source
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if found.1.shape() != p.shape().as_slice() {
                return Err(format!(
                    "parameter {name}: stored shape {:?} does not match model shape {:?}",
                    found.1.shape(),
                    p.shape()
                ));
            }
            p.set_data(found.1.clone());
        }
        Ok(())
    }
}

/// U(-limit, limit) initialization, driven by the caller's RNG.
pub fn uniform_init<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], limit: f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.gen::<f64>() * 2.0 * limit - limit))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Fully connected layer storing its weight as (out, in).
pub struct Linear<F: Scalar> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let limit = (1.0 / in_features as f64).sqrt();
        let weight = store.create(
            &format!("{name}.weight"),
            uniform_init(rng, &[out_features, in_features], limit),
        );
        let bias = bias.then(|| {
            store.create(
                &format!("{name}.bias"),
                uniform_init(rng, &[out_features], limit),
            )
        });
        Linear { weight, bias }
    }

    /// (B, in) -> (B, out).
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let w = self.weight.value();
        let mut y = x.matmul(&w.permute(&[1, 0]));
        if let Some(b) = &self.bias {
            let out = y.shape()[1];
            y = y.add(&b.value().reshape(&[1, out]));
        }
        y
    }
}

/// 2-D convolution built as unfold + batched matmul, so its gradient (and
/// the gradient of that gradient) falls out of the primitive VJPs.
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub spec: WindowSpec,
    in_channels: usize,
    out_channels: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spec: WindowSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = in_channels * kh * kw;
        let limit = (1.0 / fan_in as f64).sqrt();
        let weight = store.create(
            &format!("{name}.weight"),
            uniform_init(rng, &[out_channels, in_channels, kh, kw], limit),
        );
        let bias = bias.then(|| {
            store.create(
                &format!("{name}.bias"),
                uniform_init(rng, &[out_channels], limit),
            )
        });
        Conv2d {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
        }
    }

    /// (B, C_in, H, W) -> (B, C_out, OH, OW).
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.forward_with_weight(x, &self.weight.value())
    }

    /// Forward with an externally supplied weight tensor of the layer's
    /// shape. Used by spectral normalization, which rescales the stored
    /// weight before applying it.
    pub fn forward_with_weight(&self, x: &Tensor<F>, weight: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.ndim(), 4, "conv input must be (B,C,H,W)");
        assert_eq!(
            x.shape()[1],
            self.in_channels,
            "conv channel mismatch: input {:?}, expected {}",
            x.shape(),
            self.in_channels
        );
        let b = x.shape()[0];
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.spec.out_hw(h, w);
        let (kh, kw) = self.spec.kernel;
        let rows = self.in_channels * kh * kw;

        let cols = x.unfold(self.spec); // (B, rows, oh*ow)
        let w2 = weight
            .reshape(&[1, self.out_channels, rows])
            .broadcast_to(&[b, self.out_channels, rows]);
        let mut y = w2.bmm(&cols).reshape(&[b, self.out_channels, oh, ow]);
        if let Some(bias) = &self.bias {
            y = y.add(&bias.value().reshape(&[1, self.out_channels, 1, 1]));
        }
        y
    }
}
