//! Named parameters, batch-norm buffers and the small set of layers the
//! network is assembled from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm2d, conv2d, conv_transpose2d, BatchNormState, BnMode, Conv2dSpec, Element, Tensor,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

/// Ordered, named storage for trainable leaves and batch-norm statistics.
///
/// Parameters are immutable tensors; an optimizer step replaces them.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element> {
    params: Vec<(String, Tensor<T>)>,
    bn: Vec<(String, BatchNormState<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            bn: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: &[usize], data: Vec<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let t = Tensor::param(shape, data).expect("parameter initializer produced invalid data");
        self.index.insert(name.clone(), self.params.len());
        self.params.push((name, t));
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, name: String, channels: usize) -> BnId {
        self.bn.push((name, BatchNormState::new(channels)));
        BnId(self.bn.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let shape = self.params[id.0].1.shape().to_vec();
        self.params[id.0].1 = Tensor::param(&shape, data)?;
        Ok(())
    }

    /// Replaces a parameter with an existing tensor of the same shape; used
    /// to route a parameter through a caller-built graph.
    pub fn substitute(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.params[id.0].1.shape() {
            return Err(Error::shape(
                "substitute",
                format!("{:?} vs {:?}", tensor.shape(), self.params[id.0].1.shape()),
            ));
        }
        self.params[id.0].1 = tensor;
        Ok(())
    }

    pub fn bn(&self, id: BnId) -> &BatchNormState<T> {
        &self.bn[id.0].1
    }

    pub fn bn_mut(&mut self, id: BnId) -> &mut BatchNormState<T> {
        &mut self.bn[id.0].1
    }

    pub fn params(&self) -> impl ExactSizeIterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn bn_states(&self) -> impl ExactSizeIterator<Item = (BnId, &str, &BatchNormState<T>)> {
        self.bn
            .iter()
            .enumerate()
            .map(|(i, (n, s))| (BnId(i), n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    /// Copy in another precision. Gradients are not carried over.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, t)| {
                    let c = t.cast::<U>();
                    (n.clone(), Tensor::param(c.shape(), c.data().to_vec()).unwrap())
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|(n, s)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
                    (
                        n.clone(),
                        BatchNormState {
                            running_mean: conv(&s.running_mean),
                            running_var: conv(&s.running_var),
                        },
                    )
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Registers parameters under a dotted name prefix with seeded initializers.
pub struct Builder<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        let name = self.name(leaf);
        self.store.add(name, shape, vec![T::from_f64_lossy(value); n])
    }

    /// Kaiming-style normal init, std = sqrt(2 / fan_in).
    pub fn kaiming(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(dist.sample(&mut *self.rng)))
            .collect();
        let name = self.name(leaf);
        self.store.add(name, shape, data)
    }

    /// Xavier-style uniform init over ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(&mut self, leaf: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).unwrap();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(dist.sample(&mut *self.rng)))
            .collect();
        let name = self.name(leaf);
        self.store.add(name, shape, data)
    }

    pub fn bn(&mut self, leaf: &str, channels: usize) -> BnId {
        let name = self.name(leaf);
        self.store.add_bn(name, channels)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let weight = b.kaiming("weight", &[cout, cin, kernel, kernel], cin * kernel * kernel);
        let bias = bias.then(|| b.constant("bias", &[cout], 0.0));
        Conv2d { weight, bias, spec }
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(
            x,
            store.get(self.weight),
            self.bias.map(|b| store.get(b)),
            self.spec,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = b.kaiming("weight", &[cin, cout, kernel, kernel], cin * kernel * kernel);
        let bias = bias.then(|| b.constant("bias", &[cout], 0.0));
        ConvTranspose2d {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose2d(x, store.get(self.weight), self.bias.map(|b| store.get(b)), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        BatchNorm2d {
            gamma: b.constant("gamma", &[channels], 1.0),
            beta: b.constant("beta", &[channels], 0.0),
            state: b.bn("stats", channels),
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let gamma = store.get(self.gamma).clone();
        let beta = store.get(self.beta).clone();
        batch_norm2d(
            x,
            &gamma,
            &beta,
            store.bn_mut(self.state),
            mode,
            T::from_f64_lossy(BN_EPS),
            T::from_f64_lossy(BN_MOMENTUM),
        )
    }
}

/// conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&mut b.sub("conv"), cin, cout, kernel, spec, false),
            bn: BatchNorm2d::new(&mut b.sub("bn"), cout),
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let y = self.conv.forward(store, x)?;
        Ok(self.bn.forward(store, &y, mode)?.relu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_names_and_determinism() {
        let build = || {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut b = Builder::new(&mut store, &mut rng);
            let layer = ConvBnRelu::new(&mut b.sub("enc").sub("stem"), 3, 4, 3, Conv2dSpec::same(3, 1));
            (store, layer)
        };
        let (s1, l1) = build();
        let (s2, _) = build();
        let names: Vec<_> = s1.params().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(
            names,
            ["enc.stem.conv.weight", "enc.stem.bn.gamma", "enc.stem.bn.beta"]
        );
        assert_eq!(s1.get(l1.conv.weight).data(), s2.get(l1.conv.weight).data());
        assert_eq!(s1.num_scalars(), 4 * 3 * 9 + 8);
        assert_eq!(s1.id_of("enc.stem.bn.beta"), Some(l1.bn.beta));
    }

    #[test]
    fn kaiming_scale_is_plausible() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut store, &mut rng);
        let id = b.kaiming("w", &[64, 32, 3, 3], 32 * 9);
        let d = store.get(id).data();
        let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let want = 2.0 / (32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
    }
}
