use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use super::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Named parameter arrays, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Array>,
}

/// How a freshly declared parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Ones,
    /// Uniform in `±a`.
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Fan-in and fan-out of a weight array: matrices are `[in × out]`, kernels
/// `[out × in × k × k]`.
fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [n] => (n, n),
        [i, o] => (i, o),
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec from `rng`, visiting names in sorted order so the
    /// result does not depend on declaration order.
    pub fn initialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut store = ParamStore::new();
        for spec in sorted {
            let value = match spec.init {
                Init::Zeros => Array::zeros(&spec.shape),
                Init::Ones => Array::full(&spec.shape, 1.0),
                Init::Uniform(a) => Array::uniform(&spec.shape, -a, a, rng),
                Init::Glorot => {
                    let (fi, fo) = fans(&spec.shape);
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    Array::uniform(&spec.shape, -a, a, rng)
                }
            };
            store.insert(&spec.name, value)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NumericalState(format!("parameter `{name}` is not finite")));
        }
        if self.arrays.insert(name.to_string(), value).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        Ok(())
    }

    /// Replaces an existing entry; shapes must agree.
    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self
            .arrays
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "param set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        if !value.is_finite() {
            return Err(Error::NumericalState(format!("parameter `{name}` is not finite")));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Merges `other` in, overwriting entries with the same name.
    pub fn extend(&mut self, other: ParamStore) {
        self.arrays.extend(other.arrays);
    }
}

/// A tape plus lazily bound parameters from a [`ParamStore`].
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
        }
    }

    /// Leaf for parameter `name`, recorded once per graph.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Gradients of every bound parameter; unreached parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.bound
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, self.tape.value(v))))
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn initialization_ignores_declaration_order() {
        let a = vec![
            ParamSpec::new("b.w", &[3, 4], Init::Glorot),
            ParamSpec::new("a.w", &[4, 2], Init::Glorot),
            ParamSpec::new("a.b", &[2], Init::Zeros),
        ];
        let mut b = a.clone();
        b.reverse();
        let pa = ParamStore::initialize(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pb = ParamStore::initialize(&b, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pa, pb);
        let names: Vec<_> = pa.names().collect();
        assert_eq!(names, ["a.b", "a.w", "b.w"]);
    }

    #[test]
    fn glorot_bounds_hold() {
        let specs = [ParamSpec::new("k", &[8, 4, 3, 3], Init::Glorot)];
        let p = ParamStore::initialize(&specs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bound = (6.0f64 / (36 + 72) as f64).sqrt();
        assert!(p.get("k").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_and_non_finite_rejected() {
        let mut p = ParamStore::new();
        p.insert("x", Array::scalar(1.0)).unwrap();
        assert!(p.insert("x", Array::scalar(2.0)).is_err());
        assert!(p.insert("y", Array::scalar(f64::NAN)).is_err());
        assert!(p.set("x", Array::zeros(&[2])).is_err());
    }

    #[test]
    fn graph_binds_each_param_once() {
        let mut p = ParamStore::new();
        p.insert("w", Array::scalar(3.0)).unwrap();
        let mut g = Graph::new(&p);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.param_grads(&grads)["w"].data(), &[6.0]);
    }
}
