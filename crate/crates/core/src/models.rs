//! MLP encoder `f`, projector `g`, linear probe, and the `RSSL1` weight format.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::ImageBatch;
use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::numerics::{Matrix, Tape, Var};
use crate::seed::{self, stream};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"RSSL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Flattened `H·W·ch`.
    pub input_dim: usize,
    /// Encoder hidden widths; the last one is the representation size.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Projector output dimension `d`.
    pub embed_dim: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be at least 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be at least 2, got {}", self.embed_dim)));
        }
        Ok(())
    }

    /// Width of the encoder output `h`.
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// Named tensors in insertion order plus the optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: Vec<(String, Matrix<f64>)>,
    updates: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<f64>) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate tensor {name}");
        self.tensors.push((name, value));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f64>> {
        self.index_of(name).map(|i| &self.tensors[i].1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<f64>)> {
        self.tensors.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn tensor(&self, i: usize) -> &Matrix<f64> {
        &self.tensors[i].1
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Matrix<f64> {
        &mut self.tensors[i].1
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub(crate) fn record_update(&mut self) {
        self.updates += 1;
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.num_values() * 8 + self.len() * 64);
        out.extend_from_slice(WEIGHTS_MAGIC);
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(5)? != WEIGHTS_MAGIC {
            return Err(Error::Format("missing RSSL1 magic".into()));
        }
        let mut store = Self::new();
        while rd.pos < bytes.len() {
            let name_len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = rd.u32()? as usize;
            let dims = (0..rank).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [c] => (1, *c),
                [r, c] => (*r, *c),
                _ => return Err(Error::Format(format!("tensor {name} has unsupported rank {rank}"))),
            };
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let payload = rd.take(count.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = Matrix::from_vec(rows, cols, values).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            if store.index_of(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            store.insert(name, m);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that `other` has exactly the same tensor names and shapes.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", self.len(), other.len())));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::Format(format!(
                    "tensor mismatch: expected {na} {:?}, found {nb} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated at byte {}", self.bytes.len()))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

/// Parameters of one dense layer bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

/// Encoder and projector parameters bound onto a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub layers: Vec<BoundLayer>,
    pub projector: BoundLayer,
    pub trainable: bool,
}

impl BoundEncoder {
    /// Parameter vars in [`ParameterStore`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.projector))
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Output of one encoder pass over `n` inputs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Encoder features `h`, `n × feature_dim`.
    pub features: Var,
    /// Unit-norm projector outputs, `n × d`.
    pub embedding: Var,
}

/// Encoder `f` followed by a linear projector `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct SslModel {
    pub spec: EncoderSpec,
    pub store: ParameterStore,
}

impl SslModel {
    /// He-uniform weights and zero biases, drawn from `seed`.
    pub fn init(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed, &[stream::INIT]);
        let mut store = ParameterStore::new();
        let mut fan_in = spec.input_dim;
        for (i, &w) in spec.hidden.iter().enumerate() {
            store.insert(format!("encoder.{i}.weight"), he_uniform(fan_in, w, &mut rng));
            store.insert(format!("encoder.{i}.bias"), Matrix::zeros(1, w));
            fan_in = w;
        }
        store.insert("projector.weight", he_uniform(fan_in, spec.embed_dim, &mut rng));
        store.insert("projector.bias", Matrix::zeros(1, spec.embed_dim));
        Ok(Self { spec, store })
    }

    /// Rebuilds a model from a stored weight set, checking its layout against `spec`.
    pub fn from_store(spec: EncoderSpec, store: ParameterStore) -> Result<Self> {
        let template = Self::init(spec, 0)?;
        template.store.check_layout(&store)?;
        Ok(Self {
            spec: template.spec,
            store,
        })
    }

    /// Adds the parameters to `tape`; frozen parameters are constants.
    pub fn bind(&self, tape: &mut Tape<f64>, trainable: bool) -> BoundEncoder {
        let mut put = |m: &Matrix<f64>| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let n = self.spec.hidden.len();
        let layers = (0..n)
            .map(|i| BoundLayer {
                weight: put(self.store.tensor(2 * i)),
                bias: put(self.store.tensor(2 * i + 1)),
            })
            .collect();
        let projector = BoundLayer {
            weight: put(self.store.tensor(2 * n)),
            bias: put(self.store.tensor(2 * n + 1)),
        };
        BoundEncoder {
            layers,
            projector,
            trainable,
        }
    }

    /// Encoder features `h` for an `n × input_dim` input node.
    pub fn features(&self, tape: &mut Tape<f64>, bound: &BoundEncoder, input: Var) -> Result<Var> {
        let (_, cols) = tape.shape(input);
        if cols != self.spec.input_dim {
            return Err(Error::shape("SslModel::features", self.spec.input_dim, cols));
        }
        let mut h = input;
        for layer in &bound.layers {
            let z = tape.matmul(h, layer.weight);
            let z = tape.add_row_broadcast(z, layer.bias);
            h = match self.spec.activation {
                Activation::Relu => tape.relu(z),
                Activation::Tanh => tape.tanh(z),
            };
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape<f64>, bound: &BoundEncoder, input: Var) -> Result<EncoderOutput> {
        let features = self.features(tape, bound, input)?;
        let z = tape.matmul(features, bound.projector.weight);
        let z = tape.add_row_broadcast(z, bound.projector.bias);
        let embedding = tape.normalize_rows(z);
        Ok(EncoderOutput { features, embedding })
    }

    /// Normalized `d × n` embeddings of an image batch, differentiable w.r.t. the
    /// parameters (when bound trainable) and the returned pixel leaf.
    pub fn forward_embed(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundEncoder,
        img: &ImageBatch,
    ) -> Result<(Var, EmbeddingBatch)> {
        if img.shape().dim() != self.spec.input_dim {
            return Err(Error::shape("forward_embed", self.spec.input_dim, img.shape().dim()));
        }
        let x = tape.leaf(img.pixels().clone());
        let out = self.forward(tape, bound, x)?;
        let z = EmbeddingBatch::from_rows(tape, out.embedding, false)?;
        Ok((x, EmbeddingBatch { normalized: true, ..z }))
    }

    /// Encoder features of an input matrix without recording gradients.
    pub fn features_of(&self, input: &Matrix<f64>) -> Result<Matrix<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let h = self.features(&mut tape, &bound, x)?;
        Ok(tape.value(h).clone())
    }

    /// Unit-norm projector outputs (`n × d`) without recording gradients.
    pub fn embeddings_of(&self, input: &Matrix<f64>) -> Result<Matrix<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out.embedding).clone())
    }
}

/// Linear classifier `logits = h W + c` on (normalized) encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub in_dim: usize,
    pub classes: usize,
    pub store: ParameterStore,
}

impl LinearProbe {
    pub fn zeros(in_dim: usize, classes: usize) -> Self {
        let mut store = ParameterStore::new();
        store.insert("probe.weight", Matrix::zeros(in_dim, classes));
        store.insert("probe.bias", Matrix::zeros(1, classes));
        Self { in_dim, classes, store }
    }

    pub fn from_store(store: ParameterStore) -> Result<Self> {
        let w = store
            .get("probe.weight")
            .ok_or_else(|| Error::Format("missing probe.weight".into()))?;
        let (in_dim, classes) = w.shape();
        let template = Self::zeros(in_dim, classes);
        template.store.check_layout(&store)?;
        Ok(Self { in_dim, classes, store })
    }

    pub fn bind(&self, tape: &mut Tape<f64>, trainable: bool) -> BoundLayer {
        let mut put = |m: &Matrix<f64>| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        BoundLayer {
            weight: put(self.store.tensor(0)),
            bias: put(self.store.tensor(1)),
        }
    }

    pub fn forward_classify(&self, tape: &mut Tape<f64>, bound: &BoundLayer, features: Var) -> Result<Var> {
        let (_, cols) = tape.shape(features);
        if cols != self.in_dim {
            return Err(Error::shape("forward_classify", self.in_dim, cols));
        }
        let z = tape.matmul(features, bound.weight);
        Ok(tape.add_row_broadcast(z, bound.bias))
    }

    pub fn logits_of(&self, features: &Matrix<f64>) -> Result<Matrix<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let h = tape.constant(features.clone());
        let l = self.forward_classify(&mut tape, &b, h)?;
        Ok(tape.value(l).clone())
    }
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix<f64>) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate().skip(1) {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ImageShape;

    fn spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 12,
            hidden: vec![8, 6],
            activation: Activation::Relu,
            embed_dim: 4,
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = SslModel::init(spec(), 1).unwrap();
        assert_eq!(a, SslModel::init(spec(), 1).unwrap());
        assert_ne!(a, SslModel::init(spec(), 2).unwrap());
        let names: Vec<&str> = a.store.iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["encoder.0.weight", "encoder.0.bias", "encoder.1.weight", "encoder.1.bias", "projector.weight", "projector.bias"]
        );
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.store.tensor(0).max_abs() < bound);
    }

    #[test]
    fn zero_projector_falls_back_to_first_basis_vector() {
        let mut m = SslModel::init(spec(), 3).unwrap();
        let n = m.store.len();
        *m.store.tensor_mut(n - 2) = Matrix::zeros(6, 4);
        let img = ImageBatch::new(ImageShape::new(2, 2, 3), Matrix::filled(3, 12, 0.5), None).unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t, true);
        let (_, z) = m.forward_embed(&mut t, &b, &img).unwrap();
        for j in 0..3 {
            assert_eq!(t.value(z.var).column(j), vec![1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn identity_linear_encoder_normalizes_input() {
        let spec = EncoderSpec {
            input_dim: 4,
            hidden: vec![],
            activation: Activation::Relu,
            embed_dim: 4,
        };
        let mut m = SslModel::init(spec, 0).unwrap();
        *m.store.tensor_mut(0) = Matrix::identity(4);
        let img = ImageBatch::new(ImageShape::new(2, 2, 1), Matrix::from_vec(1, 4, vec![0.3, 0.0, 0.4, 0.0]).unwrap(), None)
            .unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t, false);
        let x = t.constant(img.pixels().clone());
        let out = m.forward(&mut t, &b, x).unwrap();
        for (a, b) in t.value(out.embedding).as_slice().iter().zip([0.6, 0.0, 0.8, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_inputs_give_duplicated_outputs() {
        let m = SslModel::init(spec(), 5).unwrap();
        let row: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let e = m.embeddings_of(&x).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = SslModel::init(spec(), 5).unwrap();
        assert!(matches!(m.embeddings_of(&Matrix::zeros(2, 5)), Err(Error::ShapeMismatch { .. })));
        let p = LinearProbe::zeros(3, 2);
        assert!(matches!(p.logits_of(&Matrix::zeros(1, 4)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn classifier_cases() {
        let p = LinearProbe::zeros(3, 4);
        let logits = p.logits_of(&Matrix::filled(2, 3, 0.7)).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(argmax_rows(&logits), vec![0, 0]);

        let mut p = LinearProbe::zeros(3, 3);
        *p.store.tensor_mut(0) = Matrix::identity(3);
        let logits = p.logits_of(&Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(logits.as_slice(), &[0.0, 1.0, 0.0]);
        assert_eq!(argmax_rows(&logits), vec![1]);
    }

    #[test]
    fn weights_round_trip_and_corruption() {
        let m = SslModel::init(spec(), 9).unwrap();
        let bytes = m.store.to_bytes();
        assert_eq!(&bytes[..5], b"RSSL1");
        let back = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.iter().zip(m.store.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.as_slice(), b.1.as_slice());
        }
        assert!(matches!(ParameterStore::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(ParameterStore::from_bytes(b"RSSL2"), Err(Error::Format(_))));

        let empty = ParameterStore::new().to_bytes();
        assert_eq!(empty, b"RSSL1");
        assert!(ParameterStore::from_bytes(&empty).unwrap().is_empty());
    }

    #[test]
    fn layout_mismatch_is_a_format_error() {
        let m = SslModel::init(spec(), 9).unwrap();
        let other = EncoderSpec { hidden: vec![8, 7], ..spec() };
        assert!(matches!(SslModel::from_store(other, m.store.clone()), Err(Error::Format(_))));
        assert!(SslModel::from_store(spec(), m.store).is_ok());
    }
}
