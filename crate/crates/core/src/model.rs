//! Small MLP classifiers and parameter bookkeeping.
//!
//! Clients in a heterogeneous roster differ in hidden-layer widths; all
//! communication between them happens through logits, so architecture never
//! crosses the wire.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Architecture description: input dim, ReLU hidden stack, output dim.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub hidden_layers: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ArchSpec {
    pub fn new(name: &str, hidden_layers: Vec<usize>, input_dim: usize, output_dim: usize) -> Result<Self> {
        if hidden_layers.is_empty() {
            return Err(Error::Config(format!(
                "arch '{name}' needs at least one hidden layer"
            )));
        }
        if hidden_layers.contains(&0) {
            return Err(Error::Config(format!("arch '{name}' has a zero-width layer")));
        }
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(format!("arch '{name}' has a zero input/output dim")));
        }
        Ok(ArchSpec {
            name: name.to_string(),
            hidden_layers,
            input_dim,
            output_dim,
        })
    }

    /// Layer dimension chain D -> hidden... -> C.
    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_layers.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_layers);
        d.push(self.output_dim);
        d
    }
}

/// The default heterogeneous roster: four distinct hidden stacks standing in
/// for four distinct backbones. Clients beyond four cycle through it.
pub fn default_roster(input_dim: usize, output_dim: usize) -> Result<Vec<ArchSpec>> {
    Ok(vec![
        ArchSpec::new("mlp32", vec![32], input_dim, output_dim)?,
        ArchSpec::new("mlp48", vec![48], input_dim, output_dim)?,
        ArchSpec::new("mlp64x32", vec![64, 32], input_dim, output_dim)?,
        ArchSpec::new("mlp96", vec![96], input_dim, output_dim)?,
    ])
}

/// One dense layer: weight `[in, out]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameter tensors for one client model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let (_in, out) = l.weight.rows()?;
            if l.bias.shape() != [out] {
                return Err(Error::Shape(format!(
                    "layer {i}: bias shape {:?} does not match weight columns {out}",
                    l.bias.shape()
                )));
            }
            if i > 0 {
                let prev_out = layers[i - 1].weight.shape()[1];
                let this_in = l.weight.shape()[0];
                if prev_out != this_in {
                    return Err(Error::Shape(format!(
                        "layer {i}: input {this_in} does not chain from previous output {prev_out}"
                    )));
                }
            }
        }
        Ok(ModelParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[1]
    }

    /// Total number of scalar parameters (the |θ| of the efficiency formula).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flattened tensor list, weights and biases interleaved per layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    pub fn tensor_lens(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    /// Insert all parameters into a tape as gradient-tracked leaves.
    pub fn insert_into(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// He-uniform initialized weights, zero biases; deterministic given seed.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<ModelParams> {
    let dims = spec.dims();
    let mut r = rng::stream_indexed(seed, "model-init", &[]);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| r.gen_range(-bound..bound))
            .collect();
        layers.push(Layer {
            weight: Tensor::new(vec![fan_in, fan_out], data)?,
            bias: Tensor::zeros(vec![fan_out]),
        });
    }
    ModelParams::from_layers(layers)
}

/// Tape-level forward pass: matmul + bias + ReLU per hidden layer, linear
/// head. `param_ids` must come from [`ModelParams::insert_into`].
pub fn tape_forward(tape: &mut Tape, param_ids: &[TensorId], batch: TensorId) -> Result<TensorId> {
    if param_ids.len() < 2 || !param_ids.len().is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "tape_forward: expected interleaved weight/bias ids, got {}",
            param_ids.len()
        )));
    }
    let layer_count = param_ids.len() / 2;
    let mut h = batch;
    for li in 0..layer_count {
        let w = param_ids[2 * li];
        let b = param_ids[2 * li + 1];
        let z = tape.matmul(h, w).map_err(|e| {
            Error::Shape(format!("layer {li}: {e}"))
        })?;
        h = tape.add_row_bias(z, b).map_err(|e| {
            Error::Shape(format!("layer {li}: {e}"))
        })?;
        if li + 1 < layer_count {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Value-level forward pass for evaluation; no gradients recorded.
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let ids: Vec<TensorId> = params
        .tensors()
        .into_iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let out = tape_forward(&mut tape, &ids, x)?;
    let logits = tape.value(out).clone();
    if !logits.all_finite() {
        return Err(Error::Numeric("forward produced non-finite logits".into()));
    }
    Ok(logits)
}

/// Euclidean norm of the concatenated parameter difference.
pub fn parameter_delta_norm(before: &ModelParams, after: &ModelParams) -> Result<f64> {
    let bt = before.tensors();
    let at = after.tensors();
    if bt.len() != at.len() {
        return Err(Error::Usage("parameter_delta_norm: layer counts differ".into()));
    }
    let mut sum = 0.0;
    for (b, a) in bt.iter().zip(&at) {
        if b.shape() != a.shape() {
            return Err(Error::Usage(format!(
                "parameter_delta_norm: shapes {:?} and {:?} differ",
                b.shape(),
                a.shape()
            )));
        }
        for (x, y) in b.data().iter().zip(a.data()) {
            let d = y - x;
            sum += d * d;
        }
    }
    Ok(sum.sqrt())
}

// ── Checkpoint container ("RHFLCK1") ───────────────────────────────────
//
// magic, u32 layer count, per-layer (u32 in, u32 out), then f64 payload:
// each layer's row-major weight followed by its bias. Little-endian.

const CHECKPOINT_MAGIC: &[u8; 7] = b"RHFLCK1";

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for l in &params.layers {
        let (i, o) = l.weight.rows()?;
        f.write_all(&(i as u32).to_le_bytes())?;
        f.write_all(&(o as u32).to_le_bytes())?;
    }
    for l in &params.layers {
        for v in l.weight.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in l.bias.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 7];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: format!("bad checkpoint magic {magic:?}"),
        });
    }
    let layer_count = read_u32(&mut f)? as usize;
    let mut shapes = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let i = read_u32(&mut f)? as usize;
        let o = read_u32(&mut f)? as usize;
        shapes.push((i, o));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for &(i, o) in &shapes {
        let mut wdata = vec![0.0; i * o];
        read_f64s(&mut f, &mut wdata)?;
        let mut bdata = vec![0.0; o];
        read_f64s(&mut f, &mut bdata)?;
        layers.push(Layer {
            weight: Tensor::new(vec![i, o], wdata)?,
            bias: Tensor::new(vec![o], bdata)?,
        });
    }
    ModelParams::from_layers(layers)
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(f: &mut impl Read, out: &mut [f64]) -> Result<()> {
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        f.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_follows_layer_shapes() {
        // hidden [4], D=3, C=2 -> 3*4+4 + 4*2+2 = 26
        let spec = ArchSpec::new("t", vec![4], 3, 2).unwrap();
        let m = build_model(&spec, 1).unwrap();
        assert_eq!(m.param_count(), 26);
    }

    #[test]
    fn same_seed_same_model() {
        let spec = ArchSpec::new("t", vec![8], 5, 3).unwrap();
        let a = build_model(&spec, 99).unwrap();
        let b = build_model(&spec, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = ArchSpec::new("t", vec![8], 5, 3).unwrap();
        let a = build_model(&spec, 1).unwrap();
        let b = build_model(&spec, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_width_layer_rejected() {
        assert!(ArchSpec::new("bad", vec![4, 0], 3, 2).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let layers = vec![Layer {
            weight: Tensor::zeros(vec![3, 2]),
            bias: Tensor::zeros(vec![2]),
        }];
        let m = ModelParams::from_layers(layers).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let z = forward(&m, &x).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let layers = vec![Layer {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        }];
        let m = ModelParams::from_layers(layers).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let z = forward(&m, &x).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_matches_reference_chain() {
        // Independent evaluation of the matmul/ReLU chain with plain loops.
        let spec = ArchSpec::new("t", vec![4], 3, 2).unwrap();
        let m = build_model(&spec, 7).unwrap();
        let x = vec![0.3, -0.8, 1.2, 0.05, 0.4, -0.6];
        let batch = Tensor::new(vec![2, 3], x.clone()).unwrap();
        let got = forward(&m, &batch).unwrap();

        let w1 = m.layers()[0].weight.data();
        let b1 = m.layers()[0].bias.data();
        let w2 = m.layers()[1].weight.data();
        let b2 = m.layers()[1].bias.data();
        let mut expected = Vec::new();
        for r in 0..2 {
            let mut h = vec![0.0; 4];
            for j in 0..4 {
                let mut s = b1[j];
                for i in 0..3 {
                    s += x[r * 3 + i] * w1[i * 4 + j];
                }
                h[j] = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = b2[j];
                for i in 0..4 {
                    s += h[i] * w2[i * 2 + j];
                }
                expected.push(s);
            }
        }
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let spec = ArchSpec::new("t", vec![4], 3, 2).unwrap();
        let m = build_model(&spec, 7).unwrap();
        let bad = Tensor::new(vec![2, 5], vec![0.0; 10]).unwrap();
        let err = forward(&m, &bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "message was: {msg}");
    }

    #[test]
    fn delta_norm_examples() {
        let spec = ArchSpec::new("t", vec![4], 3, 2).unwrap();
        let m = build_model(&spec, 7).unwrap();
        assert_eq!(parameter_delta_norm(&m, &m).unwrap(), 0.0);

        let single = ModelParams::from_layers(vec![Layer {
            weight: Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        }])
        .unwrap();
        let mut moved = single.clone();
        moved.tensors_mut()[0].data_mut()[0] = 3.0;
        assert_eq!(parameter_delta_norm(&single, &moved).unwrap(), 3.0);
        // symmetry in sign
        assert_eq!(parameter_delta_norm(&moved, &single).unwrap(), 3.0);

        let mut two = single.clone();
        two.tensors_mut()[0].data_mut()[0] = 1.0;
        let mut two_b = two.clone();
        two_b.tensors_mut()[0].data_mut()[0] = 2.0;
        two_b.tensors_mut()[1].data_mut()[0] = 1.0;
        let d = parameter_delta_norm(&two, &two_b).unwrap();
        assert!((d - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn default_roster_has_four_distinct_architectures() {
        let roster = default_roster(20, 10).unwrap();
        assert_eq!(roster.len(), 4);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(roster[i].hidden_layers, roster[j].hidden_layers);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = ArchSpec::new("t", vec![4, 3], 5, 2).unwrap();
        let m = build_model(&spec, 11).unwrap();
        let dir = std::env::temp_dir().join("rhfl_ck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ck");
        write_checkpoint(&path, &m).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(m, back);
    }
}
