//! The multi-expert network: a shared convolutional backbone feeding K
//! linear classifier heads, one per source domain.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};
use crate::tensor::{Graph, Scalar, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"DAELCK1\0";

/// Backbone sizes. The default instantiation is three 3x3 conv blocks
/// (each conv + relu + 2x2 max pool) at widths 32/64/128 on 32-pixel
/// images, flattened into a 128-dimensional feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub conv_channels: [usize; 3],
    pub feat_dim: usize,
    pub image_side: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            conv_channels: [32, 64, 128],
            feat_dim: 128,
            image_side: 32,
        }
    }
}

impl Arch {
    /// Spatial side after the three pooling stages.
    pub fn pooled_side(&self) -> usize {
        self.image_side / 8
    }

    /// Flattened feature-map length entering the fully connected layer.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels[2] * self.pooled_side() * self.pooled_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side % 8 != 0 || self.image_side == 0 {
            return Err(Error::contract(format!(
                "image_side must be a positive multiple of 8, got {}",
                self.image_side
            )));
        }
        if self.conv_channels.iter().any(|&c| c == 0) || self.feat_dim == 0 {
            return Err(Error::contract("zero-width layer".to_string()));
        }
        Ok(())
    }
}

/// Shared backbone parameters plus K expert heads.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub arch: Arch,
    pub num_experts: usize,
    pub num_classes: usize,
    /// Fixed order: conv1..conv3 (weight, bias), fc (weight, bias), then
    /// head{i} (weight, bias) for i in 0..K.
    tensors: Vec<Tensor<S>>,
}

/// Parameter names in their fixed serialization order.
pub fn param_names(num_experts: usize) -> Vec<String> {
    let mut names = vec![
        "conv1.weight".to_string(),
        "conv1.bias".to_string(),
        "conv2.weight".to_string(),
        "conv2.bias".to_string(),
        "conv3.weight".to_string(),
        "conv3.bias".to_string(),
        "fc.weight".to_string(),
        "fc.bias".to_string(),
    ];
    for i in 0..num_experts {
        names.push(format!("head{i}.weight"));
        names.push(format!("head{i}.bias"));
    }
    names
}

fn param_shapes(arch: &Arch, num_experts: usize, num_classes: usize) -> Vec<Vec<usize>> {
    let [c1, c2, c3] = arch.conv_channels;
    let mut shapes = vec![
        vec![c1, 3, 3, 3],
        vec![c1],
        vec![c2, c1, 3, 3],
        vec![c2],
        vec![c3, c2, 3, 3],
        vec![c3],
        vec![arch.flat_dim(), arch.feat_dim],
        vec![arch.feat_dim],
    ];
    for _ in 0..num_experts {
        shapes.push(vec![arch.feat_dim, num_classes]);
        shapes.push(vec![num_classes]);
    }
    shapes
}

/// Zero-mean normal weights with standard deviation `sqrt(2 / fan_in)`.
fn he_normal<S: Scalar>(stream: &mut Stream, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let vals = (0..n)
        .map(|_| S::from_f64(stream.normal() * std))
        .collect();
    Tensor::param(shape, vals)
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters: He-normal weights, zero biases, deterministic in
    /// the seed.
    pub fn init(arch: Arch, num_experts: usize, num_classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if num_experts < 1 {
            return Err(Error::contract("need at least one expert".to_string()));
        }
        if num_classes < 2 {
            return Err(Error::contract("need at least two classes".to_string()));
        }
        let shapes = param_shapes(&arch, num_experts, num_classes);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (idx, shape) in shapes.into_iter().enumerate() {
            if shape.len() == 1 {
                tensors.push(Tensor::param(shape.clone(), vec![S::ZERO; shape[0]]));
            } else {
                // fan_in: input features for matmul weights, cin*kh*kw for
                // conv weights.
                let fan_in = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let mut stream = Stream::derive(seed, &[purpose::INIT, idx as u64]);
                tensors.push(he_normal(&mut stream, shape, fan_in));
            }
        }
        Ok(ModelParams {
            arch,
            num_experts,
            num_classes,
            tensors,
        })
    }

    /// Wraps externally owned tensors (e.g. perturbed copies inside a
    /// finite-difference check) in the fixed parameter layout.
    pub fn with_tensors(
        arch: Arch,
        num_experts: usize,
        num_classes: usize,
        tensors: &[Tensor<S>],
    ) -> Result<Self> {
        let shapes = param_shapes(&arch, num_experts, num_classes);
        if tensors.len() != shapes.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(&shapes) {
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter shape {:?} does not match expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            arch,
            num_experts,
            num_classes,
            tensors: tensors.to_vec(),
        })
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    fn head(&self, i: usize) -> Result<(&Tensor<S>, &Tensor<S>)> {
        if i >= self.num_experts {
            return Err(Error::contract(format!(
                "expert index {i} out of range (K={})",
                self.num_experts
            )));
        }
        Ok((&self.tensors[8 + 2 * i], &self.tensors[9 + 2 * i]))
    }

    /// Backbone features `[B, feat_dim]` for a `[B, 3, side, side]` batch.
    /// Inputs arrive in `[0, 1]` and are shifted to `[-1, 1]` before the
    /// first convolution; zero-centered inputs keep early conv gradients
    /// from pointing the same way on every channel.
    pub fn backbone(&self, g: &mut Graph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let batch = x.shape()[0];
        let doubled = g.scale(x, 2.0)?;
        let minus_one = Tensor::from_vec(x.shape().to_vec(), vec![-S::ONE; x.numel()]);
        let mut cur = g.add(&doubled, &minus_one)?;
        for block in 0..3 {
            let w = &self.tensors[2 * block];
            let b = &self.tensors[2 * block + 1];
            let conv = g.conv2d(&cur, w, Some(b), 1, 1)?;
            let act = g.relu(&conv)?;
            cur = g.maxpool2x2(&act)?;
        }
        let flat = g.reshape(&cur, vec![batch, self.arch.flat_dim()])?;
        let fc = g.matmul(&flat, &self.tensors[6])?;
        let fc = g.add(&fc, &self.tensors[7])?;
        g.relu(&fc)
    }

    /// Class probabilities of expert `i` from precomputed features.
    pub fn head_probs(&self, g: &mut Graph<S>, i: usize, feat: &Tensor<S>) -> Result<Tensor<S>> {
        let (w, b) = self.head(i)?;
        let logits = g.matmul(feat, w)?;
        let logits = g.add(&logits, b)?;
        g.softmax_lastdim(&logits)
    }

    /// `softmax(head_i(backbone(x)))`, differentiable end to end.
    pub fn expert_forward(&self, g: &mut Graph<S>, i: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        let feat = self.backbone(g, x)?;
        self.head_probs(g, i, &feat)
    }

    /// Arithmetic mean of expert outputs over `subset`, sharing one
    /// backbone pass.
    pub fn ensemble_predict(
        &self,
        g: &mut Graph<S>,
        x: &Tensor<S>,
        subset: &[usize],
    ) -> Result<Tensor<S>> {
        let feat = self.backbone(g, x)?;
        self.ensemble_from_features(g, &feat, subset)
    }

    /// Ensemble mean over `subset` from precomputed features.
    pub fn ensemble_from_features(
        &self,
        g: &mut Graph<S>,
        feat: &Tensor<S>,
        subset: &[usize],
    ) -> Result<Tensor<S>> {
        if subset.is_empty() {
            return Err(Error::contract("ensemble over empty subset".to_string()));
        }
        let mut acc = self.head_probs(g, subset[0], feat)?;
        if subset.len() == 1 {
            return Ok(acc);
        }
        for &i in &subset[1..] {
            let p = self.head_probs(g, i, feat)?;
            acc = g.add(&acc, &p)?;
        }
        g.scale(&acc, 1.0 / subset.len() as f64)
    }

    /// Argmax of the full-ensemble prediction; ties break toward the
    /// lowest class index. Runs without recording a graph.
    pub fn predict_class(&self, x: &Tensor<S>) -> Result<Vec<u16>> {
        let all: Vec<usize> = (0..self.num_experts).collect();
        let mut g = Graph::new();
        let probs = g.with_no_grad(|g| self.ensemble_predict(g, x, &all))?;
        Ok(argmax_rows(probs.values(), self.num_classes))
    }
}

/// Row-wise argmax with ties toward the lowest index.
pub fn argmax_rows<S: Scalar>(values: &[S], cols: usize) -> Vec<u16> {
    values
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

/// Writes a checkpoint: magic, u16 K, u16 C, then for each parameter in the
/// fixed order a u16 name length, the name bytes, a u32 element count and
/// the f32 little-endian values. Bit-exact round trip.
pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(params.num_experts as u16).to_le_bytes())?;
    f.write_all(&(params.num_classes as u16).to_le_bytes())?;
    for (name, tensor) in param_names(params.num_experts).iter().zip(&params.tensors) {
        f.write_all(&(name.len() as u16).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(tensor.numel() as u32).to_le_bytes())?;
        for &v in tensor.values() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], reconstructing the
/// architecture from the stored array sizes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format(0, "truncated magic".to_string()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    offset += 8;
    let mut u16buf = [0u8; 2];
    f.read_exact(&mut u16buf)
        .map_err(|_| Error::format(offset, "truncated K".to_string()))?;
    let num_experts = u16::from_le_bytes(u16buf) as usize;
    offset += 2;
    f.read_exact(&mut u16buf)
        .map_err(|_| Error::format(offset, "truncated C".to_string()))?;
    let num_classes = u16::from_le_bytes(u16buf) as usize;
    offset += 2;
    if num_experts == 0 || num_classes < 2 {
        return Err(Error::format(
            8,
            format!("bad header K={num_experts} C={num_classes}"),
        ));
    }

    let names = param_names(num_experts);
    let mut arrays: Vec<Vec<f32>> = Vec::with_capacity(names.len());
    for expected in &names {
        f.read_exact(&mut u16buf)
            .map_err(|_| Error::format(offset, format!("truncated name length for {expected}")))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        offset += 2;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)
            .map_err(|_| Error::format(offset, "truncated name".to_string()))?;
        let name = String::from_utf8_lossy(&name).to_string();
        if &name != expected {
            return Err(Error::format(
                offset,
                format!("expected array `{expected}`, found `{name}`"),
            ));
        }
        offset += name_len as u64;
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)
            .map_err(|_| Error::format(offset, "truncated count".to_string()))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        offset += 4;
        let mut bytes = vec![0u8; count * 4];
        f.read_exact(&mut bytes)
            .map_err(|_| Error::format(offset, format!("truncated values for {name}")))?;
        offset += (count * 4) as u64;
        arrays.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }

    // Derive the architecture back from the array sizes.
    let c1 = arrays[1].len();
    let c2 = arrays[3].len();
    let c3 = arrays[5].len();
    let feat_dim = arrays[7].len();
    let flat = arrays[6].len() / feat_dim.max(1);
    let pooled = ((flat / c3.max(1)) as f64).sqrt().round() as usize;
    let arch = Arch {
        conv_channels: [c1, c2, c3],
        feat_dim,
        image_side: pooled * 8,
    };
    let shapes = param_shapes(&arch, num_experts, num_classes);
    let mut tensors = Vec::with_capacity(arrays.len());
    for ((vals, shape), name) in arrays.into_iter().zip(shapes).zip(&names) {
        let expect: usize = shape.iter().product();
        if vals.len() != expect {
            return Err(Error::format(
                offset,
                format!("array `{name}` has {} values, expected {expect}", vals.len()),
            ));
        }
        tensors.push(Tensor::param(shape, vals));
    }
    Ok(ModelParams {
        arch,
        num_experts,
        num_classes,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams<f64> {
        ModelParams::init(
            Arch {
                conv_channels: [4, 5, 6],
                feat_dim: 7,
                image_side: 16,
            },
            3,
            4,
            42,
        )
        .unwrap()
    }

    fn batch(n: usize, side: usize, seed: u64) -> Tensor<f64> {
        let mut s = Stream::seed(seed);
        Tensor::from_vec(
            vec![n, 3, side, side],
            (0..n * 3 * side * side).map(|_| s.next_f64()).collect(),
        )
    }

    #[test]
    fn same_seed_gives_bitwise_identical_params() {
        let a = tiny();
        let b = tiny();
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            let bits = |t: &Tensor<f64>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn biases_are_exactly_zero() {
        let p = tiny();
        for (name, t) in param_names(3).iter().zip(p.tensors()) {
            if name.ends_with("bias") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn he_std_matches_fan_in() {
        // a 3x3 conv over 128 input channels: std should be sqrt(2/1152)
        let p: ModelParams<f64> = ModelParams::init(
            Arch {
                conv_channels: [128, 128, 4],
                feat_dim: 8,
                image_side: 16,
            },
            1,
            2,
            9,
        )
        .unwrap();
        let w = &p.tensors()[2]; // conv2.weight [128, 128, 3, 3]
        assert_eq!(w.shape(), &[128, 128, 3, 3]);
        let n = w.numel() as f64;
        let mean: f64 = w.values().iter().sum::<f64>() / n;
        let var: f64 = w
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let expect = (2.0 / 1152.0f64).sqrt();
        assert!(
            (var.sqrt() - expect).abs() / expect < 0.1,
            "std {} vs {expect}",
            var.sqrt()
        );
    }

    #[test]
    fn expert_rows_sum_to_one() {
        let p = tiny();
        let x = batch(5, 16, 1);
        let mut g = Graph::new();
        let probs = p.expert_forward(&mut g, 0, &x).unwrap();
        for row in probs.values().chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_head_gives_uniform_probs() {
        let mut p = tiny();
        p.tensors_mut()[8].update_values(|v| v.fill(0.0));
        p.tensors_mut()[9].update_values(|v| v.fill(0.0));
        let x = batch(3, 16, 2);
        let mut g = Graph::new();
        let probs = p.expert_forward(&mut g, 0, &x).unwrap();
        for &v in probs.values() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_heads_agree_and_singleton_subset_is_that_expert() {
        let mut p = tiny();
        let w = p.tensors()[8].values().to_vec();
        let b = p.tensors()[9].values().to_vec();
        p.tensors_mut()[10].update_values(|v| v.copy_from_slice(&w));
        p.tensors_mut()[11].update_values(|v| v.copy_from_slice(&b));
        let x = batch(4, 16, 3);
        let mut g = Graph::new();
        let e0 = p.expert_forward(&mut g, 0, &x).unwrap();
        let e1 = p.expert_forward(&mut g, 1, &x).unwrap();
        assert_eq!(e0.values(), e1.values());

        let mut g = Graph::new();
        let only = p.ensemble_predict(&mut g, &x, &[2]).unwrap();
        let mut g = Graph::new();
        let direct = p.expert_forward(&mut g, 2, &x).unwrap();
        assert_eq!(only.values(), direct.values());
    }

    #[test]
    fn ensemble_rows_are_distributions() {
        let p = tiny();
        let x = batch(4, 16, 4);
        let mut g = Graph::new();
        let probs = p.ensemble_predict(&mut g, &x, &[0, 1, 2]).unwrap();
        for row in probs.values().chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn expert_index_out_of_range_is_contract_error() {
        let p = tiny();
        let x = batch(1, 16, 5);
        let mut g = Graph::new();
        assert!(p.expert_forward(&mut g, 3, &x).is_err());
        assert!(p.ensemble_predict(&mut g, &x, &[]).is_err());
    }

    #[test]
    fn predict_class_argmax_and_tie_rule() {
        assert_eq!(argmax_rows(&[0.1, 0.7, 0.2], 3), vec![1]);
        assert_eq!(argmax_rows(&[0.5, 0.5], 2), vec![0]);
    }

    #[test]
    fn head_logit_shift_invariance() {
        let p = tiny();
        let x = batch(3, 16, 6);
        let mut g = Graph::new();
        let before = p.expert_forward(&mut g, 1, &x).unwrap();
        let mut shifted = p.clone();
        shifted.tensors_mut()[11].update_values(|v| v.iter_mut().for_each(|b| *b += 3.7));
        let mut g = Graph::new();
        let after = shifted.expert_forward(&mut g, 1, &x).unwrap();
        for (a, b) in before.values().iter().zip(after.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_on_one_head_leaves_other_heads_untouched() {
        let p = tiny();
        let x = batch(2, 16, 7);
        let mut g = Graph::new();
        let probs = p.expert_forward(&mut g, 0, &x).unwrap();
        let onehot = Tensor::from_vec(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let lp = g.log(&probs).unwrap();
        let picked = g.mul(&lp, &onehot).unwrap();
        let s = g.sum(&picked).unwrap();
        let loss = g.scale(&s, -0.5).unwrap();
        g.backward(&loss).unwrap();
        // backbone got gradient
        assert!(p.tensors()[0].grad().unwrap().iter().any(|&v| v != 0.0));
        // head 0 got gradient, heads 1 and 2 got none at all
        assert!(p.tensors()[8].grad().is_some());
        assert!(p.tensors()[10].grad().is_none());
        assert!(p.tensors()[12].grad().is_none());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let p: ModelParams<f32> = ModelParams::init(Arch::default(), 3, 5, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.arch, p.arch);
        assert_eq!(q.num_experts, 3);
        assert_eq!(q.num_classes, 5);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupted_checkpoint_magic_is_rejected() {
        let p: ModelParams<f32> = ModelParams::init(Arch::default(), 2, 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        save_checkpoint(&p, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0x1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
