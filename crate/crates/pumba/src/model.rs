//! The five-branch scoring network.
//!
//! Image channels and energy terms are routed into five functional groups.
//! Each group runs through its own hybrid branch (an [`ImageEncoder`] whose
//! class embedding is concatenated with the group's energy terms and passed
//! through a two-layer integration network). The five branch embeddings form
//! a token sequence for a final [`SequenceEncoder`] whose class token feeds a
//! logistic head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::CapriCategory;
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{self, Discretization, HiddenAttentionStack};
use crate::tensor::{Element, Tensor};
use crate::vim::{EncoderDims, EncoderTrace, ImageEncoder, PatchGrid, SequenceEncoder};

/// Image channels in storage order.
pub const CHANNEL_NAMES: [&str; 13] = [
    "shape_index_a",
    "shape_index_b",
    "curvature_a",
    "curvature_b",
    "hbond_a",
    "hbond_b",
    "charge_a",
    "charge_b",
    "hydropathy_a",
    "hydropathy_b",
    "rasa_a",
    "rasa_b",
    "patch_dist",
];

/// Energy terms in storage order.
pub const ENERGY_NAMES: [&str; 9] = [
    "van_der_waals",
    "desolvation",
    "insideness",
    "hydrogen_bonds",
    "disulfide_bonds",
    "electrostatics",
    "pi_stacking",
    "cation_pi",
    "aliphatic",
];

/// Group names in branch order.
pub const GROUP_NAMES: [&str; 5] = ["shape", "rasa", "charge", "hbond", "hydropathy"];

/// One docking model's interface images, energies and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfacePairSample {
    pub complex_id: String,
    pub model_id: String,
    /// True for the native conformation.
    pub native: bool,
    pub capri: CapriCategory,
    /// `[N×a×a]`.
    pub image: Tensor<f32>,
    pub energies: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAssignment {
    pub name: String,
    pub channels: Vec<usize>,
    pub energies: Vec<usize>,
}

/// Partition of image channels and energy terms into the five groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchGroupSpec {
    pub groups: Vec<GroupAssignment>,
}

impl Default for BranchGroupSpec {
    fn default() -> Self {
        let g = |name: &str, channels: &[usize], energies: &[usize]| GroupAssignment {
            name: name.to_string(),
            channels: channels.to_vec(),
            energies: energies.to_vec(),
        };
        Self {
            groups: vec![
                g("shape", &[0, 1, 2, 3, 12], &[0, 2, 8]),
                g("rasa", &[10, 11], &[4]),
                g("charge", &[6, 7], &[5, 6, 7]),
                g("hbond", &[4, 5], &[3]),
                g("hydropathy", &[8, 9], &[1]),
            ],
        }
    }
}

fn check_partition(kind: &str, lists: Vec<&[usize]>, universe: usize) -> Result<()> {
    let mut seen = vec![0usize; universe];
    let mut out_of_range = Vec::new();
    for &i in lists.iter().flat_map(|l| l.iter()) {
        match seen.get_mut(i) {
            Some(c) => *c += 1,
            None => out_of_range.push(i),
        }
    }
    let missing: Vec<_> = (0..universe).filter(|&i| seen[i] == 0).collect();
    let doubled: Vec<_> = (0..universe).filter(|&i| seen[i] > 1).collect();
    if missing.is_empty() && doubled.is_empty() && out_of_range.is_empty() {
        return Ok(());
    }
    Err(Error::Config(format!(
        "{kind} assignment is not a partition: unassigned {missing:?}, \
         assigned more than once {doubled:?}, out of range {out_of_range:?}"
    )))
}

impl BranchGroupSpec {
    pub fn validate(&self, channels: usize, energies: usize) -> Result<()> {
        let names: Vec<_> = self.groups.iter().map(|g| g.name.as_str()).collect();
        if names != GROUP_NAMES {
            return Err(Error::Config(format!(
                "groups must be {GROUP_NAMES:?} in that order, got {names:?}"
            )));
        }
        if self.groups.iter().any(|g| g.channels.is_empty()) {
            return Err(Error::Config("every group needs at least one channel".into()));
        }
        check_partition(
            "channel",
            self.groups.iter().map(|g| g.channels.as_slice()).collect(),
            channels,
        )?;
        check_partition(
            "energy",
            self.groups.iter().map(|g| g.energies.as_slice()).collect(),
            energies,
        )
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }
}

/// Input of one hybrid branch.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupInput {
    /// `[n_g×a×a]` channel slice.
    pub image: Tensor<f32>,
    /// `[e_g]` energy slice.
    pub energies: Tensor<f32>,
}

/// Slices a sample into its five group inputs, in branch order.
pub fn split_groups(sample: &InterfacePairSample, spec: &BranchGroupSpec) -> Result<Vec<GroupInput>> {
    let &[n, a, _] = sample.image.shape() else {
        return Err(Error::Contract(format!(
            "sample image must be [N×a×a], got {:?}",
            sample.image.shape()
        )));
    };
    spec.validate(n, sample.energies.len())?;
    let plane = a * a;
    Ok(spec
        .groups
        .iter()
        .map(|g| {
            let mut data = Vec::with_capacity(g.channels.len() * plane);
            for &c in &g.channels {
                data.extend_from_slice(&sample.image.data()[c * plane..(c + 1) * plane]);
            }
            GroupInput {
                image: Tensor::new([g.channels.len(), a, a], data).unwrap(),
                energies: Tensor::new(
                    [g.energies.len()],
                    g.energies.iter().map(|&e| sample.energies[e]).collect(),
                )
                .unwrap(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub energies: usize,
    /// Dimensions of each branch's image encoder.
    pub branch: EncoderDims,
    /// Dimensions of the final encoder over branch tokens. Its convolution
    /// defaults to width 1: the group order along that sequence is arbitrary,
    /// and keeping the scan as the only token mixer lets hidden attention
    /// account for every cross-group interaction.
    pub aggregator: EncoderDims,
    pub discretization: Discretization,
    pub groups: BranchGroupSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: CHANNEL_NAMES.len(),
            energies: ENERGY_NAMES.len(),
            branch: EncoderDims::default(),
            aggregator: EncoderDims {
                conv_width: 1,
                ..EncoderDims::default()
            },
            discretization: Discretization::Euler,
            groups: BranchGroupSpec::default(),
        }
    }
}

impl ModelConfig {
    /// A small configuration that trains in about a minute on one core:
    /// 16 patches of 8×8, width 16, one block per encoder.
    pub fn desk() -> Self {
        let dims = EncoderDims {
            embed_dim: 16,
            depth: 1,
            expand: 2,
            state_dim: 8,
            conv_width: 4,
        };
        Self {
            patch_size: 8,
            aggregator: EncoderDims {
                conv_width: 1,
                ..dims.clone()
            },
            branch: dims,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.image_size, self.patch_size, self.channels)?;
        self.branch.validate()?;
        self.aggregator.validate()?;
        if self.branch.embed_dim != self.aggregator.embed_dim {
            return Err(Error::Config(format!(
                "branch width {} differs from aggregator width {}",
                self.branch.embed_dim, self.aggregator.embed_dim
            )));
        }
        self.groups.validate(self.channels, self.energies)
    }
}

/// One hybrid branch: image encoder plus integration layers.
#[derive(Clone, Debug)]
pub struct Branch {
    pub encoder: ImageEncoder,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Output of [`PumbaModel::score`].
#[derive(Clone, Debug, PartialEq)]
pub struct BindingScore {
    /// In `[0, 1]`; higher means more native-like.
    pub score: f32,
    /// `[5×M]`, one row per group.
    pub branch_embeddings: Tensor<f32>,
}

/// Tape handles produced by one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleForward {
    /// `[1×1]` pre-sigmoid score.
    pub logit: Var,
    /// `[1×M]` final class-token embedding.
    pub class_embedding: Var,
    pub branch_embeddings: Vec<Var>,
    pub branch_traces: Vec<EncoderTrace>,
    pub aggregator_trace: EncoderTrace,
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `[B×1]`.
    pub logits: Var,
    /// `[B×1]`, sigmoid of `logits`.
    pub scores: Var,
    /// `[B×M]`.
    pub embeddings: Var,
    pub samples: Vec<SampleForward>,
}

/// Hidden attention of every encoder for one sample.
#[derive(Clone, Debug)]
pub struct SampleAttention {
    pub score: f32,
    pub branch_stacks: Vec<HiddenAttentionStack<f32>>,
    pub branch_class_index: usize,
    pub aggregator_stack: HiddenAttentionStack<f32>,
}

/// The scoring network together with its parameters.
#[derive(Clone, Debug)]
pub struct PumbaModel {
    pub config: ModelConfig,
    pub branches: Vec<Branch>,
    pub aggregator: SequenceEncoder,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub params: ParamStore<f32>,
}

impl PumbaModel {
    /// Builds a freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = config.branch.embed_dim;
        let branches = config
            .groups
            .groups
            .iter()
            .map(|g| {
                let grid = PatchGrid::new(config.image_size, config.patch_size, g.channels.len())
                    .expect("validated grid");
                let prefix = format!("branch.{}", g.name);
                let encoder = ImageEncoder::new(&mut store, &prefix, grid, &config.branch, &mut rng);
                let fan1 = m + g.energies.len();
                Branch {
                    encoder,
                    fc1_w: store.add(
                        format!("{prefix}.fc1_w"),
                        ssm::normal_tensor([fan1, m], 1.0 / (fan1 as f64).sqrt(), &mut rng),
                    ),
                    fc1_b: store.add(format!("{prefix}.fc1_b"), Tensor::zeros([m])),
                    fc2_w: store.add(
                        format!("{prefix}.fc2_w"),
                        ssm::normal_tensor([m, m], 1.0 / (m as f64).sqrt(), &mut rng),
                    ),
                    fc2_b: store.add(format!("{prefix}.fc2_b"), Tensor::zeros([m])),
                }
            })
            .collect();
        let aggregator = SequenceEncoder::new(
            &mut store,
            "aggregator",
            GROUP_NAMES.len(),
            &config.aggregator,
            &mut rng,
        );
        let head_w = store.add(
            "head.w",
            ssm::normal_tensor([m, 1], 1.0 / (m as f64).sqrt(), &mut rng),
        );
        let head_b = store.add("head.b", Tensor::zeros([1]));
        Ok(Self {
            config,
            branches,
            aggregator,
            head_w,
            head_b,
            params: store,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.branch.embed_dim
    }

    fn rule(&self) -> Discretization {
        self.config.discretization
    }

    /// Branch `g` on the tape; returns the `[1×M]` embedding.
    pub fn branch_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        g: usize,
        input: &GroupInput,
    ) -> Result<(Var, EncoderTrace)> {
        let branch = &self.branches[g];
        let (cls, trace) = branch.encoder.forward(tape, p, &input.image.cast(), self.rule())?;
        let e = input.energies.len();
        let joined = if e > 0 {
            let energies = tape.constant(input.energies.cast::<T>().reshape([1, e])?);
            tape.concat(&[cls, energies], Axis::Cols)?
        } else {
            cls
        };
        let h = tape.matmul(joined, p.var(branch.fc1_w))?;
        let h = tape.add_row(h, p.var(branch.fc1_b))?;
        let h = tape.silu(h);
        let out = tape.matmul(h, p.var(branch.fc2_w))?;
        Ok((tape.add_row(out, p.var(branch.fc2_b))?, trace))
    }

    /// Final encoder and head over `[1×M]` branch embeddings.
    pub fn aggregate<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        branch_embeddings: &[Var],
    ) -> Result<(Var, Var, EncoderTrace)> {
        let tokens = tape.concat(branch_embeddings, Axis::Rows)?;
        let (cls, trace) = self.aggregator.forward(tape, p, tokens, self.rule())?;
        let logit = tape.matmul(cls, p.var(self.head_w))?;
        let logit = tape.add_row(logit, p.var(self.head_b))?;
        Ok((logit, cls, trace))
    }

    pub fn forward_sample<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        sample: &InterfacePairSample,
    ) -> Result<SampleForward> {
        let inputs = split_groups(sample, &self.config.groups)?;
        let mut branch_embeddings = Vec::with_capacity(inputs.len());
        let mut branch_traces = Vec::with_capacity(inputs.len());
        for (g, input) in inputs.iter().enumerate() {
            let (emb, trace) = self.branch_forward(tape, p, g, input)?;
            branch_embeddings.push(emb);
            branch_traces.push(trace);
        }
        let (logit, class_embedding, aggregator_trace) =
            self.aggregate(tape, p, &branch_embeddings)?;
        Ok(SampleForward {
            logit,
            class_embedding,
            branch_embeddings,
            branch_traces,
            aggregator_trace,
        })
    }

    /// Runs every sample on `tape` with parameters `p` bound from a store of
    /// the same layout as [`PumbaModel::params`].
    pub fn forward_batch<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        samples: &[&InterfacePairSample],
    ) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let outs = samples
            .iter()
            .map(|s| self.forward_sample(tape, p, s))
            .collect::<Result<Vec<_>>>()?;
        let logits: Vec<_> = outs.iter().map(|o| o.logit).collect();
        let embs: Vec<_> = outs.iter().map(|o| o.class_embedding).collect();
        let logits = tape.concat(&logits, Axis::Rows)?;
        let scores = tape.sigmoid(logits);
        let embeddings = tape.concat(&embs, Axis::Rows)?;
        Ok(BatchForward {
            logits,
            scores,
            embeddings,
            samples: outs,
        })
    }

    /// Embedding of branch `g` for one group input.
    pub fn hybrid_branch(&self, g: usize, input: &GroupInput) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let (emb, _) = self.branch_forward(&mut tape, &p, g, input)?;
        tape.value(emb).clone().reshape([self.embed_dim()])
    }

    pub fn score(&self, sample: &InterfacePairSample) -> Result<BindingScore> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward_sample(&mut tape, &p, sample)?;
        let logit = tape.value(out.logit).data()[0];
        let mut rows = Vec::new();
        for &e in &out.branch_embeddings {
            rows.extend_from_slice(tape.value(e).data());
        }
        Ok(BindingScore {
            score: crate::tensor::sigmoid_scalar(logit),
            branch_embeddings: Tensor::new([out.branch_embeddings.len(), self.embed_dim()], rows)?,
        })
    }

    /// Score computed from given `[5×M]` branch embeddings.
    pub fn score_from_branch_embeddings(&self, embeddings: &Tensor<f32>) -> Result<f32> {
        let (rows, m) = embeddings.dims2();
        if rows != GROUP_NAMES.len() || m != self.embed_dim() {
            return Err(Error::dim(
                "score_from_branch_embeddings",
                embeddings.shape(),
                &[GROUP_NAMES.len(), self.embed_dim()],
            ));
        }
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let vars: Vec<_> = (0..rows)
            .map(|r| tape.constant(Tensor::row(embeddings.row_slice(r).to_vec())))
            .collect();
        let (logit, _, _) = self.aggregate(&mut tape, &p, &vars)?;
        Ok(crate::tensor::sigmoid_scalar(tape.value(logit).data()[0]))
    }

    /// Score plus the hidden attention of every encoder.
    pub fn attention(&self, sample: &InterfacePairSample) -> Result<SampleAttention> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward_sample(&mut tape, &p, sample)?;
        let branch_stacks = out
            .branch_traces
            .iter()
            .map(|t| t.attention_stack(&tape))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleAttention {
            score: crate::tensor::sigmoid_scalar(tape.value(out.logit).data()[0]),
            branch_class_index: out.branch_traces[0].class_index,
            branch_stacks,
            aggregator_stack: out.aggregator_trace.attention_stack(&tape)?,
        })
    }
}
