//! The differentiable super-network: every candidate operation instantiated
//! at once, combined per decision slot by a softmax over architectural
//! parameters, with masking and node-by-node discretization.

use std::collections::BTreeSet;
use std::ops::Deref;

use crate::diffcore::{ParamId, ParamKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nnops::{
    batch_mse_loss, BlockCandidates, BlockChoices, DropoutGen, ForecastModel, ModelConfig,
    ModelParams, Weighted,
};
use crate::rng::Prng;
use crate::searchspace::{
    ActivationKind, ArchitectureSpec, AttentionKind, BlockSpec, EncodingKind, SearchSpaceConfig,
    SlotKind, WidthFactor,
};

/// One searchable decision slot. In a per-block (macro) space each block
/// owns five nodes; in a tied (micro) space five nodes span all blocks.
#[derive(Debug, Clone)]
pub struct MixedNode {
    /// Block index, or None when the decision is shared by every block.
    pub block: Option<usize>,
    pub slot: SlotKind,
    /// Candidate count n; candidates are indexed in the canonical enum
    /// order of the slot's kind.
    pub num_candidates: usize,
    /// Architectural logits, a vector parameter of length n.
    pub alpha: ParamId,
    /// Unmasked candidates participate in the softmax; masked ones
    /// contribute exactly zero.
    pub mask: Vec<bool>,
}

impl MixedNode {
    pub fn unmasked_indices(&self) -> Vec<usize> {
        (0..self.num_candidates).filter(|&j| self.mask[j]).collect()
    }

    pub fn num_unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_discretized(&self) -> bool {
        self.num_unmasked() == 1
    }

    pub fn survivor(&self) -> Option<usize> {
        if self.is_discretized() {
            self.mask.iter().position(|&m| m)
        } else {
            None
        }
    }
}

/// The super-network: a forecast model whose five decision slots per block
/// hold all candidates simultaneously.
pub struct HyperNetwork {
    pub cfg: ModelConfig,
    pub space: SearchSpaceConfig,
    pub params: ParamSet,
    pub ids: ModelParams,
    pub nodes: Vec<MixedNode>,
    candidates: BlockCandidates,
}

impl HyperNetwork {
    /// Build the super-network with uniformly initialized architectural
    /// parameters (all-zero logits).
    pub fn new(cfg: ModelConfig, space: SearchSpaceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        space.validate()?;
        let candidates = BlockCandidates::full(&space);
        let mut set = ParamSet::new();
        let mut rng = Prng::new(seed).split("hypernet-init");
        let per_block = vec![candidates.clone(); cfg.num_blocks];
        let ids = ModelParams::alloc(&mut set, &cfg, &per_block, &mut rng, 1.0)?;

        let slot_sizes = |slot: SlotKind| match slot {
            SlotKind::EncAttn => candidates.enc_attn.len(),
            SlotKind::EncFfn => candidates.enc_ffn.len(),
            SlotKind::Attn => candidates.attn.len(),
            SlotKind::Act => candidates.act.len(),
            SlotKind::Width => candidates.k.len(),
        };
        // Discretization order: block by block, enc_attn, attn, enc_ffn,
        // act, k within each block (or the same slot order once, tied).
        let slot_order = [
            SlotKind::EncAttn,
            SlotKind::Attn,
            SlotKind::EncFfn,
            SlotKind::Act,
            SlotKind::Width,
        ];
        let mut nodes = Vec::new();
        if space.per_block {
            for b in 0..cfg.num_blocks {
                for slot in slot_order {
                    let n = slot_sizes(slot);
                    let alpha = set.add_zeros(
                        &format!("alpha.block{b}.{}", slot.name()),
                        ParamKind::Arch,
                        vec![n],
                    );
                    nodes.push(MixedNode {
                        block: Some(b),
                        slot,
                        num_candidates: n,
                        alpha,
                        mask: vec![true; n],
                    });
                }
            }
        } else {
            for slot in slot_order {
                let n = slot_sizes(slot);
                let alpha = set.add_zeros(
                    &format!("alpha.shared.{}", slot.name()),
                    ParamKind::Arch,
                    vec![n],
                );
                nodes.push(MixedNode {
                    block: None,
                    slot,
                    num_candidates: n,
                    alpha,
                    mask: vec![true; n],
                });
            }
        }
        Ok(HyperNetwork {
            cfg,
            space,
            params: set,
            ids,
            nodes,
            candidates,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn candidates(&self) -> &BlockCandidates {
        &self.candidates
    }

    /// Human-readable candidate names of one node, in candidate order.
    pub fn candidate_names(&self, node: usize) -> Vec<String> {
        let n = &self.nodes[node];
        match n.slot {
            SlotKind::EncAttn => self.candidates.enc_attn.iter().map(|k| k.to_string()).collect(),
            SlotKind::EncFfn => self.candidates.enc_ffn.iter().map(|k| k.to_string()).collect(),
            SlotKind::Attn => self.candidates.attn.iter().map(|k| k.to_string()).collect(),
            SlotKind::Act => self.candidates.act.iter().map(|k| k.to_string()).collect(),
            SlotKind::Width => self.candidates.k.iter().map(|k| k.to_string()).collect(),
        }
    }

    /// The node governing (block, slot), accounting for tied spaces.
    pub fn node_for(&self, block: usize, slot: SlotKind) -> usize {
        self.nodes
            .iter()
            .position(|n| n.slot == slot && (n.block.is_none() || n.block == Some(block)))
            .expect("every (block, slot) pair has a node")
    }

    /// Every model parameter owned exclusively by one candidate of one node
    /// (empty for parameterless candidates such as activations).
    pub fn params_of_candidate(&self, node: usize, cand: usize) -> Vec<ParamId> {
        let n = &self.nodes[node];
        let blocks: Vec<usize> = match n.block {
            Some(b) => vec![b],
            None => (0..self.cfg.num_blocks).collect(),
        };
        let mut out = Vec::new();
        for b in blocks {
            let bp = &self.ids.blocks[b];
            match n.slot {
                SlotKind::EncAttn => {
                    if let Some(cp) = bp.enc_attn.get(&self.candidates.enc_attn[cand]) {
                        out.push(cp.depthwise);
                        out.push(cp.pointwise);
                    }
                }
                SlotKind::EncFfn => {
                    if let Some(cp) = bp.enc_ffn.get(&self.candidates.enc_ffn[cand]) {
                        out.push(cp.depthwise);
                        out.push(cp.pointwise);
                    }
                }
                SlotKind::Attn => {
                    if let Some(ids) = bp.score_weights.get(&self.candidates.attn[cand]) {
                        out.extend_from_slice(ids);
                    }
                }
                SlotKind::Act => {}
                SlotKind::Width => {
                    if let Some(fp) = bp.ffn.get(&self.candidates.k[cand]) {
                        out.push(fp.up);
                        out.push(fp.down);
                    }
                }
            }
        }
        out
    }

    /// Effective mixture weights of a node for inspection: softmax over the
    /// unmasked logits, zeros elsewhere.
    pub fn effective_weights(&self, node: usize) -> Vec<f64> {
        let n = &self.nodes[node];
        let alpha = &self.params.get(n.alpha).data;
        let unmasked = n.unmasked_indices();
        let mut out = vec![0.0; n.num_candidates];
        let max = unmasked
            .iter()
            .map(|&j| alpha[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = unmasked.iter().map(|&j| (alpha[j] - max).exp()).sum();
        for &j in &unmasked {
            out[j] = (alpha[j] - max).exp() / denom;
        }
        out
    }

    /// Record one node's mixture weights on the tape: softmax over the
    /// unmasked logits. Returns (candidate index, weight) pairs; a
    /// discretized node yields its survivor with no weight (exact
    /// short-circuit).
    fn node_weights_on_tape(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        node: usize,
    ) -> Result<Vec<(usize, Option<Var>)>> {
        let n = &self.nodes[node];
        let unmasked = n.unmasked_indices();
        if unmasked.is_empty() {
            return Err(Error::state("node has no unmasked candidates"));
        }
        if unmasked.len() == 1 {
            return Ok(vec![(unmasked[0], None)]);
        }
        let alpha = tape.param(params, n.alpha);
        let picked = tape.gather(alpha, &unmasked)?;
        let w = tape.softmax(picked, 0)?;
        let mut out = Vec::with_capacity(unmasked.len());
        for (pos, &j) in unmasked.iter().enumerate() {
            let wj = tape.index_scalar(w, pos)?;
            out.push((j, Some(wj)));
        }
        Ok(out)
    }

    /// Build the per-block slot choices for one forward pass. Mixture
    /// weights for a tied node are recorded once and shared by reference
    /// across blocks.
    pub fn choices_on_tape(&self, tape: &mut Tape) -> Result<Vec<BlockChoices>> {
        self.choices_on_tape_with(&self.params, tape)
    }

    /// Same as [`choices_on_tape`](Self::choices_on_tape) but reading from
    /// an explicit parameter set (used by gradient checking, which perturbs
    /// a copy of the parameters).
    pub fn choices_on_tape_with(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
    ) -> Result<Vec<BlockChoices>> {
        let mut node_weights: Vec<Vec<(usize, Option<Var>)>> = Vec::with_capacity(self.nodes.len());
        for i in 0..self.nodes.len() {
            node_weights.push(self.node_weights_on_tape(params, tape, i)?);
        }
        let mut out = Vec::with_capacity(self.cfg.num_blocks);
        for b in 0..self.cfg.num_blocks {
            let pick = |slot: SlotKind| &node_weights[self.node_for(b, slot)];
            let enc_attn: Vec<Weighted<EncodingKind>> = pick(SlotKind::EncAttn)
                .iter()
                .map(|&(j, w)| (self.candidates.enc_attn[j], w))
                .collect();
            let enc_ffn: Vec<Weighted<EncodingKind>> = pick(SlotKind::EncFfn)
                .iter()
                .map(|&(j, w)| (self.candidates.enc_ffn[j], w))
                .collect();
            let attn: Vec<Weighted<AttentionKind>> = pick(SlotKind::Attn)
                .iter()
                .map(|&(j, w)| (self.candidates.attn[j], w))
                .collect();
            let act: Vec<Weighted<ActivationKind>> = pick(SlotKind::Act)
                .iter()
                .map(|&(j, w)| (self.candidates.act[j], w))
                .collect();
            let k: Vec<Weighted<WidthFactor>> = pick(SlotKind::Width)
                .iter()
                .map(|&(j, w)| (self.candidates.k[j], w))
                .collect();
            out.push(BlockChoices {
                enc_attn,
                enc_ffn,
                attn,
                act,
                k,
            });
        }
        Ok(out)
    }

    /// Batch MSE loss of the mixed network, differentiable in both model
    /// and architectural parameters.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        batch: &[(&[f64], &[f64])],
        drop: &mut Option<DropoutGen<'_>>,
    ) -> Result<Var> {
        self.batch_loss_with(&self.params, tape, batch, drop)
    }

    /// Same as [`batch_loss`](Self::batch_loss) but reading from an explicit
    /// parameter set (used by gradient checking, which perturbs a copy of
    /// the parameters while keeping this network's structure).
    pub fn batch_loss_with(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        batch: &[(&[f64], &[f64])],
        drop: &mut Option<DropoutGen<'_>>,
    ) -> Result<Var> {
        let choices = self.choices_on_tape_with(params, tape)?;
        batch_mse_loss(tape, params, &self.ids, &self.cfg, &choices, batch, drop)
    }

    /// Temporarily mask one candidate; the returned guard restores the
    /// previous mask state when dropped. Requires at least two unmasked
    /// candidates so the masked network stays valid.
    pub fn mask_operation(&mut self, node: usize, op: usize) -> Result<MaskGuard<'_>> {
        let n = self
            .nodes
            .get(node)
            .ok_or_else(|| Error::usage(format!("node index {node} out of range")))?;
        if op >= n.num_candidates {
            return Err(Error::usage(format!(
                "candidate index {op} out of range for node {node}"
            )));
        }
        if !n.mask[op] {
            return Err(Error::state(format!(
                "candidate {op} on node {node} is already masked"
            )));
        }
        if n.num_unmasked() < 2 {
            return Err(Error::state(format!(
                "cannot mask the last unmasked candidate on node {node}"
            )));
        }
        self.nodes[node].mask[op] = false;
        Ok(MaskGuard {
            hn: self,
            node,
            op,
        })
    }

    /// Permanently keep a single candidate on a node. Re-discretizing to
    /// the same survivor is a no-op.
    pub fn discretize_node(&mut self, node: usize, keep: usize) -> Result<()> {
        let n = self
            .nodes
            .get_mut(node)
            .ok_or_else(|| Error::usage(format!("node index {node} out of range")))?;
        if keep >= n.num_candidates {
            return Err(Error::usage(format!(
                "candidate index {keep} out of range for node {node}"
            )));
        }
        if !n.mask[keep] {
            return Err(Error::usage(format!(
                "cannot discretize node {node} to masked candidate {keep}"
            )));
        }
        for (j, m) in n.mask.iter_mut().enumerate() {
            *m = j == keep;
        }
        Ok(())
    }

    pub fn fully_discretized(&self) -> bool {
        self.nodes.iter().all(|n| n.is_discretized())
    }

    /// Model parameters still reachable in the forward pass: everything
    /// shared plus the parameters of unmasked candidates.
    pub fn live_model_params(&self) -> Vec<ParamId> {
        let mut dead: BTreeSet<ParamId> = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for j in 0..n.num_candidates {
                if !n.mask[j] {
                    dead.extend(self.params_of_candidate(i, j));
                }
            }
        }
        self.params
            .ids_of_kind(ParamKind::Model)
            .into_iter()
            .filter(|id| !dead.contains(id))
            .collect()
    }

    pub fn arch_params(&self) -> Vec<ParamId> {
        self.params.ids_of_kind(ParamKind::Arch)
    }

    /// Raw bytes of every architectural parameter, for verifying that a
    /// procedure never moved them.
    pub fn alpha_fingerprint(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for id in self.arch_params() {
            for v in &self.params.get(id).data {
                out.push(v.to_bits());
            }
        }
        out
    }

    /// The survivor of every node as an architecture. Every node must be
    /// discretized.
    pub fn extract_spec(&self) -> Result<ArchitectureSpec> {
        let mut blocks = Vec::with_capacity(self.cfg.num_blocks);
        for b in 0..self.cfg.num_blocks {
            let survivor = |slot: SlotKind| -> Result<usize> {
                let idx = self.node_for(b, slot);
                self.nodes[idx].survivor().ok_or_else(|| {
                    Error::state(format!(
                        "node {idx} ({}) is not discretized",
                        slot.name()
                    ))
                })
            };
            blocks.push(BlockSpec {
                enc_attn: self.candidates.enc_attn[survivor(SlotKind::EncAttn)?],
                enc_ffn: self.candidates.enc_ffn[survivor(SlotKind::EncFfn)?],
                attn: self.candidates.attn[survivor(SlotKind::Attn)?],
                act: self.candidates.act[survivor(SlotKind::Act)?],
                k: self.candidates.k[survivor(SlotKind::Width)?],
            });
        }
        Ok(ArchitectureSpec { blocks })
    }

    /// Build the discretized sub-network as a standalone model with the
    /// hyper-network's trained weights copied in.
    pub fn extract_subnet(&self) -> Result<ForecastModel> {
        let spec = self.extract_spec()?;
        let mut model = ForecastModel::new(self.cfg.clone(), spec, 0)?;
        self.copy_weights_into(&mut model)?;
        Ok(model)
    }

    /// Copy every weight the sub-network shares with the hyper-network.
    /// The model's architecture must be contained in this space.
    pub fn copy_weights_into(&self, model: &mut ForecastModel) -> Result<()> {
        if model.cfg != self.cfg {
            return Err(Error::config("sub-network config differs from the hyper-network"));
        }
        let mut copies: Vec<(ParamId, ParamId)> = vec![
            (self.ids.patch_w, model.ids.patch_w),
            (self.ids.patch_b, model.ids.patch_b),
            (self.ids.pos, model.ids.pos),
            (self.ids.head_w, model.ids.head_w),
            (self.ids.head_b, model.ids.head_b),
        ];
        for (b, spec) in model.spec.blocks.iter().enumerate() {
            let src = &self.ids.blocks[b];
            let dst = &model.ids.blocks[b];
            copies.push((src.ln_attn.0, dst.ln_attn.0));
            copies.push((src.ln_attn.1, dst.ln_attn.1));
            copies.push((src.ln_ffn.0, dst.ln_ffn.0));
            copies.push((src.ln_ffn.1, dst.ln_ffn.1));
            for (s, d) in [
                (src.w_q, dst.w_q),
                (src.b_q, dst.b_q),
                (src.w_k, dst.w_k),
                (src.b_k, dst.b_k),
                (src.w_v, dst.w_v),
                (src.b_v, dst.b_v),
                (src.w_o, dst.w_o),
                (src.b_o, dst.b_o),
            ] {
                copies.push((s, d));
            }
            let missing = || Error::state("sub-network uses an operation absent from this space");
            let s_heads = src.score_weights.get(&spec.attn).ok_or_else(missing)?;
            let d_heads = dst.score_weights.get(&spec.attn).ok_or_else(missing)?;
            for (s, d) in s_heads.iter().zip(d_heads) {
                copies.push((*s, *d));
            }
            let s_ffn = src.ffn.get(&spec.k).ok_or_else(missing)?;
            let d_ffn = dst.ffn.get(&spec.k).ok_or_else(missing)?;
            copies.push((s_ffn.up, d_ffn.up));
            copies.push((s_ffn.down, d_ffn.down));
            for (s_map, d_map, kind) in [
                (&src.enc_attn, &dst.enc_attn, spec.enc_attn),
                (&src.enc_ffn, &dst.enc_ffn, spec.enc_ffn),
            ] {
                if kind.kernel().is_some() {
                    let s = s_map.get(&kind).ok_or_else(missing)?;
                    let d = d_map.get(&kind).ok_or_else(missing)?;
                    copies.push((s.depthwise, d.depthwise));
                    copies.push((s.pointwise, d.pointwise));
                }
            }
        }
        for (s, d) in copies {
            let data = self.params.get(s).data.clone();
            model.params.get_mut(d).data = data;
        }
        Ok(())
    }
}

/// Masked view of the hyper-network; restores the mask on drop.
pub struct MaskGuard<'a> {
    hn: &'a mut HyperNetwork,
    node: usize,
    op: usize,
}

impl Deref for MaskGuard<'_> {
    type Target = HyperNetwork;
    fn deref(&self) -> &HyperNetwork {
        self.hn
    }
}

impl Drop for MaskGuard<'_> {
    fn drop(&mut self) {
        self.hn.nodes[self.node].mask[self.op] = true;
    }
}
