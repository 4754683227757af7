"""Asymmetric dual-path spoofing-aware speaker model.

Layout (``N`` blocks, each with its own parameters)::

    X ─┬─ left:  pre-LN multi-head self-attention + residual ──┐
       └─ right: SE-Res2 dilated conv block + residual ────────┤
                                       H_fuse  = LN(H_left + H_right)
                                       H_final = LN(ReLU(Conv(H_fuse)) + H_fuse)

The next block consumes ``H_final``.  Left outputs are averaged into the
spoof representation, right outputs into the speaker representation, and the
block outputs are summed and normalised into the fused representation.  Each
representation goes through a 1-D convolution and average pooling to give
``e_spoof``, ``e_asv`` and ``e_fuse``.  ``e_fuse`` feeds the SASV back-end for
both its speaker and its countermeasure evidence.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-7
LN_EPS = 1e-8
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 24
    num_speakers: int = 2
    num_blocks: int = 2
    model_dim: int = 32
    attention_heads: int = 4
    conv_kernel: int = 3
    embedding_dim: int = 32
    res2_scale: int = 4
    se_bottleneck: int = 8
    backend_hidden: int = 32
    speaker_only: bool = False

    def __post_init__(self):
        for name in (
            "feature_dim",
            "num_speakers",
            "num_blocks",
            "model_dim",
            "attention_heads",
            "conv_kernel",
            "embedding_dim",
            "res2_scale",
            "se_bottleneck",
            "backend_hidden",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.attention_heads:
            raise ValueError("attention_heads must divide model_dim")
        if self.model_dim % self.res2_scale:
            raise ValueError("res2_scale must divide model_dim")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")


def layer_norm(dim: int) -> nn.LayerNorm:
    return nn.LayerNorm(dim, eps=LN_EPS)


def _conv_time(conv: nn.Conv1d, h: torch.Tensor) -> torch.Tensor:
    """Apply a channels-first conv to a (..., frames, dim) tensor."""
    return conv(h.transpose(-1, -2)).transpose(-1, -2)


class SelfAttentionBranch(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = layer_norm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        *lead, frames, dim = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        split = lambda t: t.reshape(*lead, frames, self.heads, dim // self.heads).transpose(-2, -3)
        q, k, v = split(q), split(k), split(v)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dim // self.heads), dim=-1)
        o = (att @ v).transpose(-2, -3).reshape(*lead, frames, dim)
        return x + self.out(o)


class SERes2Branch(nn.Module):
    """Squeeze-excitation Res2 block with dilated convolutions (no batch norm)."""

    def __init__(self, dim: int, kernel: int, dilation: int, scale: int, bottleneck: int):
        super().__init__()
        width = dim // scale
        self.scale = scale
        self.conv_in = nn.Conv1d(dim, dim, 1)
        self.convs = nn.ModuleList(
            nn.Conv1d(width, width, kernel, dilation=dilation, padding=dilation * (kernel // 2))
            for _ in range(scale - 1)
        )
        self.conv_out = nn.Conv1d(dim, dim, 1)
        self.se_down = nn.Linear(dim, bottleneck)
        self.se_up = nn.Linear(bottleneck, dim)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        h = F.relu(self.conv_in(x.transpose(1, 2)))
        chunks = h.chunk(self.scale, dim=1)
        ys, prev = [chunks[0]], None
        for chunk, conv in zip(chunks[1:], self.convs):
            prev = F.relu(conv(chunk if prev is None else chunk + prev))
            ys.append(prev)
        h = F.relu(self.conv_out(torch.cat(ys, dim=1)))
        gate = torch.sigmoid(self.se_up(F.relu(self.se_down(h.mean(dim=2)))))
        out = x + (h * gate.unsqueeze(2)).transpose(1, 2)
        return out.squeeze(0) if squeeze else out


class DualPathBlock(nn.Module):
    def __init__(self, config: ModelConfig, dilation: int):
        super().__init__()
        d, k = config.model_dim, config.conv_kernel
        self.left = SelfAttentionBranch(d, config.attention_heads)
        self.right = SERes2Branch(d, k, dilation, config.res2_scale, config.se_bottleneck)
        self.fuse_norm = layer_norm(d)
        self.conv = nn.Conv1d(d, d, k, padding=k // 2)
        self.final_norm = layer_norm(d)

    def forward(self, x, speaker_only: bool = False):
        return block_forward(x, self, speaker_only)


def block_forward(x: torch.Tensor, block: DualPathBlock, speaker_only: bool = False):
    """Run one block; returns ``(H_left, H_right, H_fuse, H_final)``.

    ``x`` is ``frames x model_dim`` or batched ``B x frames x model_dim``.  In
    speaker-only mode the left branch and the fusion are skipped and the right
    branch output is passed on as the block output.
    """
    if x.dim() not in (2, 3) or x.shape[-1] != block.fuse_norm.normalized_shape[0]:
        raise ValueError(f"block input has shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("block input is not finite")
    h_right = block.right(x)
    if speaker_only:
        return None, h_right, None, h_right
    h_left = block.left(x)
    h_fuse = block.fuse_norm(h_left + h_right)
    h_final = block.final_norm(F.relu(_conv_time(block.conv, h_fuse)) + h_fuse)
    return h_left, h_right, h_fuse, h_final


def aggregate_branch(hs: Sequence[torch.Tensor]) -> torch.Tensor:
    if not hs:
        raise ValueError("nothing to aggregate")
    return torch.stack(list(hs)).mean(dim=0)


class EmbeddingHead(nn.Module):
    def __init__(self, dim: int, embedding_dim: int, kernel: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, embedding_dim, kernel, padding=kernel // 2)

    def forward(self, h):
        return embed(h, self)


def embed(h: torch.Tensor, head: EmbeddingHead) -> torch.Tensor:
    """1-D convolution over time followed by average pooling over frames."""
    if h.shape[-2] < 1:
        raise ValueError("need at least one frame")
    squeeze = h.dim() == 2
    if squeeze:
        h = h.unsqueeze(0)
    e = head.conv(h.transpose(1, 2)).mean(dim=2)
    return e.squeeze(0) if squeeze else e


def fuse_embedding(h_finals: Sequence[torch.Tensor], norm: nn.LayerNorm, head: EmbeddingHead):
    """``e_fuse = embed(LN(sum_n H_final[n]))``; also returns the normalised sum."""
    if not h_finals:
        raise ValueError("nothing to fuse")
    h = norm(torch.stack(list(h_finals)).sum(dim=0))
    return embed(h, head), h


def spoof_prob(e_spoof: torch.Tensor, theta_spoof: torch.Tensor) -> torch.Tensor:
    """Probability that the utterance is bona fide: sigmoid(e . theta)."""
    return torch.sigmoid(e_spoof @ theta_spoof)


def spoof_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy with bona fide = 1, spoof = 0."""
    p = probs.clamp(eps, 1 - eps)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def asv_softmax(e_asv: torch.Tensor, theta_asv: torch.Tensor) -> torch.Tensor:
    """Softmax over per-speaker linear logits (max-subtracted by torch)."""
    return torch.softmax(e_asv @ theta_asv.T, dim=-1)


def asv_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    true = probs.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(true.clamp(min=eps)).mean()


class SasvBackend(nn.Module):
    """Trial classifier on fused embeddings.

    Enrollment embeddings are attention-pooled with the test embedding as the
    query, which makes the score invariant to enrollment order.  The speaker
    evidence is the cosine and element-wise product of the unit-normalised
    pooled and test embeddings; the countermeasure evidence is the raw test
    embedding.
    """

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.hidden = nn.Linear(2 * dim + 1, hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, enroll, test):
        return sasv_score(enroll, test, self)


def sasv_score(enroll: torch.Tensor, test: torch.Tensor, backend: SasvBackend) -> torch.Tensor:
    """Score trials: ``enroll`` is (n, K, E) or (K, E); ``test`` is (n, E) or (E,)."""
    single = test.dim() == 1
    if single:
        enroll, test = enroll.unsqueeze(0), test.unsqueeze(0)
    if enroll.shape[1] < 1:
        raise ValueError("empty enrollment set")
    logits = (backend.key(enroll) @ backend.query(test).unsqueeze(-1)).squeeze(-1)
    att = torch.softmax(logits / math.sqrt(test.shape[-1]), dim=1)
    pooled = (att.unsqueeze(-1) * enroll).sum(dim=1)
    prod = F.normalize(pooled, dim=-1) * F.normalize(test, dim=-1)
    feats = torch.cat([prod.sum(dim=-1, keepdim=True), prod, test], dim=-1)
    score = torch.sigmoid(backend.out(F.relu(backend.hidden(feats))).squeeze(-1))
    return score[0] if single else score


def cosine_score(enroll: torch.Tensor, test: torch.Tensor) -> torch.Tensor:
    """Cosine between the mean enrollment embedding and the test embedding."""
    return F.cosine_similarity(enroll.mean(dim=-2), test, dim=-1)


@dataclass
class DualPathActivations:
    h_left: list = field(default_factory=list)
    h_right: list = field(default_factory=list)
    h_fuse: list = field(default_factory=list)
    h_final: list = field(default_factory=list)
    h_spoof: torch.Tensor | None = None
    h_asv: torch.Tensor | None = None
    h_fuse_sum: torch.Tensor | None = None
    e_spoof: torch.Tensor | None = None
    e_asv: torch.Tensor | None = None
    e_fuse: torch.Tensor | None = None


@dataclass
class UtteranceOutputs:
    asv_logits: torch.Tensor
    e_asv: torch.Tensor
    spoof_prob: torch.Tensor | None
    e_fuse: torch.Tensor | None
    activations: DualPathActivations | None = None

    @property
    def asv_probs(self):
        return torch.softmax(self.asv_logits, dim=-1)


@dataclass
class TrialOutputs:
    utterances: UtteranceOutputs
    sasv_score: torch.Tensor | None
    asv_score: torch.Tensor


class DualPathModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, e, k = config.model_dim, config.embedding_dim, config.conv_kernel
        self.input_proj = nn.Linear(config.feature_dim, d)
        self.blocks = nn.ModuleList(DualPathBlock(config, dilation=n + 1) for n in range(config.num_blocks))
        self.spoof_embed = EmbeddingHead(d, e, k)
        self.asv_embed = EmbeddingHead(d, e, k)
        self.fuse_norm = layer_norm(d)
        self.fuse_embed = EmbeddingHead(d, e, k)
        self.theta_spoof = nn.Parameter(torch.randn(e) / math.sqrt(e))
        self.theta_asv = nn.Parameter(torch.randn(config.num_speakers, e) / math.sqrt(e))
        self.backend = SasvBackend(e, config.backend_hidden)

    @property
    def speaker_only(self) -> bool:
        return self.config.speaker_only

    def forward(self, features: torch.Tensor, keep_activations: bool = False) -> UtteranceOutputs:
        """Embed a batch of utterances (B x frames x feature_dim)."""
        if not torch.isfinite(features).all():
            raise ValueError("features are not finite")
        x = self.input_proj(features)
        acts = DualPathActivations()
        for block in self.blocks:
            h_left, h_right, h_fuse, h_final = block_forward(x, block, self.speaker_only)
            acts.h_left.append(h_left)
            acts.h_right.append(h_right)
            acts.h_fuse.append(h_fuse)
            acts.h_final.append(h_final)
            x = h_final
        acts.h_asv = aggregate_branch(acts.h_right)
        acts.e_asv = embed(acts.h_asv, self.asv_embed)
        prob = None
        if not self.speaker_only:
            acts.h_spoof = aggregate_branch(acts.h_left)
            acts.e_spoof = embed(acts.h_spoof, self.spoof_embed)
            prob = spoof_prob(acts.e_spoof, self.theta_spoof)
            acts.e_fuse, acts.h_fuse_sum = fuse_embedding(acts.h_final, self.fuse_norm, self.fuse_embed)
        return UtteranceOutputs(
            asv_logits=acts.e_asv @ self.theta_asv.T,
            e_asv=acts.e_asv,
            spoof_prob=prob,
            e_fuse=acts.e_fuse,
            activations=acts if keep_activations else None,
        )

    def score(self, outputs: UtteranceOutputs, enroll_idx: torch.Tensor, test_idx: torch.Tensor):
        """Return ``(sasv, asv)`` scores for trials indexing into ``outputs``.

        ``sasv`` is None for the speaker-only model, whose single score is the
        cosine of speaker embeddings.
        """
        asv = cosine_score(outputs.e_asv[enroll_idx], outputs.e_asv[test_idx])
        if self.speaker_only:
            return None, asv
        return self.backend(outputs.e_fuse[enroll_idx], outputs.e_fuse[test_idx]), asv


def model_forward(model: DualPathModel, features, enroll_idx, test_idx, keep_activations=False) -> TrialOutputs:
    """Embed every utterance once, then score the trials that reference them."""
    outputs = model(features, keep_activations=keep_activations)
    sasv, asv = model.score(outputs, enroll_idx, test_idx)
    return TrialOutputs(outputs, sasv, asv)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: os.PathLike, model: DualPathModel, **meta) -> None:
    """Write parameters and config as an ``.npz`` container.

    Tensors are stored with their own dtype, so loading gives bit-identical
    parameters.  ``meta`` must be JSON-serialisable.
    """
    header = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "meta": meta}
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: os.PathLike) -> tuple[DualPathModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        model = DualPathModel(ModelConfig(**header["config"]))
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__header__"}
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    return model, header["meta"]
