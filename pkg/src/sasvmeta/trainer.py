"""Bilevel (meta-learning) training of the dual-path model.

One optimiser step consumes one meta-task.  With ``inner_steps = k``::

    theta*  = theta - inner_lr * grad L(theta, meta_train)      (k times)
    g       = grad L(theta*, meta_test) + grad L(theta, meta_train)
    theta  <- Adam(theta, g)

The meta-test gradient is taken at the adapted parameters and treated as the
gradient at ``theta`` (first-order approximation).  With ``k = 0`` this is
plain supervised multi-task training on the union of both halves.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .datagen import Utterance
from .model import DualPathModel, ModelConfig, asv_loss, model_forward, spoof_loss
from .protocol import DEFAULT_MIX, CgpProtocol, MetaTaskSampler, TrialPair, filter_training

log = logging.getLogger(__name__)

Params = dict[str, torch.Tensor]
LossFn = Callable[[Params, object], torch.Tensor]

TELEMETRY_FIELDS = ("step", "inner_loss", "outer_loss", "lr", "asv_loss", "spoof_loss", "sasv_loss")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 64
    inner_steps: int = 1
    inner_lr: float = 0.01
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    warmup_steps: int = 5000
    peak_lr: float = 0.001
    decay_rate: float = 0.9999
    beta1: float = 0.9
    beta2: float = 0.98
    g_mtr: int | None = None
    meta: bool = True
    trial_mix: tuple[float, float, float] = DEFAULT_MIX
    steps_per_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        object.__setattr__(self, "trial_mix", tuple(float(m) for m in self.trial_mix))
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.peak_lr <= 0 or self.inner_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be nonnegative")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0 or not any(self.loss_weights):
            raise ValueError("loss_weights must be three nonnegative numbers, not all zero")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")


@dataclass
class StepRecord:
    step: int
    inner_loss: float
    outer_loss: float
    lr: float
    asv_loss: float = 0.0
    spoof_loss: float = 0.0
    sasv_loss: float = 0.0

    @property
    def total(self) -> float:
        return self.inner_loss + self.outer_loss


def lr_schedule(step: int, warmup_steps: int = 5000, peak_lr: float = 0.001, decay_rate: float = 0.9999) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then per-step exponential decay."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * decay_rate ** (step - warmup_steps)


# -- batches and the multi-task loss -----------------------------------------


@dataclass
class Batch:
    features: torch.Tensor
    speakers: torch.Tensor
    bona_fide: torch.Tensor
    enroll_idx: torch.Tensor
    test_idx: torch.Tensor
    labels: torch.Tensor


class FeatureBank:
    """All utterance features stacked in one tensor for cheap batch assembly."""

    def __init__(self, manifest: Sequence[Utterance], speakers: Sequence[str], dtype=torch.float32):
        self.row = {u.utt_id: i for i, u in enumerate(manifest)}
        self.features = torch.from_numpy(np.stack([u.features for u in manifest])).to(dtype)
        speaker_index = {s: i for i, s in enumerate(speakers)}
        self.speakers = torch.tensor([speaker_index.get(u.speaker, -1) for u in manifest])
        self.bona_fide = torch.tensor([0.0 if u.is_spoof else 1.0 for u in manifest], dtype=dtype)

    def collate(self, trials: Sequence[TrialPair]) -> Batch:
        order: dict[str, int] = {}
        for t in trials:
            for uid in (*t.enroll_utts, t.test_utt):
                order.setdefault(uid, len(order))
        rows = torch.tensor([self.row[uid] for uid in order])
        sizes = {len(t.enroll_utts) for t in trials}
        if len(sizes) != 1:
            raise ValueError("all trials in a batch need the same enrollment size")
        return Batch(
            features=self.features[rows],
            speakers=self.speakers[rows],
            bona_fide=self.bona_fide[rows],
            enroll_idx=torch.tensor([[order[u] for u in t.enroll_utts] for t in trials]),
            test_idx=torch.tensor([order[t.test_utt] for t in trials]),
            labels=torch.tensor([float(t.label) for t in trials], dtype=self.features.dtype),
        )


def total_loss(outputs, batch: Batch, weights: Sequence[float]) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the speaker, spoof and SASV losses.

    The speaker and spoof losses run over every utterance in the batch, the
    SASV loss (binary cross-entropy against the trial label) over the trials.
    Zero-weighted terms are not computed and reported as 0.
    """
    w_asv, w_spoof, w_sasv = weights
    utt = outputs.utterances
    terms = {}
    if w_asv:
        terms["asv_loss"] = (w_asv, asv_loss(utt.asv_probs, batch.speakers))
    if w_spoof:
        if utt.spoof_prob is None:
            raise ValueError("spoof loss requested from a speaker-only model")
        terms["spoof_loss"] = (w_spoof, spoof_loss(utt.spoof_prob, batch.bona_fide))
    if w_sasv:
        if outputs.sasv_score is None:
            raise ValueError("SASV loss requested from a speaker-only model")
        terms["sasv_loss"] = (w_sasv, spoof_loss(outputs.sasv_score, batch.labels))
    components = {"asv_loss": 0.0, "spoof_loss": 0.0, "sasv_loss": 0.0}
    total = 0.0
    for name, (w, value) in terms.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite {name}: {value.item()}")
        components[name] = value.item()
        total = total + w * value
    return total, components


class _TrialNet(nn.Module):
    def __init__(self, model: DualPathModel):
        super().__init__()
        self.model = model

    def forward(self, batch: Batch):
        return model_forward(self.model, batch.features, batch.enroll_idx, batch.test_idx)


class MultiTaskLoss:
    """``loss_fn(params, batch)`` for the model; keeps the last components."""

    def __init__(self, model: DualPathModel, weights: Sequence[float]):
        self.net = _TrialNet(model)
        self.weights = tuple(weights)
        self.last_components: dict[str, float] = {}

    def __call__(self, params: Params, batch: Batch) -> torch.Tensor:
        outputs = functional_call(self.net, {f"model.{k}": v for k, v in params.items()}, (batch,))
        loss, self.last_components = total_loss(outputs, batch, self.weights)
        return loss


# -- the bilevel step ---------------------------------------------------------


def _check_finite(grads: Params, what: str) -> None:
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite {what} gradient for {name}")


def loss_and_grad(loss_fn: LossFn, params: Params, data) -> tuple[float, Params]:
    """Evaluate ``loss_fn`` at ``params`` and return (loss, gradient dict).

    Parameters the loss does not depend on get zero gradients.
    """
    leaves = {k: v if v.requires_grad else v.detach().requires_grad_() for k, v in params.items()}
    loss = loss_fn(leaves, data)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = {
        k: torch.zeros_like(v) if g is None else g for (k, v), g in zip(leaves.items(), grads)
    }
    return loss.item(), out


def inner_adapt(
    params: Params, loss_fn: LossFn, data, k: int, inner_lr: float, start_grads: Params | None = None
) -> Params:
    """Take ``k`` plain gradient-descent steps on ``loss_fn`` from ``params``.

    Returns detached adapted tensors; ``k = 0`` returns ``params`` itself.
    ``start_grads`` may carry an already computed gradient at ``params``.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return dict(params)
    theta = {name: p.detach() for name, p in params.items()}
    for step in range(k):
        if step == 0 and start_grads is not None:
            grads = start_grads
        else:
            _, grads = loss_and_grad(loss_fn, theta, data)
        _check_finite(grads, "inner")
        theta = {name: theta[name] - inner_lr * grads[name] for name in theta}
    return theta


@dataclass
class OuterResult:
    meta_grad: Params
    inner_loss: float
    outer_loss: float
    inner_components: dict = field(default_factory=dict)
    outer_components: dict = field(default_factory=dict)


def _components(loss_fn):
    return dict(getattr(loss_fn, "last_components", {}))


def _apply(params: Params, grads: Params, optimizer: torch.optim.Optimizer) -> None:
    for name, p in params.items():
        p.grad = grads[name].detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def outer_update(
    params: Params,
    adapted: Params,
    loss_fn: LossFn,
    meta_train,
    meta_test,
    optimizer: torch.optim.Optimizer,
    train_grads: tuple[float, Params] | None = None,
    train_components: dict | None = None,
) -> OuterResult:
    """One optimiser step on ``L(adapted, meta_test) + L(params, meta_train)``.

    ``params`` must be the leaf tensors owned by ``optimizer``.  The meta-test
    term is differentiated at ``adapted``; its gradient is applied to
    ``params`` unchanged (first-order).
    """
    if train_grads is None:
        inner_loss, g_train = loss_and_grad(loss_fn, params, meta_train)
        train_components = _components(loss_fn)
    else:
        inner_loss, g_train = train_grads
    outer_loss, g_test = loss_and_grad(loss_fn, adapted, meta_test)
    test_components = _components(loss_fn)
    grads = {name: g_test[name] + g_train[name] for name in params}
    _check_finite(grads, "outer")
    _apply(params, grads, optimizer)
    return OuterResult(grads, inner_loss, outer_loss, train_components or {}, test_components)


def supervised_update(params: Params, loss_fn: LossFn, meta_train, meta_test, optimizer) -> OuterResult:
    """One optimiser step on ``L(params, meta_train) + L(params, meta_test)``."""
    inner_loss, g_train = loss_and_grad(loss_fn, params, meta_train)
    train_components = _components(loss_fn)
    outer_loss, g_test = loss_and_grad(loss_fn, params, meta_test)
    test_components = _components(loss_fn)
    grads = {name: g_train[name] + g_test[name] for name in params}
    _check_finite(grads, "supervised")
    _apply(params, grads, optimizer)
    return OuterResult(grads, inner_loss, outer_loss, train_components, test_components)


def make_optimizer(params: Params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(list(params.values()), lr=0.0, betas=(config.beta1, config.beta2))


# -- the training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    model: DualPathModel
    records: list[StepRecord]
    speakers: list[str]


def train(
    manifest: Sequence[Utterance],
    cgp: CgpProtocol | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    telemetry_path: os.PathLike | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train a model on the ``cgp`` training portion of ``manifest``.

    ``model_config.num_speakers`` and ``feature_dim`` are overridden from the
    data.  The run is a pure function of the inputs and ``train_config.seed``.
    """
    train_manifest = filter_training(manifest, cgp) if cgp is not None else list(manifest)
    if not train_manifest:
        raise ValueError("empty training manifest")
    speakers = sorted({u.speaker for u in train_manifest})
    model_config = replace(
        model_config, num_speakers=len(speakers), feature_dim=train_manifest[0].features.shape[1]
    )
    torch.manual_seed(train_config.seed)
    model = DualPathModel(model_config)
    bank = FeatureBank(train_manifest, speakers)
    sampler = MetaTaskSampler(
        train_manifest, train_config.batch_size, train_config.g_mtr, mix=train_config.trial_mix
    )
    params = dict(model.named_parameters())
    optimizer = make_optimizer(params, train_config)
    loss_fn = MultiTaskLoss(model, train_config.loss_weights)

    steps_per_epoch = train_config.steps_per_epoch or math.ceil(len(train_manifest) / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    records = []
    telemetry = _TelemetryWriter(telemetry_path)
    try:
        for step in range(total_steps):
            task = sampler.sample([train_config.seed, step])
            mtr, mte = bank.collate(task.meta_train), bank.collate(task.meta_test)
            lr = lr_schedule(step, train_config.warmup_steps, train_config.peak_lr, train_config.decay_rate)
            for group in optimizer.param_groups:
                group["lr"] = lr
            try:
                if train_config.meta:
                    start = loss_and_grad(loss_fn, params, mtr)
                    start_components = _components(loss_fn)
                    adapted = inner_adapt(
                        params, loss_fn, mtr, train_config.inner_steps, train_config.inner_lr, start_grads=start[1]
                    )
                    result = outer_update(params, adapted, loss_fn, mtr, mte, optimizer, start, start_components)
                else:
                    result = supervised_update(params, loss_fn, mtr, mte, optimizer)
            except FloatingPointError as err:
                raise FloatingPointError(f"step {step}: {err}") from err
            record = StepRecord(
                step,
                result.inner_loss,
                result.outer_loss,
                lr,
                **{
                    k: result.inner_components.get(k, 0.0) + result.outer_components.get(k, 0.0)
                    for k in ("asv_loss", "spoof_loss", "sasv_loss")
                },
            )
            if not all(math.isfinite(v) for v in asdict(record).values()):
                raise FloatingPointError(f"step {step}: non-finite loss {record}")
            records.append(record)
            telemetry.write(record)
            if step % 200 == 0:
                log.info("step %d lr %.2e inner %.4f outer %.4f", step, lr, record.inner_loss, record.outer_loss)
    finally:
        telemetry.close()
    return TrainResult(model, records, speakers)


class _TelemetryWriter:
    def __init__(self, path):
        self._file = None
        if path is not None:
            self._file = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._file, lineterminator="\n")
            self._writer.writerow(TELEMETRY_FIELDS)

    def write(self, record: StepRecord):
        if self._file is not None:
            row = asdict(record)
            self._writer.writerow([row["step"]] + [repr(float(row[k])) for k in TELEMETRY_FIELDS[1:]])

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None


def read_telemetry(path: os.PathLike) -> list[StepRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            StepRecord(int(r["step"]), *(float(r[k]) for k in TELEMETRY_FIELDS[1:]))
            for r in csv.DictReader(f)
        ]


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


__all__ = [
    "TrainConfig",
    "StepRecord",
    "Batch",
    "FeatureBank",
    "MultiTaskLoss",
    "lr_schedule",
    "total_loss",
    "loss_and_grad",
    "inner_adapt",
    "outer_update",
    "supervised_update",
    "make_optimizer",
    "train",
    "read_telemetry",
    "smoothed",
]
