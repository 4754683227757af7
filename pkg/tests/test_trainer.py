import math

import numpy as np
import pytest
import torch

from sasvmeta.datagen import CorpusSpec, synth_corpus, with_spoofs
from sasvmeta.model import DualPathModel, ModelConfig
from sasvmeta.protocol import build_cgp, sample_meta_task
from sasvmeta.trainer import (
    FeatureBank,
    MultiTaskLoss,
    TrainConfig,
    inner_adapt,
    loss_and_grad,
    lr_schedule,
    make_optimizer,
    outer_update,
    read_telemetry,
    smoothed,
    supervised_update,
    total_loss,
    train,
)

TINY = ModelConfig(num_blocks=1, model_dim=16, embedding_dim=8, se_bottleneck=4, backend_hidden=8)


@pytest.fixture(scope="module")
def corpus():
    spec = CorpusSpec(num_speakers=5, utterances_per_speaker_genre=2, frames=6, feature_dim=8, seed=11)
    return with_spoofs(synth_corpus(spec), spec.spoof_scale, spec.seed)


def quad(center, matrix):
    c = torch.tensor(center, dtype=torch.float64)
    m = torch.tensor(matrix, dtype=torch.float64)
    return lambda theta: 0.5 * (theta - c) @ m @ (theta - c)


def quad_loss(params, data):
    return data(params["theta"])


def angle(u, v):
    u, v = np.asarray(u, float), np.asarray(v, float)
    cos = u @ v / np.linalg.norm(u) / np.linalg.norm(v)
    return math.degrees(math.acos(np.clip(cos, -1, 1)))


# -- schedule ------------------------------------------------------------------------


def test_lr_schedule_values():
    assert lr_schedule(0) == 0.0
    assert lr_schedule(2500) == pytest.approx(0.0005)
    assert lr_schedule(5000) == pytest.approx(0.001)
    assert lr_schedule(15000) == pytest.approx(0.001 * 0.9999**10000)
    assert lr_schedule(3, warmup_steps=0, peak_lr=1.0, decay_rate=0.5) == 0.125
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_lr_schedule_shape():
    lrs = np.array([lr_schedule(s, 100, 0.01, 0.99) for s in range(300)])
    assert np.all(np.diff(lrs[:101]) > 0) and np.all(np.diff(lrs[100:]) < 0)
    assert lrs.max() == pytest.approx(0.01)


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": 0}, {"peak_lr": 0}, {"inner_steps": -1}, {"loss_weights": (0, 0, 0)}, {"decay_rate": 1.5}],
)
def test_bad_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# -- the bilevel update on an analytic probe ---------------------------------------------


def test_inner_adapt_closed_form():
    theta = {"theta": torch.zeros(2, dtype=torch.float64)}
    data = quad([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]])
    adapted = inner_adapt(theta, quad_loss, data, k=2, inner_lr=0.5)
    # each step halves the distance to the centre
    assert torch.allclose(adapted["theta"], torch.tensor([0.75, 1.5], dtype=torch.float64))
    assert inner_adapt(theta, quad_loss, data, k=0, inner_lr=0.5)["theta"] is theta["theta"]


def test_outer_gradient_taken_at_adapted_point():
    theta = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    params = {"theta": theta}
    meta_train = quad([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]])
    meta_test = quad([0.0, 0.0], [[20.0, 0.0], [0.0, 0.0]])
    adapted = inner_adapt(params, quad_loss, meta_train, k=1, inner_lr=0.5)
    assert adapted["theta"].tolist() == [0.5, 0.5]
    opt = torch.optim.SGD([theta], lr=0.1)
    result = outer_update(params, adapted, quad_loss, meta_train, meta_test, opt)
    # grad test at theta* = (10, 0), grad train at theta = (-1, -1)
    assert result.meta_grad["theta"].tolist() == [9.0, -1.0]
    assert theta.detach().tolist() == pytest.approx([-0.9, 0.1])
    _, g_test_theta = loss_and_grad(quad_loss, {"theta": torch.zeros(2, dtype=torch.float64)}, meta_test)
    _, g_train_theta = loss_and_grad(quad_loss, {"theta": torch.zeros(2, dtype=torch.float64)}, meta_train)
    naive = (g_test_theta["theta"] + g_train_theta["theta"]).tolist()
    assert angle(result.meta_grad["theta"], naive) > 10


def test_zero_gradient_leaves_adam_params():
    theta = torch.ones(2, dtype=torch.float64, requires_grad=True)
    params = {"theta": theta}
    flat = lambda t: 0.0 * t.sum()
    opt = make_optimizer(params, TrainConfig())
    for group in opt.param_groups:
        group["lr"] = 0.1
    outer_update(params, dict(params), quad_loss, flat, flat, opt)
    assert theta.tolist() == [1.0, 1.0]


def test_loss_and_grad_zero_for_unused():
    params = {"theta": torch.ones(2), "unused": torch.ones(3)}
    _, grads = loss_and_grad(quad_loss, params, quad([0, 0], [[1, 0], [0, 1]]))
    assert torch.equal(grads["unused"], torch.zeros(3))


def test_nonfinite_inner_gradient_raises():
    params = {"theta": torch.ones(1, dtype=torch.float64)}
    bad = lambda t: (t * float("inf")).sum()
    with pytest.raises(FloatingPointError):
        inner_adapt(params, quad_loss, bad, k=1, inner_lr=0.1)


# -- the multi-task loss ----------------------------------------------------------------------


def _setup(corpus, weights=(1.0, 1.0, 1.0), seed=0):
    speakers = sorted({u.speaker for u in corpus})
    torch.manual_seed(seed)
    model = DualPathModel(ModelConfig(**{**TINY.__dict__, "feature_dim": 8, "num_speakers": len(speakers)}))
    bank = FeatureBank(corpus, speakers)
    task = sample_meta_task(corpus, batch_size=16, seed=seed)
    return model, MultiTaskLoss(model, weights), bank.collate(task.meta_train), bank.collate(task.meta_test)


def test_total_loss_weights(corpus):
    model, _, batch, _ = _setup(corpus)
    from sasvmeta.model import model_forward

    out = model_forward(model, batch.features, batch.enroll_idx, batch.test_idx)
    full, comps = total_loss(out, batch, (1.0, 1.0, 1.0))
    assert full.item() == pytest.approx(sum(comps.values()), rel=1e-6)
    weighted, _ = total_loss(out, batch, (2.0, 0.5, 0.0))
    assert weighted.item() == pytest.approx(2 * comps["asv_loss"] + 0.5 * comps["spoof_loss"], rel=1e-6)
    _, only_asv = total_loss(out, batch, (1.0, 0.0, 0.0))
    assert only_asv["spoof_loss"] == 0.0 and only_asv["sasv_loss"] == 0.0


def test_collate_indices(corpus):
    _, _, batch, _ = _setup(corpus)
    n = batch.features.shape[0]
    assert batch.enroll_idx.max() < n and batch.test_idx.max() < n
    assert set(batch.labels.tolist()) <= {0.0, 1.0}
    assert (batch.speakers >= 0).all()


def test_supervised_step_descends(corpus):
    model, loss_fn, mtr, mte = _setup(corpus)
    params = dict(model.named_parameters())
    before = loss_fn(params, mtr).item() + loss_fn(params, mte).item()
    opt = torch.optim.SGD(list(params.values()), lr=1e-3)
    supervised_update(params, loss_fn, mtr, mte, opt)
    after = loss_fn(params, mtr).item() + loss_fn(params, mte).item()
    assert after < before


def test_meta_k0_matches_supervised_step(corpus):
    results = []
    for meta in (True, False):
        model, loss_fn, mtr, mte = _setup(corpus, seed=3)
        params = dict(model.named_parameters())
        opt = make_optimizer(params, TrainConfig())
        for group in opt.param_groups:
            group["lr"] = 1e-3
        if meta:
            adapted = inner_adapt(params, loss_fn, mtr, 0, 0.01)
            outer_update(params, adapted, loss_fn, mtr, mte, opt)
        else:
            supervised_update(params, loss_fn, mtr, mte, opt)
        results.append({k: v.detach().clone() for k, v in params.items()})
    assert all(torch.equal(results[0][k], results[1][k]) for k in results[0])


# -- the training loop ---------------------------------------------------------------------


def _run(corpus, tmp_path=None, **kwargs):
    cfg = TrainConfig(**{"epochs": 1, "batch_size": 16, "warmup_steps": 5, "peak_lr": 3e-3, "seed": 1, **kwargs})
    path = None if tmp_path is None else tmp_path / "telemetry.csv"
    return train(corpus, build_cgp(name="CGP I"), TINY, cfg, telemetry_path=path)


def test_loss_decreases(corpus):
    result = _run(corpus, epochs=2, steps_per_epoch=60)
    totals = [r.total for r in result.records]
    assert len(totals) == 120
    assert np.mean(totals[-20:]) < np.mean(totals[:20])


def test_training_deterministic(corpus):
    a, b = _run(corpus, steps_per_epoch=4), _run(corpus, steps_per_epoch=4)
    assert [r.total for r in a.records] == [r.total for r in b.records]
    for (_, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y)


def test_k0_trajectory_bit_identical_to_supervised(corpus):
    a = _run(corpus, steps_per_epoch=6, inner_steps=0)
    b = _run(corpus, steps_per_epoch=6, meta=False)
    assert [(r.inner_loss, r.outer_loss) for r in a.records] == [(r.inner_loss, r.outer_loss) for r in b.records]
    for (_, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y)


def test_meta_differs_from_supervised(corpus):
    a = _run(corpus, steps_per_epoch=3, inner_steps=1)
    b = _run(corpus, steps_per_epoch=3, meta=False)
    assert any(not torch.equal(x, y) for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))


def test_training_genres_respect_cgp(corpus):
    result = _run(corpus, steps_per_epoch=1)
    assert result.speakers == sorted({u.speaker for u in corpus})
    assert result.model.config.feature_dim == 8


def test_telemetry(corpus, tmp_path):
    result = _run(corpus, tmp_path, steps_per_epoch=5)
    rows = read_telemetry(tmp_path / "telemetry.csv")
    assert len(rows) == 5 == len(result.records)
    assert rows[3].lr == pytest.approx(lr_schedule(3, 5, 3e-3, 0.9999))
    assert rows[0].lr == 0.0
    assert rows == result.records
    header = (tmp_path / "telemetry.csv").read_text().splitlines()[0]
    assert header == "step,inner_loss,outer_loss,lr,asv_loss,spoof_loss,sasv_loss"


def test_speaker_only_training(corpus):
    cfg = TrainConfig(epochs=1, steps_per_epoch=3, batch_size=16, loss_weights=(1.0, 0.0, 0.0))
    model_cfg = ModelConfig(**{**TINY.__dict__, "speaker_only": True})
    result = train(corpus, None, model_cfg, cfg)
    assert all(r.spoof_loss == 0.0 and r.sasv_loss == 0.0 for r in result.records)
    with pytest.raises(ValueError):
        train(corpus, None, model_cfg, TrainConfig(epochs=1, steps_per_epoch=1, batch_size=16))


def test_smoothed():
    assert smoothed([1.0, 2.0, 3.0], window=5).tolist() == [1.0, 2.0, 3.0]
    assert smoothed([0.0, 2.0, 4.0, 6.0], window=2).tolist() == [1.0, 3.0, 5.0]
