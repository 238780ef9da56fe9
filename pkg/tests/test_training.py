from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavesep.autodiff import AdamState, Tensor, ops
from wavesep.errors import ContractError, ShapeError
from wavesep.model import ModelConfig, new_model
from wavesep.training import (TrainConfig, UnlabeledSets, augment, lr_at, remix_loss, remix_step,
                              separation_loss, train, train_epoch)

TINY = ModelConfig(depth=2, input_channels=1, initial_channels=4, sample_rate=8000)


def test_lr_schedule_points():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(5e-4)
    assert lr_at(160, cfg) == pytest.approx(1e-4)
    assert lr_at(320, cfg) == pytest.approx(2e-5)


def test_lr_schedule_is_step_function():
    cfg = TrainConfig()
    values = [lr_at(e, cfg) for e in range(401)]
    for e in range(1, 401):
        if e % 160:
            assert values[e] == values[e - 1]
        else:
            assert values[e] == pytest.approx(values[e - 1] / 5)


def test_constant_offset_loss_sums_sources():
    ref = np.random.default_rng(0).standard_normal((3, 4, 2, 50)).astype(np.float32)
    assert separation_loss(Tensor(ref + 0.1), ref).item() == pytest.approx(0.4, rel=1e-5)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        separation_loss(Tensor(np.zeros((1, 4, 1, 5))), np.zeros((1, 4, 1, 6)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.sampled_from([1, 2]))
def test_augment_preserves_energy_multiset(seed, batch, channels):
    rng = np.random.default_rng(seed)
    stems = rng.standard_normal((batch, 4, channels, 37)).astype(np.float32)
    out = augment(stems, np.random.default_rng(seed + 1))
    assert out.shape == stems.shape
    before = np.sort((stems.astype(np.float64) ** 2).sum(axis=(2, 3)), axis=0)
    after = np.sort((out.astype(np.float64) ** 2).sum(axis=(2, 3)), axis=0)
    np.testing.assert_allclose(after, before, rtol=1e-6)


def test_augment_shift_is_shared_by_channels():
    stems = np.zeros((1, 4, 2, 16), np.float32)
    stems[0, :, :, 3] = [1.0, 2.0]  # one impulse per channel at the same time
    out = augment(stems, np.random.default_rng(5))
    for s in range(4):
        peaks = np.flatnonzero(np.abs(out[0, s]).sum(axis=0))
        assert len(peaks) == 1
        assert sorted(np.abs(out[0, s, :, peaks[0]])) == [1.0, 2.0]


def test_augment_deterministic():
    stems = np.random.default_rng(0).standard_normal((3, 4, 2, 20)).astype(np.float32)
    np.testing.assert_array_equal(augment(stems, np.random.default_rng(1)), augment(stems, np.random.default_rng(1)))


def test_train_epoch_deterministic(tiny_dataset):
    finals = []
    for _ in range(2):
        model = new_model(TINY, seed=0)
        stats = train_epoch(model, tiny_dataset, TrainConfig(batch_size=4, seed=3), AdamState(), 0)
        finals.append([p.tensor.data.copy() for p in model.parameters()])
    assert stats.batches == 4
    for a, b in zip(*finals):
        assert a.tobytes() == b.tobytes()


def test_train_logs_key_value_lines(tiny_dataset):
    lines = []
    train(new_model(TINY, seed=0), tiny_dataset, TrainConfig(epochs=2, batch_size=8), log=lines.append)
    assert len(lines) == 2
    fields = dict(item.split("=") for item in lines[1].split())
    assert fields["epoch"] == "1"
    assert {"loss", "remix_loss", "remix_steps", "lr"} <= set(fields)


def test_remix_loss_lambda_zero_is_l1_on_source():
    rng = np.random.default_rng(0)
    est = Tensor(rng.standard_normal((1, 4, 1, 30)).astype(np.float32))
    target = rng.standard_normal((1, 30)).astype(np.float32)
    excerpt = rng.standard_normal((1, 30)).astype(np.float32)
    for i in range(4):
        got = remix_loss(est, target, excerpt, i, 0.0).item()
        assert got == ops.l1_loss(ops.index(est, (0, i)), target).item()


def test_remix_loss_zero_for_perfect_model():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((1, 30)).astype(np.float32)
    m = rng.standard_normal((3, 1, 30)).astype(np.float32)
    est = np.zeros((1, 4, 1, 30), np.float32)
    est[0, 2] = s
    est[0, [0, 1, 3]] = m
    assert remix_loss(Tensor(est), s, m.sum(axis=0), 2, 1e-6).item() == 0.0


def _excerpts(rng, count=2, frames=12000):
    return UnlabeledSets({"bass": [rng.standard_normal((1, frames)).astype(np.float32) * 0.1
                                   for _ in range(count)]})


def test_remix_step_leaves_main_optimizer_untouched(tiny_dataset):
    model = new_model(TINY, seed=0)
    cfg = TrainConfig(batch_size=4, remix_enabled=True, remix_probability=1.0)
    main = AdamState(lr=cfg.lr)
    train_epoch(model, tiny_dataset, cfg, main, 0)
    before = main.snapshot()
    remix = AdamState(lr=cfg.lr / 10)
    loss = remix_step(model, _excerpts(np.random.default_rng(0)), tiny_dataset, cfg, remix,
                      np.random.default_rng(1))
    assert loss is not None and remix.step == 1
    after = main.snapshot()
    assert after["step"] == before["step"]
    for key in before["m"]:
        assert after["m"][key].tobytes() == before["m"][key].tobytes()
        assert after["v"][key].tobytes() == before["v"][key].tobytes()


def test_remix_step_skipped_without_excerpts(tiny_dataset):
    model = new_model(TINY, seed=0)
    cfg = TrainConfig(batch_size=4, remix_enabled=True, remix_probability=1.0)
    stats = train_epoch(model, tiny_dataset, cfg, AdamState(), 0, UnlabeledSets({}), AdamState())
    assert stats.remix_steps == 0 and stats.remix_skipped == stats.batches


def test_remix_uses_tenth_of_main_lr(tiny_dataset):
    model = new_model(TINY, seed=0)
    cfg = TrainConfig(batch_size=4, remix_enabled=True, remix_probability=1.0)
    remix = AdamState()
    stats = train_epoch(model, tiny_dataset, cfg, AdamState(), 0, _excerpts(np.random.default_rng(2)), remix)
    assert stats.remix_steps == stats.batches
    assert remix.lr == pytest.approx(cfg.lr / 10)


def test_other_excerpts_are_never_used():
    sets = UnlabeledSets.prepare({"other": [], "drums": []}, 8000, True)
    assert sets.available() == []


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(loss="l3")
    with pytest.raises(ContractError):
        TrainConfig(remix_probability=1.5)
