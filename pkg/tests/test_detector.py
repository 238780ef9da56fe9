from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavesep.audio import SourceSet, synth_track
from wavesep.autodiff import Tensor, ops
from wavesep.detector import (MIN_WINDOWS, OUTPUT_OFFSET, OUTPUT_STRIDE, DetectorConfig, DetectorTrainConfig,
                              detector_forward, label_windows, load_detector, new_detector, output_centres,
                              output_length, reflect_edges, roc_auc, train_detector, window_probabilities, window_volumes)
from wavesep.errors import ContractError, ShapeError
from wavesep.windows import HOP_S, WINDOW_S, n_windows

SMALL = DetectorConfig(width=2)


def random_feats(rng, windows, batch=None):
    shape = (7, 48, windows) if batch is None else (batch, 7, 48, windows)
    return np.abs(rng.standard_normal(shape)).astype(np.float32) * 1e-3


def test_output_length_algebra():
    # two valid 5-wide convs then pool 5/2, twice
    for n in range(MIN_WINDOWS, 200):
        t = n - 8
        t = (t - 5) // 2 + 1 - 8
        assert output_length(n) == (t - 5) // 2 + 1
    assert output_length(MIN_WINDOWS) == 1
    assert output_length(MIN_WINDOWS - 1) == 0


@pytest.mark.parametrize("windows", [MIN_WINDOWS, 60, 101])
def test_forward_shape_and_range(windows):
    det = new_detector(SMALL, seed=0)
    probs = detector_forward(det, random_feats(np.random.default_rng(windows), windows))
    assert probs.shape == (4, output_length(windows))
    assert np.all((probs > 0) & (probs < 1))


def test_zero_weights_give_one_half():
    det = new_detector(SMALL, seed=0)
    for p in det.parameters():
        p.tensor.data[...] = 0.0
    probs = detector_forward(det, random_feats(np.random.default_rng(0), 50))
    np.testing.assert_array_equal(probs, 0.5)


def test_eval_forward_deterministic():
    det = new_detector(SMALL, seed=1)
    feats = random_feats(np.random.default_rng(1), 70)
    np.testing.assert_array_equal(detector_forward(det, feats), detector_forward(det, feats))


def test_short_or_misshaped_input_raises():
    det = new_detector(SMALL, seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        detector_forward(det, random_feats(rng, MIN_WINDOWS - 1))
    with pytest.raises(ShapeError):
        detector_forward(det, np.zeros((6, 48, 50), np.float32))


def test_window_probabilities_cover_every_window():
    det = new_detector(SMALL, seed=0)
    feats = random_feats(np.random.default_rng(2), 90)
    probs = window_probabilities(det, feats)
    assert probs.shape == (4, 90)
    raw = detector_forward(det, reflect_edges(feats))
    centres = output_centres(raw.shape[1]) - OUTPUT_OFFSET
    assert centres[0] == 0 and centres[-1] > 90 - OUTPUT_STRIDE - 1
    np.testing.assert_allclose(probs[:, centres], raw)


def test_window_probabilities_on_short_tracks():
    det = new_detector(SMALL, seed=0)
    for count in (1, 5, MIN_WINDOWS - 1):
        probs = window_probabilities(det, random_feats(np.random.default_rng(count), count))
        assert probs.shape == (4, count) and np.all((probs > 0) & (probs < 1))


def test_bce_at_one_half_is_ln2():
    y = np.random.default_rng(0).integers(0, 2, (3, 4, 7)).astype(np.float32)
    assert ops.bce_with_logits(Tensor(np.zeros((3, 4, 7), np.float32)), y).item() == pytest.approx(math.log(2))


def _separable_set(rng, tracks=4, windows=64):
    """Source i silent exactly where feature rows of band i are switched off."""
    feats, labels = [], []
    for _ in range(tracks):
        lab = np.zeros((4, windows), bool)
        f = random_feats(rng, windows) + 1e-3
        for i in range(4):
            start = rng.integers(0, windows - 24)
            lab[i, start:start + 24] = True
            f[:, 12 * i:12 * i + 12, lab[i]] = 0.0
        feats.append(f)
        labels.append(lab)
    return feats, labels


def test_loss_decreases_over_first_epochs():
    feats, labels = _separable_set(np.random.default_rng(0))
    cfg = DetectorTrainConfig(epochs=5, batch=8, lr=5e-3, crop=48, crop_stride=8, seed=0)
    _, history = train_detector(feats, labels, cfg, model=new_detector(SMALL, seed=0))
    assert all(b < a for a, b in zip(history, history[1:]))


def test_training_deterministic():
    feats, labels = _separable_set(np.random.default_rng(1), tracks=2)
    cfg = DetectorTrainConfig(epochs=2, batch=4, crop=48, crop_stride=8, seed=3)
    runs = [train_detector(feats, labels, cfg, model=new_detector(SMALL, seed=0))[0] for _ in range(2)]
    for p, q in zip(runs[0].parameters(), runs[1].parameters()):
        assert p.tensor.data.tobytes() == q.tensor.data.tobytes()


def test_empty_training_set_raises():
    with pytest.raises(ContractError):
        train_detector([], [], DetectorTrainConfig(epochs=1))


def test_checkpoint_roundtrip(tmp_path):
    feats, labels = _separable_set(np.random.default_rng(2), tracks=1)
    det, _ = train_detector(feats, labels, DetectorTrainConfig(epochs=1, batch=4, crop=48, crop_stride=8),
                            model=new_detector(SMALL, seed=0))
    det.save(tmp_path / "d.ckpt")
    back = load_detector(tmp_path / "d.ckpt")
    assert back.config == det.config
    probe = random_feats(np.random.default_rng(3), 60)
    assert detector_forward(back, probe).tobytes() == detector_forward(det, probe).tobytes()


def test_layer_widths_follow_multiplier():
    w = 3
    det = new_detector(DetectorConfig(width=w), seed=0)
    shapes = {name: p.shape for name, p in det.params.items()}
    assert shapes["block1.conv1.weight"] == (w, 7, 5, 5)
    assert shapes["block1.conv3.weight"] == (2 * w, w, 1, 1)
    assert shapes["block2.conv3.weight"] == (4 * w, 2 * w, 1, 1)
    assert shapes["collapse.weight"][:2] == (8 * w, 4 * w)
    assert shapes["lstm.1.w_ih"] == (2, 32 * w, 16 * w)
    assert shapes["head.conv1.weight"] == (8 * w, 16 * w, 1, 1)
    assert shapes["head.conv2.weight"] == (4, 8 * w, 1, 1)
    assert DetectorConfig.full_scale().width == 128


# ---- labels ----------------------------------------------------------------

def test_digital_zero_bass_window_is_silent():
    rate = 8000
    stems = np.random.default_rng(0).standard_normal((4, 1, 2 * rate)).astype(np.float32)
    stems[1] = 0.0
    labels = label_windows(SourceSet(stems, rate))
    assert labels[1].all()
    assert not labels[[0, 2, 3]].any()


def test_equal_energy_orthogonal_sources_are_not_silent():
    rate = 8000
    n = int(WINDOW_S * rate)
    t = np.arange(n) / rate
    # integer cycles per window keeps the sines orthogonal
    stems = np.stack([np.sin(2 * np.pi * f * t) for f in (100, 200, 300, 400)])[:, None, :]
    vol = window_volumes(SourceSet(stems.astype(np.float32), rate))
    np.testing.assert_allclose(vol, -10 * np.log10(4), atol=1e-3)
    assert not label_windows(SourceSet(stems.astype(np.float32), rate)).any()


def test_planted_silence_labels():
    rate = 8000
    start_s, end_s = 4.0, 12.0
    track = synth_track(5, 20.0, rate, channels=1, mutes=[(1, start_s, end_s)])
    labels = label_windows(track)
    count = n_windows(track.frames, rate)
    t0 = np.arange(count) * HOP_S
    inside = (t0 >= start_s) & (t0 + WINDOW_S <= end_s)
    # windows wholly inside the mute carry digital zero for the bass
    assert labels[1, inside].all()
    # labels only extend past the interval by less than one window
    near = (t0 + WINDOW_S > start_s - WINDOW_S) & (t0 < end_s + WINDOW_S)
    assert not labels[1, ~near].any()


# ---- AUC -------------------------------------------------------------------

def brute_auc(scores, positives):
    pos = scores[positives]
    neg = scores[~positives]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60))
def test_roc_auc_matches_pair_count(seed, n):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(n), 1)  # coarse grid forces ties
    positives = rng.random(n) < 0.5
    positives[0], positives[1] = True, False
    assert roc_auc(scores, positives) == pytest.approx(brute_auc(scores, positives), abs=1e-12)


def test_roc_auc_degenerate():
    assert math.isnan(roc_auc([0.1, 0.2], [True, True]))
    assert roc_auc([0.1, 0.9], [False, True]) == 1.0
