from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavesep.audio import SourceSet
from wavesep.errors import ShapeError, UndefinedMetricError
from wavesep.metrics import (CAP_DB, TrackReport, aggregate, bss_eval, evaluate_track, is_silent, median,
                             relative_volume)


def _db(num, den):
    return float(np.clip(10 * np.log10(num / den), -CAP_DB, CAP_DB))


def oracle_metrics(est, refs, index):
    """Dense normal equations, no regularisation."""
    refs = np.asarray(refs, np.float64).reshape(len(refs), -1)
    est = np.asarray(est, np.float64).ravel()
    target = refs[index]
    s_target = target * (target @ est) / (target @ target)
    coef = np.linalg.solve(refs @ refs.T, refs @ est)
    proj = refs.T @ coef
    e_interf = proj - s_target
    e_artif = est - proj
    sdr = _db(s_target @ s_target, (e_interf + e_artif) @ (e_interf + e_artif))
    sir = _db(s_target @ s_target, e_interf @ e_interf)
    sar = _db(proj @ proj, e_artif @ e_artif)
    return sdr, sir, sar


def random_instance(rng):
    length = int(rng.integers(16, 257))
    refs = rng.standard_normal((4, length))
    mixing = rng.standard_normal(4) * rng.uniform(0.01, 1.0, 4)
    est = mixing @ refs + rng.uniform(0.01, 1.0) * rng.standard_normal(length)
    return est, refs, int(rng.integers(4))


def test_matches_normal_equation_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        est, refs, i = random_instance(rng)
        d = bss_eval(est, refs, i)
        ref = oracle_metrics(est, refs, i)
        worst = max(worst, *(abs(a - b) for a, b in zip((d.sdr, d.sir, d.sar), ref)))
    assert worst < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decomposition_identity_and_orthogonality(seed):
    rng = np.random.default_rng(seed)
    est, refs, i = random_instance(rng)
    d = bss_eval(est, refs, i)
    scale = np.linalg.norm(est)
    np.testing.assert_allclose(d.s_target + d.e_interf + d.e_artif, est, atol=1e-5 * scale)
    # artefacts are orthogonal to every reference, interference to the target
    assert np.max(np.abs(refs @ d.e_artif)) <= 1e-5 * scale * np.linalg.norm(refs, axis=1).max()
    assert abs(d.e_interf @ refs[i]) <= 1e-5 * scale * np.linalg.norm(refs[i])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    est, refs, i = random_instance(rng)
    a = bss_eval(est, refs, i)
    b = bss_eval(factor * est, refs, i)
    for m in ("sdr", "sir", "sar"):
        assert abs(getattr(a, m) - getattr(b, m)) < 1e-6


def test_perfect_estimate_hits_cap():
    rng = np.random.default_rng(1)
    refs = rng.standard_normal((4, 100))
    d = bss_eval(refs[2], refs, 2)
    assert d.sdr == CAP_DB and d.sir == CAP_DB and d.sar == CAP_DB


def test_silent_reference_is_undefined():
    refs = np.zeros((4, 10))
    refs[0] = 1.0
    with pytest.raises(UndefinedMetricError):
        bss_eval(np.ones(10), refs, 1)


def test_length_mismatch():
    with pytest.raises(ShapeError):
        bss_eval(np.ones(9), np.ones((4, 10)), 0)


def test_relative_volume_values():
    s = np.array([1.0, 0.0])
    assert relative_volume(s, np.array([1.0, 1.0])) == pytest.approx(10 * math.log10(0.5))
    assert relative_volume(np.zeros(2), np.ones(2)) == -math.inf
    with pytest.raises(UndefinedMetricError):
        relative_volume(np.ones(2), np.zeros(2))
    assert is_silent(-20.0, -20.0) and not is_silent(-19.9, -20.0)


def test_median_ignores_none():
    assert median([None, 3.0, 1.0, None, 2.0]) == 2.0
    assert median([1.0, 4.0]) == 2.5
    assert median([None]) is None


def _report(name, values):
    """values: source -> list of per-frame SDR (SIR/SAR mirror it)."""
    return TrackReport(name, {src: {m: list(v) for m in ("sdr", "sir", "sar")} for src, v in values.items()})


def test_aggregate_median_of_medians_fixture():
    # hand-computed fixture; None marks a skipped frame
    tracks = [
        _report("a", {"drums": [1.0, 2.0, 9.0], "bass": [4.0, None, 6.0], "other": [0.0], "vocals": [3.0, 3.0]}),
        _report("b", {"drums": [5.0, 7.0], "bass": [-1.0, 1.0, 2.0, 8.0], "other": [2.0, 2.0, 2.0],
                      "vocals": [None, None]}),
        _report("c", {"drums": [0.0, 10.0, 4.0, 4.0], "bass": [3.0], "other": [-5.0, 5.0], "vocals": [7.0]}),
    ]
    # per-track medians:
    #   a: drums 2, bass 5, other 0, vocals 3
    #   b: drums 6, bass 1.5, other 2, vocals None
    #   c: drums 4, bass 3, other 0, vocals 7
    report = aggregate(tracks)
    assert report.track_medians["b"]["bass"]["sdr"] == 1.5
    assert report.track_medians["b"]["vocals"]["sdr"] is None
    assert report.sources["drums"]["sdr"] == 4.0
    assert report.sources["bass"]["sdr"] == 3.0
    assert report.sources["other"]["sdr"] == 0.0
    assert report.sources["vocals"]["sdr"] == 5.0
    # All: median of the 11 defined per-track medians {2,5,0,3,6,1.5,2,4,3,0,7} = 3
    assert report.all["sdr"] == 3.0
    # the concatenation convention differs from the median of source medians here
    assert median(report.sources[s]["sdr"] for s in report.sources) == 3.5


def test_evaluate_track_skips_silent_frames_and_partial_tail():
    rng = np.random.default_rng(3)
    stems = rng.standard_normal((4, 1, 250)).astype(np.float32)
    stems[1, :, :100] = 0.0
    ref = SourceSet(stems, 100, name="t")
    est = SourceSet(stems + 0.01 * rng.standard_normal(stems.shape).astype(np.float32), 100, name="t")
    report = evaluate_track(est, ref)
    assert len(report.frames["drums"]["sdr"]) == 2  # 250 samples at 100 Hz: two whole frames
    assert report.frames["bass"]["sdr"][0] is None
    assert report.frames["bass"]["sdr"][1] > 20


def test_report_json_is_stable():
    tracks = [_report("x", {"drums": [1.0], "bass": [2.0], "other": [3.0], "vocals": [4.0]})]
    a = aggregate(tracks).to_json()
    assert a == aggregate(tracks).to_json()
    doc = json.loads(a)
    assert doc["format"] == "wavesep-eval" and doc["aggregate"]["all"]["sdr"] == 2.5
