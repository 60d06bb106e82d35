import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anypoint.errors import InvalidInputError
from anypoint.globalmatch import (DEFAULT_CUT_THRESHOLD, GlobalMatcher, SceneCutEvent, append_event,
                                  detect_scene_cut, global_match, maybe_rebase, scene_cut_score)
from anypoint.query import prepare_query
from anypoint.synthworld import WorldConfig, generate_sequence
from anypoint.tensorcore import make_grid


def planted(seed=0, at=(9, 5), D=32, size=(12, 14)):
    """Feature map whose only non-orthogonal content is a copy of the query patch at ``at``."""
    g = torch.Generator().manual_seed(seed)
    H, W = size
    X = torch.zeros(H, W, D, dtype=torch.float64)
    X[..., D // 2:] = torch.randn(H, W, D // 2, generator=g, dtype=torch.float64)
    patch = torch.randn(3, 3, D // 2, generator=g, dtype=torch.float64)
    x, y = at
    X[y - 1:y + 2, x - 1:x + 2, :D // 2] = patch
    X[y - 1:y + 2, x - 1:x + 2, D // 2:] = 0
    C = prepare_query(X, at, make_grid(3)).context
    return X, C


def test_identical_frames_no_cut():
    f = np.random.default_rng(0).uniform(size=(64, 64, 3)).astype(np.float32)
    fired, score = detect_scene_cut(f, f.copy())
    assert score == 0.0 and not fired


def test_black_white_is_maximal():
    black = np.zeros((64, 64, 3), dtype=np.float32)
    white = np.ones((64, 64, 3), dtype=np.float32)
    fired, score = detect_scene_cut(white, black, threshold=1.99)
    assert score == pytest.approx(2.0) and fired


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        scene_cut_score(np.zeros((32, 32, 3)), np.zeros((64, 64, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_detector_symmetric_and_bounded(seed):
    g = np.random.default_rng(seed)
    a = g.uniform(size=(32, 48, 3)).astype(np.float32)
    b = np.clip(a + g.normal(0, 0.3, size=a.shape), 0, 1).astype(np.float32)
    s_ab, s_ba = scene_cut_score(a, b), scene_cut_score(b, a)
    assert s_ab == s_ba
    assert 0 <= s_ab <= 2


@pytest.mark.slow
def test_detector_calibration_on_synthworld():
    hits = 0
    for s in range(100):
        seq = generate_sequence(WorldConfig(cut_probability=1.0, seed=1000 + s))
        fired = [t for t in range(1, seq.num_frames)
                 if detect_scene_cut(seq.frames[t], seq.frames[t - 1], DEFAULT_CUT_THRESHOLD)[0]]
        hits += fired == seq.scene_cuts
    assert hits >= 95


def test_center_pick_init_reproduces_center_map():
    torch.manual_seed(0)
    m = GlobalMatcher(8, 9).double()
    maps = torch.randn(2, 3, 5, 6, 9, dtype=torch.float64)
    fused = m.fuse(maps).squeeze(-1)
    assert torch.allclose(fused, maps[..., 4], atol=1e-12)


def test_planted_patch_recovered():
    X, C = planted()
    m = GlobalMatcher(32, 9).double()
    pos = global_match(m, X, C, temperature=0.01)
    assert torch.dist(pos, torch.tensor([9.0, 5.0], dtype=torch.float64)) < 0.5


def test_constant_map_gives_center():
    m = GlobalMatcher(4, 9).double()
    X = torch.full((5, 7, 4), 0.3, dtype=torch.float64)
    pos = global_match(m, X, torch.randn(9, 4, dtype=torch.float64))
    assert torch.allclose(pos, torch.tensor([3.0, 2.0], dtype=torch.float64), atol=1e-12)


def test_single_point_grid_is_point_correlation():
    m = GlobalMatcher(4, 1, mode="center").double()
    X = torch.randn(1, 5, 6, 4, dtype=torch.float64)
    C = torch.randn(1, 1, 1, 4, dtype=torch.float64)
    heat = m.heatmap(X, C)
    ref = torch.softmax((X[0] @ C[0, 0, 0]).reshape(-1) / 2.0, 0).view(5, 6)
    assert torch.allclose(heat[0, 0], ref)
    assert abs(heat.sum().item() - 1) < 1e-6


def test_heatmap_is_distribution():
    torch.manual_seed(0)
    m = GlobalMatcher(8, 9)
    heat = m.heatmap(torch.randn(2, 6, 6, 8), torch.randn(2, 4, 9, 8))
    assert torch.allclose(heat.sum((-1, -2)), torch.ones(2, 4), atol=1e-6)


def test_maybe_rebase():
    pos = torch.rand(1, 2, 2)
    out, fired = maybe_rebase(pos, False)
    assert out is pos and not fired
    X, C = planted()
    m = GlobalMatcher(32, 9).double()
    out, fired = maybe_rebase(pos.double(), True, m, X[None], C[None, None].expand(1, 2, 9, 32), temperature=0.01)
    ref = global_match(m, X, C, temperature=0.01)
    assert fired and torch.allclose(out[0, 0], ref) and torch.allclose(out[0, 1], ref)


def test_event_log(tmp_path):
    path = tmp_path / "events.jsonl"
    append_event(path, SceneCutEvent(7, 0.5, 0.2))
    append_event(path, SceneCutEvent(9, 0.4, 0.2))
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows == [{"frame": 7, "score": 0.5, "threshold_used": 0.2},
                    {"frame": 9, "score": 0.4, "threshold_used": 0.2}]
