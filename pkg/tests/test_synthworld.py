import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image, ImageDraw

from anypoint.errors import ConfigError, InvalidInputError
from anypoint.synthworld import (FeatureExtractor, WorldConfig, _covered, _Occluder, _Sprite, extract_features,
                                 feature_to_image_coords, generate_corpus, generate_sequence,
                                 image_to_feature_coords, load_sequence, save_sequence)


def small(**kw):
    base = dict(frame_size=32, video_length=6, num_points=8, num_sprites=2)
    base.update(kw)
    return WorldConfig(**base)


def test_static_world():
    seq = generate_sequence(small(num_sprites=0, video_length=10))
    assert np.all(seq.trajectories == seq.trajectories[:, :1])
    assert seq.visibility.all()
    assert np.allclose(seq.frames, seq.frames[:1])


def test_forced_cut():
    seq = generate_sequence(WorldConfig(cut_probability=1.0, video_length=24, seed=3))
    assert len(seq.scene_cuts) == 1 and 1 <= seq.scene_cuts[0] < 24


def test_determinism():
    a = generate_sequence(small(seed=11))
    b = generate_sequence(small(seed=11))
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert np.array_equal(a.visibility, b.visibility)
    c = generate_sequence(small(seed=12))
    assert not np.array_equal(a.frames, c.frames)


@pytest.mark.parametrize("mode", ["checker", "noise", "flat"])
def test_sequence_invariants(mode):
    cfg = small(texture_mode=mode, video_length=12, cut_probability=1.0, occlusion_rate=0.8, seed=5)
    seq = generate_sequence(cfg)
    S = cfg.frame_size
    assert seq.frames.shape == (12, S, S, 3)
    assert seq.frames.min() >= 0 and seq.frames.max() <= 1
    xy = seq.trajectories[seq.visibility]
    assert (xy >= 0).all() and (xy <= S - 1).all()
    assert seq.visibility[:, 0].all()
    cut = seq.scene_cuts[0]
    speed = np.linalg.norm(np.diff(seq.trajectories, axis=1), axis=-1)
    within = np.delete(speed, cut - 1, axis=1)
    # sprite rotation adds at most a small tangential component on top of max_speed
    assert within.max() <= 1.5 * cfg.max_speed + 1e-6


def test_sprite_points_follow_sprites():
    seq = generate_sequence(small(video_length=8, max_speed=2.0, seed=2))
    moving = seq.owners >= 0
    assert moving.any()
    assert np.abs(np.diff(seq.trajectories[moving], axis=1)).max() > 0


def _raster_disk(center, radius, size, scale):
    img = Image.new("1", (size * scale, size * scale), 0)
    cx, cy = (center[0] + 0.5) * scale, (center[1] + 0.5) * scale
    r = radius * scale
    ImageDraw.Draw(img).ellipse((cx - r, cy - r, cx + r, cy + r), fill=1)
    return np.asarray(img)


def test_occluder_visibility_matches_raster():
    """Occlusion flags agree with an independently rasterized occluder mask."""
    rng = np.random.default_rng(0)
    T, S, scale = 1, 32, 8
    sprite = _Sprite(half=np.array([5.0, 4.0]), ellipse=True, texture=np.zeros((12, 14, 3)),
                     pos=np.array([[15.0, 14.0]]), angle=np.zeros(T))
    occ = _Occluder(0, 0, 1, 6.5, np.zeros(3))
    mask = _raster_disk(sprite.pos[0], occ.radius, S, scale)
    pts = rng.uniform(0, S - 1, size=(400, 2))
    hidden = _covered(0, pts, 0, [sprite], [occ])
    px = np.floor((pts + 0.5) * scale).astype(int)
    raster = mask[px[:, 1], px[:, 0]].astype(bool)
    d = np.linalg.norm(pts - sprite.pos[0], axis=-1)
    clear = np.abs(d - occ.radius) > 2.0 / scale   # skip raster edge cells
    assert clear.sum() > 350
    assert np.array_equal(hidden[clear], raster[clear])


def test_config_validation():
    for bad in (dict(video_length=1), dict(frame_size=16), dict(occlusion_rate=1.5), dict(texture_mode="x"),
                dict(cut_probability=-0.1)):
        with pytest.raises(ConfigError):
            WorldConfig(**bad).validate()


def test_serialization_round_trip(tmp_path):
    seq = generate_sequence(small(cut_probability=1.0, seed=4))
    save_sequence(seq, tmp_path / "s")
    assert (tmp_path / "s" / "frames" / "00000.png").exists()
    back = load_sequence(tmp_path / "s")
    assert np.abs(back.frames - seq.frames).max() <= 0.5 / 255 + 1e-6
    assert np.allclose(back.trajectories, seq.trajectories, atol=1e-5)
    assert np.array_equal(back.visibility, seq.visibility)
    assert back.scene_cuts == seq.scene_cuts


def test_corpus_seeds():
    c = generate_corpus(small(), 3, seed=7)
    assert [s.seed for s in c] == [7, 8, 9]


def test_extractor_shapes_and_determinism():
    torch.manual_seed(0)
    ex = FeatureExtractor(dim=32, stride=4, width=8)
    frame = np.random.default_rng(0).uniform(size=(64, 64, 3)).astype(np.float32)
    a = extract_features(ex, frame)
    assert (a.height, a.width, a.channels) == (16, 16, 32)
    assert torch.equal(a.data, extract_features(ex, frame).data)
    with pytest.raises(InvalidInputError):
        ex(torch.zeros(1, 30, 32, 3))


def test_extractor_flip_equivariance():
    torch.manual_seed(1)
    ex = FeatureExtractor(dim=8, stride=4, width=4).double().symmetrize_()
    frame = torch.rand(1, 32, 32, 3, dtype=torch.float64)
    with torch.no_grad():
        a = ex(frame)
        b = ex(frame.flip(2))
    assert torch.allclose(a.flip(2), b, atol=1e-10)


def test_coordinate_conversion():
    assert image_to_feature_coords(1.5, 4) == 0.0
    assert np.allclose(feature_to_image_coords(image_to_feature_coords([10.25, 3.5], 4), 4), [10.25, 3.5],
                       atol=1e-9)
    assert image_to_feature_coords(7.3, 1) == pytest.approx(7.3)


@given(st.floats(-100, 500), st.sampled_from([1, 2, 4, 8]))
def test_coordinate_round_trip(x, stride):
    assert abs(feature_to_image_coords(image_to_feature_coords(x, stride), stride) - x) < 1e-9
