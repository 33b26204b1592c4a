import filecmp
import os

import numpy as np
import pytest
from scipy import ndimage

from maevi import config, events, sim
from maevi.sim import SceneSpec, Shape

RECT = Shape("rectangle", (0.9, 0.9, 0.9), (20.0, 32.0), (4.0, 0.0), (14.0, 12.0))


def test_static_scene_renders_identically_and_emits_nothing():
    spec = SceneSpec(shapes=(Shape("disk", (1, 0, 0), (30, 30), (0, 0), (5,)),))
    np.testing.assert_array_equal(sim.render(spec, 0), sim.render(spec, 37_000))
    assert len(sim.simulate_events(spec, 0, 10_000)) == 0


def test_disk_moves_linearly():
    spec = SceneSpec(shapes=(Shape("disk", (1, 1, 1), (10, 10), (4, 0), (3,)),))
    m = sim.shape_mask(spec.shapes[0], spec, spec.frame_gap_us)
    ys, xs = np.nonzero(m)
    assert (xs.mean(), ys.mean()) == (14.0, 10.0)


def test_later_shape_occludes_earlier():
    a = Shape("rectangle", (1, 0, 0), (10, 10), (0, 0), (8, 8))
    b = Shape("rectangle", (0, 0, 1), (12, 12), (0, 0), (8, 8))
    img = sim.render(SceneSpec(shapes=(a, b)), 0)
    np.testing.assert_array_equal(img[:, 11, 11], [0, 0, 1])
    img = sim.render(SceneSpec(shapes=(b, a)), 0)
    np.testing.assert_array_equal(img[:, 11, 11], [1, 0, 0])


def test_single_step_threshold_count():
    c = 0.2
    logs = np.log([[[0.2]], [[0.2 * np.exp(2.5 * c)]]])
    s = sim.events_from_log_frames(logs, [0, 1000], c)
    assert s.p.tolist() == [1, 1]
    # crossings at 1/2.5 and 2/2.5 of the substep
    assert s.t.tolist() == [400, 800]


def accumulator_oracle(trace, c):
    """Scalar per-pixel reference: count +/- crossings of a log-intensity trace."""
    ref = trace[0]
    pos = neg = 0
    for v in trace[1:]:
        while v - ref >= c:
            ref += c
            pos += 1
        while ref - v >= c:
            ref -= c
            neg += 1
    return pos, neg


def test_out_and_back_matches_accumulator_oracle():
    rng = np.random.default_rng(0)
    c = 0.15
    steps = rng.normal(scale=0.12, size=(40, 3, 4))
    path = np.concatenate([np.zeros((1, 3, 4)), np.cumsum(steps, axis=0)])
    # out and back; the 1e-9 shift keeps the return off the exact threshold lattice
    trace = np.concatenate([path, path[-2::-1] + 1e-9])
    logs = np.log(0.3) + trace
    s = sim.events_from_log_frames(logs, np.arange(len(logs)) * 100, c)
    for y in range(3):
        for x in range(4):
            sel = (s.x == x) & (s.y == y)
            pos, neg = accumulator_oracle(logs[:, y, x], c)
            assert (np.sum(s.p[sel] == 1), np.sum(s.p[sel] == -1)) == (pos, neg)
            assert abs(pos - neg) <= 1


def edge_distance(spec, t):
    """Distance (px) of every pixel to the nearest rendered label change at time ``t``."""
    img = sim.render(spec, t).sum(axis=0)
    edge = np.zeros(img.shape, bool)
    edge[:, 1:] |= img[:, 1:] != img[:, :-1]
    edge[:, :-1] |= img[:, 1:] != img[:, :-1]
    edge[1:, :] |= img[1:, :] != img[:-1, :]
    edge[:-1, :] |= img[1:, :] != img[:-1, :]
    return ndimage.distance_transform_edt(~edge)


def test_events_concentrate_at_moving_edges():
    spec = SceneSpec(background=0.2, shapes=(RECT,))
    s = sim.simulate_events(spec, 0, spec.frame_gap_us)
    assert len(s) > 0
    near = [edge_distance(spec, t)[y, x] <= 2 for t, x, y in zip(s.t, s.x, s.y)]
    assert np.mean(near) >= 0.9


def test_polarity_follows_brightness_change_and_untouched_regions_are_silent():
    spec = SceneSpec(background=0.2, shapes=(RECT,))
    s = sim.simulate_events(spec, 0, spec.frame_gap_us)
    before, after = sim.render(spec, 0).mean(0), sim.render(spec, spec.frame_gap_us).mean(0)
    delta = np.sign(after - before)
    for x, y, p in zip(s.x, s.y, s.p):
        assert p == delta[y, x]
    touched = np.zeros((spec.height, spec.width), bool)
    for t in np.linspace(0, spec.frame_gap_us, 200):
        touched |= sim.shape_mask(RECT, spec, t)
    assert touched[s.y, s.x].all()


def test_make_dataset_is_deterministic(tmp_path):
    spec = SceneSpec(height=32, width=32, n_random_shapes=2)
    a = sim.make_dataset(spec, 2, str(tmp_path / "a"), seed=3)
    b = sim.make_dataset(spec, 2, str(tmp_path / "b"), seed=3)
    for pa, pb in zip(a, b):
        names = sorted(os.listdir(pa))
        assert names == sorted(os.listdir(pb))
        match, mismatch, errors = filecmp.cmpfiles(pa, pb, names, shallow=False)
        assert not mismatch and not errors
    c = sim.make_dataset(spec, 1, str(tmp_path / "c"), seed=4)
    assert not filecmp.cmp(os.path.join(a[0], "frame_0.png"), os.path.join(c[0], "frame_0.png"), shallow=False)


def test_make_dataset_output_loads(tmp_path):
    spec = SceneSpec(shapes=(RECT,))
    path = sim.make_dataset(spec, 1, str(tmp_path))[0]
    s = events.load_sample(path)
    assert s.ground_truth is not None and s.height == s.width == 64
    # I0 is the scene at two frame gaps
    np.testing.assert_allclose(s.ground_truth, np.round(sim.render(spec, 20_000) * 255) / 255)


def test_scene_config_round_trip(tmp_path):
    spec = SceneSpec(height=48, threshold=0.25, shapes=(RECT, Shape("disk", (0.1, 0.2, 0.3), (5, 6), (1, -1), (4,))))
    path = tmp_path / "scene.txt"
    path.write_text(sim.scene_to_text(spec))
    assert sim.load_scene(str(path)) == spec


def test_scene_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("height = 32\ncolour = 3\n")
    with pytest.raises(config.ConfigError, match="colour"):
        sim.load_scene(str(path))


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec(substeps=4).validate()
    with pytest.raises(ValueError):
        SceneSpec(threshold=1.5).validate()
