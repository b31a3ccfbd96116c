import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densematch.densify import (
    MIXUP_RATIO_RANGE,
    AugPolicy,
    ImageAnnotations,
    apply_policy,
    compose_raster,
    load_raster,
    mixup,
    mosaic4,
)
from densematch.geometry import Box, Target
from densematch.schedule import AugState
from densematch.simharness import synth_targets, to_coco, Dataset

ON = AugState(True, True)
OFF = AugState(True, False)


def image(n, seed=0, image_id=0, margin=0.0):
    rng = np.random.default_rng(seed)
    targets = []
    for _ in range(n):
        w, h = rng.uniform(0.05, 0.2, size=2)
        cx = rng.uniform(w / 2 + margin, 1 - w / 2 - margin)
        cy = rng.uniform(h / 2 + margin, 1 - h / 2 - margin)
        targets.append(Target(Box(cx, cy, w, h)))
    return ImageAnnotations(image_id, (640, 480), tuple(targets))


def test_annotation_validation():
    with pytest.raises(ValueError):
        ImageAnnotations(0, (0, 10))
    with pytest.raises(ValueError):
        ImageAnnotations(0, (10, 10), (Target(Box(0.95, 0.5, 0.2, 0.2)),))
    with pytest.raises(ValueError):
        ImageAnnotations(0, (10, 10), (Target(Box(0.5, 0.5, 0.0, 0.2)),))
    with pytest.raises(ValueError):
        AugPolicy(mosaic_prob=1.2)


def test_mosaic_replicates_single_target_four_times():
    x = image(1)
    m = mosaic4(x, x, x, x)
    assert len(m) == 4
    assert m.canvas == x.canvas
    centers = sorted((t.box.cx, t.box.cy) for t in m.targets)
    src = x.targets[0].box
    expected = sorted((src.cx / 2 + dx, src.cy / 2 + dy) for dx in (0, 0.5) for dy in (0, 0.5))
    assert np.allclose(centers, expected)


def test_mosaic_of_empty_images():
    e = image(0)
    assert len(mosaic4(e, e, e, e)) == 0


def test_mosaic_counts_and_areas():
    ins = [image(n, seed=s, image_id=s, margin=0.01) for s, n in enumerate((2, 3, 1, 4))]
    m = mosaic4(*ins)
    assert len(m) == 10
    offsets = ((0, 0), (0.5, 0), (0, 0.5), (0.5, 0.5))
    k = 0
    for img, (dx, dy) in zip(ins, offsets):
        for t in img.targets:
            out = m.targets[k].box
            assert out.area == pytest.approx(t.box.area / 4, rel=1e-12)
            assert (out.cx, out.cy) == pytest.approx((t.box.cx / 2 + dx, t.box.cy / 2 + dy))
            k += 1


def test_mixup_laws():
    x, y, e = image(3, 1), image(5, 2), image(0, 3)
    assert mixup(x, e, 0.5).targets == x.targets
    assert len(mixup(x, y, 0.5)) == 8
    assert mixup(x, y, 0.1).targets == mixup(x, y, 0.9).targets
    with pytest.raises(ValueError):
        mixup(x, ImageAnnotations(9, (100, 100)), 0.5)
    with pytest.raises(ValueError):
        mixup(x, y, 1.0)


def test_policy_zero_probabilities_is_identity():
    batch = [image(n, seed=n, image_id=n) for n in (1, 2, 3, 4)]
    for b in range(50):
        out = apply_policy(batch, AugPolicy(0.0, 0.0, 3), ON, b)
        assert out == batch
        assert json.dumps(to_coco(Dataset(tuple(out), {0: "o"}, "x"))) == json.dumps(
            to_coco(Dataset(tuple(batch), {0: "o"}, "x"))
        )


def test_gate_overrides_policy():
    batch = [image(2, seed=s, image_id=s) for s in range(4)]
    for b in range(20):
        assert apply_policy(batch, AugPolicy(1.0, 1.0, 0), OFF, b) == batch
        assert apply_policy(batch, AugPolicy(1.0, 1.0, 0), AugState(False, False), b) == batch


def test_determinism():
    batch = [image(2, seed=s, image_id=s) for s in range(4)]
    a = apply_policy(batch, AugPolicy(0.5, 0.5, 9), ON, 17)
    b = apply_policy(batch, AugPolicy(0.5, 0.5, 9), ON, 17)
    assert a == b


def _rates(policy, n_batches):
    batch = [image(1, seed=s, image_id=s) for s in range(4)]
    mosaics = mixups = 0
    for b in range(n_batches):
        out = apply_policy(batch, policy, ON, b)
        mosaics += str(out[0].image_id).count("mosaic") > 0
        mixups += str(out[0].image_id).startswith("mixup")
    return mosaics / n_batches, mixups / n_batches


def test_application_rates_monte_carlo():
    for probs in ((0.5, 0.5), (0.2, 0.8)):
        m, x = _rates(AugPolicy(*probs, seed=0), 10_000)
        assert abs(m - probs[0]) <= 0.02
        assert abs(x - probs[1]) <= 0.02


def test_presets():
    assert AugPolicy.preset("base") == AugPolicy(0.0, 0.0)
    assert AugPolicy.preset("max", seed=4) == AugPolicy(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        AugPolicy.preset("huge")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.integers(0, 10**6))
def test_densification_direction(counts, seed):
    # many minibatches: the mean target count must grow under (0.5, 0.5)
    rng = np.random.default_rng(seed)
    batch = [ImageAnnotations(i, (64, 64), tuple(synth_targets(rng, n))) for i, n in enumerate(counts)]
    before = after = 0
    for b in range(200):
        out = apply_policy(batch, AugPolicy(0.5, 0.5, seed), ON, b)
        assert len(out) == len(batch)
        assert all(o.canvas == i.canvas for o, i in zip(out, batch))
        before += sum(len(i) for i in batch)
        after += sum(len(o) for o in out)
    assert after > before


def test_mixup_ratio_range_is_valid():
    lo, hi = MIXUP_RATIO_RANGE
    assert 0 < lo < hi < 1


# -- rasters ---------------------------------------------------------------------------


def solid(color, shape=(40, 60, 3)):
    return np.full(shape, color, dtype=np.uint8)


def test_mosaic_raster_quadrants():
    colors = (10, 80, 160, 240)
    out = compose_raster([solid(c) for c in colors], "mosaic")
    assert out.shape == (40, 60, 3)
    quads = (out[:20, :30], out[:20, 30:], out[20:, :30], out[20:, 30:])
    for q, c in zip(quads, colors):
        assert np.all(q == c)


def test_mixup_raster_is_mid_gray():
    out = compose_raster([solid(255), solid(0)], "mixup", 0.5)
    assert np.all(np.abs(out.astype(int) - 127.5) <= 1)


def test_mosaic_raster_aligns_with_boxes():
    # each source marks its own target box; the composite must carry that
    # mark at the transformed box corners
    H, W = 64, 96
    srcs, anns = [], []
    for k in range(4):
        box = Box(0.5, 0.5, 0.5, 0.5)
        img = np.zeros((H, W), dtype=np.uint8)
        x0, y0, x1, y1 = box.corners
        img[int(y0 * H) : int(y1 * H), int(x0 * W) : int(x1 * W)] = 50 * (k + 1)
        srcs.append(img)
        anns.append(ImageAnnotations(k, (W, H), (Target(box),)))
    out = compose_raster(srcs, "mosaic")
    m = mosaic4(*anns)
    for k, t in enumerate(m.targets):
        x0, y0, x1, y1 = t.box.corners
        for x, y in ((x0, y0), (x1, y1)):
            px = min(int(x * W + (0.5 if x == x0 else -0.5)), W - 1)
            py = min(int(y * H + (0.5 if y == y0 else -0.5)), H - 1)
            assert out[py, px] == 50 * (k + 1)


def test_missing_raster_warns_and_skips():
    with pytest.warns(UserWarning):
        assert compose_raster([solid(1), None], "mixup") is None


def test_raster_errors():
    with pytest.raises(ValueError):
        compose_raster([solid(1)] * 3, "mosaic")
    with pytest.raises(ValueError):
        compose_raster([solid(1), solid(1, (10, 10, 3))], "mixup")
    with pytest.raises(ValueError):
        compose_raster([solid(1)] * 2, "cutmix")


def test_raster_io_round_trip(tmp_path):
    from densematch.densify import save_raster

    img = (np.arange(40 * 60 * 3) % 251).astype(np.uint8).reshape(40, 60, 3)
    for ext in ("png", "ppm"):
        path = tmp_path / f"x.{ext}"
        save_raster(path, img)
        assert np.array_equal(load_raster(path), img)
    with pytest.raises(ValueError):
        save_raster(tmp_path / "x.jpg", img)
