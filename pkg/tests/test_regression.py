import numpy as np
import pytest

from hybridrefine.core import ImageFrame, InvalidArgument
from hybridrefine.masks import opacity_mask
from hybridrefine.regression import ArtifactParams, ToyRegressor, shift_frame, toy_regress


def inputs(seed=0, hw=(16, 16)):
    rng = np.random.default_rng(seed)
    return [ImageFrame(rng.uniform(0, 1, (*hw, 3))) for _ in range(2)]


def test_shift_frame_examples():
    rgb = np.arange(5.0)[None, :, None]
    assert shift_frame(rgb, 1)[0, :, 0].tolist() == [1, 2, 3, 4, 4]
    assert shift_frame(rgb, -2)[0, :, 0].tolist() == [0, 0, 0, 1, 2]
    assert np.array_equal(shift_frame(rgb, 0.4), rgb)


def test_endpoints_reproduce_inputs():
    ins = inputs()
    res = toy_regress(ins, [0.0, 1.0], ArtifactParams(disparity=3))
    assert np.allclose(res.frames[0].rgb, ins[0].rgb)
    assert np.allclose(res.frames[1].rgb, ins[1].rgb)
    assert not any(m.any() for m in res.artifact_masks)


def test_artifacts_grow_toward_middle():
    area = {t: [] for t in (0.1, 0.5)}
    for seed in range(30):
        res = toy_regress(inputs(seed, (32, 32)), [0.1, 0.5], seed=seed)
        for t, m in zip((0.1, 0.5), res.artifact_masks):
            area[t].append(m.mean())
    assert np.mean(area[0.5]) > np.mean(area[0.1])


def test_deterministic():
    a = toy_regress(inputs(), [0.3, 0.6], seed=4)
    b = ToyRegressor().regress(inputs(), [0.3, 0.6], seed=4)
    for x, y in zip(a.frames, b.frames):
        assert np.array_equal(x.rgb, y.rgb) and np.array_equal(x.opacity, y.opacity)


def test_opacity_marks_artifacts():
    ious = []
    for seed in range(20):
        res = toy_regress(inputs(seed, (32, 32)), [0.25, 0.5, 0.75], seed=seed)
        for f, truth in zip(res.frames, res.artifact_masks):
            m = opacity_mask(f.opacity, 0.5)
            union = (m | truth).sum()
            ious.append(1.0 if union == 0 else (m & truth).sum() / union)
    assert min(ious) == 1.0


@pytest.mark.parametrize(
    "ins,targets",
    [
        (inputs()[:1], [0.5]),
        ([inputs()[0], inputs(1, (8, 8))[0]], [0.5]),
        (inputs(), [1.5]),
    ],
)
def test_invalid(ins, targets):
    with pytest.raises(InvalidArgument):
        toy_regress(ins, targets)


def test_params_json_round_trip():
    p = ArtifactParams(disparity=4.0, count_range=(2, 5))
    assert ArtifactParams.from_json(p.to_json()) == p
