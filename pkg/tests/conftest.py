import numpy as np
import pytest

from percs.dataset import FixtureSpec, render_scene


def disk(shape, cy, cx, r):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def best_match_ious(pred, gt):
    """For every GT instance, the best IoU over predicted instances (brute force)."""
    out = []
    for k in range(1, int(gt.max()) + 1):
        g = gt == k
        best = 0.0
        for j in range(1, int(pred.max()) + 1):
            p = pred == j
            union = np.count_nonzero(g | p)
            best = max(best, np.count_nonzero(g & p) / union)
        out.append(best)
    return out


def blob_scene(seed, size=160, blobs=(1, 10), radii=(4.0, 20.0)):
    spec = FixtureSpec(blobs=blobs, radii=radii, height=size, width=size, seed=seed)
    _, mask, _, _ = render_scene(spec, np.random.default_rng(seed))
    return mask


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
