import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from posenorm.dataset import Dataset, ImageRecord
from posenorm.geometry import KeypointSet, Warp


def make_dataset(xy, vis=None, labels=None, split=None, size=(200, 200), class_names=None):
    """Dataset from an (n, K, 2) keypoint array; everything else defaulted."""
    xy = np.asarray(xy, float)
    n, K = xy.shape[:2]
    vis = np.ones((n, K), bool) if vis is None else np.asarray(vis, bool)
    labels = np.zeros(n, int) if labels is None else np.asarray(labels, int)
    split = ["train"] * n if split is None else list(split)
    class_names = class_names or [f"c{c}" for c in range(int(labels.max()) + 1 if n else 1)]
    images = [ImageRecord(f"img{i:03d}", f"img{i:03d}.png", size[0], size[1]) for i in range(n)]
    kps = [KeypointSet(xy[i], vis[i]) for i in range(n)]
    return Dataset(images, kps, labels, split, K, class_names, [f"p{j}" for j in range(K)])


# a 7-part "bird" in template coordinates: beak, crown, nape, back, tail, belly, breast
TEMPLATE = np.array(
    [[-30, 0], [-18, -10], [-8, -8], [10, -6], [34, 0], [8, 10], [-12, 8]], float
)


def similarity_copies(template, rng, n, center=(100, 100), scale=(0.8, 1.2)):
    out = []
    for _ in range(n):
        w = Warp.similarity(
            rng.uniform(*scale), rng.uniform(-math.pi, math.pi), *(np.asarray(center) + rng.uniform(-10, 10, 2))
        )
        out.append(w.apply(template))
    return np.stack(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
