import functools
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from fkt.data import make_synthetic_blobs  # noqa: E402

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(autouse=True)
def _fresh_determinism():
    yield
    torch.use_deterministic_algorithms(False)


@pytest.fixture(scope="session")
def blobs():
    return make_synthetic_blobs(100, 2, 32, seed=0)


def blob_config(**overrides):
    """Raw config dict for the 2-class, 200-image blob setup."""
    raw = {
        "regime": "functional",
        "epochs": 20,
        "batch_size": 32,
        "eval_batch_size": 64,
        "lambda": 1.0,
        "seeds": [0],
        "dataset": {"name": "synthetic_blobs", "num_classes": 2, "num_per_class": 100, "image_size": 32},
        "model": {"backbone": "small_cnn", "encoder_dim": 64, "projector_out_dim": 32},
        "output_dir": "runs",
    }
    for key, value in overrides.items():
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return raw


@functools.lru_cache(maxsize=None)
def cam_setup():
    """A small_cnn trained on 64 px blobs (2 classes, 50 test images) for CAM checks."""
    from fkt.config import config_from_dict
    from fkt.pipelines import prepare_data, run_supervised_only

    data = make_synthetic_blobs(125, 2, 64, seed=0)
    cfg = config_from_dict(blob_config(regime="supervised_only", epochs=10, **{"dataset.image_size": 64,
                                                                                 "dataset.num_per_class": 125}))
    cfg, train, test = prepare_data(cfg, data)
    result = run_supervised_only(cfg, (train, test))
    return cfg, result.model.eval(), test


def blob_mass_hits(model, test, policy, count=50):
    """How many of the first ``count`` test images put more CAM mass inside the blob box than outside."""
    from fkt.augment import eval_transform
    from fkt.evaluation import grad_cam

    hits = 0
    for i in range(count):
        x = eval_transform(test.batch(torch.tensor([i])), policy).pixels
        heat = grad_cam(model, x, int(test.labels[i])).heatmap
        r0, c0, r1, c1 = test.meta["bbox"][i].tolist()
        inside = heat[r0:r1, c0:c1].sum()
        hits += int(inside > heat.sum() - inside)
    return hits


def pytest_configure(config):
    config.fkt_acceptance = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "fkt_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
