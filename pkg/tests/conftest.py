import zlib

import numpy as np
import pytest

from paraformer.model import ModelConfig, init_model


def tiny_config(**overrides) -> ModelConfig:
    base = dict(n_branches=3, layers_per_branch=1, width=8, heads=2, ffn_width=16,
                patch_size=2, image_height=4, image_width=4, channels=1, n_classes=3,
                dtype="float64", seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def randomize(model, seed=0, scale=0.3):
    """Overwrite every parameter in place with Gaussian noise (non-degenerate weights)."""
    rng = np.random.default_rng(seed)
    for arr in model.named_parameters().values():
        arr[...] = rng.standard_normal(arr.shape) * scale
    return model


def checksum(arrays) -> int:
    crc = 0
    for a in arrays:
        crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
    return crc


def branch_checksums(model) -> dict[int, int]:
    params = model.named_parameters()
    return {j: checksum(v for n, v in params.items() if n.startswith(f"branches.{j - 1}."))
            for j in range(1, model.n_branches + 1)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return randomize(init_model(tiny_config()), seed=5)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
