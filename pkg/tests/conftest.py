import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from invcoss import diffcore as dc  # noqa: E402
from invcoss.config import InversionSection, RunConfig, TaskConfig, TrainConfig  # noqa: E402
from invcoss.encoder import EncoderConfig  # noqa: E402
from invcoss.invunet import GeneratorConfig  # noqa: E402

dc.configure_threads(1)


def micro_config(seed: int = 0, **continual) -> RunConfig:
    """A run config small enough that a three-stage sequence takes seconds."""
    enc = EncoderConfig(image_size=8, channels=1, patch=4, dim=8, depth=2, heads=2, mlp_ratio=2)
    gen = GeneratorConfig(latent_dim=8, bottleneck=2, channels=(4, 4, 8), out_size=8)
    tasks = tuple(TaskConfig(k, k, size=40, held_out=10, seed=seed) for k in ("blobs", "stripes", "checker-noise"))
    cfg = RunConfig(seed=seed, encoder=enc, tasks=tasks,
                    train=TrainConfig(epochs=1, batch_size=8),
                    inversion=InversionSection(steps=3, batch_size=4, n_samples=4, generator=gen))
    if continual:
        cfg = replace(cfg, continual=replace(cfg.continual, **continual))
    return cfg


@pytest.fixture
def micro():
    return micro_config()


# criterion number -> (passed, detail), filled in by test_acceptance
RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
