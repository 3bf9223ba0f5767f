import pytest
import torch

from ncfl.core import make_config

torch.set_num_threads(1)


def tiny_config(**overrides):
    """Narrow desk-style config that runs a forward pass in milliseconds."""
    base = dict(
        feature_width=8, latent_width=8, mvr_hidden=8, fa_channels=[4, 8, 8], fa_blocks=1,
        ncfl_hidden=8, unet_channels=[8, 8, 8, 8, 8], flow_width=8, flow_pretrain_iters=0,
        total_iters=6, stage1_iters=3, flow_freeze_iters=2, batch=2, clip_len=3, patch=16,
    )
    base.update(overrides)
    return make_config("desk", **base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


ACCEPTANCE_LINES = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class DeskRuns:
    """Desk-scale training runs shared across test modules, trained on first request."""

    def __init__(self):
        from ncfl.bench.experiments import desk_training_pairs

        self.base = make_config("desk")
        self.pairs = desk_training_pairs(self.base.sigma)
        self.results = {}
        self.seconds = {}

    def get(self, variant: str, seed: int):
        import time

        from ncfl.bench.experiments import variant_config
        from ncfl.pipeline import train_two_stage

        key = (variant, seed)
        if key not in self.results:
            cfg = variant_config(self.base, variant).replace(seed=seed)
            t0 = time.perf_counter()
            self.results[key] = train_two_stage(cfg, self.pairs)
            self.seconds[key] = time.perf_counter() - t0
        return self.results[key]


@pytest.fixture(scope="session")
def desk_runs():
    return DeskRuns()
