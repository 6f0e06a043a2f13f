import pytest
import torch

from rpl_ood.segnet import ArchConfig, build_segnet


def tiny_arch(**kw):
    base = dict(stage_channels=(4, 6, 8), feature_dim=6, skip_dim=3, head_hidden=4)
    base.update(kw)
    return ArchConfig(**base)


@pytest.fixture
def tiny_seg():
    return build_segnet(tiny_arch()).freeze()


@pytest.fixture
def tiny_seg64():
    # seed 3 keeps the 2x2 feature lattice of an 8x8 input spatially varied
    return build_segnet(tiny_arch(seed=3)).double().freeze()


@pytest.fixture
def image():
    return torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    lines = getattr(test_acceptance, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
