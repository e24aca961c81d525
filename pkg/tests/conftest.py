import os
from pathlib import Path

import numpy as np
import pytest
import torch

from cualab.distill.experiment import HarnessConfig, load_data, make_teacher
from cualab.distill.model import compress_svd

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def harness_cfg():
    return HarnessConfig()


@pytest.fixture(scope="session")
def data(harness_cfg):
    return load_data(harness_cfg)


@pytest.fixture(scope="session")
def teacher_path(tmp_path_factory):
    # set CUALAB_TEACHER_CACHE to reuse the pretrained teacher across sessions
    cache = os.environ.get("CUALAB_TEACHER_CACHE")
    if cache:
        return Path(cache)
    return tmp_path_factory.mktemp("teacher") / "teacher.pt"


@pytest.fixture(scope="session")
def teacher(harness_cfg, data, teacher_path):
    return make_teacher(harness_cfg, data, teacher_path)


@pytest.fixture(scope="session")
def compressed(harness_cfg, teacher):
    return compress_svd(teacher, harness_cfg.rank_fraction)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
