"""Shared fixtures.  Full training runs are expensive, so each distinct
(dataset, config) pair is trained once per session and reused."""
from __future__ import annotations

import time

import numpy as np
import pytest

from dtcn.config import RunConfig
from dtcn.data import gen_synthetic
from dtcn.tensor import named_parameters
from dtcn.training import train

ACCEPTANCE = "test_acceptance.py"


class RunCache:
    def __init__(self, root):
        self.root = root
        self.datasets = {}
        self.runs = {}
        self.grad_norms = {}
        self.seconds = {}

    def dataset(self, mode: str, seed: int, n: int = 2000):
        key = (mode, seed, n)
        if key not in self.datasets:
            path = self.root / f"data-{mode}-{seed}-{n}"
            gen_synthetic(path, mode, n, 3 if mode == "correlated" else 2, seed)
            self.datasets[key] = path
        return self.datasets[key]

    def run(self, mode: str, seed: int, fusion: str = "early", n: int = 2000, **overrides):
        """Train (once) on the named synthetic set; returns ``TrainResult``."""
        key = (mode, seed, fusion, n, tuple(sorted(overrides.items())))
        if key in self.runs:
            return self.runs[key]
        cfg = RunConfig(
            num_classes=3 if mode == "correlated" else 2,
            seed=seed,
            fusion=fusion,
            lam=0.2 if fusion == "early" else 0.0,
        ).replace(**overrides)
        norms = []

        def on_step(epoch, index, params):
            if epoch == 1 and index < 3:
                refine = named_parameters(params.text.refine)
                norms.append({n: float(np.linalg.norm(t.grad)) if t.grad is not None else 0.0 for n, t in refine})

        out = self.root / ("run-" + "-".join(str(k) for k in key[:4]) + "".join(f"-{k}{v}" for k, v in key[4]))
        data = self.dataset(mode, seed, n)
        start = time.perf_counter()
        result = train(cfg, data, out, on_step=on_step)
        self.seconds[key] = time.perf_counter() - start
        self.runs[key] = result
        self.grad_norms[key] = norms
        return result


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return RunCache(tmp_path_factory.mktemp("runs"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    if ACCEPTANCE not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        if name.startswith("test_criterion_"):
            number = int(name.split("_")[2])
            _criteria.setdefault(number, []).append((name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        outcomes = _criteria[number]
        ok = all(o == "passed" for _, o in outcomes)
        detail = ", ".join(f"{n.split('_', 3)[-1]}={o}" for n, o in outcomes)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
