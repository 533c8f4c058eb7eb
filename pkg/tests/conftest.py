from __future__ import annotations

import numpy as np
import pytest

from prism_audit.records import DatasetStats, DocumentStats


def random_doc(rng, doc_id, n=None, raw=True):
    n = int(rng.integers(1, 40)) if n is None else n
    mu = -rng.uniform(0.1, 5.0, n)
    sigma = rng.uniform(0.0, 3.0, n)
    logp = np.minimum(mu + rng.normal(0, 1.5, n), 0.0)
    raw_bytes = bytes(rng.integers(32, 127, n).astype(np.uint8)) if raw else None
    return DocumentStats(doc_id, np.column_stack([logp, mu, sigma]), raw_bytes=raw_bytes)


def random_dataset(rng, n_docs=20, model_id="m", dataset_id="d"):
    return DatasetStats(model_id, dataset_id, tuple(random_doc(rng, f"doc{i:04d}") for i in range(n_docs)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
