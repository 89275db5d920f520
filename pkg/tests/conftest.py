import numpy as np
import pytest

from a2gcn.data import InteractionTable
from a2gcn.graph import build_graph

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool | None, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}")


def random_graph(rng: np.random.Generator, max_nodes: int = 30, min_each: int = 1):
    """Random tripartite graph with at most ``max_nodes`` nodes in total."""
    while True:
        nu = int(rng.integers(min_each, 10))
        nv = int(rng.integers(min_each, 10))
        na = int(rng.integers(0, 6))
        if nu + nv + na <= max_nodes:
            break
    density = rng.uniform(0.1, 0.7)
    pairs = [(u, v) for u in range(nu) for v in range(nv) if rng.random() < density]
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    table = InteractionTable(arr[:, 0], arr[:, 1], tuple(map(str, range(nu))), tuple(map(str, range(nv))))
    attrs = [sorted(rng.choice(na, size=int(rng.integers(0, na + 1)), replace=False).tolist()) if na else []
             for _ in range(nv)]
    return build_graph(table, attrs, n_attrs=na)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
