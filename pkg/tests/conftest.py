import numpy as np
import pytest

from gnnsteal.gnnmodel import ModelConfig, init_model
from gnnsteal.graphdata import NUM_ATOM_TYPES, generate_motif_dataset, make_graph


def random_graph(rng, n=None, d=NUM_ATOM_TYPES, p=0.3):
    n = int(rng.integers(1, 12)) if n is None else n
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    feats = rng.normal(size=(n, d))
    return make_graph(n, list(zip(iu[keep], ju[keep])), feats, int(rng.integers(2)))


def random_model(rng, arch="GIN", hidden=8, layers=2, d=NUM_ATOM_TYPES, classes=2):
    state = init_model(ModelConfig(arch, layers, hidden, classes, d, int(rng.integers(1 << 30))))
    # nonzero biases and eps so identities are not trivially satisfied
    for k, v in state.params.items():
        if k.endswith((".b", ".b1", ".b2", ".eps")):
            state.params[k] = rng.normal(scale=0.3, size=v.shape)
    return state


@pytest.fixture(scope="session")
def small_motif():
    return generate_motif_dataset(60, seed=13)


# acceptance criteria append "(number, PASS|FAIL, detail)" here; printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {detail}")
