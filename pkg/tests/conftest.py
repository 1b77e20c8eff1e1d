import time

import numpy as np
import pytest

from ddpgd.config import resolve_config
from ddpgd.experiments import build_experiment
from ddpgd.linalg import SparseMatrix, spd_solve
from ddpgd.mesh import assemble_mass, eliminate_dirichlet
from ddpgd.offline import build_surrogate
from ddpgd.reference import assemble_affine

# acceptance lines collected by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def build_models(ex, workers=1):
    models, reports = [], []
    for sd in ex.subdomains:
        m, rep = build_surrogate(sd, ex.data[sd.id], ex.pgd_config(), ex.config.compress_tol, ex.config.seed, workers)
        models.append(m)
        reports.append(rep)
    return models, reports


@pytest.fixture(scope="session")
def bidomain():
    return build_experiment(resolve_config("bidomain"))


@pytest.fixture(scope="session")
def bidomain_models(bidomain):
    t0 = time.perf_counter()
    models, reports = build_models(bidomain)
    return models, reports, time.perf_counter() - t0


@pytest.fixture(scope="session")
def chain9():
    return build_experiment(resolve_config("chain9"))


@pytest.fixture(scope="session")
def chain9_models(chain9):
    models, _ = build_models(chain9, workers=4)
    return models


@pytest.fixture(scope="session")
def small_bidomain():
    """Coarse bidomain (h = 0.25, short parameter range) for fast tests."""
    d = resolve_config("bidomain").raw
    d = {**d, "mesh": {"h": 0.25}, "subdomains": [
        {"id": "omega1", "x": [0.0, 1.25]}, {"id": "omega2", "x": [0.75, 2.0]}]}
    d["parameters"] = [{"name": "mu", "lower": 1.0, "upper": 5.0, "step": 0.05}]
    return build_experiment(resolve_config(d))


@pytest.fixture(scope="session")
def small_models(small_bidomain):
    models, _ = build_models(small_bidomain)
    return models


def local_direct_solve(sd, data, mu, trace):
    """Full-order solve on one subdomain with nodal Dirichlet ``trace`` on its interface."""
    K, F = assemble_affine(sd.mesh, data.diffusion, data.source, data.neumann, mu)
    K = SparseMatrix.from_scipy(K, symmetric=True)
    fixed = sd.fixed_nodes()
    vals = np.zeros(sd.mesh.n_nodes)
    vals[sd.all_interface_nodes] = trace
    red = eliminate_dirichlet(K, F, fixed, vals[fixed])
    return red.expand(spd_solve(red.matrix, red.rhs), vals[fixed])


def mass_norm(mesh, v):
    return float(np.sqrt(v @ (assemble_mass(mesh) @ v)))
