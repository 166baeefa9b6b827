import json

import numpy as np
import pytest

import mbdl


def lasso(H, x, r, rho):
    return 0.5 * np.sum((x - H @ r) ** 2) + rho * np.sum(np.abs(r))


@pytest.fixture
def instance():
    rng = np.random.default_rng(5)
    H = rng.normal(size=(12, 20)) / np.sqrt(12)
    s = np.zeros(20)
    s[[2, 9, 15]] = [1.0, -0.7, 0.4]
    return H, H @ s + 0.01 * rng.normal(size=12)


def test_soft_threshold_matches_numpy():
    x = np.linspace(-2, 2, 41)
    np.testing.assert_allclose(mbdl.soft_threshold(x, 0.3), np.sign(x) * np.maximum(np.abs(x) - 0.3, 0), atol=0)


def test_solvers_agree_on_lasso(instance):
    H, x = instance
    rho = 0.05
    r_ista = mbdl.ista(H, x, rho, iterations=5000)["coefficients"]
    r_fista = mbdl.fista(H, x, rho, iterations=2000)["coefficients"]
    r_admm = mbdl.admm(H, x, rho, tol=1e-12, max_iter=20000)["coefficients"]
    ref = lasso(H, x, r_fista, rho)
    for r in (r_ista, r_admm):
        assert abs(lasso(H, x, r, rho) - ref) <= 1e-7 * ref
    assert mbdl.lasso_objective(H, x, r_fista, rho) == pytest.approx(ref, rel=1e-12)


def test_ista_objective_trace_does_not_increase(instance):
    H, x = instance
    obj = np.array(mbdl.ista(H, x, 0.05, iterations=300)["objective"])
    assert np.all(np.diff(obj) <= 1e-12 * np.abs(obj[:-1]))


def test_lista_at_init_is_ista(instance):
    H, x = instance
    out = mbdl.lista_forward(H, x, 0.05, 7)
    np.testing.assert_allclose(out, mbdl.ista(H, x, 0.05, iterations=7)["coefficients"], atol=1e-12)


def scalar_model(a=0.9, c=1.0, v=0.2, w=0.5):
    one = np.ones((1, 1))
    return {"A": a * one, "B": one, "C": c * one, "V": v * one, "W": w * one, "P0": one}


def test_scalar_kalman_filter_matches_recursion():
    m = scalar_model()
    _, X = mbdl.simulate(m, 50, seed=3)
    est = mbdl.kalman_filter(m, X)
    z, p, out = 0.0, 1.0, []
    for t in range(50):
        z, p = 0.9 * z, 0.81 * p + 0.2  # x_1 already follows one transition from z_0
        k = p / (p + 0.5)
        z, p = z + k * (X[t, 0] - z), (1 - k) * p
        out.append(z)
    np.testing.assert_allclose(est[:, 0], out, atol=1e-10)


def test_scalar_lqr_gain():
    m = scalar_model(a=1.2)
    p = 1.0
    for _ in range(2000):
        p = 1 + 1.44 * p - (1.2 * p) ** 2 / (1 + p)
    gain = mbdl.lqr_gain(m)
    assert abs(abs(gain[0, 0]) - 1.2 * p / (1 + p)) < 1e-9


def test_errors_map_to_python():
    with pytest.raises(ValueError, match="schema_version"):
        mbdl.resolve_config({"method": "ista"})
    with pytest.raises(ValueError):
        mbdl.ista(np.ones((3, 4)), np.ones(5), 0.1)
    assert "lista" in mbdl.methods()["sparse"]


def test_experiment_run_is_reproducible(tmp_path):
    cfg = {"schema_version": 1, "method": "lista", "seed": 2, "train": {"epochs": 1}}
    a = mbdl.run_experiment(cfg, str(tmp_path / "a"), quick=True)
    b = mbdl.run_experiment(cfg, str(tmp_path / "b"), quick=True)
    a.pop("timing"), b.pop("timing")
    assert a.pop("run_dir").split("/")[-1] == b.pop("run_dir").split("/")[-1]
    assert a == b
    assert a["config_hash"] == mbdl.config_hash(cfg, quick=True)
    saved = json.loads((tmp_path / "a" / f"sparse-lista-{a['config_hash']}" / "config.json").read_text())
    assert saved["method"] == "lista"
