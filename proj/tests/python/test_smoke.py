import json

import numpy as np
import pytest

import meltr


def test_meltr_forward_permutation_invariance():
    net = meltr.MeltrNet.init(d=16, heads=4, num_tasks=3, seed=7)
    a = net.forward([1.0, 2.0, 3.0], [0, 1, 2])
    b = net.forward([3.0, 1.0, 2.0], [2, 0, 1])
    assert a == pytest.approx(b, abs=1e-10)


def test_partials_match_finite_differences():
    net = meltr.MeltrNet.init(d=16, heads=4, num_tasks=3, seed=3)
    losses = [0.5, 1.5, 2.5]
    parts = net.partials(losses)
    h = 1e-5
    for i in range(3):
        up = list(losses)
        dn = list(losses)
        up[i] += h
        dn[i] -= h
        fd = (net.forward(up) - net.forward(dn)) / (2 * h)
        assert parts[i] == pytest.approx(fd, abs=1e-5)


def test_sweep_shape():
    net = meltr.MeltrNet.init(d=16, heads=4, num_tasks=2, seed=1)
    rows = net.sweep(task=0, lo=0.0, hi=3.0, steps=31, baseline=[1.0, 1.0])
    assert len(rows) == 31
    assert rows[0][0] == 0.0 and rows[-1][0] == 3.0


def test_quad_oracle_and_schemes_agree():
    eye = np.eye(2)
    A = [eye, 2 * eye]
    c = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    w_star, hg = meltr.quad_closed_form(A, c, [1.0, 1.0])
    assert w_star == pytest.approx([1 / 3, 2 / 3], abs=1e-12)

    exact, warn, _ = meltr.quad_hypergrad("exact", A, c, [1.0, 1.0], w_star)
    assert not warn
    assert exact == pytest.approx(hg, abs=1e-8)

    cg, _, _ = meltr.quad_hypergrad("cg:1e-10:50", A, c, [1.0, 1.0], w_star)
    assert cg == pytest.approx(exact, abs=1e-8)

    ident, _, _ = meltr.quad_hypergrad("identity", A, c, [1.0, 1.0], w_star)
    neumann0, _, _ = meltr.quad_hypergrad("neumann:0", A, c, [1.0, 1.0], w_star)
    assert ident == neumann0


def test_run_config_writes_record(tmp_path):
    cfg = {
        "suite": "regression_reduced",
        "scheme": "identity",
        "seed": 1,
        "epochs": 2,
        "steps_per_epoch": 3,
        "eval_batches": 2,
        "meltr": {"d": 16, "heads": 4},
    }
    record = meltr.run_config(json.dumps(cfg), str(tmp_path / "run"))
    assert not record["diverged"]
    assert len(record["epochs"]) == 2
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert (tmp_path / "run" / "run.json").exists()


def test_unknown_config_key_rejected(tmp_path):
    cfg = {"suite": "regression_reduced", "scheem": "identity"}
    with pytest.raises(meltr.MeltrError):
        meltr.run_config(json.dumps(cfg), str(tmp_path / "x"))


def test_gradcheck_passes():
    ok, summary = meltr.gradcheck()
    assert ok
    assert "PASS" in summary
