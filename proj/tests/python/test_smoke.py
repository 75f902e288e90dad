import json
import math

import numpy as np
import pytest

import invflow


def test_log_likelihood_unit_normal():
    y = np.array([0.7])
    assert invflow.log_likelihood(1.0, np.ones(1), y, y) == pytest.approx(-0.5 * math.log(2 * math.pi))
    with pytest.raises(Exception):
        invflow.log_likelihood(0.0, np.ones(1), y, y)


def test_forward_models():
    curve = invflow.ForwardModel.synthetic_curve()
    assert curve.kind == "synthetic-curve"
    assert (curve.input_dim, curve.output_dim) == (7, 178)
    box = invflow.PriorBox.grating()
    centre = 0.5 * (np.asarray(box.lo) + np.asarray(box.hi))
    y = curve.eval(centre)
    assert y.shape == (178,) and np.all(y > 0)
    again = invflow.ForwardModel.from_json(curve.to_json())
    assert np.array_equal(again.eval(centre), y)

    A = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]])
    lin = invflow.ForwardModel.linear(A, np.zeros(3))
    x = np.array([0.2, -0.4])
    assert np.allclose(lin.eval(x), A @ x)
    u = np.array([1.0, 0.5, -2.0])
    assert np.allclose(lin.vjp(x, u), A.T @ u)
    with pytest.raises(ValueError):
        lin.eval(np.zeros(3))


def test_flow_round_trip():
    flow = invflow.build_flow(3, blocks=4, subnet_width=8, seed=1)
    xi = np.random.default_rng(0).standard_normal((50, 3))
    out, log_det = flow.forward(xi)
    assert out.shape == (50, 3)
    assert np.allclose(log_det, 0.0)
    assert np.allclose(flow.inverse(out), xi, atol=1e-12)
    copy = invflow.FlowModel.from_json(flow.to_json())
    assert np.array_equal(copy.forward(xi)[0], out)


def test_inn_and_mcmc_on_a_linear_model():
    rng = np.random.default_rng(3)
    A = np.array([[1.0, 0.3], [0.2, 1.1], [-0.4, 0.6], [0.5, 0.5]])
    x_true = np.array([0.3, -0.2])
    b = 0.1
    y = A @ x_true + b * rng.standard_normal(4)
    meas = invflow.Measurement(y, np.ones(4))
    fwd = invflow.ForwardModel.linear(A, np.zeros(4))
    prior = invflow.PriorBox(np.full(2, -2.0), np.full(2, 2.0))

    cov = np.linalg.inv(A.T @ A / b**2)
    mean = cov @ A.T @ y / b**2
    sd = np.sqrt(np.diag(cov))

    flow = invflow.build_flow(2, blocks=4, subnet_width=32, seed=2)
    train = json.dumps({"epochs": 20, "lr": 0.003, "lr_decay_every": 10, "seed": 1})
    inn = invflow.train_inn_and_sample(flow, fwd, meas, b, prior, train, count=5000, seed=4)
    assert inn["method"] == "inn" and not inn["diverged"]
    assert inn["values"].shape == (5000, 2)
    assert np.mean(inn["losses"][-50:]) <= np.mean(inn["losses"][:50])
    assert np.all(np.abs(inn["values"].mean(axis=0) - mean) < 0.2 * sd)

    mc = invflow.run_sampler(fwd, meas, prior, b=b, walkers=16, steps=3000, burn_in=600, seed=5)
    assert mc["method"] == "mcmc" and 0.2 < mc["acceptance_rate"] < 0.9
    assert np.all(np.abs(mc["values"].mean(axis=0) - mean) < 0.15 * sd)

    report = invflow.compare(inn["values"], mc["values"])
    assert len(report["ks"]) == 2
    assert all(0.0 <= k <= 1.0 for k in report["ks"])
    tau = invflow.iact(mc["values"][::16])
    assert tau.shape == (2,) and np.all(tau >= 0.5)


def test_ks_statistics():
    a = np.random.default_rng(1).standard_normal(20000)
    assert invflow.ks_two_sample(a, a) == 0.0
    assert invflow.ks_two_sample(a, a + 100.0) == 1.0
    assert invflow.ks_standard_normal(a) < 0.02


def test_run_experiment(tmp_path):
    cfg = {
        "b_values": [0.1],
        "inn": {"blocks": 3, "subnet_width": 8,
                "train": {"epochs": 1, "updates_per_epoch": 4, "batch_size": 32, "lr_decay_every": 1}},
        "mcmc": {"steps": 100},
        "samples": {"inn": 200, "mcmc": 200},
    }
    h1, reports = invflow.run_experiment(cfg, str(tmp_path / "a"))
    h2, _ = invflow.run_experiment(json.dumps(cfg), str(tmp_path / "b"))
    assert h1 == h2
    assert len(reports) == 1 and len(reports[0]["ks"]) == 7
    assert (tmp_path / "a" / "study.csv").read_text() == (tmp_path / "b" / "study.csv").read_text()
    with pytest.raises(Exception):
        invflow.run_experiment({"b_values": [0.0]})
