"""Outer fit: objective, assembled gradient, LM behavior, reproducibility."""

import json
from dataclasses import replace

import numpy as np
import pytest

from helpers import Q3, R3, make_lti3, random_lti3_windows
from mhetune.arrival import ArrivalParams, default_arrival, eta_to_weight, \
    l_free_from_factor
from mhetune.data import WindowBatch, extract_windows
from mhetune.errors import ConfigError, EvaluationError
from mhetune.mhe import predict_batch
from mhetune.models import make_lorenz, make_lti_scalar
from mhetune.pem import (IdentifyOptions, as_window_batch, evaluate_objective,
                         identify, mc_expected_objective, result_to_dict,
                         save_eps_csv, save_result_json, save_trace_csv)
from mhetune.sensitivity import (pack_params, prediction_jacobian_batch,
                                 unpack_params)
from mhetune.sim import SimConfig, simulate

SCALAR = make_lti_scalar()


def scalar_dataset(n_windows, theta=0.8, seed=0, m=3):
    cfg = SimConfig(system="lti_scalar", theta_star=[theta],
                    length=n_windows + m, seed=seed)
    return simulate(cfg)


def test_zero_noise_objective_is_zero():
    cfg = SimConfig(system="lti_scalar", theta_star=[0.8], length=40,
                    process_noise={"kind": "none"},
                    measurement_noise={"kind": "none"}, x0=[1.0])
    traj = simulate(cfg)
    eta = ArrivalParams(s_bar=[0.0], l_free=[0.0], mode="none")
    v_n, eps = evaluate_objective(traj, SCALAR, [0.8], eta,
                                  IdentifyOptions(m=3))
    assert eps.shape == (37, 1)
    assert v_n <= 1e-14


def test_objective_is_scale_invariant():
    wins = [w for w, *_ in random_lti3_windows(20, 5, seed=40)]
    batch = WindowBatch.from_windows(wins)
    theta = [0.3]
    eta = ArrivalParams(s_bar=[0.1, -0.2, 0.3],
                        l_free=l_free_from_factor(np.eye(3) * 0.5))
    v_ref, eps_ref = evaluate_objective(batch, make_lti3(), theta, eta)
    for c in (0.1, 10.0):
        model_c = replace(make_lti3(), Q=lambda th, c=c: c * Q3,
                          R=lambda th, c=c: c * R3)
        eta_c = ArrivalParams(
            s_bar=eta.s_bar,
            l_free=l_free_from_factor(eta_to_weight(eta) / np.sqrt(c)))
        v_c, eps_c = evaluate_objective(batch, model_c, theta, eta_c)
        np.testing.assert_allclose(v_c, v_ref, rtol=1e-10)
        np.testing.assert_allclose(eps_c, eps_ref, rtol=0, atol=1e-9)


def test_assembled_gradient_matches_objective_fd():
    # the LM normal equations are built from per-window Jacobians; their
    # aggregate must differentiate the cold-start objective itself
    model = make_lorenz()
    cfg = SimConfig(system="lorenz", theta_star=[10.0, 30.0], T=2.0, seed=5)
    batch = as_window_batch([simulate(cfg)], m=8, stride=10)
    theta = np.array([11.0, 29.0])
    eta = default_arrival(3)
    _, eps, sol = predict_batch(model, batch, theta, eta)
    assert np.all(sol.converged)
    J, ok, _ = prediction_jacobian_batch(model, batch, sol.X, theta, eta)
    assert np.all(ok)
    N = batch.n_windows
    grad = 2.0 / N * np.einsum("npk,np->k", J, eps)

    v0 = pack_params(theta, eta)
    fd = np.empty_like(grad)
    for j in range(v0.size):
        h = 1e-5 * max(1.0, abs(v0[j]))
        vp, vm = v0.copy(), v0.copy()
        vp[j] += h
        vm[j] -= h
        th_p, eta_p = unpack_params(vp, 2, 3, "constant")
        th_m, eta_m = unpack_params(vm, 2, 3, "constant")
        fd[j] = (evaluate_objective(batch, model, th_p, eta_p)[0]
                 - evaluate_objective(batch, model, th_m, eta_m)[0]) / (2 * h)
    assert np.max(np.abs(grad - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-3


def test_identify_recovers_scalar_parameter():
    trajs = scalar_dataset(300, seed=0)
    opts = IdentifyOptions(m=3)
    res = identify(trajs, SCALAR, [0.5], opts=opts)
    assert res.converged
    assert abs(res.theta_hat[0] - 0.8) < 0.15
    assert res.iterations >= 1
    d = res.window_diagnostics
    assert d.eps_norm.shape == (300,) and not d.excluded.any()
    assert np.max(d.kkt_norm) <= opts.mhe.tol
    # accepted merits decrease strictly along the trace
    accepted = [row.v_n for row in res.trace if row.accepted]
    assert all(b < a for a, b in zip(accepted, accepted[1:]))
    # the reported objective is the cold-start objective, bit for bit
    v_n, _ = evaluate_objective(trajs, SCALAR, res.theta_hat, res.eta_hat,
                                opts)
    assert v_n == res.objective


def test_identify_without_free_parameters_is_a_no_op():
    trajs = scalar_dataset(40, seed=3)
    opts = IdentifyOptions(m=3, optimize_theta=False, optimize_eta=False)
    res = identify(trajs, SCALAR, [0.6], opts=opts)
    assert res.converged and res.iterations == 0
    np.testing.assert_array_equal(res.theta_hat, [0.6])
    assert len(res.trace) == 1


def test_identify_with_fixed_eta_leaves_it_untouched():
    trajs = scalar_dataset(120, seed=4)
    eta0 = default_arrival(1)
    res = identify(trajs, SCALAR, [0.5], eta0=eta0,
                   opts=IdentifyOptions(m=3, optimize_eta=False))
    np.testing.assert_array_equal(res.eta_hat.s_bar, eta0.s_bar)
    np.testing.assert_array_equal(res.eta_hat.l_free, eta0.l_free)
    assert abs(res.theta_hat[0] - 0.8) < 0.25


def test_identify_is_worker_count_invariant():
    trajs = scalar_dataset(120, seed=1)
    results = []
    for workers in (1, 2):
        opts = IdentifyOptions(m=3, workers=workers, max_outer=6)
        results.append(identify(trajs, SCALAR, [0.5], opts=opts))
    a, b = results
    np.testing.assert_array_equal(a.theta_hat, b.theta_hat)
    np.testing.assert_array_equal(a.eta_hat.l_free, b.eta_hat.l_free)
    assert a.objective == b.objective
    assert [r.v_n for r in a.trace] == [r.v_n for r in b.trace]
    va, ea = evaluate_objective(trajs, SCALAR, a.theta_hat, a.eta_hat,
                                IdentifyOptions(m=3, workers=1))
    vb, eb = evaluate_objective(trajs, SCALAR, a.theta_hat, a.eta_hat,
                                IdentifyOptions(m=3, workers=2))
    assert va == vb
    np.testing.assert_array_equal(ea, eb)


def test_theta_box_bound_is_respected():
    model = replace(SCALAR, theta_bounds=([0.0], [0.5]))
    trajs = scalar_dataset(200, seed=2)
    res = identify(trajs, model, [0.4], opts=IdentifyOptions(m=3))
    assert res.theta_hat[0] <= 0.5
    assert res.theta_hat[0] > 0.5 - 1e-6     # the bound is active


def test_penalty_constraint_is_respected():
    model = replace(SCALAR, h_P=lambda th: np.asarray([th[0] - 0.5]))
    trajs = scalar_dataset(200, seed=2)
    res = identify(trajs, model, [0.4], opts=IdentifyOptions(m=3))
    assert 0.49 < res.theta_hat[0] < 0.51


def test_small_step_cap_limits_accepted_steps():
    # sigma_scale 1 keeps every packed coordinate inside [-1, 1], so the
    # relative cap max_step * max(1, |p_j|) is exactly max_step per coordinate
    trajs = scalar_dataset(80, seed=6)
    cap = 1e-3
    eta0 = default_arrival(1, sigma_scale=1.0)
    opts = IdentifyOptions(m=3, max_outer=4, max_step=cap)
    res = identify(trajs, SCALAR, [0.5], eta0=eta0, opts=opts)
    steps = [r.step_norm for r in res.trace[1:] if r.accepted]
    assert steps
    n_par = 1 + 2  # theta, s_bar, one factor entry
    assert max(steps) <= cap * np.sqrt(n_par) + 1e-12


def test_blown_up_windows_abort_evaluation():
    trajs = scalar_dataset(30, seed=7)
    eta = ArrivalParams(s_bar=[1.0], l_free=[0.0])
    with pytest.raises(EvaluationError, match="windows failed"):
        evaluate_objective(trajs, SCALAR, [1e200], eta, IdentifyOptions(m=3))


def test_as_window_batch_guards():
    trajs = scalar_dataset(10, seed=8)
    with pytest.raises(ConfigError, match="needs m"):
        as_window_batch([trajs])
    with pytest.raises(ConfigError, match="too short"):
        as_window_batch([trajs], m=40)
    with pytest.raises(ConfigError):
        as_window_batch("not a dataset")


def test_serialization_round_trips(tmp_path):
    trajs = scalar_dataset(60, seed=9)
    opts = IdentifyOptions(m=3, max_outer=8)
    res = identify(trajs, SCALAR, [0.6], opts=opts)
    doc = result_to_dict(res)
    assert doc["theta_hat"] == list(res.theta_hat)
    assert doc["eta_hat"]["mode"] == "constant"
    assert len(doc["eta_hat"]["L"]) == 1
    jpath = tmp_path / "result.json"
    save_result_json(str(jpath), res)
    assert json.loads(jpath.read_text())["objective"] == res.objective

    tpath = tmp_path / "trace.csv"
    save_trace_csv(str(tpath), res.trace)
    lines = tpath.read_text().splitlines()
    assert lines[0] == "iter,V_N,step_norm,damping,accepted"
    assert len(lines) == len(res.trace) + 1

    batch = as_window_batch(trajs, m=3)
    _, eps = evaluate_objective(batch, SCALAR, res.theta_hat, res.eta_hat)
    epath = tmp_path / "eps.csv"
    save_eps_csv(str(epath), eps, batch.origins)
    lines = epath.read_text().splitlines()
    assert lines[0] == "window,traj,offset,eps_0"
    assert len(lines) == eps.shape[0] + 1
    first = lines[1].split(",")
    assert first[:3] == ["0", "0", "0"]
    np.testing.assert_allclose(float(first[3]), eps[0, 0])


def test_mc_curve_shapes_and_determinism():
    grid = [0.7, 0.8, 0.9]
    opts = IdentifyOptions(max_outer=25)
    curve = mc_expected_objective(SCALAR, 0.8, grid, n_mc=2, opts=opts,
                                  n_windows=50, seed=11)
    assert curve.v_samples.shape == (3, 2)
    assert curve.v_mean.shape == (3,) and curve.v_se.shape == (3,)
    assert curve.argmin_theta in grid
    again = mc_expected_objective(SCALAR, 0.8, grid, n_mc=2, opts=opts,
                                  n_windows=50, seed=11)
    np.testing.assert_array_equal(curve.v_samples, again.v_samples)

    single = mc_expected_objective(SCALAR, 0.8, [0.8], n_mc=1, opts=opts,
                                   n_windows=40, seed=12)
    assert single.v_se[0] == 0.0 and single.argmin_theta == 0.8
    with pytest.raises(ConfigError):
        mc_expected_objective(make_lti3(), 0.8, grid, n_mc=1, opts=opts)
