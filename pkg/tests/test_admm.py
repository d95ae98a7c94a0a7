import json

import numpy as np
import pytest

from evoopt import admm, dsl

EXPERT_RULE = "if d > 10.0*p then beta*2.0 else if p > 10.0*d then beta/2.0 else beta"
TIGHT = dict(tol_abs=1e-10, tol_rel=1e-10, max_iter=10_000)


def identity_lasso():
    return admm.StructuredProblem("lasso", np.eye(3), np.array([3.0, 0.5, -2.0]), 1.0)


@pytest.mark.parametrize("v,t,expected", [(3, 1, 2), (0.5, 1, 0), (-2, 1, -1)])
def test_soft_threshold(v, t, expected):
    assert admm.soft_threshold(v, t) == expected


def test_soft_threshold_vector_and_guard():
    np.testing.assert_array_equal(admm.soft_threshold(np.array([3.0, 0.5, -2.0]), 1.0), [2.0, 0.0, -1.0])
    with pytest.raises(ValueError):
        admm.soft_threshold(1.0, -1.0)


def test_identity_lasso_closed_form():
    rep = admm.solve(identity_lasso(), admm.Fixed(), beta0=1.0, tol_abs=1e-9, tol_rel=1e-9, max_iter=200)
    assert rep.converged
    np.testing.assert_allclose(rep.z, [2.0, 0.0, -1.0], atol=1e-6)
    x_ref, obj_ref = admm.solve_reference(identity_lasso())
    np.testing.assert_allclose(x_ref, [2.0, 0.0, -1.0], atol=1e-8)
    assert obj_ref == pytest.approx(0.5 * (1 + 0.25 + 1) + 3.0)


def test_fixed_point_converges_immediately():
    prob = admm.StructuredProblem("lasso", np.eye(4), np.zeros(4), 1.0)
    rep = admm.solve(prob, admm.Fixed(), beta0=1.0)
    assert rep.converged and rep.iterations == 1
    assert rep.r_norm == 0.0 and rep.s_norm == 0.0


def test_large_lambda_gives_zero():
    prob = admm.random_problem("lasso", 20, 40, seed=3)
    prob.lambda1 = float(np.abs(prob.M.T @ prob.y).max()) * 1.01
    x, obj = admm.solve_reference(prob)
    assert np.all(x == 0.0)
    assert obj == pytest.approx(0.5 * prob.y @ prob.y)


def test_random_lasso_matches_reference():
    prob = admm.random_problem("lasso", 20, 40, seed=17)
    rep = admm.solve(prob, admm.Fixed(), beta0=1.0, **TIGHT)
    _, obj = admm.solve_reference(prob)
    assert rep.converged
    assert rep.objective == pytest.approx(obj, rel=1e-6)


@pytest.mark.parametrize("kind", ["lasso", "elasticnet", "grouplasso"])
@pytest.mark.parametrize("beta0", [0.1, 1.0, 10.0])
def test_fixed_beta_matches_reference(kind, beta0):
    for seed in range(3):
        prob = admm.random_problem(kind, 30, 60, seed=seed)
        rep = admm.solve(prob, admm.Fixed(), beta0=beta0, **TIGHT)
        _, obj = admm.solve_reference(prob)
        assert rep.converged
        assert rep.objective == pytest.approx(obj, rel=1e-6)


def test_residuals_below_thresholds_at_convergence():
    prob = admm.random_problem("elasticnet", 30, 50, seed=4)
    rep = admm.solve(prob, admm.Fixed(), beta0=1.0, tol_abs=1e-6, tol_rel=1e-4, max_iter=5000)
    assert rep.converged
    eps_pri = np.sqrt(50) * 1e-6 + 1e-4 * max(np.linalg.norm(rep.x), np.linalg.norm(rep.z))
    assert rep.r_norm <= eps_pri


def test_lasso_subgradient_optimality():
    prob = admm.random_problem("lasso", 30, 60, seed=8)
    rep = admm.solve(prob, admm.Fixed(), beta0=1.0, **TIGHT)
    z = rep.z
    grad = prob.M.T @ (prob.M @ z - prob.y)
    lam = prob.lambda1
    for gi, zi in zip(grad, z):
        if zi == 0.0:
            assert abs(gi) <= lam + 1e-4
        else:
            assert gi == pytest.approx(-lam * np.sign(zi), abs=1e-4)


@pytest.mark.parametrize(
    "r,s,expected", [(5.0, 0.1, 2.0), (0.1, 5.0, 0.5), (1.0, 1.0, 1.0)]
)
def test_update_beta_residual_balancing(r, s, expected):
    assert admm.update_beta(admm.ResidualBalancing(mu=10, eta=2), r, s, 1.0, 3) == expected


@pytest.mark.parametrize("r,s", [(5.0, 0.1), (0.1, 5.0), (1.0, 1.0), (0.0, 0.0)])
def test_update_beta_dsl_matches_expert(r, s):
    rule = admm.DslRule(dsl.compile_source(EXPERT_RULE, dsl.PENALTY))
    rb = admm.ResidualBalancing()
    assert admm.update_beta(rule, r, s, 1.0, 3) == admm.update_beta(rb, r, s, 1.0, 3)


def test_update_beta_fixed_and_clamp():
    assert admm.update_beta(admm.Fixed(), 9.0, 0.0, 3.0, 1) == 3.0
    big = admm.DslRule(dsl.compile_source("beta * 1000000.0", dsl.PENALTY), beta_max=10.0)
    assert admm.update_beta(big, 1.0, 1.0, 5.0, 1) == 10.0
    tiny = admm.DslRule(dsl.compile_source("0.0 - 5.0", dsl.PENALTY))
    assert admm.update_beta(tiny, 1.0, 1.0, 5.0, 1) == 1e-6


def test_strategy_validation():
    with pytest.raises(ValueError):
        admm.ResidualBalancing(mu=1.0)
    with pytest.raises(ValueError):
        admm.DslRule(dsl.compile_source("bin_util", dsl.SCHEDULE))
    with pytest.raises(ValueError):
        admm.solve(identity_lasso(), admm.Fixed(beta_min=1.0, beta_max=0.5))
    with pytest.raises(ValueError):
        admm.solve(identity_lasso(), admm.Fixed(), beta0=1e9)
    with pytest.raises(ValueError):
        admm.solve(identity_lasso(), admm.Fixed(), tol_abs=0.0)


@pytest.mark.parametrize("src", ["beta * 1000000.0", "beta / 1000000.0", "exp(k)", "0.0 - beta", "if k > 3.0 then 1e12 else 1e-12"])
def test_adversarial_rules_stay_clamped(src):
    prob = admm.random_problem("lasso", 20, 30, seed=2)
    strat = admm.DslRule(dsl.compile_source(src, dsl.PENALTY))
    rep = admm.solve(prob, strat, beta0=1.0, max_iter=300)
    assert all(strat.beta_min <= b <= strat.beta_max for b in rep.beta_trace)
    assert np.isfinite(rep.objective)


def test_update_period_limits_changes():
    prob = admm.random_problem("lasso", 20, 30, seed=2)
    rep = admm.solve(prob, admm.ResidualBalancing(update_period=5), beta0=500.0, max_iter=200)
    changes = [i for i in range(1, len(rep.beta_trace)) if rep.beta_trace[i] != rep.beta_trace[i - 1]]
    assert changes and all(i % 5 == 0 for i in changes)


def test_dsl_fault_surfaces():
    strat = admm.DslRule(dsl.compile_source("beta + p + d", dsl.PENALTY), limits=dsl.EvalLimits(step_budget=2))
    with pytest.raises(admm.DslEvaluationError):
        admm.solve(admm.random_problem("lasso", 10, 10, seed=0), strat, beta0=100.0, max_iter=50)


def test_problem_validation():
    with pytest.raises(admm.ProblemSpecError):
        admm.StructuredProblem("lasso", np.eye(3), np.ones(2), 1.0)
    with pytest.raises(admm.ProblemSpecError):
        admm.StructuredProblem("elasticnet", np.eye(2), np.ones(2), 1.0)
    with pytest.raises(admm.ProblemSpecError):
        admm.StructuredProblem("grouplasso", np.eye(3), np.ones(3), 1.0, groups=[[0, 1], [1, 2]])
    with pytest.raises(admm.ProblemSpecError):
        admm.StructuredProblem("lasso", np.eye(2), np.ones(2), 0.0)


def test_problem_file_round_trip(tmp_path):
    prob = admm.random_problem("grouplasso", 8, 12, seed=1)
    admm.save_problem(prob, tmp_path / "p.json")
    back = admm.load_problem(tmp_path / "p.json")
    np.testing.assert_array_equal(back.M, prob.M)
    assert back.groups == prob.groups and back.lambda1 == prob.lambda1

    (tmp_path / "seeded.json").write_text(json.dumps({"kind": "lasso", "dims": [10, 20], "seed": 5}))
    seeded = admm.load_problem(tmp_path / "seeded.json")
    np.testing.assert_array_equal(seeded.M, admm.random_problem("lasso", 10, 20, 5).M)

    (tmp_path / "bad.json").write_text(json.dumps({"kind": "lasso", "dims": [2, 2], "M": [[1, 0], [0, 1]]}))
    with pytest.raises(admm.ProblemSpecError):
        admm.load_problem(tmp_path / "bad.json")
