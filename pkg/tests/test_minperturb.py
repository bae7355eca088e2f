import numpy as np
import pytest

from perturbcert import (
    FlipTarget,
    Network,
    forward,
    make_flip_target,
    margin,
    minimal_perturbation_empirical,
    minimal_perturbation_exact,
    minimal_perturbation_rank_k,
    monotonicity_audit,
    pinv,
    upstream,
)
from perturbcert.experiments import FlipStudyConfig, build_flip_network, pick_sample_in_margin_window

from conftest import random_invertible_network
from oracles import penalty_minimal_perturbation

N_PROPERTY_CASES = 500


class TestMakeFlipTarget:
    def test_formula_application(self):
        net = Network([np.eye(2)], [])
        x = np.array([[2.0], [0.0]])  # logits [2, 0], gamma 2
        target = make_flip_target(net, x, 0, epsilon=1e-3)
        shift = 1.0 + 1e-3
        np.testing.assert_allclose(target.y_tilde[:, 0], [2.0 - shift, 0.0 + shift])
        assert target.modified_columns == (0,)
        assert target.target_class == (1,)

    def test_zero_margin_rejected(self):
        net = Network([np.eye(2)], [])
        with pytest.raises(ValueError):
            make_flip_target(net, np.array([[1.0], [1.0]]), 0)

    def test_new_margin_is_minus_two_epsilon(self, rng):
        for _ in range(20):
            dims = sorted((int(d) for d in rng.integers(2, 6, size=4)), reverse=True)
            net = random_invertible_network(rng, dims, alpha=0.1)
            x = rng.standard_normal((dims[0], 1))
            logits = forward(net, x)[:, 0]
            t = int(np.argmax(logits))
            if margin(logits, t).gamma <= 1e-9:
                continue
            eps = 1e-3
            target = make_flip_target(net, x, t, epsilon=eps)
            new_rep = margin(target.y_tilde[:, 0], t)
            assert new_rep.gamma == pytest.approx(-2 * eps, abs=1e-12)


class TestExactSolver:
    def test_identity_single_layer_closed_form(self):
        # Flip [1,0] -> [0,1] through W = I: the cheapest update writes the
        # difference into the column x selects, norm sqrt(2).
        net = Network([np.eye(2)], [])
        x = np.array([[1.0], [0.0]])
        target = FlipTarget(y_original=np.array([[1.0], [0.0]]),
                            y_tilde=np.array([[0.0], [1.0]]))
        res = minimal_perturbation_exact(net, 1, x, target)
        np.testing.assert_allclose(res.deltas[1], [[-1.0, 0.0], [1.0, 0.0]], atol=1e-12)
        assert res.frobenius_norm == pytest.approx(np.sqrt(2.0))
        assert res.constraint_residual < 1e-12
        assert res.flipped
        # brute-force confirmation that sqrt(2) is optimal
        oracle_norm, _ = penalty_minimal_perturbation(
            net.weights, [None], 1, x, target.y_tilde,
            np.random.default_rng(0), restarts=8, steps_per_stage=200)
        assert oracle_norm >= np.sqrt(2.0) - 1e-6

    def test_no_change_gives_zero_perturbation(self, rng):
        dims = [4, 3, 2]
        net = random_invertible_network(rng, dims, alpha=0.1)
        x = rng.standard_normal((4, 1))
        y = forward(net, x)
        target = FlipTarget(y_original=y, y_tilde=y.copy())
        res = minimal_perturbation_exact(net, 1, x, target)
        assert res.frobenius_norm == 0.0
        assert not res.flipped

    def test_least_squares_flag_when_rowspace_violated(self, rng):
        # More modified columns than the rank of the upstream representation:
        # the pre-image difference cannot lie in its row space.
        net = Network([np.eye(2)], [])
        x = np.array([[1.0, 2.0, -1.0], [0.0, 0.0, 0.0]])  # rank 1
        y = forward(net, x)
        y_tilde = y + rng.standard_normal(y.shape)
        target = FlipTarget(y_original=y, y_tilde=y_tilde)
        res = minimal_perturbation_exact(net, 1, x, target)
        assert res.least_squares_only
        assert res.constraint_residual > 1e-6

    def test_oracle_never_beats_closed_form(self):
        # Independent penalty-method search with restarts and a generous
        # step budget never finds a feasible cheaper perturbation.  Constant
        # post-input width keeps every downstream step square, so the
        # preimage of the target is unique and the closed form is the
        # global minimum (rectangular steps admit a preimage family and the
        # formula is only an upper bound there).
        rng = np.random.default_rng(77)
        checked = 0
        while checked < 20:
            depth = int(rng.integers(1, 4))
            w = int(rng.integers(2, 5))
            dims = [int(rng.integers(2, 5))] + [w] * depth
            net = random_invertible_network(rng, [max(dims[0], w)] + [w] * depth,
                                            activation="leaky_relu", alpha=0.1)
            d0 = net.input_dim
            x = rng.standard_normal((d0, 1))
            logits = forward(net, x)[:, 0]
            t = int(np.argmax(logits))
            if margin(logits, t).gamma <= 1e-6:
                continue
            n = int(rng.integers(1, net.num_layers + 1))
            target = make_flip_target(net, x, t)
            res = minimal_perturbation_exact(net, n, x, target)
            assert res.constraint_residual < 1e-8
            alphas = [0.1] * (net.num_layers - 1) + [None]
            oracle_norm, _ = penalty_minimal_perturbation(
                net.weights, alphas, n, x, target.y_tilde,
                np.random.default_rng(checked), restarts=20, steps_per_stage=400)
            assert oracle_norm >= res.frobenius_norm - 1e-6
            checked += 1


class TestFiveLayerOracle:
    def test_oracle_never_beats_closed_form_on_trained_net(self, flip_setup):
        # Trained 5-layer setup: the independent search, restarted and with a
        # generous budget, reaches feasibility yet never undercuts the
        # closed form at any layer.
        net, x, t, target = flip_setup
        alphas = [net.activations[0].alpha] * (net.num_layers - 1) + [None]
        for n in range(1, net.num_layers + 1):
            exact = minimal_perturbation_exact(net, n, x, target)
            oracle_norm, oracle_resid = penalty_minimal_perturbation(
                net.weights, alphas, n, x, target.y_tilde,
                np.random.default_rng(n), restarts=8, steps_per_stage=400)
            assert oracle_resid < 1e-6  # the search does reach feasibility
            assert oracle_norm >= exact.frobenius_norm - 1e-6

    def test_result_record_is_json_ready(self, flip_setup):
        import json

        net, x, t, target = flip_setup
        res = minimal_perturbation_exact(net, 2, x, target)
        record = json.loads(json.dumps(res.to_record()))
        assert record["layers"] == [2]
        assert record["frobenius_norm"] == pytest.approx(res.frobenius_norm)
        assert "2" in record["per_layer_norms"]


class TestRankRestrictedSolver:
    def test_full_rank_matches_exact(self, rng):
        dims = [4, 3, 2]
        net = random_invertible_network(rng, dims, alpha=0.1)
        x = rng.standard_normal((4, 2))
        y = forward(net, x)
        target = FlipTarget(y_original=y, y_tilde=y + 0.1 * rng.standard_normal(y.shape))
        full = minimal_perturbation_exact(net, 1, x, target)
        ranked = minimal_perturbation_rank_k(net, 1, x, target, k=2)
        np.testing.assert_allclose(ranked.deltas[1], full.deltas[1], atol=1e-10)
        assert ranked.support_ok

    def test_top_mode_target_is_exact_at_k_one(self, rng):
        # Single linear layer; build the logit change as an outer product
        # with the top right singular vector of the input block.
        net = Network([rng.standard_normal((3, 4))], [])
        x = rng.standard_normal((4, 5))
        from perturbcert import svd
        d = svd(x)
        y = forward(net, x)
        w_dir = rng.standard_normal((3, 1))
        y_tilde = y + w_dir @ d.vt[0:1, :]
        target = FlipTarget(y_original=y, y_tilde=y_tilde)
        res = minimal_perturbation_rank_k(net, 1, x, target, k=1)
        assert res.support_ok
        assert res.constraint_residual <= 1e-8

    def test_dropped_component_flagged_with_residual(self, rng):
        net = Network([rng.standard_normal((3, 4))], [])
        x = rng.standard_normal((4, 5))
        from perturbcert import svd
        d = svd(x)
        y = forward(net, x)
        w1 = rng.standard_normal((3, 1))
        w2 = rng.standard_normal((3, 1))
        y_tilde = y + w1 @ d.vt[0:1, :] + w2 @ d.vt[1:2, :]
        target = FlipTarget(y_original=y, y_tilde=y_tilde)
        res = minimal_perturbation_rank_k(net, 1, x, target, k=1)
        assert not res.support_ok
        dropped = np.linalg.norm(w2 @ d.vt[1:2, :])
        assert res.constraint_residual == pytest.approx(dropped, rel=1e-8)


@pytest.fixture(scope="module")
def flip_setup():
    cfg = FlipStudyConfig(seed=61, iterations=3000)
    net, data = build_flip_network(cfg)
    idx = pick_sample_in_margin_window(net, data, *cfg.margin_window)
    x = data.x[:, idx:idx + 1]
    t = int(data.labels[idx])
    target = make_flip_target(net, x, t)
    return net, x, t, target


class TestEmpiricalOptimizer:
    def test_huge_lambda_suppresses_flip(self, flip_setup):
        net, x, t, target = flip_setup
        p = target.target_class[0]
        res = minimal_perturbation_empirical(net, [3], x, p, lam=1e6, iterations=1500)
        assert res.frobenius_norm < 1e-3
        assert not res.flipped

    def test_moderate_lambda_flips_above_theory(self, flip_setup):
        net, x, t, target = flip_setup
        p = target.target_class[0]
        for n in (1, net.num_layers):
            exact = minimal_perturbation_exact(net, n, x, target)
            emp = minimal_perturbation_empirical(net, [n], x, p, lam=1.0, iterations=3000)
            assert emp.flipped
            assert emp.frobenius_norm >= exact.frobenius_norm - 1e-6

    def test_nested_layer_sets_monotone(self, flip_setup):
        net, x, t, target = flip_setup
        p = target.target_class[0]
        results = {}
        for k in (1, 2, 3):
            layers = tuple(range(1, k + 1))
            results[layers] = minimal_perturbation_empirical(
                net, layers, x, p, lam=1.0, iterations=3000)
        report = monotonicity_audit(results, tolerance=0.05)
        assert report.ok, report.violations

    def test_bad_args(self, flip_setup):
        net, x, _, _ = flip_setup
        with pytest.raises(ValueError):
            minimal_perturbation_empirical(net, [], x, 0, lam=1.0)
        with pytest.raises(ValueError):
            minimal_perturbation_empirical(net, [1], x, 0, lam=0.0)


class TestMonotonicityAudit:
    def test_single_result_empty_report(self):
        report = monotonicity_audit({(1,): 0.5})
        assert report.checked_pairs == 0 and report.ok

    def test_non_increasing_passes(self):
        report = monotonicity_audit({(1,): 0.5, (1, 2): 0.4, (1, 2, 3): 0.4})
        assert report.ok and report.checked_pairs == 3

    def test_violation_flagged(self):
        report = monotonicity_audit({(1,): 0.4, (1, 2): 0.5})
        assert not report.ok
        v = report.violations[0]
        assert v.smaller_set == (1,) and v.larger_set == (1, 2)

    def test_tolerance_allows_slack(self):
        report = monotonicity_audit({(1,): 0.40, (1, 2): 0.41}, tolerance=0.05)
        assert report.ok


class TestProperties:
    def test_orthogonal_complement_decomposition(self):
        # Adding any update with rows orthogonal to the upstream columns
        # decomposes the squared norm exactly.
        rng = np.random.default_rng(201)
        for _ in range(N_PROPERTY_CASES):
            d_out, d_in, s = (int(v) for v in rng.integers(2, 6, size=3))
            rep = rng.standard_normal((d_in, s))
            delta = rng.standard_normal((d_out, s)) @ pinv(rep)
            g = rng.standard_normal((d_out, d_in))
            q = g @ (np.eye(d_in) - rep @ pinv(rep))
            lhs = np.linalg.norm(delta + q) ** 2
            rhs = np.linalg.norm(delta) ** 2 + np.linalg.norm(q) ** 2
            assert abs(lhs - rhs) <= 1e-9 * max(rhs, 1e-12)

    def test_rank_bound(self):
        rng = np.random.default_rng(202)
        for _ in range(N_PROPERTY_CASES):
            dims = sorted((int(d) for d in rng.integers(2, 6, size=3)), reverse=True)
            net = random_invertible_network(rng, dims, alpha=0.1)
            s = int(rng.integers(1, dims[1] + 1))
            x = rng.standard_normal((dims[0], s))
            y = forward(net, x)
            y_tilde = y.copy()
            n_mod = int(rng.integers(1, s + 1))
            cols = rng.choice(s, size=n_mod, replace=False)
            y_tilde[:, cols] += 0.3 * rng.standard_normal((dims[-1], n_mod))
            target = FlipTarget(y_original=y, y_tilde=y_tilde)
            n = int(rng.integers(1, net.num_layers + 1))
            res = minimal_perturbation_exact(net, n, x, target)
            rep_rank = np.linalg.matrix_rank(upstream(net, n, x))
            assert res.rank_of_delta <= min(n_mod, rep_rank)

    def test_apply_and_reproduce(self):
        # With a full-column-rank upstream representation the row-space
        # condition holds: modified columns hit the target, untouched
        # columns stay put.
        rng = np.random.default_rng(203)
        for _ in range(N_PROPERTY_CASES):
            dims = sorted((int(d) for d in rng.integers(3, 6, size=3)), reverse=True)
            net = random_invertible_network(rng, dims, alpha=0.1)
            s = int(rng.integers(2, dims[-2] + 1))  # s <= min hidden dim
            x = rng.standard_normal((dims[0], s))
            y = forward(net, x)
            y_tilde = y.copy()
            modified = int(rng.integers(0, s))
            y_tilde[:, modified] += 0.3 * rng.standard_normal(dims[-1])
            target = FlipTarget(y_original=y, y_tilde=y_tilde)
            n = int(rng.integers(1, net.num_layers + 1))
            res = minimal_perturbation_exact(net, n, x, target)
            assert not res.least_squares_only
            achieved = res.achieved_logits
            np.testing.assert_allclose(achieved[:, modified], y_tilde[:, modified],
                                       atol=1e-8 * (1 + np.abs(y_tilde).max()))
            untouched = [j for j in range(s) if j != modified]
            np.testing.assert_allclose(achieved[:, untouched], y[:, untouched],
                                       atol=1e-8 * (1 + np.abs(y).max()))
