from itertools import product

import numpy as np
import pytest

from svm import (
    BinarySvmModel,
    SvmError,
    SvmParams,
    decision_value,
    decision_values,
    dual_objective,
    kernel_matrix,
    pairwise_vote,
    smo_train,
    tally_votes,
)

TIGHT = {"kkt_tolerance": 1e-9, "max_passes": 50}


def alphas_of(model: BinarySvmModel, X: np.ndarray) -> np.ndarray:
    """Full multiplier vector recovered from the support vectors."""
    alphas = np.zeros(len(X))
    for sv, coef in zip(model.support_vectors, model.coefficients):
        (row,) = np.flatnonzero(np.all(X == sv, axis=1))
        alphas[row] = abs(coef)
    return alphas


def brute_force_dual(K: np.ndarray, y: np.ndarray, C: float) -> tuple[float, np.ndarray]:
    """Best dual objective over the stationary points of every face of the box."""
    n = len(y)
    Q = np.outer(y, y) * K
    best, best_alpha = -np.inf, None
    for faces in product((0, 1, 2), repeat=n):
        free = [i for i in range(n) if faces[i] == 2]
        bound = [i for i in range(n) if faces[i] != 2]
        alpha = np.zeros(n)
        alpha[bound] = [C if faces[i] == 1 else 0.0 for i in bound]
        if free:
            size = len(free)
            A = np.zeros((size + 1, size + 1))
            A[:size, :size] = Q[np.ix_(free, free)]
            A[:size, size] = y[free]
            A[size, :size] = y[free]
            rhs = np.append(1.0 - Q[np.ix_(free, bound)] @ alpha[bound], -y[bound] @ alpha[bound])
            solution = np.linalg.lstsq(A, rhs, rcond=None)[0]
            if np.linalg.norm(A @ solution - rhs) > 1e-9:
                continue
            a_free = solution[:size]
            if np.any(a_free < -1e-12) or np.any(a_free > C + 1e-12):
                continue
            alpha[free] = np.clip(a_free, 0.0, C)
        if abs(y @ alpha) > 1e-9:
            continue
        value = alpha.sum() - 0.5 * alpha @ Q @ alpha
        if value > best:
            best, best_alpha = value, alpha
    return best, best_alpha


def constant_model(value: float) -> BinarySvmModel:
    """A model whose decision value is `value` everywhere."""
    return BinarySvmModel(
        support_vectors=np.zeros((1, 2)),
        coefficients=np.zeros(1),
        bias=value,
        params=SvmParams(kernel="linear"),
    )


class TestParams:
    @pytest.mark.parametrize(
        "kwargs",
        [{"C": 0}, {"kernel": "poly"}, {"gamma": -1.0}, {"kkt_tolerance": 0}, {"max_passes": 0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(SvmError):
            SvmParams(**kwargs)

    def test_gamma_defaults_to_inverse_dimension(self):
        X = np.array([[0, 0, 0, 0], [1, 1, 1, 1]], dtype=float)
        model = smo_train(X, [1, -1], SvmParams(kernel="rbf"))
        assert model.params.gamma == 0.25

    def test_round_trip(self):
        params = SvmParams(C=3.0, kernel="linear", max_passes=4)
        assert SvmParams.from_dict(params.to_dict()) == params


class TestKernel:
    def test_linear_is_dot_product(self):
        A = np.array([[1.0, 2.0], [0.0, -1.0]])
        B = np.array([[3.0, 1.0]])
        np.testing.assert_array_equal(kernel_matrix(A, B, SvmParams(kernel="linear")), [[5.0], [-1.0]])

    def test_rbf(self):
        A = np.array([[0.0, 0.0], [1.0, 1.0]])
        K = kernel_matrix(A, A, SvmParams(kernel="rbf", gamma=0.5))
        np.testing.assert_allclose(np.diag(K), 1.0)
        assert K[0, 1] == pytest.approx(np.exp(-1.0))

    def test_dimension_mismatch(self):
        with pytest.raises(SvmError):
            kernel_matrix(np.zeros((1, 2)), np.zeros((1, 3)), SvmParams(kernel="linear"))


class TestTrain:
    def test_two_points_linear(self):
        X = np.array([[0.0, 0.0], [2.0, 0.0]])
        model = smo_train(X, [-1, 1], SvmParams(C=10.0, kernel="linear"))

        assert model.converged
        assert decision_value(model, np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-6)
        assert decision_value(model, np.array([2.0, 0.0])) == pytest.approx(1.0, abs=1e-6)
        assert decision_value(model, np.array([0.0, 0.0])) == pytest.approx(-1.0, abs=1e-6)
        assert model.coefficients.sum() == pytest.approx(0.0, abs=1e-9)
        alphas = alphas_of(model, X)
        np.testing.assert_allclose(alphas, [0.5, 0.5], atol=1e-6)
        assert dual_objective(X, [-1, 1], alphas, model.params) == pytest.approx(0.5, abs=1e-6)

    def test_xor_with_rbf(self):
        X = np.array([[0, 0], [1, 1], [0, 1], [1, 0]], dtype=float)
        y = np.array([-1, -1, 1, 1])
        model = smo_train(X, y, SvmParams(C=10.0, kernel="rbf", gamma=1.0))
        np.testing.assert_array_equal(np.sign(decision_values(model, X)), y)

    def test_only_support_vectors_are_kept(self):
        X = np.array([[0.0], [1.0], [5.0], [6.0]])
        model = smo_train(X, [-1, -1, 1, 1], SvmParams(C=10.0, kernel="linear"))
        assert model.converged
        np.testing.assert_array_equal(model.support_vectors, [[1.0], [5.0]])

    @pytest.mark.parametrize(
        "X, y",
        [
            (np.zeros((3, 2)), [1, 1, 1]),
            (np.zeros((3, 2)), [1, -1]),
            (np.array([[0.0, np.inf], [1.0, 1.0]]), [1, -1]),
            (np.zeros((2, 2)), [1, 0]),
            (np.zeros(4), [1, -1, 1, -1]),
        ],
    )
    def test_rejects_untrainable_input(self, X, y):
        with pytest.raises(SvmError):
            smo_train(X, y)

    def test_constraints_hold(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(40, 3))
        y = np.where(X[:, 0] + 0.3 * rng.normal(size=40) > 0, 1, -1)
        params = SvmParams(C=2.0, kernel="rbf", gamma=1.0)
        model = smo_train(X, y, params)
        alphas = alphas_of(model, X)
        assert np.all((alphas >= 0) & (alphas <= params.C))
        assert np.count_nonzero(alphas) == model.support_count
        assert np.sum(alphas * y) == pytest.approx(0.0, abs=1e-9)

    def test_same_seed_same_model(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(30, 2))
        y = np.where(X[:, 0] * X[:, 1] > 0, 1, -1)
        a = smo_train(X, y, SvmParams(gamma=1.0), seed=3)
        b = smo_train(X, y, SvmParams(gamma=1.0), seed=3)
        assert a.to_dict() == b.to_dict()

    def test_separable_data_is_fit_exactly(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            u = rng.normal(size=2)
            u /= np.linalg.norm(u)
            X = rng.uniform(-1, 1, size=(40, 2))
            X = X[np.abs(X @ u) > 0.2][:20]
            y = np.where(X @ u > 0, 1, -1)
            if len(set(y)) < 2:
                continue
            model = smo_train(X, y, SvmParams(C=1e4, kernel="linear"))
            assert np.all(y * decision_values(model, X) > 0)

    def test_label_flip_negates_decisions(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(25, 2))
        y = np.where(np.linalg.norm(X, axis=1) > 1.0, 1, -1)
        if len(set(y)) < 2:
            y[0] = -y[0]
        params = SvmParams(C=5.0, gamma=1.0, **TIGHT)
        queries = rng.normal(size=(50, 2))
        np.testing.assert_allclose(
            decision_values(smo_train(X, -y, params), queries),
            -decision_values(smo_train(X, y, params), queries),
            atol=1e-6,
        )

    def test_linear_decision_is_affine(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(20, 3))
        y = np.where(X.sum(axis=1) > 0, 1, -1)
        model = smo_train(X, y, SvmParams(kernel="linear"))
        p, q = rng.normal(size=3), rng.normal(size=3)
        assert decision_value(model, (p + q) / 2) == pytest.approx(
            (decision_value(model, p) + decision_value(model, q)) / 2, abs=1e-9
        )

    def test_iteration_cap_reports_no_convergence(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(60, 2))
        y = np.where(rng.uniform(size=60) > 0.5, 1, -1)
        model = smo_train(X, y, SvmParams(C=100.0, gamma=5.0, max_iterations=1))
        assert model.iterations == 1
        assert not model.converged


class TestDualOptimum:
    @pytest.mark.parametrize("kernel", ["linear", "rbf"])
    def test_matches_brute_force(self, kernel):
        rng = np.random.default_rng(7)
        C = 1.0
        params = SvmParams(C=C, kernel=kernel, gamma=1.0, **TIGHT)
        for _ in range(50):
            n = int(rng.integers(2, 7))
            X = rng.uniform(-1, 1, size=(n, 2))
            y = rng.choice([-1.0, 1.0], size=n)
            y[0], y[1] = 1.0, -1.0

            model = smo_train(X, y, params)
            alphas = alphas_of(model, X)
            K = kernel_matrix(X, X, model.params)
            found = dual_objective(X, y, alphas, model.params)
            best, best_alpha = brute_force_dual(K, y, C)

            assert abs(alphas @ y) < 1e-9
            assert found >= best - 1e-6 * (1 + abs(best))
            if kernel == "rbf":
                # Positive definite Gram matrix: the optimum is unique
                assert found == pytest.approx(best, rel=1e-6, abs=1e-6)
                queries = rng.uniform(-1, 1, size=(10, 2))
                Kq = kernel_matrix(queries, X, model.params)
                np.testing.assert_allclose(Kq @ (alphas * y), Kq @ (best_alpha * y), atol=1e-3)


class TestDualObjective:
    def test_zero_alphas(self):
        X = np.array([[0.0], [1.0]])
        assert dual_objective(X, [1, -1], [0.0, 0.0], SvmParams(kernel="linear")) == 0.0

    def test_rejects_alphas_outside_the_box(self):
        X = np.array([[0.0], [1.0]])
        with pytest.raises(SvmError, match="box"):
            dual_objective(X, [1, -1], [2.0, 0.0], SvmParams(C=1.0, kernel="linear"))


class TestModelDict:
    def test_round_trip(self):
        X = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
        model = smo_train(X, [-1, 1, 1], SvmParams(kernel="linear"))
        copy = BinarySvmModel.from_dict(model.to_dict())
        assert copy.to_dict() == model.to_dict()
        np.testing.assert_array_equal(decision_values(copy, X), decision_values(model, X))

    def test_count_mismatch(self):
        data = constant_model(1.0).to_dict()
        data["coefficients"] = [1.0, 2.0]
        with pytest.raises(SvmError):
            BinarySvmModel.from_dict(data)

    def test_decision_dimension_mismatch(self):
        with pytest.raises(SvmError):
            decision_value(constant_model(1.0), np.zeros(3))


class TestPairwiseVote:
    X = np.zeros(2)

    def test_single_candidate(self):
        assert pairwise_vote({}, ["dos"], self.X) == ("dos", {"dos": 0})

    @pytest.mark.parametrize("value, expected", [(1.0, "a"), (-1.0, "b"), (0.0, "a")])
    def test_two_candidates(self, value, expected):
        winner, _ = pairwise_vote({("a", "b"): constant_model(value)}, ["a", "b"], self.X)
        assert winner == expected

    def test_cycle_is_broken_by_score(self):
        models = {
            ("a", "b"): constant_model(1.0),
            ("a", "c"): constant_model(-1.0),
            ("b", "c"): constant_model(1.0),
        }
        winner, tally = pairwise_vote(models, ["a", "b", "c"], self.X, scores={"a": 0.1, "b": 0.9, "c": 0.5})
        assert tally == {"a": 1, "b": 1, "c": 1}
        assert winner == "b"

    def test_cycle_without_scores_goes_to_the_earliest_class(self):
        models = {
            ("a", "b"): constant_model(1.0),
            ("a", "c"): constant_model(-1.0),
            ("b", "c"): constant_model(1.0),
        }
        assert pairwise_vote(models, ["c", "b", "a"], self.X, class_order=["a", "b", "c"])[0] == "a"

    def test_candidates_follow_class_order(self):
        models = {("a", "c"): constant_model(-1.0)}
        winner, tally = pairwise_vote(models, ["c", "a"], self.X, class_order=["a", "b", "c"])
        assert winner == "c"
        assert tally == {"a": 0, "c": 1}

    def test_missing_model(self):
        with pytest.raises(SvmError, match="Missing"):
            pairwise_vote({}, ["a", "b"], self.X)

    def test_tally_votes(self):
        decisions = {("x", "y"): -0.2, ("x", "z"): 0.3, ("y", "z"): 0.1}
        winner, tally = tally_votes(["x", "y", "z"], decisions, {}, ["x", "y", "z"])
        assert tally == {"x": 1, "y": 2, "z": 0}
        assert winner == "y"
