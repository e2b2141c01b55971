"""Soft-margin kernel SVM trained with sequential minimal optimization.

Training follows the two-multiplier analytic update of SMO with an error
cache: the outer loop alternates sweeps over all samples and over unbounded
multipliers, the second index comes from the largest |E1 - E2| heuristic and
falls back to scans that start at a seeded random offset. The decision
function is f(x) = sum_i coef_i * K(sv_i, x) + b with coef_i = alpha_i * y_i.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Hashable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LINEAR = "linear"
RBF = "rbf"
KERNELS = (LINEAR, RBF)

# Step-size and clipping epsilon of the pair update
_EPS = 1e-12


class SvmError(ValueError):
    """Raised for untrainable inputs or malformed SVM models."""


@dataclass(frozen=True)
class SvmParams:
    """SVM hyperparameters.

    Attributes:
        C: Box constraint.
        kernel: "linear" or "rbf".
        gamma: RBF width; None resolves to 1 / d at training time.
        kkt_tolerance: Allowed KKT violation on y_i * E_i.
        max_passes: Consecutive full sweeps without progress before stopping.
        max_iterations: Cap on successful pair updates.
    """

    C: float = 1.0
    kernel: str = RBF
    gamma: float | None = None
    kkt_tolerance: float = 1e-3
    max_passes: int = 10
    max_iterations: int = 100_000

    def __post_init__(self):
        if not self.C > 0:
            raise SvmError(f"C must be > 0, got {self.C}")
        if self.kernel not in KERNELS:
            raise SvmError(f"Unknown kernel '{self.kernel}'. Supported: {', '.join(KERNELS)}")
        if self.gamma is not None and not self.gamma > 0:
            raise SvmError(f"gamma must be > 0, got {self.gamma}")
        if not self.kkt_tolerance > 0:
            raise SvmError(f"kkt_tolerance must be > 0, got {self.kkt_tolerance}")
        if self.max_passes < 1 or self.max_iterations < 1:
            raise SvmError("max_passes and max_iterations must be >= 1")

    def resolved(self, dimension: int) -> SvmParams:
        """Return params with gamma fixed for the given input dimension."""
        if self.kernel == RBF and self.gamma is None:
            return replace(self, gamma=1.0 / dimension)
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "C": self.C,
            "kernel": self.kernel,
            "gamma": self.gamma,
            "kkt_tolerance": self.kkt_tolerance,
            "max_passes": self.max_passes,
            "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SvmParams:
        gamma = data.get("gamma")
        return cls(
            C=float(data.get("C", 1.0)),
            kernel=str(data.get("kernel", RBF)),
            gamma=None if gamma is None else float(gamma),
            kkt_tolerance=float(data.get("kkt_tolerance", 1e-3)),
            max_passes=int(data.get("max_passes", 10)),
            max_iterations=int(data.get("max_iterations", 100_000)),
        )


@dataclass(frozen=True)
class BinarySvmModel:
    """A trained binary classifier.

    Attributes:
        support_vectors: (count, d) array of retained training vectors.
        coefficients: alpha_i * y_i per support vector.
        bias: Intercept b.
        params: Resolved training params (gamma filled in).
        converged: Whether KKT conditions were met within tolerance.
        iterations: Successful pair updates performed.
    """

    support_vectors: np.ndarray
    coefficients: np.ndarray
    bias: float
    params: SvmParams
    converged: bool = True
    iterations: int = 0

    @property
    def dimension(self) -> int:
        return self.support_vectors.shape[1]

    @property
    def support_count(self) -> int:
        return self.support_vectors.shape[0]

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "support_vectors": self.support_vectors.tolist(),
            "coefficients": self.coefficients.tolist(),
            "bias": self.bias,
            "converged": self.converged,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BinarySvmModel:
        vectors = np.asarray(data["support_vectors"], dtype=np.float64)
        coefficients = np.asarray(data["coefficients"], dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != coefficients.shape[0]:
            raise SvmError("Support vectors and coefficients disagree in count")
        return cls(
            support_vectors=vectors,
            coefficients=coefficients,
            bias=float(data["bias"]),
            params=SvmParams.from_dict(data["params"]),
            converged=bool(data["converged"]),
            iterations=int(data["iterations"]),
        )


def kernel_matrix(A: np.ndarray, B: np.ndarray, params: SvmParams) -> np.ndarray:
    """Gram matrix K[i, j] = K(A[i], B[j]); params must be resolved."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise SvmError(f"Dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    dot = A @ B.T
    if params.kernel == LINEAR:
        return dot
    sq = np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * dot
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-params.gamma * sq)


def _check_samples(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise SvmError(f"Expected a 2-D sample matrix, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise SvmError(f"{X.shape[0]} samples but {y.shape[0]} labels")
    if not np.all(np.isfinite(X)):
        raise SvmError("Samples contain non-finite features")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("Labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise SvmError("Training needs at least one sample of each sign")
    return X, y


class _SmoSolver:
    """State of one SMO run over a precomputed Gram matrix."""

    def __init__(self, K: np.ndarray, y: np.ndarray, C: float, tol: float, seed: int):
        self.K = K
        self.y = y
        self.C = C
        self.tol = tol
        self.n = len(y)
        self.alpha = np.zeros(self.n)
        self.b = 0.0
        # E_i = f(x_i) - y_i
        self.E = -y.copy()
        self.rng = np.random.default_rng(seed)
        self.steps = 0

    def _free(self) -> np.ndarray:
        return np.flatnonzero((self.alpha > 0) & (self.alpha < self.C))

    def violates(self, i: int) -> bool:
        r = self.E[i] * self.y[i]
        return (r < -self.tol and self.alpha[i] < self.C) or (r > self.tol and self.alpha[i] > 0)

    def take_step(self, i1: int, i2: int) -> bool:
        if i1 == i2:
            return False
        K, C = self.K, self.C
        a1, a2 = self.alpha[i1], self.alpha[i2]
        y1, y2 = self.y[i1], self.y[i2]
        E1, E2 = self.E[i1], self.E[i2]
        s = y1 * y2

        if y1 != y2:
            L, H = max(0.0, a2 - a1), min(C, C + a2 - a1)
        else:
            L, H = max(0.0, a1 + a2 - C), min(C, a1 + a2)
        if H - L < _EPS:
            return False

        eta = K[i1, i1] + K[i2, i2] - 2.0 * K[i1, i2]
        if eta > _EPS:
            a2_new = min(H, max(L, a2 + y2 * (E1 - E2) / eta))
        else:
            # Objective along the constraint line, relative to a2
            def gain(a: float) -> float:
                delta = a - a2
                return delta * y2 * (E1 - E2) - 0.5 * eta * delta * delta

            gain_low, gain_high = gain(L), gain(H)
            if gain_low > gain_high + _EPS:
                a2_new = L
            elif gain_high > gain_low + _EPS:
                a2_new = H
            else:
                a2_new = a2

        if abs(a2_new - a2) < _EPS * (a2_new + a2 + _EPS):
            return False

        a1_new = a1 + s * (a2 - a2_new)
        a1_new, a2_new = self._clip(a1_new), self._clip(a2_new)
        d1, d2 = a1_new - a1, a2_new - a2

        b1 = self.b - E1 - y1 * d1 * K[i1, i1] - y2 * d2 * K[i1, i2]
        b2 = self.b - E2 - y1 * d1 * K[i1, i2] - y2 * d2 * K[i2, i2]
        if 0.0 < a1_new < C:
            b_new = b1
        elif 0.0 < a2_new < C:
            b_new = b2
        else:
            b_new = 0.5 * (b1 + b2)

        self.E += y1 * d1 * K[i1] + y2 * d2 * K[i2] + (b_new - self.b)
        self.alpha[i1], self.alpha[i2] = a1_new, a2_new
        self.b = b_new
        self.steps += 1
        return True

    def _clip(self, a: float) -> float:
        if a < _EPS * self.C:
            return 0.0
        if a > self.C * (1.0 - _EPS):
            return self.C
        return a

    def examine(self, i2: int) -> bool:
        if not self.violates(i2):
            return False

        free = self._free()
        if len(free) > 1:
            E2 = self.E[i2]
            i1 = int(free[np.argmin(self.E[free])] if E2 > 0 else free[np.argmax(self.E[free])])
            if self.take_step(i1, i2):
                return True

        for candidates in (free, np.arange(self.n)):
            if len(candidates) == 0:
                continue
            start = int(self.rng.integers(len(candidates)))
            for i1 in np.roll(candidates, -start):
                if self.take_step(int(i1), i2):
                    return True
        return False

    def solve(self, max_passes: int, max_iterations: int) -> bool:
        """Run until no violators remain; return whether KKT holds."""
        examine_all = True
        idle_passes = 0
        while self.steps < max_iterations:
            if examine_all:
                violators = [i for i in range(self.n) if self.violates(i)]
                if not violators:
                    return True
                changed = self._sweep(range(self.n), max_iterations)
                if changed == 0:
                    idle_passes += 1
                    if idle_passes >= max_passes:
                        break
                else:
                    idle_passes = 0
                    examine_all = False
            else:
                changed = self._sweep(self._free(), max_iterations)
                if changed == 0:
                    examine_all = True
        return not any(self.violates(i) for i in range(self.n))

    def _sweep(self, indices, max_iterations: int) -> int:
        changed = 0
        for i in indices:
            if self.steps >= max_iterations:
                break
            changed += self.examine(int(i))
        return changed

    def final_bias(self) -> float:
        """Average over unbounded multipliers, else midpoint of the KKT interval."""
        candidates = self.b - self.E
        free = self._free()
        if len(free):
            return float(np.mean(candidates[free]))

        at_zero = self.alpha <= 0.0
        lower_mask = (at_zero & (self.y > 0)) | (~at_zero & (self.y < 0))
        upper_mask = ~lower_mask
        lower = candidates[lower_mask].max() if lower_mask.any() else None
        upper = candidates[upper_mask].min() if upper_mask.any() else None
        if lower is None:
            return float(upper)
        if upper is None:
            return float(lower)
        return float(0.5 * (lower + upper))


def smo_train(X, y, params: SvmParams | None = None, seed: int = 0) -> BinarySvmModel:
    """Train a binary SVM with SMO.

    Args:
        X: (n, d) training vectors.
        y: n labels in {+1, -1}.
        params: Hyperparameters; gamma None means 1 / d.
        seed: Seed for the fallback scan offsets.

    Returns:
        Model retaining only samples with alpha > 0.

    Raises:
        SvmError: On single-class input, shape mismatch or non-finite features.
    """
    X, y = _check_samples(X, y)
    params = (params or SvmParams()).resolved(X.shape[1])

    solver = _SmoSolver(kernel_matrix(X, X, params), y, params.C, params.kkt_tolerance, seed)
    converged = solver.solve(params.max_passes, params.max_iterations)
    bias = solver.final_bias()

    support = np.flatnonzero(solver.alpha > 0)
    if not converged:
        logger.warning(
            "SMO stopped after %d updates without meeting tolerance %g",
            solver.steps,
            params.kkt_tolerance,
        )
    logger.debug("SMO: %d samples, %d support vectors, %d updates", len(y), len(support), solver.steps)
    return BinarySvmModel(
        support_vectors=X[support].copy(),
        coefficients=(solver.alpha[support] * y[support]),
        bias=bias,
        params=params,
        converged=converged,
        iterations=solver.steps,
    )


def decision_values(model: BinarySvmModel, X) -> np.ndarray:
    """Decision value for every row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dimension:
        raise SvmError(f"Expected dimension {model.dimension}, got {X.shape[1]}")
    if model.support_count == 0:
        return np.full(X.shape[0], model.bias)
    return kernel_matrix(X, model.support_vectors, model.params) @ model.coefficients + model.bias


def decision_value(model: BinarySvmModel, x) -> float:
    """f(x) = sum coef_i K(sv_i, x) + b; the sign is the class."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dimension,):
        raise SvmError(f"Expected dimension {model.dimension}, got shape {x.shape}")
    return float(decision_values(model, x[np.newaxis, :])[0])


def dual_objective(X, y, alphas, params: SvmParams) -> float:
    """W(alpha) = sum alpha_i - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij.

    Raises:
        SvmError: If an alpha lies outside [0, C].
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != y.shape or X.shape[0] != y.shape[0]:
        raise SvmError("alphas, labels and samples must have equal length")
    slack = 1e-9 * params.C
    if np.any(alphas < -slack) or np.any(alphas > params.C + slack):
        raise SvmError(f"alphas violate the box [0, {params.C}]")
    params = params.resolved(X.shape[1])
    ay = alphas * y
    return float(alphas.sum() - 0.5 * ay @ kernel_matrix(X, X, params) @ ay)


# =============================================================================
# Pairwise (max-wins) voting
# =============================================================================


def tally_votes(
    candidates: Sequence[Hashable],
    pair_decisions: Mapping[tuple[Hashable, Hashable], float],
    scores: Mapping[Hashable, float],
    class_order: Sequence[Hashable],
) -> tuple[Hashable, dict[Hashable, int]]:
    """Count one vote per candidate pair and pick the winner.

    pair_decisions[(a, b)] is the decision value of the model trained with a
    as +1 and b as -1 (a before b in class_order); a value >= 0 votes for a.
    Ties go to the higher score, then to the earlier class.
    """
    rank = {c: i for i, c in enumerate(class_order)}
    ordered = sorted(candidates, key=rank.__getitem__)
    tally = {c: 0 for c in ordered}
    for i, a in enumerate(ordered):
        for b in ordered[i + 1:]:
            if (a, b) not in pair_decisions:
                raise SvmError(f"Missing pairwise model for ({a}, {b})")
            tally[a if pair_decisions[(a, b)] >= 0 else b] += 1
    winner = max(ordered, key=lambda c: (tally[c], scores.get(c, float("-inf")), -rank[c]))
    return winner, tally


def pairwise_vote(
    models: Mapping[tuple[Hashable, Hashable], BinarySvmModel],
    candidates: Sequence[Hashable],
    x,
    scores: Mapping[Hashable, float] | None = None,
    class_order: Sequence[Hashable] | None = None,
) -> tuple[Hashable, dict[Hashable, int]]:
    """Max-wins vote among candidate classes.

    Args:
        models: Pairwise models keyed (a, b) with a before b in class_order.
        candidates: Classes taking part in the vote.
        x: Query vector.
        scores: Tie-break scores (higher wins).
        class_order: Enumeration order; defaults to candidates as given.

    Raises:
        SvmError: If a pairwise model is missing.
    """
    class_order = list(class_order or candidates)
    rank = {c: i for i, c in enumerate(class_order)}
    ordered = sorted(candidates, key=rank.__getitem__)
    decisions = {}
    for i, a in enumerate(ordered):
        for b in ordered[i + 1:]:
            model = models.get((a, b))
            if model is None:
                raise SvmError(f"Missing pairwise model for ({a}, {b})")
            decisions[(a, b)] = decision_value(model, x)
    return tally_votes(ordered, decisions, scores or {}, class_order)
