"""Binary candidate classification.

A kernel SVM trained from scratch by sequential minimal optimization
(maximal-violating-pair working set selection), calibrated to
probabilities with a Newton-fit sigmoid, selected by stratified
cross-validated grid search, plus the rule-based biomarker baseline
and permutation importances for interpretability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonConvergence, SchemaMismatch, SingleClass, UnknownFeatureName
from .features import FEATURE_INDEX, FeatureVector

KERNELS = ("linear", "rbf", "sigmoid", "polynomial")

DEFAULT_C_GRID = (0.1, 1.0, 10.0, 100.0)
DEFAULT_GAMMA_GRID = (0.01, 0.1, 1.0, 10.0)
DEFAULT_DEGREE_GRID = (2, 3, 4)

# KKT gap at which the dual solve stops. Tighter than the 1e-3 contract so
# the objective lands within 1e-4 of a dense QP solve on small instances.
SMO_TOLERANCE = 1e-5
SMO_MAX_ITER = 10 ** 6
GUARD_LO, GUARD_HI = -0.5, 1.5


# --- normalization ---

@dataclass
class Normalizer:
    """Per-feature min-max scaling fit on training data.

    Training values map into [0, 1]; unseen values clamp to the
    [-0.5, 1.5] guard range. Constant columns map to 0.
    """

    mins: np.ndarray
    ranges: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        mins = X.min(axis=0)
        ranges = X.max(axis=0) - mins
        return cls(mins=mins, ranges=ranges)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        safe = np.where(self.ranges > 0, self.ranges, 1.0)
        out = (X - self.mins) / safe
        out[:, self.ranges == 0] = 0.0
        return np.clip(out, GUARD_LO, GUARD_HI)

    def to_json(self) -> dict:
        return {"mins": self.mins.tolist(), "ranges": self.ranges.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Normalizer":
        return cls(mins=np.asarray(d["mins"]), ranges=np.asarray(d["ranges"]))


# --- kernels ---

def kernel_matrix(kind: str, X: np.ndarray, Z: np.ndarray, gamma: float = 1.0,
                  degree: int = 3, coef0: float = 0.0) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if kind == "linear":
        return X @ Z.T
    if kind == "rbf":
        sq = (np.sum(X * X, axis=1)[:, None] + np.sum(Z * Z, axis=1)[None, :]
              - 2.0 * (X @ Z.T))
        return np.exp(-gamma * np.clip(sq, 0.0, None))
    if kind == "sigmoid":
        return np.tanh(gamma * (X @ Z.T) + coef0)
    if kind == "polynomial":
        return (gamma * (X @ Z.T) + coef0) ** degree
    raise ValueError(f"unknown kernel: {kind}")


# --- the SMO solver ---

def smo_solve(K: np.ndarray, y: np.ndarray, C: float,
              tol: float = SMO_TOLERANCE, max_iter: int = SMO_MAX_ITER) -> tuple:
    """Solve the SVM dual on a precomputed kernel matrix.

    Maximal-violating-pair selection with two-variable analytic updates;
    stops when the KKT gap m - M falls below ``tol``. Returns
    ``(alpha, bias, dual_objective, iterations)``.

    Raises
    ------
    NonConvergence
        At the iteration cap, carrying the final KKT gap.
    """
    n = len(y)
    y = np.asarray(y, dtype=np.float64)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - sum(a) at a = 0
    eps = 1e-12
    tau = 1e-12
    diag = np.diag(K).copy()

    iterations = 0
    gap = np.inf
    while iterations < max_iter:
        neg_yg = -y * grad
        up = ((y > 0) & (alpha < C - eps)) | ((y < 0) & (alpha > eps))
        low = ((y < 0) & (alpha < C - eps)) | ((y > 0) & (alpha > eps))
        if not up.any() or not low.any():
            gap = 0.0
            break
        up_scores = np.where(up, neg_yg, -np.inf)
        low_scores = np.where(low, neg_yg, np.inf)
        i = int(np.argmax(up_scores))
        j = int(np.argmin(low_scores))
        gap = float(up_scores[i] - low_scores[j])
        if gap <= tol:
            break

        eta = diag[i] + diag[j] - 2.0 * K[i, j]
        if eta <= 0:
            eta = tau
        # step along d = e_i*y_i - e_j*y_j keeping y'a constant
        t = (neg_yg[i] - neg_yg[j]) / eta
        if y[i] > 0:
            t = min(t, C - alpha[i])
        else:
            t = min(t, alpha[i])
        if y[j] > 0:
            t = min(t, alpha[j])
        else:
            t = min(t, C - alpha[j])
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        grad += t * y * (K[:, i] - K[:, j])
        iterations += 1
    else:
        raise NonConvergence(
            f"SMO hit {max_iter} iterations with KKT gap {gap:.3e}", gap=gap)

    neg_yg = -y * grad
    free = (alpha > eps) & (alpha < C - eps)
    if free.any():
        bias = float(neg_yg[free].mean())
    else:
        up = ((y > 0) & (alpha < C - eps)) | ((y < 0) & (alpha > eps))
        low = ((y < 0) & (alpha < C - eps)) | ((y > 0) & (alpha > eps))
        hi = neg_yg[up].max() if up.any() else 0.0
        lo = neg_yg[low].min() if low.any() else 0.0
        bias = float((hi + lo) / 2.0)
    objective = float(alpha.sum() - 0.5 * alpha @ ((y[:, None] * y[None, :] * K) @ alpha))
    return alpha, bias, objective, iterations


# --- the model ---

@dataclass
class SVMModel:
    """A trained (optionally calibrated) kernel SVM."""

    kernel: str
    C: float
    gamma: float
    degree: int
    coef0: float
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i per support vector
    bias: float
    platt_a: float = -1.0
    platt_b: float = 0.0
    threshold: float = 0.3
    n_features: int = 0
    schema_hash: str = ""
    dual_objective: float = 0.0

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        K = kernel_matrix(self.kernel, np.atleast_2d(X), self.support_vectors,
                          gamma=self.gamma, degree=self.degree, coef0=self.coef0)
        return K @ self.dual_coef + self.bias

    def probability(self, X: np.ndarray) -> np.ndarray:
        f = self.decision_function(X)
        return 1.0 / (1.0 + np.exp(self.platt_a * f + self.platt_b))

    def to_json(self) -> dict:
        return {
            "kernel": self.kernel, "C": self.C, "gamma": self.gamma,
            "degree": self.degree, "coef0": self.coef0,
            "support_vectors": self.support_vectors.tolist(),
            "dual_coef": self.dual_coef.tolist(),
            "bias": self.bias,
            "platt": {"a": self.platt_a, "b": self.platt_b},
            "threshold": self.threshold,
            "n_features": self.n_features,
            "schema_hash": self.schema_hash,
            "dual_objective": self.dual_objective,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SVMModel":
        return cls(
            kernel=d["kernel"], C=d["C"], gamma=d["gamma"],
            degree=int(d["degree"]), coef0=d["coef0"],
            support_vectors=np.asarray(d["support_vectors"], dtype=np.float64),
            dual_coef=np.asarray(d["dual_coef"], dtype=np.float64),
            bias=d["bias"],
            platt_a=d["platt"]["a"], platt_b=d["platt"]["b"],
            threshold=d["threshold"],
            n_features=int(d.get("n_features", 0)),
            schema_hash=d.get("schema_hash", ""),
            dual_objective=d.get("dual_objective", 0.0),
        )


def save_model(model: SVMModel, normalizer: Normalizer, path) -> None:
    with open(path, "w") as fh:
        json.dump({"model": model.to_json(), "normalizer": normalizer.to_json()},
                  fh, indent=2, sort_keys=True)


def load_model(path) -> tuple:
    with open(Path(path)) as fh:
        d = json.load(fh)
    return SVMModel.from_json(d["model"]), Normalizer.from_json(d["normalizer"])


def _as_pm1(y) -> np.ndarray:
    y = np.asarray(y)
    out = np.where(y > 0, 1.0, -1.0)
    return out.astype(np.float64)


def train_svm(X: np.ndarray, y, kernel: str = "rbf", C: float = 10.0,
              gamma: float = 1.0, degree: int = 3, coef0: float = 0.0,
              schema_hash: str = "") -> SVMModel:
    """Train an uncalibrated SVM on (already normalized) features.

    Raises
    ------
    SingleClass
        If fewer than two classes (or < 2 samples per class) are present.
    NonConvergence
        If the SMO loop hits its iteration cap.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _as_pm1(y)
    if (y > 0).sum() < 1 or (y < 0).sum() < 1:
        raise SingleClass("training data must contain both classes")
    if kernel not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}")
    K = kernel_matrix(kernel, X, X, gamma=gamma, degree=degree, coef0=coef0)
    alpha, bias, objective, _ = smo_solve(K, y, C)
    sv = alpha > 1e-8
    return SVMModel(
        kernel=kernel, C=C, gamma=gamma, degree=degree, coef0=coef0,
        support_vectors=X[sv].copy(),
        dual_coef=(alpha * y)[sv],
        bias=bias,
        n_features=X.shape[1],
        schema_hash=schema_hash,
        dual_objective=objective,
    )


# --- calibration ---

def platt_calibrate(decision_values, labels, max_iter: int = 200,
                    grad_tol: float = 1e-8) -> tuple:
    """Fit (A, B) of ``P(+1 | f) = 1 / (1 + exp(A f + B))`` by Newton.

    Uses Platt's smoothed targets; minimizes the regularized NLL until
    the gradient norm drops below ``grad_tol``.

    Raises
    ------
    NonConvergence
        After ``max_iter`` Newton steps.
    """
    f = np.asarray(decision_values, dtype=np.float64).ravel()
    y = _as_pm1(labels)
    n_pos = float((y > 0).sum())
    n_neg = float((y < 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("calibration needs both classes")
    target = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def nll(a, b):
        z = a * f + b
        # stable log(1 + exp(-z)) and log(1 + exp(z))
        log_p = -np.logaddexp(0.0, z)       # log P
        log_1mp = -np.logaddexp(0.0, -z)    # log (1 - P)
        return -float((target * log_p + (1.0 - target) * log_1mp).sum())

    a, b = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    current = nll(a, b)
    for _ in range(max_iter):
        z = a * f + b
        p = 1.0 / (1.0 + np.exp(z))
        grad_a = float(((target - p) * f).sum())
        grad_b = float((target - p).sum())
        if np.hypot(grad_a, grad_b) < grad_tol:
            return a, b
        w = p * (1.0 - p)
        h_aa = float((w * f * f).sum()) + 1e-12
        h_ab = float((w * f).sum())
        h_bb = float(w.sum()) + 1e-12
        det = h_aa * h_bb - h_ab * h_ab
        step_a = -(h_bb * grad_a - h_ab * grad_b) / det
        step_b = -(h_aa * grad_b - h_ab * grad_a) / det
        scale = 1.0
        while scale > 1e-10:
            na, nb = a + scale * step_a, b + scale * step_b
            value = nll(na, nb)
            if value <= current + 1e-12:
                a, b, current = na, nb, value
                break
            scale *= 0.5
        else:
            return a, b  # no descent possible: numerically converged
    raise NonConvergence(f"Platt fit did not converge in {max_iter} iterations")


# --- prediction / rules / evaluation ---

LABEL_CANDIDATE = "candidate"
LABEL_NEGATIVE = "negative"


def predict(model: SVMModel, normalizer: Normalizer, vector) -> tuple:
    """(probability, label) for one feature vector.

    The label is ``candidate`` iff probability >= model.threshold
    (inclusive boundary).

    Raises
    ------
    SchemaMismatch
        If the vector length differs from the model's feature count.
    """
    values = vector.values if isinstance(vector, FeatureVector) else np.asarray(vector)
    if values.ndim != 1 or (model.n_features and len(values) != model.n_features):
        raise SchemaMismatch(
            f"expected {model.n_features} features, got {values.shape}")
    p = float(model.probability(normalizer.transform(values))[0])
    return p, LABEL_CANDIDATE if p >= model.threshold else LABEL_NEGATIVE


@dataclass(frozen=True)
class Rule:
    feature: str
    op: str  # one of >, >=, <, <=, ==
    cutoff: float

    def holds(self, value: float) -> bool:
        if self.op == ">":
            return value > self.cutoff
        if self.op == ">=":
            return value >= self.cutoff
        if self.op == "<":
            return value < self.cutoff
        if self.op == "<=":
            return value <= self.cutoff
        if self.op == "==":
            return value == self.cutoff
        raise ValueError(f"unknown comparator: {self.op}")


@dataclass
class RuleSet:
    rules: list = field(default_factory=list)

    def to_json(self) -> list:
        return [[r.feature, r.op, r.cutoff] for r in self.rules]

    @classmethod
    def from_json(cls, entries) -> "RuleSet":
        return cls(rules=[Rule(f, op, c) for f, op, c in entries])


DEFAULT_RULES = RuleSet(rules=[
    Rule("Nuc_MFI_ck", ">", 269.0),
    Rule("Nuc_MFI_cd45", "<=", 3000.0),
])


def rule_filter(vector: FeatureVector, rules: RuleSet | None = None) -> bool:
    """True iff every rule conjunct holds for the named feature values.

    Raises
    ------
    UnknownFeatureName
        If a rule references a feature outside the schema.
    """
    rules = rules if rules is not None else DEFAULT_RULES
    for rule in rules.rules:
        if rule.feature not in FEATURE_INDEX:
            raise UnknownFeatureName(rule.feature)
        if not rule.holds(vector[rule.feature]):
            return False
    return True


def metrics_from_counts(tp: int, tn: int, fp: int, fn: int) -> dict:
    total = tp + tn + fp + fn
    return {
        "tp": tp, "tn": tn, "fp": fp, "fn": fn,
        "sensitivity": tp / (tp + fn) if tp + fn else 0.0,
        "specificity": tn / (tn + fp) if tn + fp else 0.0,
        "accuracy": (tp + tn) / total if total else 0.0,
    }


def evaluate(model: SVMModel, normalizer: Normalizer, X: np.ndarray, y) -> dict:
    """Confusion counts and derived metrics at the model threshold."""
    y = _as_pm1(y)
    probs = model.probability(normalizer.transform(X))
    pred = probs >= model.threshold
    pos = y > 0
    return metrics_from_counts(
        tp=int((pred & pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fp=int((pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
    )


# --- model selection ---

def default_grid() -> list:
    """All four kernels crossed with the C / gamma / degree grids."""
    cells = []
    for kernel in KERNELS:
        for C in DEFAULT_C_GRID:
            if kernel == "linear":
                cells.append({"kernel": kernel, "C": C, "gamma": 1.0, "degree": 3})
            elif kernel == "polynomial":
                cells += [{"kernel": kernel, "C": C, "gamma": g, "degree": d}
                          for g in DEFAULT_GAMMA_GRID for d in DEFAULT_DEGREE_GRID]
            else:
                cells += [{"kernel": kernel, "C": C, "gamma": g, "degree": 3}
                          for g in DEFAULT_GAMMA_GRID]
    return cells


def stratified_folds(y, k: int, seed: int) -> np.ndarray:
    """Seeded stratified fold assignment; every class shuffles separately."""
    y = _as_pm1(y)
    rng = np.random.default_rng(seed)
    folds = np.zeros(len(y), dtype=int)
    for cls in (-1.0, 1.0):
        idx = np.flatnonzero(y == cls)
        if len(idx) < k:
            raise ValueError(
                f"k={k} exceeds minority class count {len(idx)}")
        rng.shuffle(idx)
        folds[idx] = np.arange(len(idx)) % k
    return folds


@dataclass
class GridSearchResult:
    best_params: dict
    best_accuracy: float
    table: list  # (params, mean_accuracy) in evaluation order
    folds: np.ndarray


def grid_search_cv(X: np.ndarray, y, grid: list | None = None, k: int = 5,
                   seed: int = 0) -> GridSearchResult:
    """Stratified k-fold grid search maximizing mean accuracy.

    The normalizer is refit on the training folds only, so validation
    rows never leak into scaling. Failed trainings score 0 for that
    cell instead of aborting the search. Ties prefer smaller C, then
    smaller gamma, then smaller degree, then kernel order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _as_pm1(y)
    grid = grid if grid is not None else default_grid()
    if not grid:
        raise ValueError("grid must be nonempty")
    folds = stratified_folds(y, k, seed)

    # Kernel matrices depend on (kernel, gamma, degree) but not C: cache
    # the full train+val matrix per fold per kernel config.
    table = []
    kernel_cache = {}
    for params in grid:
        accs = []
        for f in range(k):
            val = folds == f
            train = ~val
            assert not (train & val).any()
            norm = Normalizer.fit(X[train])
            Xt = norm.transform(X[train])
            Xv = norm.transform(X[val])
            key = (f, params["kernel"], params["gamma"], params["degree"])
            if key not in kernel_cache:
                both = np.vstack([Xt, Xv])
                kernel_cache[key] = (
                    kernel_matrix(params["kernel"], both, Xt,
                                  gamma=params["gamma"], degree=params["degree"]),
                    len(Xt),
                )
            K_all, n_train = kernel_cache[key]
            try:
                alpha, bias, _, _ = smo_solve(K_all[:n_train], y[train], params["C"])
            except (SingleClass, NonConvergence):
                accs.append(0.0)
                continue
            decision = K_all[n_train:] @ (alpha * y[train]) + bias
            accs.append(float(((decision >= 0) == (y[val] > 0)).mean()))
        table.append((params, float(np.mean(accs))))

    def sort_key(entry):
        params, acc = entry
        return (-acc, params["C"], params["gamma"], params["degree"],
                KERNELS.index(params["kernel"]))

    best_params, best_acc = min(table, key=sort_key)
    return GridSearchResult(best_params=dict(best_params), best_accuracy=best_acc,
                            table=table, folds=folds)


def train_model(X: np.ndarray, y, grid: list | None = None, k: int = 5,
                seed: int = 0, threshold: float = 0.3) -> tuple:
    """Full training: grid search, out-of-fold calibration, final refit.

    Platt scaling is fit on out-of-fold decision values of the winning
    configuration (never on in-fold decisions), then the winner is
    refit on the complete training set.

    Returns ``(model, normalizer, grid_result)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _as_pm1(y)
    result = grid_search_cv(X, y, grid=grid, k=k, seed=seed)
    best = result.best_params

    oof_decisions = np.zeros(len(y))
    for f in range(k):
        val = result.folds == f
        train = ~val
        norm = Normalizer.fit(X[train])
        model = train_svm(norm.transform(X[train]), y[train], **best)
        oof_decisions[val] = model.decision_function(norm.transform(X[val]))
    platt_a, platt_b = platt_calibrate(oof_decisions, y)

    normalizer = Normalizer.fit(X)
    from .features import schema_hash
    model = train_svm(normalizer.transform(X), y, schema_hash=schema_hash(), **best)
    model.platt_a = platt_a
    model.platt_b = platt_b
    model.threshold = threshold
    return model, normalizer, result


def permutation_importance(model: SVMModel, normalizer: Normalizer,
                           X: np.ndarray, y, n_repeats: int = 5,
                           seed: int = 0) -> list:
    """Mean accuracy drop per permuted feature on held-out data.

    Returns (feature_index, mean_drop) sorted by descending drop, ties
    by feature index; permutations are seeded per (feature, repeat) so
    rankings are reproducible.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _as_pm1(y)
    baseline = evaluate(model, normalizer, X, y)["accuracy"]
    drops = []
    for feat in range(X.shape[1]):
        acc = []
        for rep in range(n_repeats):
            rng = np.random.default_rng((seed, feat, rep))
            Xp = X.copy()
            Xp[:, feat] = Xp[rng.permutation(len(Xp)), feat]
            acc.append(evaluate(model, normalizer, Xp, y)["accuracy"])
        drops.append((feat, baseline - float(np.mean(acc))))
    drops.sort(key=lambda t: (-t[1], t[0]))
    return drops
