"""One-vs-all linear SVMs trained by seeded stochastic per-sample updates.

Each class ``c`` gets a binary problem with targets ``+1`` for class ``c`` and
``-1`` otherwise, minimizing

    lam / 2 * ||w||^2 + mean_i max(0, 1 - y_i * w . [x_i, 1])

with ``lam = 1 / (C * n)``.  The bias is the last weight and is regularized
like the rest, which keeps the problem strongly convex.  All classes share one
sample order per epoch, so the binary problems run side by side as rows of a
single weight matrix.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateLabels, FormatError, LayoutMismatch
from .features import CombinedFeature

MODEL_VERSION = "pnm1"


SOLVERS = ("sdca", "pegasos")


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    epochs: int = 200
    solver: str = "sdca"
    # sdca stops once every class has duality gap <= tol * primal objective
    tol: float = 1e-4
    # pegasos step size is 1 / (lam * (t + t0)); t0 damps the first steps
    t0: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.t0 < 1:
            raise ValueError("t0 must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")


@dataclass(eq=False)
class LinearModel:
    weights: np.ndarray  # n_classes x (dim + 1), bias last
    layout_fingerprint: str | None = None
    train_config: dict = field(default_factory=dict)
    objective_history: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2 or self.weights.shape[1] < 1:
            raise ValueError("weights must be n_classes x (dim + 1)")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1] - 1

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return X @ self.weights[:, :-1].T + self.weights[:, -1]


@dataclass(frozen=True)
class AccuracyReport:
    accuracy: float
    per_class: list
    confusion: np.ndarray  # rows: true class, columns: predicted
    n: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class,
            "confusion": self.confusion.tolist(),
            "n": self.n,
        }


def _as_matrix(features) -> tuple[np.ndarray, str | None]:
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features.astype(float)), None
    feats = list(features)
    if not feats:
        raise ValueError("no feature vectors")
    prints = {f.layout.fingerprint for f in feats if isinstance(f, CombinedFeature)}
    if len(prints) > 1:
        raise LayoutMismatch("feature vectors come from different layouts")
    rows = [f.vector if isinstance(f, CombinedFeature) else np.asarray(f, float) for f in feats]
    if len({r.shape for r in rows}) != 1:
        raise LayoutMismatch("feature vectors differ in length")
    return np.vstack(rows), (prints.pop() if prints else None)


def _targets(labels: np.ndarray, n_classes: int) -> np.ndarray:
    Y = -np.ones((labels.size, n_classes))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def objective(W, X, labels, C: float = 1.0) -> np.ndarray:
    """Per-class primal objective for weights ``W`` (n_classes x (dim + 1))."""
    W = np.atleast_2d(W)
    Xa = _augment(np.atleast_2d(X))
    labels = np.asarray(labels, int)
    lam = 1.0 / (C * Xa.shape[0])
    Y = _targets(labels, W.shape[0])
    hinge = np.maximum(0.0, 1.0 - Y * (Xa @ W.T)).mean(axis=0)
    return 0.5 * lam * (W * W).sum(axis=1) + hinge


def hinge_subgradient(W, X, labels, C: float = 1.0) -> np.ndarray:
    """A subgradient of :func:`objective` with respect to ``W``.

    At a kink (margin exactly 1) the hinge contributes zero.
    """
    W = np.atleast_2d(W)
    Xa = _augment(np.atleast_2d(X))
    labels = np.asarray(labels, int)
    n = Xa.shape[0]
    lam = 1.0 / (C * n)
    Y = _targets(labels, W.shape[0])
    active = (Y * (Xa @ W.T)) < 1.0
    return lam * W - ((Y * active).T @ Xa) / n


def train_ova(features, labels, cfg: TrainConfig = TrainConfig(), n_classes: int | None = None) -> LinearModel:
    """Train one binary SVM per class.

    ``features`` is a matrix or a sequence of vectors / combined features.
    Raises :class:`~posenorm.errors.DegenerateLabels` when a class in
    ``range(n_classes)`` has no training example.
    """
    X, fingerprint = _as_matrix(features)
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (X.shape[0],):
        raise ValueError("one label per feature vector required")
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=n_classes)
    if n_classes < 2:
        raise DegenerateLabels("at least two classes are required")
    if counts.size > n_classes:
        raise ValueError("label outside range(n_classes)")
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise DegenerateLabels(f"classes without training examples: {missing}")

    solve = _sdca if cfg.solver == "sdca" else _pegasos
    W, history = solve(X, labels, n_classes, cfg)
    return LinearModel(W, fingerprint, asdict(cfg), history)


def _sdca(X, labels, n_classes, cfg):
    """Seeded stochastic dual coordinate ascent on all classes at once.

    Each visit to sample i moves its dual variables to the exact maximizer
    along that coordinate, i.e. a hinge subgradient step of optimal length.
    The returned weights are the best primal iterate seen at an epoch end.
    """
    n = X.shape[0]
    Xa = _augment(X)
    Y = _targets(labels, n_classes)
    lam = 1.0 / (cfg.C * n)
    sq = (Xa * Xa).sum(axis=1)
    rng = np.random.default_rng(cfg.rng_seed)
    alpha = np.zeros((n, n_classes))
    W = np.zeros((n_classes, Xa.shape[1]))
    best = W.copy()
    best_obj = objective(best, X, labels, cfg.C)
    history = [float(best_obj.sum())]
    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            x, y = Xa[i], Y[i]
            a = alpha[i]
            new = np.clip(a + (1.0 - y * (W @ x)) * lam * n / sq[i], 0.0, 1.0)
            W += np.outer((new - a) * y, x) / (lam * n)
            alpha[i] = new
        primal = objective(W, X, labels, cfg.C)
        better = primal < best_obj
        best[better] = W[better]
        best_obj = np.where(better, primal, best_obj)
        history.append(float(best_obj.sum()))
        dual = alpha.mean(axis=0) - 0.5 * lam * (W * W).sum(axis=1)
        if np.all(best_obj - dual <= cfg.tol * best_obj):
            break
    return best, history


def _pegasos(X, labels, n_classes, cfg):
    """Projected stochastic subgradient descent with weighted iterate averaging."""
    n = X.shape[0]
    Xa = _augment(X)
    Y = _targets(labels, n_classes)
    lam = 1.0 / (cfg.C * n)
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(cfg.rng_seed)
    W = np.zeros((n_classes, Xa.shape[1]))
    avg = np.zeros_like(W)
    best = avg.copy()
    best_obj = objective(best, X, labels, cfg.C)
    history = [float(best_obj.sum())]
    t = 0
    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * (t + cfg.t0))
            x, y = Xa[i], Y[i]
            viol = y * (W @ x) < 1.0
            W *= 1.0 - eta * lam
            W[viol] += eta * np.outer(y[viol], x)
            norms = np.sqrt((W * W).sum(axis=1))
            big = norms > radius
            W[big] *= (radius / norms[big])[:, None]
            # iterate t gets weight t, so early large steps fade out
            avg += (W - avg) * (2.0 / (t + 1))
        obj = objective(avg, X, labels, cfg.C)
        better = obj < best_obj
        best[better] = avg[better]
        best_obj = np.where(better, obj, best_obj)
        history.append(float(best_obj.sum()))
    return best, history


def _check_layout(model: LinearModel, X: np.ndarray, fingerprint: str | None) -> None:
    if X.shape[1] != model.dim:
        raise LayoutMismatch(f"feature length {X.shape[1]} does not match model dimension {model.dim}")
    if fingerprint is not None and model.layout_fingerprint is not None and fingerprint != model.layout_fingerprint:
        raise LayoutMismatch(f"feature layout {fingerprint} does not match model layout {model.layout_fingerprint}")


def predict_many(model: LinearModel, features) -> np.ndarray:
    X, fingerprint = _as_matrix(features)
    _check_layout(model, X, fingerprint)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(model.scores(X), axis=1)


def predict(model: LinearModel, feature) -> int:
    rows = [feature] if isinstance(feature, CombinedFeature) else np.atleast_2d(np.asarray(feature, float))
    return int(predict_many(model, rows)[0])


def evaluate(model: LinearModel, features, labels) -> AccuracyReport:
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("empty test set")
    pred = predict_many(model, features)
    k = max(model.n_classes, int(labels.max()) + 1)
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (labels, pred), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / totals[c]) if totals[c] else None for c in range(k)]
    return AccuracyReport(float(np.mean(pred == labels)), per_class, confusion, int(labels.size))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def model_document(model: LinearModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "n_classes": model.n_classes,
        "dim": model.dim,
        "layout_fingerprint": model.layout_fingerprint,
        "train_config": model.train_config,
        "weights": model.weights.reshape(-1).tolist(),
    }


def save_model(model: LinearModel, path) -> None:
    Path(path).write_text(json.dumps(model_document(model), sort_keys=True) + "\n")


def load_model(path) -> LinearModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: expected model version {MODEL_VERSION}, found {doc.get('version')}")
    try:
        k, d = int(doc["n_classes"]), int(doc["dim"])
        W = np.asarray(doc["weights"], dtype=float)
        if W.size != k * (d + 1):
            raise FormatError(f"{path}: expected {k * (d + 1)} weights, found {W.size}")
        return LinearModel(W.reshape(k, d + 1), doc.get("layout_fingerprint"), doc.get("train_config", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model ({exc})") from exc
