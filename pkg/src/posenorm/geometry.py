"""Keypoints, boxes and closed-form warp estimation.

Warps are stored as 2x3 matrices ``[A | t]`` acting on column vectors,
``W(y) = A @ y + t``.  Three families are supported, each with a closed-form
least-squares solution from point correspondences:

=============  ==================  ========
family         form                min pts
=============  ==================  ========
translation    ``y + T``           1
similarity     ``s R y + T``       2
affine         ``A y^h``           3
=============  ==================  ========

All estimators are written batched over a leading axis so that a single
prototype can be fit against every training image at once.  The single-pair
entry point :func:`estimate_warp` is the ``N = 1`` case of the same code.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateConfiguration, InsufficientPoints, SingularWarp, TooFewPoints

if TYPE_CHECKING:
    from .prototypes import Prototype

AFFINE_MAX_CONDITION = 1e8
SINGULAR_DET_TOL = 1e-12

# status codes returned by the batched estimators
FIT_OK = 0
FIT_TOO_FEW = 1
FIT_DEGENERATE = 2


class Point2(NamedTuple):
    x: float
    y: float


class Keypoint(NamedTuple):
    part_index: int
    location: Point2
    visible: bool


class WarpFamily(enum.Enum):
    TRANSLATION = "translation"
    SIMILARITY = "similarity"
    AFFINE = "affine"

    @property
    def min_points(self) -> int:
        return _MIN_POINTS[self]

    @classmethod
    def parse(cls, name: str | "WarpFamily") -> "WarpFamily":
        if isinstance(name, WarpFamily):
            return name
        key = str(name).strip().lower()
        for alias, fam in _ALIASES.items():
            if key == alias:
                return fam
        raise ValueError(f"unknown warp family {name!r}")


_MIN_POINTS = {WarpFamily.TRANSLATION: 1, WarpFamily.SIMILARITY: 2, WarpFamily.AFFINE: 3}
_ALIASES = {
    "translation": WarpFamily.TRANSLATION,
    "trans": WarpFamily.TRANSLATION,
    "similarity": WarpFamily.SIMILARITY,
    "sim": WarpFamily.SIMILARITY,
    "affine": WarpFamily.AFFINE,
    "aff": WarpFamily.AFFINE,
}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """K keypoint slots: ``xy`` is (K, 2) pixel coordinates, ``visible`` is (K,).

    Coordinates of invisible slots are carried along but never used.
    """

    xy: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        vis = np.asarray(self.visible, dtype=bool).reshape(-1)
        if xy.shape[0] != vis.shape[0]:
            raise ValueError(f"xy has {xy.shape[0]} rows but visible has {vis.shape[0]}")
        if not np.all(np.isfinite(xy[vis])):
            raise ValueError("visible keypoints must have finite coordinates")
        object.__setattr__(self, "xy", _frozen(xy))
        object.__setattr__(self, "visible", _frozen(vis))

    @classmethod
    def from_keypoints(cls, kps: Iterable[Keypoint], K: int | None = None) -> "KeypointSet":
        kps = list(kps)
        K = len(kps) if K is None else K
        xy = np.full((K, 2), np.nan)
        vis = np.zeros(K, dtype=bool)
        seen = set()
        for kp in kps:
            j = int(kp.part_index)
            if not 0 <= j < K:
                raise ValueError(f"part index {j} outside [0, {K})")
            if j in seen:
                raise ValueError(f"duplicate part index {j}")
            seen.add(j)
            xy[j] = kp.location
            vis[j] = bool(kp.visible)
        return cls(xy, vis)

    @property
    def K(self) -> int:
        return self.xy.shape[0]

    def __len__(self) -> int:
        return self.K

    def __getitem__(self, j: int) -> Keypoint:
        return Keypoint(j, Point2(float(self.xy[j, 0]), float(self.xy[j, 1])), bool(self.visible[j]))

    def __iter__(self):
        return (self[j] for j in range(self.K))

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return np.array_equal(self.visible, other.visible) and np.array_equal(
            self.xy, other.xy, equal_nan=True
        )

    def __hash__(self):
        return hash((self.xy.tobytes(), self.visible.tobytes()))

    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(self.visible)


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box must have positive size, got {self.width}x{self.height}")
        for name in ("x_min", "y_min", "width", "height"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def x_max(self) -> float:
        return self.x_min + self.width

    @property
    def y_max(self) -> float:
        return self.y_min + self.height

    def contains(self, xy, tol: float = 1e-9) -> bool:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return bool(
            np.all(xy[:, 0] >= self.x_min - tol)
            and np.all(xy[:, 0] <= self.x_max + tol)
            and np.all(xy[:, 1] >= self.y_min - tol)
            and np.all(xy[:, 1] <= self.y_max + tol)
        )

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def normalizer(self, canonical_size: float) -> "Warp":
        """Warp taking image pixels into the box's canonical frame."""
        sx = canonical_size / self.width
        sy = canonical_size / self.height
        m = np.array([[sx, 0.0, -sx * self.x_min], [0.0, sy, -sy * self.y_min]])
        return Warp(family_of_matrix(m), m)


@dataclass(frozen=True, eq=False)
class Warp:
    family: WarpFamily
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (2, 3):
            raise ValueError(f"warp matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("warp matrix must be finite")
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def identity(cls) -> "Warp":
        return cls(WarpFamily.TRANSLATION, np.hstack([np.eye(2), np.zeros((2, 1))]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Warp":
        return cls(WarpFamily.TRANSLATION, [[1.0, 0.0, tx], [0.0, 1.0, ty]])

    @classmethod
    def similarity(cls, scale: float, theta: float, tx: float = 0.0, ty: float = 0.0) -> "Warp":
        c, s = math.cos(theta), math.sin(theta)
        return cls(WarpFamily.SIMILARITY, [[scale * c, -scale * s, tx], [scale * s, scale * c, ty]])

    @property
    def A(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def scale(self) -> float:
        return math.sqrt(abs(np.linalg.det(self.A)))

    @property
    def rotation(self) -> np.ndarray:
        """R of a similarity warp (``A / s``)."""
        return self.A / self.scale

    def apply(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return xy @ self.A.T + self.t

    def compose(self, inner: "Warp") -> "Warp":
        """``self ∘ inner``: apply ``inner`` first."""
        A = self.A @ inner.A
        t = self.A @ inner.t + self.t
        m = np.hstack([A, t[:, None]])
        return Warp(family_of_matrix(m), m)

    def allclose(self, other: "Warp", atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix, other.matrix, rtol=0, atol=atol)

    def __repr__(self) -> str:
        return f"Warp({self.family.value}, {self.matrix.tolist()})"


def family_of_matrix(m: np.ndarray, tol: float = 1e-12) -> WarpFamily:
    """Smallest family that can represent the 2x3 matrix ``m``."""
    A = np.asarray(m)[:, :2]
    scale = max(1.0, float(np.abs(A).max()))
    if np.allclose(A, np.eye(2), rtol=0, atol=tol * scale):
        return WarpFamily.TRANSLATION
    if (
        abs(A[0, 0] - A[1, 1]) <= tol * scale
        and abs(A[0, 1] + A[1, 0]) <= tol * scale
        and np.linalg.det(A) > 0
    ):
        return WarpFamily.SIMILARITY
    return WarpFamily.AFFINE


def apply_warp(w: Warp, p) -> Point2:
    q = w.apply(np.asarray(p, dtype=float))
    return Point2(float(q[0]), float(q[1]))


def invert_warp(w: Warp) -> Warp:
    A = w.A
    det = float(np.linalg.det(A))
    if abs(det) < SINGULAR_DET_TOL * max(1.0, float(np.abs(A).max()) ** 2):
        raise SingularWarp(f"warp is not invertible (det(A) = {det:g})")
    Ainv = np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]]) / det
    m = np.hstack([Ainv, (-Ainv @ w.t)[:, None]])
    return Warp(w.family, m)


def normalize_keypoints(kps: KeypointSet, box: Box, canonical_size: float) -> KeypointSet:
    if not canonical_size > 0:
        raise ValueError("canonical_size must be positive")
    xy = kps.xy.copy()
    vis = kps.visible
    xy[vis, 0] = (xy[vis, 0] - box.x_min) / box.width * canonical_size
    xy[vis, 1] = (xy[vis, 1] - box.y_min) / box.height * canonical_size
    return KeypointSet(xy, vis)


# ---------------------------------------------------------------------------
# closed-form estimators
# ---------------------------------------------------------------------------


def svd_2x2(C: np.ndarray):
    """Closed-form SVD of a batch of 2x2 matrices, ``C = U diag(sigma) Vt``.

    Decomposes each matrix as rotation * diag * (possibly reflected) rotation.
    Singular values come out sorted descending and nonnegative.
    """
    C = np.asarray(C, dtype=float)
    a, b, c, d = C[..., 0, 0], C[..., 0, 1], C[..., 1, 0], C[..., 1, 1]
    E = (a + d) / 2
    F = (a - d) / 2
    G = (c + b) / 2
    H = (c - b) / 2
    Q = np.hypot(E, H)
    R = np.hypot(F, G)
    s1 = Q + R
    s2 = Q - R
    a1 = np.arctan2(G, F)
    a2 = np.arctan2(H, E)
    theta = (a2 - a1) / 2
    phi = (a2 + a1) / 2

    cp, sp = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    U = np.stack([np.stack([cp, -sp], -1), np.stack([sp, cp], -1)], -2)
    Vt = np.stack([np.stack([ct, -st], -1), np.stack([st, ct], -1)], -2)

    # s2 < 0 means C has negative determinant; move the sign into Vt's second row
    neg = s2 < 0
    sign = np.where(neg, -1.0, 1.0)
    Vt = Vt.copy()
    Vt[..., 1, :] *= sign[..., None]
    sigma = np.stack([s1, np.abs(s2)], -1)
    return U, sigma, Vt


def _centered(src, dst, w):
    n = w.sum(axis=1)
    safe = np.maximum(n, 1)[:, None]
    mu_s = (src * w[..., None]).sum(axis=1) / safe
    mu_d = (dst * w[..., None]).sum(axis=1) / safe
    S = (src - mu_s[:, None, :]) * w[..., None]
    D = (dst - mu_d[:, None, :]) * w[..., None]
    return n, mu_s, mu_d, S, D


def _fit_translation(src, dst, w):
    n, mu_s, mu_d, _, _ = _centered(src, dst, w)
    N = src.shape[0]
    m = np.zeros((N, 2, 3))
    m[:, 0, 0] = m[:, 1, 1] = 1.0
    m[:, :, 2] = mu_d - mu_s
    return m, np.full(N, FIT_OK)


def _fit_similarity(src, dst, w):
    n, mu_s, mu_d, S, D = _centered(src, dst, w)
    N = src.shape[0]
    # C = M̄_src M̄_dstᵀ summed over the used points
    C = np.einsum("nji,njk->nik", S, D)
    U, _, Vt = svd_2x2(C)
    V = np.swapaxes(Vt, -1, -2)
    Ut = np.swapaxes(U, -1, -2)
    det = np.sign(np.linalg.det(V @ Ut))
    det[det == 0] = 1.0
    fix = np.zeros((N, 2, 2))
    fix[:, 0, 0] = 1.0
    fix[:, 1, 1] = det
    R = V @ fix @ Ut

    spread = np.einsum("nji,nji->n", S, S)
    num = np.einsum("nji,nik,njk->n", D, R, S)
    scale_ref = 1.0 + np.einsum("nji,nji->n", src * w[..., None], src * w[..., None])
    status = np.full(N, FIT_OK)
    degenerate = spread <= 1e-24 * scale_ref
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, spread))
    degenerate |= ~(s > 0)
    status[degenerate] = FIT_DEGENERATE

    A = s[:, None, None] * R
    t = mu_d - np.einsum("nik,nk->ni", A, mu_s)
    m = np.concatenate([A, t[..., None]], axis=-1)
    m[degenerate] = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return m, status


def _fit_affine(src, dst, w):
    n, mu_s, mu_d, S, _ = _centered(src, dst, w)
    N = src.shape[0]
    # Solve in centred, unit-RMS source coordinates; the 1e8 condition threshold
    # is applied to this well-scaled normal matrix.
    rms = np.sqrt(np.einsum("nji,nji->n", S, S) / np.maximum(n, 1) / 2)
    status = np.full(N, FIT_OK)
    zero = rms <= 1e-300
    rms = np.where(zero, 1.0, rms)
    Hn = np.concatenate([S / rms[:, None, None], w[..., None]], axis=-1)  # (N, m, 3)
    G = np.einsum("nji,njk->nik", Hn, Hn)
    B = np.einsum("nji,njk->nik", dst * w[..., None], Hn)  # (N, 2, 3)
    cond = np.linalg.cond(G)
    bad = zero | ~np.isfinite(cond) | (cond > AFFINE_MAX_CONDITION)
    G_safe = np.where(bad[:, None, None], np.eye(3), G)
    An = np.linalg.solve(G_safe, np.swapaxes(B, -1, -2))
    An = np.swapaxes(An, -1, -2)  # (N, 2, 3)
    L = An[:, :, :2] / rms[:, None, None]
    t = An[:, :, 2] - np.einsum("nik,nk->ni", L, mu_s)
    m = np.concatenate([L, t[..., None]], axis=-1)
    m[bad] = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    status[bad] = FIT_DEGENERATE
    return m, status


_FITTERS = {
    WarpFamily.TRANSLATION: _fit_translation,
    WarpFamily.SIMILARITY: _fit_similarity,
    WarpFamily.AFFINE: _fit_affine,
}


def estimate_warps_batched(src, dst, weights, family: WarpFamily):
    """Fit one warp per batch row.

    Parameters
    ----------
    src, dst : array (N, m, 2) or (m, 2)
        Corresponding points; a 2-D ``dst`` is shared by all rows.
    weights : bool array (N, m)
        Which correspondences each row uses.
    family : WarpFamily

    Returns
    -------
    matrices : (N, 2, 3) float array
        Rows whose status is not ``FIT_OK`` hold the identity.
    status : (N,) int array of ``FIT_OK``, ``FIT_TOO_FEW`` or ``FIT_DEGENERATE``.
    """
    family = WarpFamily.parse(family)
    w = np.asarray(weights, dtype=bool)
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.ndim == 2:
        src = np.broadcast_to(src, w.shape + (2,))
    if dst.ndim == 2:
        dst = np.broadcast_to(dst, w.shape + (2,))
    # zero unused slots so NaNs of invisible points never reach the algebra
    wf = w.astype(float)
    src = np.where(w[..., None], src, 0.0)
    dst = np.where(w[..., None], dst, 0.0)
    m, status = _FITTERS[family](src, dst, wf)
    too_few = w.sum(axis=1) < family.min_points
    status = np.where(too_few, FIT_TOO_FEW, status)
    m[too_few] = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return m, status


def estimate_warp(src: Sequence, dst: Sequence, family: WarpFamily) -> Warp:
    """Least-squares warp of ``family`` taking ``src`` points onto ``dst``."""
    family = WarpFamily.parse(family)
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError(f"src and dst differ in length: {len(src)} vs {len(dst)}")
    if len(src) < family.min_points:
        raise TooFewPoints(
            f"{family.value} warp needs at least {family.min_points} points, got {len(src)}"
        )
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("points must be finite")
    m, status = estimate_warps_batched(src[None], dst[None], np.ones((1, len(src)), bool), family)
    if status[0] == FIT_DEGENERATE:
        raise DegenerateConfiguration(f"degenerate point configuration for {family.value} warp")
    return Warp(family, m[0])


def residuals(w: Warp, src, dst) -> np.ndarray:
    """Per-point squared distance ``||dst - W(src)||^2``."""
    d = np.asarray(dst, dtype=float) - w.apply(np.asarray(src, dtype=float))
    return np.einsum("ij,ij->i", d, d)


# ---------------------------------------------------------------------------
# region warps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WarpFitResult:
    """Outcome of aligning detected keypoints to a prototype.

    ``pose_warp`` is the family-constrained transform from detected-image
    pixels to reference-image pixels.  ``warp`` composes it with the
    prototype box normalisation and maps detected-image pixels straight into
    the canonical region frame; it is what image resampling uses.
    """

    warp: Warp
    pose_warp: Warp
    per_point_sq_error: np.ndarray
    used_points: tuple[int, ...]

    @property
    def total_sq_error(self) -> float:
        return float(np.sum(self.per_point_sq_error))


def region_warps_batched(det_xy, det_vis, proto: "Prototype", family: WarpFamily):
    """Fit ``proto`` against a batch of detected keypoint sets.

    ``det_xy`` is (N, K, 2) and ``det_vis`` (N, K).  Returns canonical-frame
    matrices (N, 2, 3), the family-pure pose matrices (N, 2, 3) and status.
    """
    family = WarpFamily.parse(family)
    parts = np.asarray(sorted(proto.anchor_parts), dtype=int)
    ref = proto.ref_keypoints
    det_xy = np.asarray(det_xy, dtype=float)
    det_vis = np.asarray(det_vis, dtype=bool)
    use = det_vis[:, parts] & ref.visible[parts][None, :]
    pose, status = estimate_warps_batched(det_xy[:, parts], ref.xy[parts], use, family)
    norm = proto.box.normalizer(proto.canonical_size).matrix
    A = np.einsum("ik,nkj->nij", norm[:, :2], pose[:, :, :2])
    t = np.einsum("ik,nk->ni", norm[:, :2], pose[:, :, 2]) + norm[:, 2]
    canon = np.concatenate([A, t[..., None]], axis=-1)
    return canon, pose, status


def fit_region_warp(
    detected: KeypointSet, proto: "Prototype", family: WarpFamily | None = None
) -> WarpFitResult:
    """Align ``detected`` to the prototype over its co-visible anchor parts.

    ``family`` defaults to the prototype's own.  Raises :class:`InsufficientPoints` when fewer anchor parts are visible in
    both the detection and the reference than ``family`` needs.
    """
    family = proto.family if family is None else WarpFamily.parse(family)
    canon, pose, status = region_warps_batched(detected.xy[None], detected.visible[None], proto, family)
    parts = sorted(proto.anchor_parts)
    used = tuple(j for j in parts if detected.visible[j] and proto.ref_keypoints.visible[j])
    if status[0] == FIT_TOO_FEW:
        raise InsufficientPoints(
            f"{len(used)} co-visible anchor parts, {family.value} needs {family.min_points}"
        )
    if status[0] == FIT_DEGENERATE:
        raise DegenerateConfiguration(f"degenerate anchor configuration for {family.value} warp")
    warp = Warp(family_of_matrix(canon[0]), canon[0])
    idx = list(used)
    err = residuals(warp, detected.xy[idx], proto.normalized_ref_keypoints.xy[idx])
    return WarpFitResult(warp, Warp(family, pose[0]), err, used)
