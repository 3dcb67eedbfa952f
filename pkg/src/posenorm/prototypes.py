"""Pose prototypes and how to learn them.

A prototype is a reference image, a region box in it, and the anchor parts
used to align other images to it.  Learning picks a small set of prototypes
such that every training keypoint is aligned well by at least one of them;
this is an uncapacitated facility location problem (candidate prototypes are
facilities, training keypoints are cities), solved with the greedy
star-selection heuristic.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .errors import FormatError, Infeasible, TooFewVisible, UnknownPart
from .geometry import (
    FIT_OK,
    Box,
    KeypointSet,
    WarpFamily,
    normalize_keypoints,
    region_warps_batched,
)

log = logging.getLogger(__name__)

PROTOTYPES_VERSION = "pnp1"
MIN_BOX_SIDE = 8.0


@dataclass(frozen=True, eq=False)
class Prototype:
    ref_image: str
    box: Box
    anchor_parts: tuple[int, ...]
    ref_keypoints: KeypointSet
    canonical_size: float = 224.0
    family: WarpFamily = WarpFamily.SIMILARITY

    def __post_init__(self):
        parts = tuple(sorted(int(p) for p in self.anchor_parts))
        if not parts:
            raise ValueError("a prototype needs at least one anchor part")
        object.__setattr__(self, "anchor_parts", parts)
        object.__setattr__(self, "family", WarpFamily.parse(self.family))
        object.__setattr__(self, "canonical_size", float(self.canonical_size))

    @cached_property
    def normalized_ref_keypoints(self) -> KeypointSet:
        return normalize_keypoints(self.ref_keypoints, self.box, self.canonical_size)

    def to_dict(self) -> dict:
        norm = self.normalized_ref_keypoints
        return {
            "ref_image": self.ref_image,
            "box": self.box.as_list(),
            "anchor_parts": list(self.anchor_parts),
            "family": self.family.value,
            "normalized_ref_keypoints": [
                [float(x), float(y), int(v)] if v else [None, None, 0]
                for (x, y), v in zip(norm.xy.tolist(), norm.visible.tolist())
            ],
            "ref_keypoints": [
                [float(x), float(y), int(v)] if v else [None, None, 0]
                for (x, y), v in zip(self.ref_keypoints.xy.tolist(), self.ref_keypoints.visible.tolist())
            ],
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Prototype):
            return NotImplemented
        return self.canonical_size == other.canonical_size and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash((self.ref_image, self.anchor_parts, tuple(self.box.as_list())))


@dataclass(frozen=True, order=True)
class CandidateAnchor:
    image: str
    part: int


@dataclass
class PrototypeLearnConfig:
    lambda_: float = 64.0
    neighbors: int = 5
    box_expansion: float = 0.5
    canonical_size: float = 224.0
    family: WarpFamily = WarpFamily.SIMILARITY
    anchor_subsample: int | None = None
    rng_seed: int = 0
    min_box_side: float = MIN_BOX_SIDE
    workers: int = 1

    def __post_init__(self):
        self.family = WarpFamily.parse(self.family)
        if not self.lambda_ > 0:
            raise ValueError("lambda must be positive")
        if self.neighbors < self.family.min_points:
            raise ValueError(
                f"neighbors ({self.neighbors}) below the {self.family.value} minimum of {self.family.min_points}"
            )
        if self.box_expansion < 0:
            raise ValueError("box_expansion must be nonnegative")
        if not self.canonical_size > 0:
            raise ValueError("canonical_size must be positive")


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


def expanded_box(points, expansion: float, image_size, min_side: float = MIN_BOX_SIDE) -> Box:
    """Bounding box of ``points`` grown by ``expansion`` of its size on each side.

    The box is widened about its centre to at least ``min_side`` and then
    clipped to the image; if clipping leaves it narrower than ``min_side`` it
    is pushed back inside the image instead.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    size = hi - lo
    lo = lo - expansion * size
    hi = hi + expansion * size
    W, H = float(image_size[0]), float(image_size[1])
    out = []
    for axis, limit in ((0, W), (1, H)):
        a, b = lo[axis], hi[axis]
        if b - a < min_side:
            c = (a + b) / 2
            a, b = c - min_side / 2, c + min_side / 2
        a, b = max(a, 0.0), min(b, limit)
        if b - a < min_side:
            side = min(min_side, limit)
            if a <= 0.0:
                a, b = 0.0, side
            else:
                a, b = limit - side, limit
        out.append((a, b))
    (x0, x1), (y0, y1) = out
    return Box(x0, y0, x1 - x0, y1 - y0)


def nearest_visible_parts(kp: KeypointSet, part: int, M: int) -> tuple[int, ...]:
    vis = kp.visible_indices()
    d = np.sum((kp.xy[vis] - kp.xy[part]) ** 2, axis=1)
    # the anchor itself sorts first; ties broken by part index
    order = np.lexsort((vis, d, vis != part))
    return tuple(sorted(int(j) for j in vis[order[:M]]))


def build_candidate(anchor: CandidateAnchor, data: Dataset, cfg: PrototypeLearnConfig) -> Prototype:
    kp = data.keypoints_of(anchor.image)
    rec = data.record(anchor.image)
    if not kp.visible[anchor.part]:
        raise TooFewVisible(f"anchor part {anchor.part} is not visible in image {anchor.image}")
    n_vis = int(kp.visible.sum())
    if n_vis < cfg.neighbors:
        raise TooFewVisible(f"image {anchor.image} has {n_vis} visible keypoints, need {cfg.neighbors}")
    parts = nearest_visible_parts(kp, anchor.part, cfg.neighbors)
    box = expanded_box(kp.xy[list(parts)], cfg.box_expansion, (rec.width, rec.height), cfg.min_box_side)
    return Prototype(anchor.image, box, parts, kp, cfg.canonical_size, cfg.family)


def candidate_anchors(data: Dataset, cfg: PrototypeLearnConfig) -> list[CandidateAnchor]:
    """Every visible keypoint of an image with enough visible parts, optionally subsampled.

    Subsampling keeps ``anchor_subsample`` anchors spread evenly over part
    indices, drawing images uniformly within each part.
    """
    vis = data.visible()
    ok = vis.sum(axis=1) >= cfg.neighbors
    per_part = [[data.images[i].id for i in np.flatnonzero(vis[:, k] & ok)] for k in range(data.K)]
    if cfg.anchor_subsample is None or cfg.anchor_subsample >= sum(map(len, per_part)):
        return sorted(
            (CandidateAnchor(img, k) for k in range(data.K) for img in per_part[k]),
            key=lambda a: (data.index_of(a.image), a.part),
        )
    rng = np.random.default_rng(cfg.rng_seed)
    cap = int(cfg.anchor_subsample)
    quota = [0] * data.K
    remaining = cap
    # round-robin over parts, skipping parts that run out of images
    while remaining > 0:
        progressed = False
        for k in range(data.K):
            if remaining and quota[k] < len(per_part[k]):
                quota[k] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    chosen = []
    for k in range(data.K):
        if quota[k]:
            pick = rng.choice(len(per_part[k]), size=quota[k], replace=False)
            chosen.extend(CandidateAnchor(per_part[k][i], k) for i in sorted(pick))
    return sorted(chosen, key=lambda a: (data.index_of(a.image), a.part))


# ---------------------------------------------------------------------------
# connection costs
# ---------------------------------------------------------------------------


def prototype_costs(proto: Prototype, det_xy: np.ndarray, det_vis: np.ndarray) -> np.ndarray:
    """Squared canonical-pixel error of every keypoint of every image under ``proto``.

    Returns an (N, K) array; entries are ``inf`` where the keypoint is not
    visible in the image or the reference, or the warp cannot be fit.
    """
    canon, _, status = region_warps_batched(det_xy, det_vis, proto, proto.family)
    pred = np.einsum("nij,nkj->nki", canon[:, :, :2], np.nan_to_num(det_xy)) + canon[:, None, :, 2]
    d = pred - np.nan_to_num(proto.normalized_ref_keypoints.xy)[None]
    cost = np.einsum("nki,nki->nk", d, d)
    ok = det_vis & proto.ref_keypoints.visible[None, :] & (status == FIT_OK)[:, None]
    return np.where(ok, cost, np.inf)


def connection_cost(city: tuple[str, int], facility: Prototype, data: Dataset) -> float:
    """Cost of aligning keypoint ``city = (image, part)`` through ``facility``."""
    image, part = city
    kp = data.keypoints_of(image)
    costs = prototype_costs(facility, kp.xy[None], kp.visible[None])
    return float(costs[0, part])


def cost_matrix(protos: Sequence[Prototype], data: Dataset, workers: int = 1):
    """Dense (cities x facilities) cost matrix over all visible keypoints of ``data``.

    Returns ``(costs, cities)`` where ``cities`` lists ``(image_index, part)``.
    """
    xy = data.xy()
    vis = data.visible()
    rows, cols = np.nonzero(vis)
    cities = list(zip(rows.tolist(), cols.tolist()))

    def column(p):
        return prototype_costs(p, xy, vis)[rows, cols]

    if workers > 1 and len(protos) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            columns = list(ex.map(column, protos))
    else:
        columns = [column(p) for p in protos]
    costs = np.stack(columns, axis=1) if columns else np.zeros((len(cities), 0))
    return costs, cities


# ---------------------------------------------------------------------------
# facility location
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FacilityLocationInstance:
    open_cost: float
    connection_cost: np.ndarray
    city_ids: tuple = ()
    facility_ids: tuple = ()

    def __post_init__(self):
        c = np.array(self.connection_cost, dtype=float)
        if c.ndim != 2:
            raise ValueError("connection_cost must be a cities x facilities matrix")
        if np.any(np.isnan(c)) or np.any(c < 0):
            raise ValueError("connection costs must be nonnegative (inf allowed)")
        if not self.open_cost > 0:
            raise ValueError("open_cost must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "connection_cost", c)
        if not self.city_ids:
            object.__setattr__(self, "city_ids", tuple(range(c.shape[0])))
        if not self.facility_ids:
            object.__setattr__(self, "facility_ids", tuple(range(c.shape[1])))

    @property
    def n_cities(self) -> int:
        return self.connection_cost.shape[0]

    @property
    def n_facilities(self) -> int:
        return self.connection_cost.shape[1]

    def cost_of(self, open_facilities, assignment) -> float:
        c = self.connection_cost[np.arange(self.n_cities), np.asarray(assignment, int)]
        return self.open_cost * len(open_facilities) + float(np.sum(c))


@dataclass(frozen=True, eq=False)
class FacilitySolution:
    open_facilities: tuple[int, ...]
    assignment: np.ndarray
    total_cost: float
    iterations: int = 0

    def counts(self) -> dict[int, int]:
        u, c = np.unique(self.assignment, return_counts=True)
        return {int(f): int(n) for f, n in zip(u, c)}


_REL_TIE = 1e-12


def greedy_facility_location(inst: FacilityLocationInstance) -> FacilitySolution:
    """Greedy star selection for uncapacitated facility location.

    Each round picks the facility and prefix of its cheapest unassigned
    cities with the lowest (opening cost + connection costs) / cities ratio,
    where facilities already open cost nothing to reuse.  Candidate ratios
    only grow as cities get assigned, so stale heap entries are re-scored
    lazily.  Ties go to the lowest facility index, then to the longest
    prefix achieving the ratio.  A final pass moves every city to its
    cheapest open facility.
    """
    C = inst.connection_cost
    n_c, n_f = C.shape
    finite = np.isfinite(C)
    uncovered = np.flatnonzero(~finite.any(axis=1))
    if uncovered.size:
        ids = [inst.city_ids[i] for i in uncovered]
        raise Infeasible(f"{len(ids)} cities have no finite connection cost: {ids[:10]}", ids)

    # per facility: finite cities sorted by cost, ties by city index
    lists = []
    for f in range(n_f):
        cities = np.flatnonzero(finite[:, f])
        order = np.lexsort((cities, C[cities, f]))
        lists.append((cities[order], C[cities[order], f]))

    assigned = np.zeros(n_c, bool)
    assignment = np.full(n_c, -1)
    is_open = np.zeros(n_f, bool)

    def best_star(f):
        cities, costs = lists[f]
        free = ~assigned[cities]
        if not free.any():
            return math.inf, None
        cs = np.cumsum(costs[free])
        ratio = ((0.0 if is_open[f] else inst.open_cost) + cs) / np.arange(1, cs.size + 1)
        best = ratio.min()
        k = int(np.flatnonzero(ratio <= best + _REL_TIE * max(best, 1.0))[-1]) + 1
        return float(best), cities[free][:k]

    heap = []
    for f in range(n_f):
        r, _ = best_star(f)
        if r < math.inf:
            heap.append((r, f))
    heapq.heapify(heap)

    iterations = 0
    remaining = n_c
    while remaining:
        r_old, f = heapq.heappop(heap)
        r, star = best_star(f)
        if star is None:
            continue
        if heap and (r, f) > heap[0] and r > heap[0][0] + _REL_TIE * max(heap[0][0], 1.0):
            heapq.heappush(heap, (r, f))
            continue
        iterations += 1
        is_open[f] = True
        assigned[star] = True
        assignment[star] = f
        remaining -= star.size
        r_new, _ = best_star(f)
        if r_new < math.inf:
            heapq.heappush(heap, (r_new, f))

    opened = np.flatnonzero(is_open)
    # cleanup: each city to its cheapest open facility (lowest index on ties)
    sub = C[:, opened]
    assignment = opened[np.argmin(sub, axis=1)]
    # facilities that lost all their cities no longer need to stay open
    used = np.unique(assignment)
    total = inst.cost_of(used, assignment)
    return FacilitySolution(tuple(int(f) for f in used), assignment, total, iterations)


# ---------------------------------------------------------------------------
# learning
# ---------------------------------------------------------------------------


@dataclass
class LearnResult:
    prototypes: list[Prototype]
    objective: float
    mean_alignment_error: float
    assignment_counts: list[int]
    n_cities: int
    n_candidates: int
    solution: FacilitySolution = field(repr=False)
    instance: FacilityLocationInstance = field(repr=False)
    candidates: list[Prototype] = field(repr=False)
    cities: list[tuple[int, int]] = field(repr=False)

    def report(self) -> dict:
        return {
            "objective": self.objective,
            "mean_alignment_error": self.mean_alignment_error,
            "n_prototypes": len(self.prototypes),
            "assignment_counts": list(self.assignment_counts),
            "n_cities": self.n_cities,
            "n_candidates": self.n_candidates,
            "greedy_iterations": self.solution.iterations,
            "open_cost_per_prototype": self.instance.open_cost,
            "total_cost": self.solution.total_cost,
        }


def learn_prototypes(train: Dataset, cfg: PrototypeLearnConfig) -> LearnResult:
    """Choose prototypes minimising ``lambda * P + mean keypoint alignment error``.

    Multiplying the objective through by the number of cities N gives a
    facility location instance with opening cost ``lambda * N`` and raw
    squared-error connection costs, which is what the greedy solver sees.
    """
    anchors = candidate_anchors(train, cfg)
    if not anchors:
        raise Infeasible(f"no training image has {cfg.neighbors} visible keypoints")
    candidates = [build_candidate(a, train, cfg) for a in anchors]
    costs, cities = cost_matrix(candidates, train, cfg.workers)
    n = len(cities)
    city_ids = tuple((train.images[i].id, j) for i, j in cities)
    inst = FacilityLocationInstance(cfg.lambda_ * n, costs, city_ids, tuple(anchors))
    sol = greedy_facility_location(inst)
    counts = sol.counts()
    order = sorted(sol.open_facilities, key=lambda f: (-counts[f], f))
    assigned_cost = costs[np.arange(n), sol.assignment]
    mean_err = float(np.mean(assigned_cost)) if n else 0.0
    log.info("opened %d of %d candidate prototypes for %d keypoints", len(order), len(candidates), n)
    return LearnResult(
        prototypes=[candidates[f] for f in order],
        objective=cfg.lambda_ * len(order) + mean_err,
        mean_alignment_error=mean_err,
        assignment_counts=[counts[f] for f in order],
        n_cities=n,
        n_candidates=len(candidates),
        solution=sol,
        instance=inst,
        candidates=candidates,
        cities=cities,
    )


# ---------------------------------------------------------------------------
# baseline region schemes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadBody:
    groups: dict
    ref_image: str | None = None


@dataclass(frozen=True)
class RandPairs:
    count: int
    seed: int = 0


@dataclass(frozen=True)
class CubKeypoints:
    pass


def _resolve_parts(names, train: Dataset) -> list[int]:
    parts = []
    for p in names:
        try:
            j = train.part_index(p)
        except KeyError:
            raise UnknownPart(f"unknown part {p!r}") from None
        if not 0 <= j < train.K:
            raise UnknownPart(f"part index {j} outside [0, {train.K})")
        parts.append(j)
    return sorted(set(parts))


def baseline_regions(scheme, train: Dataset, cfg: PrototypeLearnConfig) -> list[Prototype]:
    vis = train.visible()
    ids = train.ids

    def make(img_idx, parts, family):
        kp = train.keypoints[img_idx]
        rec = train.images[img_idx]
        used = [j for j in parts if kp.visible[j]]
        box = expanded_box(kp.xy[used], cfg.box_expansion, (rec.width, rec.height), cfg.min_box_side)
        return Prototype(rec.id, box, tuple(used), kp, cfg.canonical_size, family)

    if isinstance(scheme, HeadBody):
        out = []
        for name in sorted(scheme.groups):
            parts = _resolve_parts(scheme.groups[name], train)
            if scheme.ref_image is not None:
                idx = train.index_of(scheme.ref_image)
            else:
                # the training image showing most of the group, earliest on ties
                idx = int(np.argmax(vis[:, parts].sum(axis=1)))
            if not vis[idx, parts].any():
                raise TooFewVisible(f"no part of group {name!r} visible in image {ids[idx]}")
            out.append(make(idx, parts, WarpFamily.SIMILARITY))
        return out

    if isinstance(scheme, RandPairs):
        rng = np.random.default_rng(scheme.seed)
        eligible = np.flatnonzero(vis.sum(axis=1) >= 2)
        if eligible.size == 0:
            raise TooFewVisible("no training image has two visible keypoints")
        out = []
        for _ in range(scheme.count):
            i = int(eligible[rng.integers(eligible.size)])
            pair = rng.choice(np.flatnonzero(vis[i]), size=2, replace=False)
            out.append(make(i, sorted(int(p) for p in pair), WarpFamily.SIMILARITY))
        return out

    if isinstance(scheme, CubKeypoints):
        out = []
        for k in range(train.K):
            imgs = np.flatnonzero(vis[:, k])
            if imgs.size == 0:
                log.warning("part %d never visible in training data; no region", k)
                continue
            out.append(make(int(imgs[0]), [k], WarpFamily.TRANSLATION))
        return out

    raise ValueError(f"unknown region scheme {scheme!r}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _kps_from_rows(rows) -> KeypointSet:
    xy = np.array([[np.nan if r[0] is None else r[0], np.nan if r[1] is None else r[1]] for r in rows], float)
    vis = np.array([bool(r[2]) for r in rows])
    return KeypointSet(xy.reshape(-1, 2), vis)


def prototypes_document(protos: Sequence[Prototype], extra: dict | None = None) -> dict:
    families = {p.family.value for p in protos}
    sizes = {p.canonical_size for p in protos}
    doc = {
        "version": PROTOTYPES_VERSION,
        "canonical_size": sizes.pop() if len(sizes) == 1 else None,
        "family": families.pop() if len(families) == 1 else "mixed",
        "prototypes": [p.to_dict() for p in protos],
    }
    if extra:
        doc.update(extra)
    return doc


def save_prototypes(path, protos: Sequence[Prototype], extra: dict | None = None) -> None:
    doc = prototypes_document(protos, extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_prototypes(path) -> list[Prototype]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: bad JSON ({e.msg} at line {e.lineno})") from None
    if doc.get("version") != PROTOTYPES_VERSION:
        raise FormatError(f"{path}: expected version {PROTOTYPES_VERSION!r}, found {doc.get('version')!r}")
    out = []
    for i, p in enumerate(doc.get("prototypes", [])):
        try:
            box = Box(*p["box"])
            canonical = float(p.get("canonical_size", doc.get("canonical_size")))
            fam = WarpFamily.parse(p.get("family", doc.get("family")))
            if "ref_keypoints" in p:
                ref = _kps_from_rows(p["ref_keypoints"])
            else:
                norm = _kps_from_rows(p["normalized_ref_keypoints"])
                xy = norm.xy.copy()
                xy[:, 0] = xy[:, 0] / canonical * box.width + box.x_min
                xy[:, 1] = xy[:, 1] / canonical * box.height + box.y_min
                ref = KeypointSet(xy, norm.visible)
            out.append(Prototype(str(p["ref_image"]), box, tuple(p["anchor_parts"]), ref, canonical, fam))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: prototype {i}: {e}") from None
    return out
