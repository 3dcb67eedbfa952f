"""Annotated image collections: native JSONL format and the CUB-200-2011 layout."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, InconsistentIds, MissingFile, ParseError
from .geometry import KeypointSet

NATIVE_FORMAT = "pnd1"
NATIVE_VERSION = 1

CUB_PART_NAMES = [
    "back",
    "beak",
    "belly",
    "breast",
    "crown",
    "forehead",
    "left eye",
    "left leg",
    "left wing",
    "nape",
    "right eye",
    "right leg",
    "right wing",
    "tail",
    "throat",
]

CUB_HEAD_BODY = {
    "head": ["beak", "crown", "forehead", "left eye", "right eye", "nape", "throat"],
    "body": ["back", "belly", "breast", "left wing", "right wing", "tail", "nape", "throat"],
}

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    width: int
    height: int


@dataclass(eq=False)
class Dataset:
    images: list[ImageRecord]
    keypoints: list[KeypointSet]
    labels: np.ndarray
    split: list[str]
    K: int
    class_names: list[str]
    part_names: list[str] = field(default_factory=list)
    bboxes: list | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        n = len(self.images)
        if not (len(self.keypoints) == n == len(self.labels) == len(self.split)):
            raise ValueError("images, keypoints, labels and split must have equal length")
        for rec, kp in zip(self.images, self.keypoints):
            if kp.K != self.K:
                raise ValueError(f"image {rec.id} has {kp.K} keypoint slots, expected {self.K}")
        if n and (self.labels.min() < 0 or self.labels.max() >= max(len(self.class_names), 1)):
            raise ValueError("labels out of range for class_names")
        bad = set(self.split) - {TRAIN, TEST}
        if bad:
            raise ValueError(f"unknown split values {sorted(bad)}")
        ids = [r.id for r in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids")
        self._index = {r.id: i for i, r in enumerate(self.images)}

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.images]

    def index_of(self, image_id: str) -> int:
        return self._index[image_id]

    def record(self, image_id: str) -> ImageRecord:
        return self.images[self._index[image_id]]

    def keypoints_of(self, image_id: str) -> KeypointSet:
        return self.keypoints[self._index[image_id]]

    def xy(self) -> np.ndarray:
        if not self.images:
            return np.zeros((0, self.K, 2))
        return np.stack([k.xy for k in self.keypoints])

    def visible(self) -> np.ndarray:
        if not self.images:
            return np.zeros((0, self.K), bool)
        return np.stack([k.visible for k in self.keypoints])

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(
            images=[self.images[i] for i in idx],
            keypoints=[self.keypoints[i] for i in idx],
            labels=self.labels[idx] if idx else np.zeros(0, int),
            split=[self.split[i] for i in idx],
            K=self.K,
            class_names=list(self.class_names),
            part_names=list(self.part_names),
            bboxes=None if self.bboxes is None else [self.bboxes[i] for i in idx],
        )

    def train(self) -> "Dataset":
        return self.subset(i for i, s in enumerate(self.split) if s == TRAIN)

    def test(self) -> "Dataset":
        return self.subset(i for i, s in enumerate(self.split) if s == TEST)

    def with_keypoints(self, other: "Dataset") -> "Dataset":
        """Copy of this dataset with keypoints replaced by ``other``'s (matched by id)."""
        if other.K != self.K:
            raise ValueError(f"part count differs: {self.K} vs {other.K}")
        kps = []
        for rec in self.images:
            if rec.id not in other._index:
                raise InconsistentIds(f"image {rec.id} missing from replacement keypoints")
            kps.append(other.keypoints_of(rec.id))
        return Dataset(
            list(self.images), kps, self.labels.copy(), list(self.split), self.K,
            list(self.class_names), list(self.part_names), self.bboxes,
        )

    def part_index(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        try:
            return self.part_names.index(name)
        except ValueError:
            raise KeyError(f"unknown part name {name!r}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images == other.images
            and self.keypoints == other.keypoints
            and np.array_equal(self.labels, other.labels)
            and self.split == other.split
            and self.K == other.K
            and self.class_names == other.class_names
            and self.part_names == other.part_names
            and _bboxes_equal(self.bboxes, other.bboxes)
        )


def _bboxes_equal(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return [list(map(float, x)) for x in a] == [list(map(float, x)) for x in b]


# ---------------------------------------------------------------------------
# native JSONL
# ---------------------------------------------------------------------------


def _kp_to_json(kp: KeypointSet) -> list:
    out = []
    for (x, y), v in zip(kp.xy.tolist(), kp.visible.tolist()):
        out.append([None if math.isnan(x) else x, None if math.isnan(y) else y, int(v)])
    return out


def _kp_from_json(rows, K: int, where: str) -> KeypointSet:
    if not isinstance(rows, list) or len(rows) != K:
        raise FormatError(f"{where}: expected {K} keypoints")
    xy = np.full((K, 2), np.nan)
    vis = np.zeros(K, bool)
    for j, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != 3:
            raise FormatError(f"{where}: keypoint {j} must be [x, y, visible]")
        x, y, v = row
        xy[j] = (np.nan if x is None else float(x), np.nan if y is None else float(y))
        vis[j] = bool(v)
    try:
        return KeypointSet(xy, vis)
    except ValueError as e:
        raise FormatError(f"{where}: {e}") from None


def save_native(ds: Dataset, path) -> None:
    header = {
        "format": NATIVE_FORMAT,
        "version": NATIVE_VERSION,
        "K": ds.K,
        "class_names": list(ds.class_names),
        "part_names": list(ds.part_names),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i, rec in enumerate(ds.images):
        obj = {
            "id": rec.id,
            "path": rec.path,
            "width": rec.width,
            "height": rec.height,
            "label": int(ds.labels[i]),
            "split": ds.split[i],
            "keypoints": _kp_to_json(ds.keypoints[i]),
        }
        if ds.bboxes is not None:
            obj["bbox"] = [float(v) for v in ds.bboxes[i]]
        lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_native(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file, missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:1: bad header JSON ({e.msg})") from None
    if header.get("format") != NATIVE_FORMAT:
        raise FormatError(f"{path}:1: expected format {NATIVE_FORMAT!r}, found {header.get('format')!r}")
    if header.get("version") != NATIVE_VERSION:
        raise FormatError(
            f"{path}:1: unsupported version: expected {NATIVE_VERSION}, found {header.get('version')!r}"
        )
    K = int(header["K"])
    images, kps, labels, split, bboxes = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
            rec = ImageRecord(str(obj["id"]), str(obj["path"]), int(obj["width"]), int(obj["height"]))
            labels.append(int(obj["label"]))
            split.append(str(obj["split"]))
            kps.append(_kp_from_json(obj["keypoints"], K, where))
            bboxes.append(obj.get("bbox"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{where}: bad JSON ({e.msg})") from None
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"{where}: bad record ({e})") from None
        images.append(rec)
    has_boxes = any(b is not None for b in bboxes)
    try:
        return Dataset(
            images, kps, np.asarray(labels, int), split, K,
            list(header.get("class_names", [])), list(header.get("part_names", [])),
            bboxes if has_boxes else None,
        )
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# CUB-200-2011
# ---------------------------------------------------------------------------


def _read_rows(path: Path, ncols: int, types) -> list[list]:
    if not path.exists():
        raise MissingFile(f"required file {path} not found")
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(None, ncols - 1) if types[-1] is str else line.split()
            if len(parts) != ncols:
                raise ParseError(f"{path}:{lineno}: expected {ncols} fields, got {len(parts)}")
            try:
                rows.append([t(p) for t, p in zip(types, parts)])
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
    return rows


def _image_size(path: Path):
    try:
        from PIL import Image

        with Image.open(path) as im:
            return im.size
    except (OSError, ImportError):
        return None


def load_cub(root_dir) -> Dataset:
    """Load CUB-200-2011 annotations from its published directory layout.

    Image sizes are read from the image headers when the JPEGs are present;
    otherwise they fall back to the extent of the bounding box and keypoints.
    """
    root = Path(root_dir)
    images = _read_rows(root / "images.txt", 2, (int, str))
    labels = dict(_read_rows(root / "image_class_labels.txt", 2, (int, int)))
    split = dict(_read_rows(root / "train_test_split.txt", 2, (int, int)))
    boxes = {r[0]: r[1:] for r in _read_rows(root / "bounding_boxes.txt", 5, (int, float, float, float, float))}
    part_rows = _read_rows(root / "parts" / "part_locs.txt", 5, (int, int, float, float, int))

    class_file = root / "classes.txt"
    ids = [r[0] for r in images]
    id_set = set(ids)
    for name, table in (("image_class_labels.txt", labels), ("train_test_split.txt", split), ("bounding_boxes.txt", boxes)):
        if set(table) != id_set:
            diff = sorted(set(table) ^ id_set)[:5]
            raise InconsistentIds(f"{name} image ids disagree with images.txt (e.g. {diff})")

    part_file = root / "parts" / "parts.txt"
    if part_file.exists():
        part_names = [r[1] for r in _read_rows(part_file, 2, (int, str))]
    else:
        part_names = list(CUB_PART_NAMES)
    K = max([len(part_names)] + [r[1] for r in part_rows])
    if len(part_names) < K:
        part_names = part_names + [f"part{j}" for j in range(len(part_names), K)]

    xy = {i: np.full((K, 2), np.nan) for i in ids}
    vis = {i: np.zeros(K, bool) for i in ids}
    for img_id, part_id, x, y, v in part_rows:
        if img_id not in id_set:
            raise InconsistentIds(f"part_locs.txt references unknown image id {img_id}")
        if not 1 <= part_id <= K:
            raise ParseError(f"part_locs.txt: part id {part_id} out of range")
        xy[img_id][part_id - 1] = (x, y)
        vis[img_id][part_id - 1] = v != 0

    n_classes = max(labels.values())
    if class_file.exists():
        class_names = [r[1] for r in _read_rows(class_file, 2, (int, str))]
    else:
        class_names = [str(c) for c in range(1, n_classes + 1)]

    records, kps, lab, spl, bbs = [], [], [], [], []
    for img_id, rel in images:
        size = _image_size(root / "images" / rel)
        if size is None:
            x, y, w, h = boxes[img_id]
            ext = xy[img_id][vis[img_id]]
            mx = max([x + w] + ext[:, 0].tolist())
            my = max([y + h] + ext[:, 1].tolist())
            size = (int(math.ceil(mx)) + 1, int(math.ceil(my)) + 1)
        records.append(ImageRecord(str(img_id), str(Path("images") / rel), int(size[0]), int(size[1])))
        kps.append(KeypointSet(xy[img_id], vis[img_id]))
        lab.append(labels[img_id] - 1)
        spl.append(TRAIN if split[img_id] == 1 else TEST)
        bbs.append(list(boxes[img_id]))
    return Dataset(records, kps, np.asarray(lab, int), spl, K, class_names, part_names, bbs)


# ---------------------------------------------------------------------------
# synthetic birds
# ---------------------------------------------------------------------------

# landmarks of the base glyph in its body frame (pixels at scale 1)
_BASE_LANDMARKS = np.array(
    [
        [-30.0, -8.0],  # head: carries the class texture
        [-44.0, -6.0],  # beak
        [-18.0, -4.0],  # nape
        [6.0, -14.0],  # back
        [36.0, -2.0],  # tail
        [6.0, 13.0],  # belly
        [-14.0, 8.0],  # breast
    ]
)
_SYNTH_PART_NAMES = ["head", "beak", "nape", "back", "tail", "belly", "breast"]
_BODY_CENTER = np.array([4.0, 0.0])
_BODY_AXES = np.array([30.0, 14.0])
_HEAD_RADIUS = 12.0
_STRIPE_PERIOD = 7.0
HEAD_PART = 0


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 5
    images_per_class: int = 40
    K: int = 7
    image_size: int = 128
    pose_clusters: int = 1
    noise_sigma: float = 2.0
    rng_seed: int = 0
    occlusion: float = 0.2
    test_fraction: float = 0.5
    scale_range: tuple = (0.85, 1.15)
    pixel_noise: float = 0.02
    render: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.K < 5:
            raise ValueError("K must be at least 5")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.n_classes < 1 or self.images_per_class < 1 or self.pose_clusters < 1:
            raise ValueError("n_classes, images_per_class and pose_clusters must be positive")
        if not 0 <= self.occlusion < 1:
            raise ValueError("occlusion must be in [0, 1)")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")


@dataclass
class SyntheticData:
    dataset: Dataset
    images: dict  # image id -> ImageRaster (empty when rendering is off)
    poses: list  # per image: 2x3 matrix from body frame to image
    clusters: np.ndarray

    def __iter__(self):
        # allows ``ds, images = generate_synthetic(cfg)``
        return iter((self.dataset, self.images))


def synthetic_landmarks(K: int) -> np.ndarray:
    """``K`` body-frame landmarks: the seven base parts, then points on the body outline."""
    extra = K - len(_BASE_LANDMARKS)
    if extra <= 0:
        return _BASE_LANDMARKS[:K].copy()
    ang = 2 * math.pi * (np.arange(extra) + 0.5) / extra
    rim = _BODY_CENTER + _BODY_AXES * 0.9 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return np.vstack([_BASE_LANDMARKS, rim])


def cluster_deformation(c: int) -> np.ndarray:
    """Linear map from the base glyph to pose cluster ``c``; cluster 0 is the base."""
    if c == 0:
        return np.eye(2)
    # alternate shears and aspect changes so no two clusters are similar
    k = (c + 1) // 2
    if c % 2:
        return np.array([[1.0, 0.45 * k], [0.0, 1.0]])
    return np.array([[1.0, 0.0], [0.3 * k, 1.0 + 0.35 * k]])


def _render(cfg: SyntheticConfig, pose: np.ndarray, label: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    qy, qx = np.mgrid[0:n, 0:n].astype(float)
    A, t = pose[:, :2], pose[:, 2]
    Ainv = np.linalg.inv(A)
    u = Ainv[0, 0] * (qx - t[0]) + Ainv[0, 1] * (qy - t[1])
    v = Ainv[1, 0] * (qx - t[0]) + Ainv[1, 1] * (qy - t[1])
    img = 0.6 + 0.05 * np.sin(qx / 9.0 + rng.uniform(0, 6.3)) * np.sin(qy / 11.0 + rng.uniform(0, 6.3))
    body = ((u - _BODY_CENTER[0]) / _BODY_AXES[0]) ** 2 + ((v - _BODY_CENTER[1]) / _BODY_AXES[1]) ** 2 <= 1
    img = np.where(body, 0.3, img)
    beak = (u > -46) & (u < -36) & (np.abs(v + 6) < (u + 46) * 0.3)
    img = np.where(beak, 0.15, img)
    hx, hy = _BASE_LANDMARKS[HEAD_PART]
    du, dv = u - hx, v - hy
    head = du * du + dv * dv <= _HEAD_RADIUS**2
    phi = math.pi * label / cfg.n_classes
    stripes = 0.5 + 0.4 * np.sin(2 * math.pi * (du * math.cos(phi) + dv * math.sin(phi)) / _STRIPE_PERIOD)
    img = np.where(head, stripes, img)
    img = img + rng.normal(0.0, cfg.pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Render texture-coded birds under random similarity poses.

    Class ``c`` paints stripes at angle ``c * 180 / n_classes`` degrees (in the
    body frame) on the head, so the class signal is local and its apparent
    orientation is confounded with the pose rotation.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .imaging import ImageRaster

    root = np.random.SeedSequence(cfg.rng_seed)
    pose_seq, render_seq = root.spawn(2)
    rng = np.random.default_rng(pose_seq)
    base = synthetic_landmarks(cfg.K)
    n_img = cfg.n_classes * cfg.images_per_class
    labels = np.repeat(np.arange(cfg.n_classes), cfg.images_per_class)
    clusters = rng.integers(0, cfg.pose_clusters, n_img)
    n_test = int(round(cfg.test_fraction * cfg.images_per_class))
    split = []
    for _ in range(cfg.n_classes):
        s = np.array([TRAIN] * cfg.images_per_class, dtype=object)
        s[rng.permutation(cfg.images_per_class)[:n_test]] = TEST
        split.extend(s.tolist())

    size = cfg.image_size
    unit = size / 128.0
    images, keypoints, poses = [], [], []
    for i in range(n_img):
        D = cluster_deformation(int(clusters[i]))
        s = rng.uniform(*cfg.scale_range) * unit
        theta = rng.uniform(-math.pi, math.pi)
        c, sn = math.cos(theta), math.sin(theta)
        R = s * np.array([[c, -sn], [sn, c]])
        t = size / 2 - 0.5 + rng.uniform(-8, 8, 2) * unit
        A = R @ D
        pose = np.hstack([A, t[:, None]])
        xy = base @ A.T + t
        if cfg.noise_sigma > 0:
            xy = xy + rng.normal(0.0, cfg.noise_sigma, xy.shape)
        vis = rng.random(cfg.K) >= cfg.occlusion
        xy = np.where(vis[:, None], xy, 0.0)
        image_id = f"syn{i:05d}"
        images.append(ImageRecord(image_id, f"{image_id}.png", size, size))
        keypoints.append(KeypointSet(xy, vis))
        poses.append(pose)

    rasters = {}
    if cfg.render:
        seeds = render_seq.spawn(n_img)

        def draw(i):
            return ImageRaster(_render(cfg, poses[i], int(labels[i]), seeds[i]))

        with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
            for rec, raster in zip(images, pool.map(draw, range(n_img))):
                rasters[rec.id] = raster

    part_names = _SYNTH_PART_NAMES[: cfg.K] + [f"rim{j}" for j in range(cfg.K - len(_SYNTH_PART_NAMES))]
    ds = Dataset(
        images, keypoints, labels, split, cfg.K,
        [f"stripes{c * 180 // cfg.n_classes:03d}" for c in range(cfg.n_classes)], part_names,
    )
    return SyntheticData(ds, rasters, poses, clusters)
