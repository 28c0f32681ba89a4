"""Synthetic multi-object sprite scenes with rule-based labels and confounders.

Scenes are 2-D sprites (circle/square/triangle in four colours and two sizes)
on a mid-gray canvas. Each rule set assigns a class through a fixed-priority
list of predicates; the confounded splits (``train``, ``val_confounded``)
additionally enforce a per-class spurious constraint that the
``test_nonconfounded`` split leaves free.

Archive layout (all integers little-endian)::

    b"OCDS"                      4 bytes magic
    u32 version (=1)
    u32 header length, header    JSON: rule_set, resolution, seed, counts
    f32 images                   n * 3 * R * R, scene order
    f32 masks                    sum(n_objects) * R * R, scene order then object order
    u32 annotation length, JSON  per-scene objects / label / split / id
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
SPLITS = ("train", "val_confounded", "test_nonconfounded")
CONFOUNDED_SPLITS = ("train", "val_confounded")

RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.15),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
}
# Radius in canvas units; the square half-side and triangle circumradius derive from it.
RADIUS = {"small": 0.09, "large": 0.15}
SQUARE_SCALE = 0.85
MAX_OVERLAP = 0.2
MAX_ATTEMPTS = 10_000
SUPERSAMPLE = 4
BACKGROUND = 0.5
MIN_OBJECTS, MAX_OBJECTS = 2, 6


@dataclass
class ObjectSpec:
    shape: str
    color: str
    size: str
    x: float
    y: float

    @property
    def radius(self) -> float:
        return RADIUS[self.size]

    def is_(self, shape=None, color=None, size=None) -> bool:
        return (
            (shape is None or self.shape == shape)
            and (color is None or self.color == color)
            and (size is None or self.size == size)
        )


@dataclass
class SceneAnnotation:
    objects: list[ObjectSpec]
    label: int
    split: str
    scene_id: int = 0
    masks: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "label": self.label,
            "split": self.split,
            "objects": [asdict(o) for o in self.objects],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneAnnotation":
        return cls(
            objects=[ObjectSpec(**o) for o in d["objects"]],
            label=int(d["label"]),
            split=d["split"],
            scene_id=int(d["scene_id"]),
        )


# -- rule sets --------------------------------------------------------------

Template = Sequence[tuple[str, str, str, str | None]]  # shape, color, size, region


def _find(objs, **kw) -> list[ObjectSpec]:
    return [o for o in objs if o.is_(**kw)]


@dataclass
class ClassRule:
    description: str
    predicate: Callable[[list[ObjectSpec]], bool]
    templates: list[Template]
    confounder_description: str
    confounder: Callable[[list[ObjectSpec]], bool]


@dataclass
class RuleSet:
    name: str
    classes: list[ClassRule]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def default_class(self) -> int:
        return self.n_classes - 1


def _has(shape, color, size):
    return lambda objs: bool(_find(objs, shape=shape, color=color, size=size))


def _both(a, b):
    return lambda objs: a(objs) and b(objs)


def _any_pair(first: dict, second: dict, relation: Callable[[ObjectSpec, ObjectSpec], bool]):
    return lambda objs: any(relation(p, q) for p in _find(objs, **first) for q in _find(objs, **second))


def _count_in(shape, region, k):
    def pred(objs):
        if region == "left":
            n = sum(1 for o in objs if o.shape == shape and o.x < 0.5)
        else:
            n = sum(1 for o in objs if o.shape == shape and o.x >= 0.5)
        return n >= k

    return pred


LRS = dict(shape="square", color="red", size="large")
SGC = dict(shape="circle", color="green", size="small")
LBT = dict(shape="triangle", color="blue", size="large")
SYC = dict(shape="circle", color="yellow", size="small")
LGS = dict(shape="square", color="green", size="large")
LYT = dict(shape="triangle", color="yellow", size="large")
SBS = dict(shape="square", color="blue", size="small")
SRT = dict(shape="triangle", color="red", size="small")
LBC = dict(shape="circle", color="blue", size="large")


def _t(spec: dict, region=None):
    return (spec["shape"], spec["color"], spec["size"], region)


def _hans3_classes() -> list[ClassRule]:
    return [
        ClassRule(
            "contains a large red square",
            _has(**LRS),
            [[_t(LRS)]],
            "the large red square lies in the bottom half",
            lambda objs: any(o.y >= 0.5 for o in _find(objs, **LRS)),
        ),
        ClassRule(
            "contains a small green circle",
            _has(**SGC),
            [[_t(SGC)]],
            "the small green circle lies in the left half",
            lambda objs: any(o.x < 0.5 for o in _find(objs, **SGC)),
        ),
        ClassRule(
            "contains a large blue triangle and a small yellow circle",
            _both(_has(**LBT), _has(**SYC)),
            [[_t(LBT), _t(SYC)]],
            "a small yellow circle lies left of a large blue triangle",
            _any_pair(SYC, LBT, lambda p, q: p.x < q.x),
        ),
    ]


def _hans7_classes() -> list[ClassRule]:
    base = _hans3_classes()
    return base + [
        ClassRule(
            "contains a large green square and a large yellow triangle",
            _both(_has(**LGS), _has(**LYT)),
            [[_t(LGS), _t(LYT)]],
            "the green square lies above the yellow triangle",
            _any_pair(LGS, LYT, lambda p, q: p.y < q.y),
        ),
        ClassRule(
            "three circles in the left half, or three triangles in the right half",
            lambda objs: _count_in("circle", "left", 3)(objs) or _count_in("triangle", "right", 3)(objs),
            [
                [("circle", None, None, "left")] * 3,
                [("triangle", None, None, "right")] * 3,
            ],
            "all objects are small",
            lambda objs: all(o.size == "small" for o in objs),
        ),
        ClassRule(
            "contains a small blue square and a small red triangle",
            _both(_has(**SBS), _has(**SRT)),
            [[_t(SBS), _t(SRT)]],
            "the blue square lies left of the red triangle",
            _any_pair(SBS, SRT, lambda p, q: p.x < q.x),
        ),
        ClassRule(
            "contains a large blue circle",
            _has(**LBC),
            [[_t(LBC)]],
            "the large blue circle lies in the top half",
            lambda objs: any(o.y < 0.5 for o in _find(objs, **LBC)),
        ),
    ]


RULE_SETS: dict[str, Callable[[], RuleSet]] = {
    "hans3-lite": lambda: RuleSet("hans3-lite", _hans3_classes()),
    "hans7-lite": lambda: RuleSet("hans7-lite", _hans7_classes()),
}


def get_rule_set(name: str) -> RuleSet:
    try:
        return RULE_SETS[name]()
    except KeyError:
        raise ValueError(f"unknown rule set {name!r}; choose from {sorted(RULE_SETS)}") from None


def rule_evaluate(objects: Sequence[ObjectSpec], rule_set: RuleSet) -> int:
    """First matching class in priority order; the last class absorbs non-matches."""
    objs = list(objects)
    for k, rule in enumerate(rule_set.classes[:-1]):
        if rule.predicate(objs):
            return k
    return rule_set.default_class


def matching_classes(objects: Sequence[ObjectSpec], rule_set: RuleSet) -> list[int]:
    return [k for k, rule in enumerate(rule_set.classes) if rule.predicate(list(objects))]


# -- geometry / rendering ---------------------------------------------------


def _coverage(obj: ObjectSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx, dy = xs - obj.x, ys - obj.y
    r = obj.radius
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        h = r * SQUARE_SCALE
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    # upward equilateral triangle inscribed in the radius-r circle (image y grows downwards)
    s3 = np.sqrt(3.0)
    inside_base = dy <= r / 2
    left = s3 * dx - dy <= r
    right = -s3 * dx - dy <= r
    return inside_base & left & right


def _sample_grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    n = resolution * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return xs, ys


def object_alpha(obj: ObjectSpec, resolution: int) -> np.ndarray:
    """Anti-aliased coverage of one object on an R x R canvas (box-filtered supersamples)."""
    xs, ys = _sample_grid(resolution)
    hit = _coverage(obj, xs, ys).astype(np.float64)
    return hit.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))


def render(scene: SceneAnnotation, resolution: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image[3,R,R], masks[n_objects,R,R])`` as float32; later objects paint over earlier."""
    img = np.full((3, resolution, resolution), BACKGROUND, dtype=np.float64)
    alphas = [object_alpha(o, resolution) for o in scene.objects]
    masks = np.zeros((len(alphas), resolution, resolution), dtype=np.float64)
    for i, (obj, a) in enumerate(zip(scene.objects, alphas)):
        color = np.asarray(RGB[obj.color])[:, None, None]
        img = img * (1 - a) + color * a
        masks[:i] *= 1 - a
        masks[i] = a
    return img.astype(np.float32), masks.astype(np.float32)


def _overlap_ok(obj: ObjectSpec, placed: list[tuple[ObjectSpec, np.ndarray]], probe_res: int) -> tuple[bool, np.ndarray]:
    a = object_alpha(obj, probe_res)
    area = a.sum()
    for _, b in placed:
        inter = np.minimum(a, b).sum()
        if inter > MAX_OVERLAP * min(area, b.sum()):
            return False, a
    return True, a


def _random_position(rng: np.random.Generator, r: float, region: str | None) -> tuple[float, float]:
    lo, hi = r, 1.0 - r
    x = rng.uniform(lo, hi)
    if region == "left":
        x = rng.uniform(lo, 0.5 - 1e-6)
    elif region == "right":
        x = rng.uniform(0.5, hi)
    return float(x), float(rng.uniform(lo, hi))


def _place(rng, shape, color, size, region, placed, probe_res, tries=50):
    for _ in range(tries):
        x, y = _random_position(rng, RADIUS[size], region)
        obj = ObjectSpec(shape, color, size, x, y)
        ok, a = _overlap_ok(obj, placed, probe_res)
        if ok:
            placed.append((obj, a))
            return obj
    return None


def generate_scene(
    rng: np.random.Generator,
    rule_set: RuleSet,
    class_id: int,
    split: str,
    min_objects: int = MIN_OBJECTS,
    max_objects: int = 5,
) -> SceneAnnotation:
    """Rejection-sample a scene whose only satisfied class predicate is ``class_id``.

    Confounded splits also require the class confounder to hold; the
    non-confounded split leaves it at its natural rate.
    """
    if not 0 <= class_id < rule_set.n_classes:
        raise ValueError(f"class {class_id} invalid for {rule_set.name} ({rule_set.n_classes} classes)")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if not MIN_OBJECTS <= min_objects <= max_objects <= MAX_OBJECTS:
        raise ValueError(f"object count range [{min_objects}, {max_objects}] outside [2, 6]")
    rule = rule_set.classes[class_id]
    probe_res = 32
    for _ in range(MAX_ATTEMPTS):
        template = rule.templates[int(rng.integers(len(rule.templates)))]
        n_obj = int(rng.integers(max(min_objects, len(template)), max_objects + 1))
        placed: list = []
        ok = True
        for shape, color, size, region in template:
            shape = shape or SHAPES[int(rng.integers(3))]
            color = color or COLORS[int(rng.integers(4))]
            size = size or SIZES[int(rng.integers(2))]
            if _place(rng, shape, color, size, region, placed, probe_res) is None:
                ok = False
                break
        if not ok:
            continue
        while ok and len(placed) < n_obj:
            obj = _place(
                rng,
                SHAPES[int(rng.integers(3))],
                COLORS[int(rng.integers(4))],
                SIZES[int(rng.integers(2))],
                None,
                placed,
                probe_res,
            )
            ok = obj is not None
        if not ok:
            continue
        order = rng.permutation(len(placed))
        objects = [placed[i][0] for i in order]
        if matching_classes(objects, rule_set) != [class_id]:
            continue
        if split in CONFOUNDED_SPLITS and not rule.confounder(objects):
            continue
        return SceneAnnotation(objects=objects, label=rule_evaluate(objects, rule_set), split=split)
    raise RuntimeError(
        f"could not satisfy predicate {rule.description!r} (class {class_id}, split {split}) "
        f"within {MAX_ATTEMPTS} attempts"
    )


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS.index(split), index]))


@dataclass
class SceneDataset:
    rule_set: str
    resolution: int
    seed: int
    scenes: list[SceneAnnotation]
    images: np.ndarray  # [n, 3, R, R] float32

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.scenes], dtype=np.int64)

    def subset(self, split: str) -> "SceneDataset":
        idx = [i for i, s in enumerate(self.scenes) if s.split == split]
        return SceneDataset(
            self.rule_set, self.resolution, self.seed, [self.scenes[i] for i in idx], self.images[idx]
        )

    def by_id(self, scene_id: int) -> SceneAnnotation:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(f"unknown scene id {scene_id}")

    def image_of(self, scene_id: int) -> np.ndarray:
        for s, img in zip(self.scenes, self.images):
            if s.scene_id == scene_id:
                return img
        raise KeyError(f"unknown scene id {scene_id}")


def generate_dataset(
    rule_set: str | RuleSet,
    counts: dict[str, int],
    resolution: int = 32,
    seed: int = 0,
    max_objects: int = 5,
) -> SceneDataset:
    """Generate and render scenes for each split; class drawn uniformly per scene."""
    rs = get_rule_set(rule_set) if isinstance(rule_set, str) else rule_set
    scenes, images = [], []
    for split in SPLITS:
        for i in range(counts.get(split, 0)):
            rng = scene_rng(seed, split, i)
            cls = int(rng.integers(rs.n_classes))
            scene = generate_scene(rng, rs, cls, split, max_objects=max_objects)
            scene.scene_id = len(scenes)
            img, masks = render(scene, resolution)
            scene.masks = masks
            scenes.append(scene)
            images.append(img)
    if images:
        arr = np.stack(images)
    else:
        arr = np.zeros((0, 3, resolution, resolution), np.float32)
    return SceneDataset(rs.name, resolution, seed, scenes, arr)


# -- archive ----------------------------------------------------------------

ARCHIVE_MAGIC = b"OCDS"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


class BadMagicError(ArchiveError):
    pass


class VersionMismatchError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


def predicted_payload_bytes(n_scenes: int, n_masks: int, resolution: int) -> int:
    return 4 * resolution * resolution * (3 * n_scenes + n_masks)


def write_archive(path, dataset: SceneDataset) -> int:
    """Write ``dataset``; returns bytes written."""
    if len(dataset) == 0:
        raise ValueError("refusing to write an empty dataset")
    R = dataset.resolution
    n_masks = sum(len(s.objects) for s in dataset.scenes)
    header = json.dumps(
        {
            "rule_set": dataset.rule_set,
            "resolution": R,
            "seed": dataset.seed,
            "n_scenes": len(dataset),
            "n_masks": n_masks,
            "counts": {sp: sum(s.split == sp for s in dataset.scenes) for sp in SPLITS},
        },
        sort_keys=True,
    ).encode()
    annotations = json.dumps([s.to_json() for s in dataset.scenes], sort_keys=True).encode()
    parts = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(header)), header]
    parts.append(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    for s in dataset.scenes:
        masks = s.masks if s.masks is not None else render(s, R)[1]
        if masks.shape != (len(s.objects), R, R):
            raise ValueError(f"scene {s.scene_id}: mask shape {masks.shape} does not match objects")
        parts.append(np.ascontiguousarray(masks, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(annotations)))
    parts.append(annotations)
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def read_archive(path) -> SceneDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != ARCHIVE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {ARCHIVE_MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedArchiveError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != ARCHIVE_VERSION:
        raise VersionMismatchError(f"{path}: archive version {version}, reader supports {ARCHIVE_VERSION}")
    if 12 + hlen > len(raw):
        raise TruncatedArchiveError(f"{path}: truncated header")
    header = json.loads(raw[12 : 12 + hlen])
    R, n, n_masks = header["resolution"], header["n_scenes"], header["n_masks"]
    pos = 12 + hlen
    payload = predicted_payload_bytes(n, n_masks, R)
    if pos + payload + 4 > len(raw):
        raise TruncatedArchiveError(f"{path}: payload truncated ({len(raw) - pos} of {payload} bytes)")
    images = np.frombuffer(raw, dtype="<f4", count=n * 3 * R * R, offset=pos).reshape(n, 3, R, R).astype(np.float32)
    pos += images.nbytes
    mask_flat = np.frombuffer(raw, dtype="<f4", count=n_masks * R * R, offset=pos).astype(np.float32)
    pos += mask_flat.nbytes
    (alen,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    if pos + alen > len(raw):
        raise TruncatedArchiveError(f"{path}: annotation block truncated")
    scenes = [SceneAnnotation.from_json(d) for d in json.loads(raw[pos : pos + alen])]
    offset = 0
    for s in scenes:
        k = len(s.objects)
        s.masks = mask_flat[offset * R * R : (offset + k) * R * R].reshape(k, R, R)
        offset += k
    return SceneDataset(header["rule_set"], R, header["seed"], scenes, images)
