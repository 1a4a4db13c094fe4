"""Synthetic scene corpus with geometric ground truth.

Scenes are sampled on the unit canvas with an explicit depth scalar per
object, so every annotated pair's relation is a deterministic function of
geometry (see :mod:`vsd.relations`).  Descriptions are filled from a
per-relation template inventory, region features are a reproducible
grid pooling of the scene, and everything derives from one seed.

The instance file format is line-delimited JSON with a mandatory
schema-version header.  Feature arrays are stored inline or in a
companion binary file referenced by record offset.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vsd.relations import (
    RELATION_INDEX,
    RELATIONS,
    RelationThresholds,
    SpatialRelation,
    ground_truth_relation,
)

__all__ = [
    "ObjectRef",
    "RegionFeatures",
    "VSDInstance",
    "Vocabulary",
    "SceneObject",
    "Scene",
    "GeneratorConfig",
    "SchemaError",
    "generate_scene",
    "render_region_features",
    "background_vector",
    "realize_description",
    "build_corpus",
    "split_dataset",
    "save_instances",
    "load_instances",
    "corpus_manifest",
    "MAX_DESC_TOKENS",
]

MAX_DESC_TOKENS = 40

SPLIT_NAMES = ("train", "dev", "test")

_NOUNS = (
    "car", "dog", "box", "tree", "chair", "table", "lamp", "bench", "bird",
    "pole", "sign", "bus", "bike", "cat", "ball", "cup", "book", "house",
    "man", "woman",
)
_ATTRIBUTES = ("red", "blue", "green", "yellow", "black", "white", "small", "large")

# Mildly unbalanced on purpose: spatial relations are not uniform in the wild.
_DEFAULT_MIX = {
    SpatialRelation.ON: 0.16,
    SpatialRelation.IN: 0.08,
    SpatialRelation.NEXT_TO: 0.12,
    SpatialRelation.UNDER: 0.07,
    SpatialRelation.ABOVE: 0.09,
    SpatialRelation.BEHIND: 0.10,
    SpatialRelation.IN_FRONT_OF: 0.10,
    SpatialRelation.TO_THE_LEFT_OF: 0.15,
    SpatialRelation.TO_THE_RIGHT_OF: 0.13,
}


class SchemaError(ValueError):
    """Instance file violates the documented schema."""

    def __init__(self, line: int, field_name: str, message: str):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}, field {field_name!r}: {message}")


@dataclass
class ObjectRef:
    """A referenced object: its textual tag and normalised bounding box."""

    tag: tuple[str, ...]
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        self.tag = tuple(self.tag)
        if not self.tag or any(not isinstance(t, str) or not t for t in self.tag):
            raise ValueError(f"object tag must be non-empty strings, got {self.tag!r}")
        self.bbox = tuple(float(v) for v in self.bbox)
        x0, y0, x1, y1 = self.bbox
        if not all(0.0 <= v <= 1.0 for v in self.bbox):
            raise ValueError(f"bbox coordinates must lie in [0, 1], got {self.bbox}")
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"bbox must satisfy x_min < x_max and y_min < y_max, got {self.bbox}")

    @property
    def tag_text(self) -> str:
        return " ".join(self.tag)


@dataclass
class RegionFeatures:
    """Per-region visual feature vectors standing in for a detector."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"region features must be 2-d, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("region features contain non-finite values")

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]


@dataclass
class VSDInstance:
    """One task example: features, object pair, gold relation, description."""

    instance_id: str
    features: RegionFeatures
    o1: ObjectRef
    o2: ObjectRef
    relation: SpatialRelation
    description: tuple[str, ...]
    split: str = ""

    def __post_init__(self):
        self.description = tuple(self.description)
        if not self.description:
            raise ValueError("description must be non-empty")
        if len(self.description) > MAX_DESC_TOKENS:
            raise ValueError(
                f"description has {len(self.description)} tokens, limit is {MAX_DESC_TOKENS}"
            )

    @property
    def scene_key(self) -> str:
        return self.instance_id.split("-")[0]


class Vocabulary:
    """Token <-> id bijection with stable reserved ids."""

    RESERVED = ("[PAD]", "[BOS]", "[EOS]", "[SEP]", "[MASK]", "[UNK]")
    PAD, BOS, EOS, SEP, MASK, UNK = range(6)

    def __init__(self, tokens: Iterable[str]):
        self._tokens: list[str] = list(self.RESERVED)
        self._index: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        for tok in tokens:
            if tok in self._index:
                if tok in self.RESERVED:
                    raise ValueError(f"token {tok!r} collides with a reserved symbol")
                continue
            self._index[tok] = len(self._tokens)
            self._tokens.append(tok)

    @classmethod
    def from_corpus(cls, instances: Sequence[VSDInstance]) -> "Vocabulary":
        seen: set[str] = set()
        for inst in instances:
            seen.update(inst.description)
            seen.update(inst.o1.tag)
            seen.update(inst.o2.tag)
        for rel in RELATIONS:
            seen.update(rel.phrase_tokens)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self._index.get(t, self.UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int], *, strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            tok = self._tokens[int(i)]
            if strip_special and tok in self.RESERVED:
                continue
            out.append(tok)
        return out

    def token(self, idx: int) -> str:
        return self._tokens[int(idx)]

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def to_json(self) -> dict:
        return {"tokens": self._tokens[len(self.RESERVED):]}

    @classmethod
    def from_json(cls, payload: dict) -> "Vocabulary":
        return cls(payload["tokens"])


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


@dataclass
class SceneObject:
    tag: tuple[str, ...]
    bbox: tuple[float, float, float, float]
    depth: float


@dataclass
class Scene:
    """Objects on the unit canvas; objects[0] and objects[1] form the annotated pair."""

    objects: list[SceneObject]
    relation: SpatialRelation
    seed: int
    canvas: tuple[float, float] = (1.0, 1.0)

    @property
    def pair(self) -> tuple[SceneObject, SceneObject]:
        return self.objects[0], self.objects[1]


@dataclass
class GeneratorConfig:
    """Knobs for scene sampling, featurisation and description templates."""

    n_scenes: int = 1000
    seed: int = 13
    min_objects: int = 2
    max_objects: int = 6
    nouns: tuple[str, ...] = _NOUNS
    attributes: tuple[str, ...] = _ATTRIBUTES
    attribute_prob: float = 0.6
    relation_mix: dict = field(default_factory=lambda: dict(_DEFAULT_MIX))
    thresholds: RelationThresholds = field(default_factory=RelationThresholds)
    # sampling margins keeping pairs unambiguous relative to the thresholds
    same_depth_band: float = 0.1
    depth_gap: float = 0.3
    n_regions: int = 9
    d_v: int = 32

    def __post_init__(self):
        if not self.nouns:
            raise ValueError("tag inventory (nouns) must not be empty")
        if not (2 <= self.min_objects <= self.max_objects <= 6):
            raise ValueError("object count range must satisfy 2 <= min <= max <= 6")
        if self.max_objects > len(self.nouns):
            raise ValueError("need at least max_objects distinct nouns")
        mix = {SpatialRelation(k) if not isinstance(k, SpatialRelation) else k: float(v)
               for k, v in self.relation_mix.items()}
        if set(mix) != set(RELATIONS) or any(v < 0 for v in mix.values()):
            raise ValueError("relation_mix must assign a non-negative weight to all nine relations")
        total = sum(mix.values())
        if total <= 0:
            raise ValueError("relation_mix weights must not all be zero")
        self.relation_mix = {r: mix[r] / total for r in RELATIONS}
        g = math.isqrt(self.n_regions)
        if g * g != self.n_regions:
            raise ValueError(f"n_regions {self.n_regions} must be a perfect square")
        if self.d_v < 12 or (self.d_v - 8) % 2 != 0:
            raise ValueError(f"d_v {self.d_v} must be even-plus-8 and at least 12")
        for rel in RELATIONS:
            if len(_templates_for(rel)) < 5:
                raise ValueError(f"template inventory for {rel.value} has fewer than 5 entries")

    def to_json(self) -> dict:
        return {
            "n_scenes": self.n_scenes,
            "seed": self.seed,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "nouns": list(self.nouns),
            "attributes": list(self.attributes),
            "attribute_prob": self.attribute_prob,
            "relation_mix": {r.value: w for r, w in self.relation_mix.items()},
            "thresholds": vars(self.thresholds).copy(),
            "same_depth_band": self.same_depth_band,
            "depth_gap": self.depth_gap,
            "n_regions": self.n_regions,
            "d_v": self.d_v,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "GeneratorConfig":
        payload = dict(payload)
        if "thresholds" in payload:
            payload["thresholds"] = RelationThresholds(**payload["thresholds"])
        if "nouns" in payload:
            payload["nouns"] = tuple(payload["nouns"])
        if "attributes" in payload:
            payload["attributes"] = tuple(payload["attributes"])
        return cls(**payload)


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _box_from_center(xc, yc, w, h):
    x0 = min(max(xc - w / 2.0, 0.0), 1.0 - w)
    y0 = min(max(yc - h / 2.0, 0.0), 1.0 - h)
    return (x0, y0, x0 + w, y0 + h)


def _rand_box(rng, lo=0.05, hi=0.35):
    w = rng.uniform(lo, hi)
    h = rng.uniform(lo, hi)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return (x0, y0, x0 + w, y0 + h)


def _place_pair(rng: np.random.Generator, relation: SpatialRelation, cfg: GeneratorConfig):
    """Sample (bbox1, depth1, bbox2, depth2) aiming at the target relation."""
    band = cfg.same_depth_band
    gap = cfg.depth_gap
    r = SpatialRelation
    if relation == r.IN:
        w2, h2 = rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5)
        x2 = rng.uniform(0.0, 1.0 - w2)
        y2 = rng.uniform(0.0, 1.0 - h2)
        b2 = (x2, y2, x2 + w2, y2 + h2)
        w1, h1 = rng.uniform(0.25, 0.5) * w2, rng.uniform(0.25, 0.5) * h2
        x1 = rng.uniform(x2 + 0.02, x2 + w2 - w1 - 0.02)
        y1 = rng.uniform(y2 + 0.02, y2 + h2 - h1 - 0.02)
        b1 = (x1, y1, x1 + w1, y1 + h1)
        d2 = rng.uniform(0.1, 0.9)
        d1 = _clip01(d2 + rng.uniform(-band / 2, band / 2))
        return b1, d1, b2, d2
    if relation in (r.ON, r.ABOVE, r.UNDER):
        w2, h2 = rng.uniform(0.15, 0.4), rng.uniform(0.1, 0.3)
        y2 = rng.uniform(0.35, 1.0 - h2) if relation != r.UNDER else rng.uniform(0.05, 0.45)
        x2 = rng.uniform(0.0, 1.0 - w2)
        b2 = (x2, y2, x2 + w2, y2 + h2)
        w1 = rng.uniform(0.4, 0.9) * w2
        xc1 = (x2 + w2 / 2.0) + rng.uniform(-0.15, 0.15) * w2
        if relation == r.UNDER:
            top1 = y2 + h2 + rng.uniform(0.06, 0.25)
            h1 = rng.uniform(0.05, max(0.051, min(0.25, 1.0 - top1 - 0.001)))
            b1 = _box_from_center(xc1, top1 + h1 / 2.0, w1, h1)
            d2 = rng.uniform(0.0, 1.0)
            d1 = _clip01(d2 + rng.uniform(-band / 2, band / 2))
            return b1, d1, b2, d2
        if relation == r.ON:
            bottom1 = y2 + rng.uniform(-cfg.thresholds.contact_eps / 2, cfg.thresholds.contact_eps / 2)
        else:
            bottom1 = y2 - rng.uniform(0.06, 0.3)
        h1 = rng.uniform(0.05, max(0.051, min(0.25, bottom1 - 0.001)))
        b1 = _box_from_center(xc1, bottom1 - h1 / 2.0, w1, h1)
        d2 = rng.uniform(0.1, 0.9)
        spread = band / 2 if relation == r.ON else band
        d1 = _clip01(d2 + rng.uniform(-spread, spread))
        return b1, d1, b2, d2
    if relation in (r.BEHIND, r.IN_FRONT_OF, r.TO_THE_LEFT_OF, r.TO_THE_RIGHT_OF):
        w1, h1 = rng.uniform(0.05, 0.22), rng.uniform(0.05, 0.25)
        w2, h2 = rng.uniform(0.05, 0.22), rng.uniform(0.05, 0.25)
        span = w1 + w2
        left_first = relation == r.TO_THE_LEFT_OF or (
            relation in (r.BEHIND, r.IN_FRONT_OF) and rng.random() < 0.5
        )
        margin = rng.uniform(0.03, max(0.05, 0.9 - span))
        x_lo = rng.uniform(0.0, max(1e-6, 1.0 - span - margin))
        if left_first:
            b1 = (x_lo, 0.0, x_lo + w1, h1)
            b2 = (x_lo + w1 + margin, 0.0, x_lo + w1 + margin + w2, h2)
        else:
            b2 = (x_lo, 0.0, x_lo + w2, h2)
            b1 = (x_lo + w2 + margin, 0.0, x_lo + w2 + margin + w1, h1)
        xc1 = (b1[0] + b1[2]) / 2.0
        xc2 = (b2[0] + b2[2]) / 2.0
        dx = abs(xc1 - xc2)
        yc2 = rng.uniform(h2 / 2.0, 1.0 - h2 / 2.0)
        dy_cap = 0.6 * dx if relation in (r.TO_THE_LEFT_OF, r.TO_THE_RIGHT_OF) else 0.3
        yc1 = yc2 + rng.uniform(-dy_cap, dy_cap)
        yc1 = min(max(yc1, h1 / 2.0), 1.0 - h1 / 2.0)
        b1 = _box_from_center(xc1, yc1, w1, h1)
        b2 = _box_from_center(xc2, yc2, w2, h2)
        if relation == r.BEHIND:
            d2 = rng.uniform(0.0, 1.0 - gap - 0.05)
            d1 = d2 + rng.uniform(gap, min(0.95 - d2, gap + 0.3))
        elif relation == r.IN_FRONT_OF:
            d1 = rng.uniform(0.0, 1.0 - gap - 0.05)
            d2 = d1 + rng.uniform(gap, min(0.95 - d1, gap + 0.3))
        else:
            d2 = rng.uniform(0.0, 1.0)
            d1 = _clip01(d2 + rng.uniform(-band / 2, band / 2))
        return b1, d1, b2, d2
    # NEXT_TO: small boxes, near-vertical small offset, no horizontal overlap gate
    w1, h1 = rng.uniform(0.05, 0.09), rng.uniform(0.05, 0.09)
    w2, h2 = rng.uniform(0.05, 0.09), rng.uniform(0.05, 0.09)
    xc2 = rng.uniform(0.15, 0.85)
    yc2 = rng.uniform(0.2, 0.8)
    dx = rng.uniform(0.055, 0.075) * (1 if rng.random() < 0.5 else -1)
    dy = rng.uniform(abs(dx) + 0.02, 0.115) * (1 if rng.random() < 0.5 else -1)
    b2 = _box_from_center(xc2, yc2, w2, h2)
    b1 = _box_from_center(xc2 + dx, yc2 + dy, w1, h1)
    d2 = rng.uniform(0.0, 1.0)
    d1 = _clip01(d2 + rng.uniform(-cfg.same_depth_band / 2, cfg.same_depth_band / 2))
    return b1, d1, b2, d2


def _sample_tags(rng, cfg: GeneratorConfig, count: int) -> list[tuple[str, ...]]:
    noun_idx = rng.choice(len(cfg.nouns), size=count, replace=False)
    tags = []
    for i in noun_idx:
        noun = cfg.nouns[int(i)]
        if cfg.attributes and rng.random() < cfg.attribute_prob:
            attr = cfg.attributes[int(rng.integers(0, len(cfg.attributes)))]
            tags.append((attr, noun))
        else:
            tags.append((noun,))
    return tags


def generate_scene(seed: int, cfg: GeneratorConfig) -> Scene:
    """Deterministically sample one scene whose first two objects realise
    an unambiguous target relation drawn from the configured mix."""
    rng = np.random.default_rng(seed)
    weights = np.array([cfg.relation_mix[rel] for rel in RELATIONS])
    target = RELATIONS[int(rng.choice(len(RELATIONS), p=weights))]
    for _ in range(1000):
        b1, d1, b2, d2 = _place_pair(rng, target, cfg)
        if ground_truth_relation(b1, d1, b2, d2, cfg.thresholds) == target:
            break
    else:  # pragma: no cover
        raise RuntimeError(f"scene placement for {target.value} did not converge (seed {seed})")
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    tags = _sample_tags(rng, cfg, n_objects)
    objects = [
        SceneObject(tag=tags[0], bbox=b1, depth=float(d1)),
        SceneObject(tag=tags[1], bbox=b2, depth=float(d2)),
    ]
    for k in range(2, n_objects):
        objects.append(SceneObject(tag=tags[k], bbox=_rand_box(rng), depth=float(rng.uniform(0, 1))))
    return Scene(objects=objects, relation=target, seed=int(seed))


# ---------------------------------------------------------------------------
# region features
# ---------------------------------------------------------------------------

_TAG_VEC_CACHE: dict[tuple[str, int], np.ndarray] = {}


def _tag_vector(tag_text: str, dim: int) -> np.ndarray:
    """Stable unit vector for a tag string (content-hashed, not id-hashed)."""
    key = (tag_text, dim)
    vec = _TAG_VEC_CACHE.get(key)
    if vec is None:
        digest = hashlib.sha256(tag_text.encode("utf-8")).digest()
        gen = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = gen.normal(size=dim)
        vec /= np.linalg.norm(vec)
        _TAG_VEC_CACHE[key] = vec
    return vec


def _region_cells(n_regions: int):
    g = math.isqrt(n_regions)
    cells = []
    for i in range(g):
        for j in range(g):
            cells.append((j / g, i / g, (j + 1) / g, (i + 1) / g))
    return cells


def background_vector(region_index: int, n_regions: int, d_v: int) -> np.ndarray:
    """Feature vector of a region covered by no object."""
    cell = _region_cells(n_regions)[region_index]
    vec = np.zeros(d_v)
    vec[-2] = (cell[0] + cell[2]) / 2.0
    vec[-1] = (cell[1] + cell[3]) / 2.0
    return vec


def render_region_features(scene: Scene, cfg: GeneratorConfig) -> RegionFeatures:
    """Grid pooling of object presence, reproducible from the scene alone.

    Per region: area-weighted tag hash vectors, the same vectors weighted
    additionally by depth (binding each tag to its depth), summed box
    coordinates, coverage, summed depth, and the region centre.
    """
    tag_dim = (cfg.d_v - 8) // 2
    cells = _region_cells(cfg.n_regions)
    feats = np.zeros((cfg.n_regions, cfg.d_v))
    for r, cell in enumerate(cells):
        feats[r, -2] = (cell[0] + cell[2]) / 2.0
        feats[r, -1] = (cell[1] + cell[3]) / 2.0
    for obj in scene.objects:
        x0, y0, x1, y1 = obj.bbox
        area = (x1 - x0) * (y1 - y0)
        tvec = _tag_vector(" ".join(obj.tag), tag_dim)
        for r, cell in enumerate(cells):
            w = min(x1, cell[2]) - max(x0, cell[0])
            h = min(y1, cell[3]) - max(y0, cell[1])
            if w <= 0 or h <= 0:
                continue
            f = (w * h) / area
            feats[r, :tag_dim] += f * tvec
            feats[r, tag_dim:2 * tag_dim] += f * obj.depth * tvec
            feats[r, 2 * tag_dim:2 * tag_dim + 4] += f * np.asarray(obj.bbox)
            feats[r, 2 * tag_dim + 4] += f
            feats[r, 2 * tag_dim + 5] += f * obj.depth
    return RegionFeatures(feats)


# ---------------------------------------------------------------------------
# descriptions
# ---------------------------------------------------------------------------

_GENERIC_PREDICATES = ("located", "positioned", "situated", "standing", "placed")
_PREDICATES = {
    SpatialRelation.ON: ("sitting", "resting", "placed", "perched", "lying"),
    SpatialRelation.IN: ("tucked", "kept", "placed", "held", "stored"),
    SpatialRelation.UNDER: ("sitting", "resting", "kept", "placed", "standing"),
}

_SKELETONS = (
    ("a", "{o1}", "is", "{phrase}", "the", "{o2}"),
    ("the", "{o1}", "is", "{pred}", "{phrase}", "the", "{o2}"),
    ("a", "{o1}", "is", "{pred}", "{phrase}", "a", "{o2}"),
    ("there", "is", "a", "{o1}", "{phrase}", "the", "{o2}"),
    ("you", "can", "see", "a", "{o1}", "{phrase}", "a", "{o2}"),
    ("a", "{o1}", "can", "be", "seen", "{phrase}", "the", "{o2}"),
)


def _templates_for(relation: SpatialRelation):
    preds = _PREDICATES.get(relation, _GENERIC_PREDICATES)
    return tuple((skel, preds) for skel in _SKELETONS)


def realize_description(
    scene: Scene,
    o1: SceneObject,
    o2: SceneObject,
    relation: SpatialRelation,
    seed: int,
) -> tuple[str, ...]:
    """Fill one seeded template; always contains the relation's canonical phrase."""
    truth = ground_truth_relation(o1.bbox, o1.depth, o2.bbox, o2.depth)
    if truth != relation:
        raise ValueError(
            f"relation {relation.value} does not match scene geometry ({truth.value})"
        )
    rng = np.random.default_rng(seed)
    templates = _templates_for(relation)
    skel, preds = templates[int(rng.integers(0, len(templates)))]
    pred = preds[int(rng.integers(0, len(preds)))]
    tokens: list[str] = []
    for part in skel:
        if part == "{o1}":
            tokens.extend(o1.tag)
        elif part == "{o2}":
            tokens.extend(o2.tag)
        elif part == "{phrase}":
            tokens.extend(relation.phrase_tokens)
        elif part == "{pred}":
            tokens.append(pred)
        else:
            tokens.append(part)
    assert len(tokens) <= MAX_DESC_TOKENS
    return tuple(tokens)


# ---------------------------------------------------------------------------
# corpus assembly and splits
# ---------------------------------------------------------------------------


def build_corpus(cfg: GeneratorConfig) -> list[VSDInstance]:
    """Generate scenes, render features, realise one description per scene."""
    scene_seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.n_scenes, dtype=np.uint64)
    instances = []
    for i in range(cfg.n_scenes):
        seed = int(scene_seeds[i])
        scene = generate_scene(seed, cfg)
        o1, o2 = scene.pair
        desc = realize_description(scene, o1, o2, scene.relation, seed ^ 0x5EED)
        instances.append(
            VSDInstance(
                instance_id=f"s{i:06d}-p0",
                features=render_region_features(scene, cfg),
                o1=ObjectRef(tag=o1.tag, bbox=o1.bbox),
                o2=ObjectRef(tag=o2.tag, bbox=o2.bbox),
                relation=scene.relation,
                description=desc,
            )
        )
    return instances


def _apportion(n: int) -> tuple[int, int, int]:
    """Largest-remainder split of n into 7:1:2."""
    quotas = (0.7 * n, 0.1 * n, 0.2 * n)
    base = [int(math.floor(q)) for q in quotas]
    rest = n - sum(base)
    order = sorted(range(3), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return tuple(base)


def split_dataset(instances: Sequence[VSDInstance], seed: int) -> dict[str, list[VSDInstance]]:
    """Disjoint 7:1:2 cover assigned per scene so no scene straddles splits."""
    if len(instances) < 10:
        raise ValueError(f"need at least 10 instances to split, got {len(instances)}")
    scenes: list[str] = []
    by_scene: dict[str, list[VSDInstance]] = {}
    for inst in instances:
        if inst.scene_key not in by_scene:
            scenes.append(inst.scene_key)
            by_scene[inst.scene_key] = []
        by_scene[inst.scene_key].append(inst)
    rng = np.random.default_rng(seed)
    order = [scenes[int(i)] for i in rng.permutation(len(scenes))]
    n_train, n_dev, _ = _apportion(len(order))
    assignment: dict[str, str] = {}
    for pos, key in enumerate(order):
        if pos < n_train:
            assignment[key] = "train"
        elif pos < n_train + n_dev:
            assignment[key] = "dev"
        else:
            assignment[key] = "test"
    out: dict[str, list[VSDInstance]] = {name: [] for name in SPLIT_NAMES}
    for inst in instances:
        inst.split = assignment[inst.scene_key]
        out[inst.split].append(inst)
    return out


def corpus_manifest(instances: Sequence[VSDInstance], cfg: GeneratorConfig) -> dict:
    histogram = {rel.value: 0 for rel in RELATIONS}
    splits = {name: 0 for name in SPLIT_NAMES}
    for inst in instances:
        histogram[inst.relation.value] += 1
        if inst.split:
            splits[inst.split] += 1
    return {
        "seed": cfg.seed,
        "n_instances": len(instances),
        "relation_histogram": histogram,
        "split_sizes": splits,
        "generator": cfg.to_json(),
    }


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_FORMAT_NAME = "vsd-instances"
_FORMAT_VERSION = 1


def save_instances(
    path: str | Path,
    instances: Sequence[VSDInstance],
    *,
    features: str = "inline",
) -> None:
    """Write line-delimited records under a schema-version header.

    ``features="companion"`` stores the feature arrays in a sidecar binary
    file referenced by record offset, keeping the text file small.
    """
    if features not in ("inline", "companion"):
        raise ValueError(f"unknown feature storage mode {features!r}")
    path = Path(path)
    header: dict = {"format": _FORMAT_NAME, "version": _FORMAT_VERSION, "features": features}
    if instances:
        header["n_regions"] = instances[0].features.n_regions
        header["d_v"] = instances[0].features.d_v
    companion = path.with_suffix(path.suffix + ".features.bin")
    if features == "companion":
        header["companion"] = companion.name
    lines = [json.dumps(header, sort_keys=True)]
    blobs = []
    for offset, inst in enumerate(instances):
        record = {
            "id": inst.instance_id,
            "o1": {"tag": list(inst.o1.tag), "bbox": list(inst.o1.bbox)},
            "o2": {"tag": list(inst.o2.tag), "bbox": list(inst.o2.bbox)},
            "relation": inst.relation.value,
            "description": list(inst.description),
            "split": inst.split,
        }
        if features == "inline":
            record["features"] = inst.features.features.tolist()
        else:
            record["features"] = {"offset": offset}
            blobs.append(inst.features.features.tobytes())
        lines.append(json.dumps(record, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if features == "companion":
        companion.write_bytes(b"".join(blobs))
    elif companion.exists():
        companion.unlink()


def _require(record: dict, name: str, line: int):
    if name not in record:
        raise SchemaError(line, name, "missing required field")
    return record[name]


def _load_object(record: dict, name: str, line: int) -> ObjectRef:
    payload = _require(record, name, line)
    if not isinstance(payload, dict):
        raise SchemaError(line, name, "expected an object with tag and bbox")
    try:
        return ObjectRef(tag=tuple(payload.get("tag", ())), bbox=tuple(payload.get("bbox", ())))
    except (ValueError, TypeError) as exc:
        raise SchemaError(line, name, str(exc)) from None


def load_instances(path: str | Path) -> list[VSDInstance]:
    """Read and validate an instance file; errors carry line and field."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    if not raw_lines:
        raise SchemaError(1, "header", "empty file")
    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(1, "header", f"invalid JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != _FORMAT_NAME:
        raise SchemaError(1, "format", f"expected format {_FORMAT_NAME!r} header")
    if header.get("version") != _FORMAT_VERSION:
        raise SchemaError(1, "version", f"unsupported version {header.get('version')!r}")
    storage = header.get("features", "inline")
    n_regions = header.get("n_regions")
    d_v = header.get("d_v")
    blob = None
    if storage == "companion":
        companion = path.parent / header.get("companion", "")
        if not companion.is_file():
            raise SchemaError(1, "companion", f"companion feature file {companion.name!r} not found")
        blob = np.frombuffer(companion.read_bytes(), dtype=np.float64)
    instances = []
    for lineno, raw in enumerate(raw_lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(lineno, "record", f"invalid JSON: {exc}") from None
        inst_id = _require(record, "id", lineno)
        rel_name = _require(record, "relation", lineno)
        try:
            relation = SpatialRelation(rel_name)
        except ValueError:
            raise SchemaError(lineno, "relation", f"unknown relation {rel_name!r}") from None
        desc = _require(record, "description", lineno)
        if not isinstance(desc, list) or not desc:
            raise SchemaError(lineno, "description", "expected a non-empty token list")
        if len(desc) > MAX_DESC_TOKENS:
            raise SchemaError(lineno, "description", f"{len(desc)} tokens exceeds limit {MAX_DESC_TOKENS}")
        split = record.get("split", "")
        if split not in ("",) + SPLIT_NAMES:
            raise SchemaError(lineno, "split", f"unknown split {split!r}")
        feats_field = _require(record, "features", lineno)
        if isinstance(feats_field, dict):
            if storage != "companion":
                raise SchemaError(lineno, "features", "offset reference in an inline-features file")
            offset = feats_field.get("offset")
            if not isinstance(offset, int) or offset < 0:
                raise SchemaError(lineno, "features", f"bad offset {offset!r}")
            size = n_regions * d_v
            chunk = blob[offset * size:(offset + 1) * size]
            if chunk.size != size:
                raise SchemaError(lineno, "features", "offset past end of companion file")
            arr = chunk.reshape(n_regions, d_v).copy()
        else:
            arr = np.asarray(feats_field, dtype=np.float64)
            if arr.ndim != 2:
                raise SchemaError(lineno, "features", f"expected 2-d array, got shape {arr.shape}")
            if n_regions is not None and arr.shape != (n_regions, d_v):
                raise SchemaError(
                    lineno, "features", f"shape {arr.shape} does not match header ({n_regions}, {d_v})"
                )
        try:
            features = RegionFeatures(arr)
        except ValueError as exc:
            raise SchemaError(lineno, "features", str(exc)) from None
        try:
            inst = VSDInstance(
                instance_id=str(inst_id),
                features=features,
                o1=_load_object(record, "o1", lineno),
                o2=_load_object(record, "o2", lineno),
                relation=relation,
                description=tuple(desc),
                split=split,
            )
        except ValueError as exc:
            raise SchemaError(lineno, "record", str(exc)) from None
        instances.append(inst)
    return instances
