"""Synthetic scene pairs, the SFPC scene file format, and batching.

Two scene families stress the two failure modes the network targets:
``shelf`` stacks of identical slabs shifted by about one gap (nearest-neighbour
matching latches onto the wrong slab), and ``rigid`` objects under rigid
motions whose translation can be made long relative to the object size.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import geom
from .binio import (BadMagicError, ByteReader, FormatError, InconsistentSizeError,
                    VersionMismatchError)

log = logging.getLogger(__name__)

SFPC_MAGIC = b"SFPC"
SFPC_VERSION = 1
FLAG_GT = 1
FLAG_MASK = 2
PATTERNS = ("shelf", "rigid", "mixed")

# scenes sit in front of a camera looking down +z
SCENE_CENTER = np.array([0.0, 0.0, 4.0])
SCENE_HALF_EXTENT = np.array([1.5, 1.0, 1.0])


class MissingGroundTruthError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class ScenePair:
    pc1: np.ndarray
    pc2: np.ndarray
    gt_flow: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.pc1 = np.asarray(self.pc1, dtype=np.float32)
        self.pc2 = np.asarray(self.pc2, dtype=np.float32)
        if self.gt_flow is not None:
            self.gt_flow = np.asarray(self.gt_flow, dtype=np.float32)
            if self.gt_flow.shape != self.pc1.shape:
                raise ValueError("gt_flow must have one row per pc1 point")
            if not np.isfinite(self.gt_flow).all():
                raise ValueError("gt_flow must be finite")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (len(self.pc1),):
                raise ValueError("mask must have one entry per pc1 point")


@dataclass
class SceneRecipe:
    pattern: str = "rigid"
    n_objects: int = 3
    motion_scale: float = 0.3
    noise: float = 0.0
    n_points: int = 512
    seed: int = 0
    object_size: float = 0.6      # typical object extent in meters
    min_motion: float = 0.0       # lower bound on translation length (rigid objects)
    max_rotation_deg: float = 10.0

    def validate(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.n_points < 1:
            raise ValueError("recipe needs at least one point per frame")
        if self.motion_scale < 0 or self.noise < 0 or self.min_motion < 0:
            raise ValueError("motion scale, min motion and noise must be non-negative")
        if self.min_motion > self.motion_scale:
            raise ValueError("min_motion exceeds motion_scale")
        if self.pattern == "shelf" and self.n_objects < 3:
            raise ValueError("a shelf needs at least 3 slabs")
        if self.n_objects < 1:
            raise ValueError("need at least one object")


# -- shapes ------------------------------------------------------------------

@dataclass
class Box:
    half: np.ndarray

    def area(self):
        a, b, c = self.half * 2
        return 2 * (a * b + b * c + a * c)

    def sample(self, rng, n):
        a, b, c = self.half
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1, 1, size=(n, 3)) * self.half
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        uv[np.arange(n), axis] = sign * self.half[axis]
        return uv

    def surface_distance(self, p):
        q = np.abs(p) - self.half
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0)
        return np.abs(outside + inside)


@dataclass
class Ellipsoid:
    radii: np.ndarray

    def area(self):
        a, b, c = self.radii
        p = 1.6075
        return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)

    def sample(self, rng, n):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        return v * self.radii

    def surface_distance(self, p):
        # algebraic residual, zero exactly on the surface
        return np.abs(np.linalg.norm(p / self.radii, axis=-1) - 1.0)


@dataclass
class Placed:
    shape: object
    rotation: np.ndarray      # object orientation in pc1
    center: np.ndarray
    motion_r: np.ndarray = field(default_factory=lambda: np.eye(3))
    motion_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def world(self, local):
        return local @ self.rotation.T + self.center

    def moved(self, x):
        return x @ self.motion_r.T + self.motion_t

    def flow(self, x):
        # (R - I) x + t: exactly t when R is the identity
        return x @ (self.motion_r - np.eye(3)).T + self.motion_t


def _random_rotation(rng, max_deg):
    if max_deg <= 0:
        return np.eye(3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    return Rotation.from_rotvec(axis * angle).as_matrix()


def _random_direction(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def rigid_motion_about(center, rot, trans):
    """World-frame (R, t) rotating by ``rot`` about ``center`` then translating by ``trans``."""
    return rot, center - rot @ center + trans


def _rigid_objects(recipe, rng):
    objs = []
    for _ in range(recipe.n_objects):
        size = recipe.object_size * rng.uniform(0.6, 1.0)
        dims = size * rng.uniform(0.4, 1.0, size=3) / 2
        shape = Box(dims) if rng.random() < 0.5 else Ellipsoid(dims)
        center = SCENE_CENTER + rng.uniform(-1, 1, size=3) * SCENE_HALF_EXTENT * 0.7
        orient = _random_rotation(rng, 180.0)
        obj = Placed(shape, orient, center)
        if recipe.motion_scale > 0:
            length = rng.uniform(recipe.min_motion, recipe.motion_scale)
            rot = _random_rotation(rng, recipe.max_rotation_deg)
            obj.motion_r, obj.motion_t = rigid_motion_about(center, rot, _random_direction(rng) * length)
        objs.append(obj)
    return objs


def shelf_geometry(n_slabs, thickness=0.12, gap=None, width=1.4, depth=0.5):
    """Slab centers along y and the box half-extents of one slab."""
    gap = thickness if gap is None else gap
    period = thickness + gap
    ys = (np.arange(n_slabs) - (n_slabs - 1) / 2) * period
    return ys, np.array([width / 2, thickness / 2, depth / 2]), gap


def _shelf_objects(recipe, rng):
    ys, half, gap = shelf_geometry(recipe.n_objects)
    base = SCENE_CENTER + np.array([rng.uniform(-0.3, 0.3), 0.0, rng.uniform(-0.3, 0.3)])
    shift = np.array([0.0, gap * rng.uniform(0.9, 1.1) * rng.choice([-1.0, 1.0]), 0.0])
    lateral = np.zeros(3)
    if recipe.motion_scale > 0:
        lateral[[0, 2]] = rng.uniform(-1, 1, size=2) * 0.25 * recipe.motion_scale
    objs = []
    for y in ys:
        obj = Placed(Box(half), np.eye(3), base + np.array([0.0, y, 0.0]))
        obj.motion_t = shift + lateral
        objs.append(obj)
    return objs


def _sample_frame(objs, n, rng, moved):
    areas = np.array([o.shape.area() for o in objs])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, owner = [], []
    for i, (o, c) in enumerate(zip(objs, counts)):
        x = o.world(o.shape.sample(rng, c))
        pts.append(o.moved(x) if moved else x)
        owner.append(np.full(c, i))
    return np.concatenate(pts), np.concatenate(owner)


def generate_scene(recipe: SceneRecipe, return_objects=False):
    """Build a :class:`ScenePair` from a recipe; deterministic per seed."""
    recipe.validate()
    rng = np.random.default_rng(recipe.seed)
    if recipe.pattern == "shelf":
        objs = _shelf_objects(recipe, rng)
    elif recipe.pattern == "rigid":
        objs = _rigid_objects(recipe, rng)
    else:
        shelf = _shelf_objects(SceneRecipe(**{**recipe.__dict__, "pattern": "shelf",
                                              "n_objects": max(3, recipe.n_objects)}), rng)
        extra = _rigid_objects(SceneRecipe(**{**recipe.__dict__, "pattern": "rigid",
                                              "n_objects": max(1, recipe.n_objects // 2)}), rng)
        for o in extra:
            o.center = o.center + np.array([0.0, 0.0, -0.8])
        objs = shelf + extra
    pc1, owner = _sample_frame(objs, recipe.n_points, rng, moved=False)
    pc2, _ = _sample_frame(objs, recipe.n_points, rng, moved=True)
    flow = np.empty_like(pc1)
    for i, o in enumerate(objs):
        sel = owner == i
        flow[sel] = o.flow(pc1[sel])
    if recipe.noise > 0:
        pc1 = pc1 + rng.normal(scale=recipe.noise, size=pc1.shape)
        pc2 = pc2 + rng.normal(scale=recipe.noise, size=pc2.shape)
    pair = ScenePair(pc1, pc2, flow, np.ones(len(pc1), dtype=bool))
    if return_objects:
        return pair, objs, owner
    return pair


def nearest_neighbor_flow(pc1, pc2):
    """Naive baseline: displacement from each pc1 point to its nearest pc2 point."""
    nb = geom.knn(pc1, pc2, 1)
    return np.asarray(pc2, np.float64)[nb.indices[:, 0]] - np.asarray(pc1, np.float64)


def shelf_ambiguity_holds(pair: ScenePair, gap=None):
    """True when nearest-neighbour flow on the pair has EPE3D >= gap / 2."""
    gap = shelf_geometry(3)[2] if gap is None else gap
    naive = nearest_neighbor_flow(pair.pc1, pair.pc2)
    epe = np.linalg.norm(naive - pair.gt_flow, axis=-1).mean()
    return bool(epe >= gap / 2), float(epe)


# -- SFPC files -----------------------------------------------------------------

def encode_scene(pair: ScenePair) -> bytes:
    flags = (FLAG_GT if pair.gt_flow is not None else 0) | (FLAG_MASK if pair.mask is not None else 0)
    parts = [SFPC_MAGIC, struct.pack("<IIII", SFPC_VERSION, len(pair.pc1), len(pair.pc2), flags),
             np.ascontiguousarray(pair.pc1, dtype="<f4").tobytes(),
             np.ascontiguousarray(pair.pc2, dtype="<f4").tobytes()]
    if pair.gt_flow is not None:
        parts.append(np.ascontiguousarray(pair.gt_flow, dtype="<f4").tobytes())
    if pair.mask is not None:
        parts.append(pair.mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def write_scene(pair: ScenePair, path):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_scene(pair))
    os.replace(tmp, path)


def decode_scene(data: bytes) -> ScenePair:
    rd = ByteReader(data)
    magic = rd.take(4, "magic")
    if magic != SFPC_MAGIC:
        raise BadMagicError(f"bad scene magic {magic!r}")
    version = rd.u32("version")
    if version != SFPC_VERSION:
        raise VersionMismatchError(f"scene version {version}, expected {SFPC_VERSION}")
    n1, n2, flags = rd.u32("n1"), rd.u32("n2"), rd.u32("flags")
    if flags & ~(FLAG_GT | FLAG_MASK):
        raise InconsistentSizeError(f"unknown flag bits {flags:#x}")
    expected = 12 * n1 + 12 * n2 + (12 * n1 if flags & FLAG_GT else 0) + (n1 if flags & FLAG_MASK else 0)

    def arr(n, what):
        return np.frombuffer(rd.take(12 * n, what), dtype="<f4").reshape(n, 3).astype(np.float32)

    pc1 = arr(n1, "pc1")
    pc2 = arr(n2, "pc2")
    gt = arr(n1, "gt_flow") if flags & FLAG_GT else None
    mask = np.frombuffer(rd.take(n1, "mask"), dtype=np.uint8).astype(bool) if flags & FLAG_MASK else None
    if rd.remaining():
        raise InconsistentSizeError(
            f"{rd.remaining()} bytes beyond the {expected}-byte payload implied by the header")
    return ScenePair(pc1, pc2, gt, mask)


def read_scene(path) -> ScenePair:
    with open(path, "rb") as fh:
        return decode_scene(fh.read())


# -- datasets and batching ---------------------------------------------------------

@dataclass
class Batch:
    pc1: np.ndarray
    pc2: np.ndarray
    gt_flow: np.ndarray | None
    mask: np.ndarray | None
    names: list


class SceneDataset:
    """All ``*.sfpc`` files of a directory, loaded once in sorted order."""

    def __init__(self, directory, n_input, require_gt=True):
        self.directory = Path(directory)
        files = sorted(self.directory.glob("*.sfpc"))
        if not files:
            raise DataError(f"no *.sfpc files in {directory}")
        self.n_input = n_input
        self.pairs, self.names, self.skipped = [], [], []
        for f in files:
            try:
                pair = read_scene(f)
            except FormatError as exc:
                log.warning("skipping %s: %s", f.name, exc)
                self.skipped.append((f.name, str(exc)))
                continue
            if len(pair.pc1) < n_input or len(pair.pc2) < n_input:
                msg = f"fewer than {n_input} points"
                log.warning("skipping %s: %s", f.name, msg)
                self.skipped.append((f.name, msg))
                continue
            if require_gt and pair.gt_flow is None:
                raise MissingGroundTruthError(f"{f.name} carries no ground-truth flow")
            self.pairs.append(pair)
            self.names.append(f.name)
        if not self.pairs:
            raise DataError(f"no usable scenes in {directory} ({len(self.skipped)} skipped)")

    def __len__(self):
        return len(self.pairs)

    def subsample(self, i, seed, epoch):
        """Frame-wise random subsample of pair ``i`` to ``n_input`` points; also returns the pc1 indices."""
        pair = self.pairs[i]
        i1 = geom.random_sample(len(pair.pc1), self.n_input, seed=[seed, epoch, i, 1])
        i2 = geom.random_sample(len(pair.pc2), self.n_input, seed=[seed, epoch, i, 2])
        gt = pair.gt_flow[i1] if pair.gt_flow is not None else None
        mask = pair.mask[i1] if pair.mask is not None else np.ones(self.n_input, dtype=bool)
        return pair.pc1[i1], pair.pc2[i2], gt, mask, i1

    def batches(self, batch_size, seed, epoch=0, shuffle=True):
        order = np.arange(len(self))
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(len(self))
        for start in range(0, len(order), batch_size):
            items = [self.subsample(i, seed, epoch) for i in order[start:start + batch_size]]
            gts = [it[2] for it in items]
            yield Batch(np.stack([it[0] for it in items]).astype(np.float64),
                        np.stack([it[1] for it in items]).astype(np.float64),
                        None if any(g is None for g in gts) else np.stack(gts).astype(np.float64),
                        np.stack([it[3] for it in items]),
                        [self.names[i] for i in order[start:start + batch_size]])


def make_batches(directory, batch_size, seed, n_input, epoch=0, require_gt=True):
    """Iterate one epoch of batches from a directory of scene files."""
    return SceneDataset(directory, n_input, require_gt=require_gt).batches(batch_size, seed, epoch)
