"""Datasets: synthetic scene generation, label geometry, class maps, disk IO.

A sample bundles five aligned modalities plus the pinhole intrinsics needed
to relate depth and normals:

    image    float32 [3, H, W] in [0, 1]
    seg      int64   [H, W]    class ids, 255 = ignore
    depth    float32 [H, W]    metres in (0, d_far]
    normals  float32 [3, H, W] unit vectors, camera frame, z towards camera (< 0)
    edges    uint8   [H, W]    1 on semantic boundaries

Synthetic scenes are layered planar boxes and spherical bumps over a
fronto-parallel backdrop; their normals are *derived from the depth map*, so
depth and normals are geometrically consistent by construction.  On-disk
datasets store images/labels as PNG, float maps as little-endian PFM, and the
shared camera model in ``intrinsics.json``.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

IGNORE_INDEX = 255


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Intrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]))


@dataclass
class Sample:
    image: np.ndarray
    seg: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    edges: np.ndarray
    intrinsics: Intrinsics
    d_far: float

    @property
    def size(self) -> Tuple[int, int]:
        return self.depth.shape

    def validate(self, num_classes: Optional[int] = None) -> None:
        h, w = self.depth.shape
        if self.image.shape != (3, h, w):
            raise ValueError(f"image shape {self.image.shape} != (3, {h}, {w})")
        if self.seg.shape != (h, w) or self.edges.shape != (h, w):
            raise ValueError("seg/edges shape mismatch")
        if self.normals.shape != (3, h, w):
            raise ValueError(f"normals shape {self.normals.shape} != (3, {h}, {w})")
        if self.image.min() < -1e-6 or self.image.max() > 1.0 + 1e-6:
            raise ValueError("image values outside [0, 1]")
        if self.depth.min() <= 0:
            raise ValueError("depth must be strictly positive")
        if self.depth.max() > self.d_far * (1 + 1e-5):
            raise ValueError(f"depth exceeds d_far={self.d_far}")
        norms = np.sqrt((self.normals.astype(np.float64) ** 2).sum(axis=0))
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("normals are not unit length")
        labels = np.unique(self.seg)
        labels = labels[labels != IGNORE_INDEX]
        if labels.size and (labels.min() < 0 or labels.max() > 254):
            raise ValueError("segmentation ids must be in [0, 254] or 255 (ignore)")
        if num_classes is not None and labels.size and labels.max() >= num_classes:
            raise ValueError(f"segmentation id {labels.max()} >= num_classes {num_classes}")
        if not np.isin(self.edges, (0, 1)).all():
            raise ValueError("edges must be binary")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def pixel_rays(size: Tuple[int, int], intrinsics: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised ray slopes ((u - cx)/fx, (v - cy)/fy) for every pixel."""
    h, w = size
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    xhat = (u[None, :] - intrinsics.cx) / intrinsics.fx
    yhat = (v[:, None] - intrinsics.cy) / intrinsics.fy
    return np.broadcast_to(xhat, (h, w)).copy(), np.broadcast_to(yhat, (h, w)).copy()


def plane_depth(
    size: Tuple[int, int],
    intrinsics: Intrinsics,
    slope_x: float,
    slope_y: float,
    z0: float,
) -> np.ndarray:
    """Depth of the plane z = z0 + slope_x * X + slope_y * Y (camera frame).

    Its true outward normal is (slope_x, slope_y, -1) normalised.  Raises if
    the plane crosses or nearly grazes the image rays.
    """
    xhat, yhat = pixel_rays(size, intrinsics)
    denom = 1.0 - slope_x * xhat - slope_y * yhat
    if denom.min() < 0.2:
        raise ValueError("plane too steep for this field of view")
    return (z0 / denom).astype(np.float64)


def plane_normal(slope_x: float, slope_y: float) -> np.ndarray:
    n = np.array([slope_x, slope_y, -1.0], dtype=np.float64)
    return n / np.linalg.norm(n)


def normals_from_depth(depth: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Per-pixel unit normals from a depth map, z component towards camera.

    Each pixel is unprojected to a 3D point; the four cross products of
    consecutive neighbour-difference pairs (right*down, down*left, left*up,
    up*right) are summed and normalised.  Border neighbours are clamped,
    which zeroes the pairs that would leave the image, so borders fall back
    to one-sided estimates.  Degenerate pixels get the fronto-parallel
    normal (0, 0, -1).
    """
    z = depth.astype(np.float64)
    h, w = z.shape
    xhat, yhat = pixel_rays((h, w), intrinsics)
    pts = np.stack([xhat * z, yhat * z, z], axis=-1)  # [H, W, 3]

    padded = np.pad(pts, ((1, 1), (1, 1), (0, 0)), mode="edge")
    right = padded[1:-1, 2:] - pts
    left = padded[1:-1, :-2] - pts
    down = padded[2:, 1:-1] - pts
    up = padded[:-2, 1:-1] - pts

    total = (
        np.cross(right, down)
        + np.cross(down, left)
        + np.cross(left, up)
        + np.cross(up, right)
    )
    norm = np.linalg.norm(total, axis=-1)
    bad = norm < 1e-12
    total[bad] = (0.0, 0.0, 1.0)
    norm[bad] = 1.0
    n = total / norm[..., None]
    # orient every normal towards the camera
    flip = n[..., 2] > 0
    n[flip] *= -1.0
    return n.transpose(2, 0, 1).astype(np.float32)


def boundary_edges(seg: np.ndarray) -> np.ndarray:
    """1 where a pixel has a 4-neighbour with a different label."""
    edges = np.zeros(seg.shape, dtype=np.uint8)
    dh = seg[1:, :] != seg[:-1, :]
    dw = seg[:, 1:] != seg[:, :-1]
    edges[1:, :] |= dh
    edges[:-1, :] |= dh
    edges[:, 1:] |= dw
    edges[:, :-1] |= dw
    return edges


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

_PALETTE = np.array(
    [
        [0.38, 0.38, 0.42],
        [0.75, 0.25, 0.22],
        [0.22, 0.62, 0.28],
        [0.90, 0.78, 0.25],
        [0.25, 0.42, 0.82],
        [0.72, 0.40, 0.75],
        [0.95, 0.55, 0.20],
        [0.30, 0.75, 0.75],
        [0.85, 0.85, 0.85],
        [0.55, 0.35, 0.20],
    ],
    dtype=np.float64,
)

_LIGHT = np.array([0.35, -0.45, -0.82])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def default_intrinsics(size: int) -> Intrinsics:
    return Intrinsics(fx=2.0 * size, fy=2.0 * size, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0)


def synthetic_scene(
    seed: int,
    size: int = 64,
    num_classes: int = 6,
    d_far: float = 20.0,
) -> Sample:
    """One procedurally generated scene; identical output for identical seeds.

    A fronto-parallel backdrop (class 0) is covered back-to-front by tilted
    planar boxes and spherical bumps, each strictly closer than what it
    occludes and carrying a class in 1..num_classes-1.  Normals are computed
    from the finished depth map, edges from the finished label map.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if num_classes > len(_PALETTE):
        raise ValueError(f"at most {len(_PALETTE)} classes supported")
    rng = np.random.default_rng(seed)
    intr = default_intrinsics(size)
    xhat, yhat = pixel_rays((size, size), intr)

    z_back = float(rng.uniform(0.55, 0.75)) * d_far
    depth = np.full((size, size), z_back, dtype=np.float64)
    seg = np.zeros((size, size), dtype=np.int64)

    lo = max(3, num_classes - 1)
    n_prims = 0 if num_classes == 1 else int(rng.integers(lo, max(7, lo + 3)))
    # far-to-near base depths; each primitive occludes what it overlaps
    bases = np.linspace(0.80, 0.30, max(n_prims, 1)) * z_back
    for k in range(n_prims):
        cls = 1 + k % (num_classes - 1)
        z_k = float(bases[k] * rng.uniform(0.95, 1.05))
        uc, vc = rng.uniform(0.15 * size, 0.85 * size, size=2)
        if rng.random() < 0.5:
            # tilted planar box
            half_u = rng.uniform(0.12, 0.28) * size
            half_v = rng.uniform(0.12, 0.28) * size
            inside = (np.abs(np.arange(size)[None, :] - uc) <= half_u) & (
                np.abs(np.arange(size)[:, None] - vc) <= half_v
            )
            sx, sy = rng.uniform(-0.8, 0.8, size=2)
            prim_depth = plane_depth((size, size), intr, sx, sy, z_k)
        else:
            # spherical bump on a fronto-parallel disk
            radius = rng.uniform(0.12, 0.26) * size
            du = np.arange(size)[None, :] - uc
            dv = np.arange(size)[:, None] - vc
            rho2 = du * du + dv * dv
            inside = rho2 <= radius * radius
            bump = float(rng.uniform(0.04, 0.12)) * z_k
            prim_depth = z_k - bump * np.sqrt(
                np.clip(1.0 - rho2 / (radius * radius), 0.0, None)
            )
        mask = inside & (prim_depth < depth)
        depth[mask] = prim_depth[mask]
        seg[mask] = cls

    normals = normals_from_depth(depth, intr)
    edges = boundary_edges(seg)

    albedo = _PALETTE[seg]  # [H, W, 3]
    shade = np.clip(-(normals.transpose(1, 2, 0) @ _LIGHT), 0.0, 1.0)
    atten = np.clip(1.1 - 0.55 * depth / d_far, 0.2, 1.0)
    image = albedo * (0.3 + 0.7 * shade[..., None]) * atten[..., None]
    image = np.clip(image, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)

    sample = Sample(
        image=image,
        seg=seg,
        depth=depth.astype(np.float32),
        normals=normals,
        edges=edges,
        intrinsics=intr,
        d_far=d_far,
    )
    sample.validate(num_classes=num_classes)
    return sample


def synthetic_dataset(
    seed: int,
    count: int,
    size: int = 64,
    num_classes: int = 6,
    d_far: float = 20.0,
) -> List[Sample]:
    """``count`` scenes with per-scene seeds seed, seed+1, ..."""
    return [synthetic_scene(seed + i, size, num_classes, d_far) for i in range(count)]


# ---------------------------------------------------------------------------
# class maps
# ---------------------------------------------------------------------------

COMMON_CLASSES = ("road", "building", "pole", "light", "sign", "vegetation", "sky", "vehicle")


@dataclass(frozen=True)
class ClassMap:
    """Label remapping onto a shared class list.

    ``names`` assigns an id (its index) to every class name; the shared
    target classes come first so they keep the same ids across domains.
    ``mapping`` sends source-only names to a shared name or to None (ignore).
    Shared names map to themselves, which makes ``apply`` idempotent.
    """

    names: Tuple[str, ...]
    mapping: Mapping[str, Optional[str]]
    num_targets: int

    def lut(self) -> np.ndarray:
        table = np.full(len(self.names), IGNORE_INDEX, dtype=np.int64)
        for i, name in enumerate(self.names):
            target = self.mapping.get(name, name if i < self.num_targets else None)
            if target is None:
                continue
            j = self.names.index(target)
            if j >= self.num_targets:
                raise ValueError(f"{name!r} maps to non-target class {target!r}")
            table[i] = j
        return table

    def apply(self, seg: np.ndarray) -> np.ndarray:
        seg = np.asarray(seg)
        known = (seg >= 0) & (seg < len(self.names))
        valid = known | (seg == IGNORE_INDEX)
        if not valid.all():
            bad = np.unique(seg[~valid])
            raise ValueError(f"segmentation contains unknown ids {bad.tolist()}")
        out = np.full(seg.shape, IGNORE_INDEX, dtype=np.int64)
        out[known] = self.lut()[seg[known]]
        return out


def make_class_map(source_only: Sequence[str], mapping: Mapping[str, Optional[str]]) -> ClassMap:
    clash = set(source_only) & set(COMMON_CLASSES)
    if clash:
        raise ValueError(f"source-only classes shadow shared ones: {sorted(clash)}")
    for name, target in mapping.items():
        if name not in source_only:
            raise ValueError(f"mapping key {name!r} is not a source-only class")
        if target is not None and target not in COMMON_CLASSES:
            raise ValueError(f"{name!r} maps to unknown target {target!r}")
    return ClassMap(
        names=COMMON_CLASSES + tuple(source_only),
        mapping=dict(mapping),
        num_targets=len(COMMON_CLASSES),
    )


# Synthetic-outdoor domain: terrain, guardrail and misc have no counterpart.
VKITTI_TO_COMMON = make_class_map(
    ("terrain", "tree", "guardrail", "misc", "truck", "car", "van"),
    {
        "terrain": None,
        "tree": "vegetation",
        "guardrail": None,
        "misc": None,
        "truck": "vehicle",
        "car": "vehicle",
        "van": "vehicle",
    },
)

# Urban-driving domain: person/rider/two-wheelers are dropped, walls are
# folded into vegetation to mirror the synthetic side's coarse classes.
CITYSCAPES_TO_COMMON = make_class_map(
    (
        "sidewalk",
        "wall",
        "fence",
        "person",
        "rider",
        "car",
        "bus",
        "motorcycle",
        "bicycle",
    ),
    {
        "sidewalk": None,
        "wall": "vegetation",
        "fence": None,
        "person": None,
        "rider": None,
        "car": "vehicle",
        "bus": "vehicle",
        "motorcycle": None,
        "bicycle": None,
    },
)


def apply_class_map(seg: np.ndarray, class_map: ClassMap) -> np.ndarray:
    return class_map.apply(seg)


def median_scale(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rescale predicted depth so its median matches the target's.

    Accepts [H, W] or [B, H, W]; batches are scaled per image.  Standard
    protocol when predictions are only defined up to scale.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 2:
        m = np.median(pred)
        if m == 0:
            raise ZeroDivisionError("median of prediction is zero")
        return pred * (np.median(target) / m)
    return np.stack([median_scale(p, t) for p, t in zip(pred, target)])


# ---------------------------------------------------------------------------
# disk IO
# ---------------------------------------------------------------------------


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Little-endian PFM, bottom-up scanlines; [H, W] or [H, W, 3] float32."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs [H, W] or [H, W, 3], got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little endian
        np.flipud(data).astype("<f4").tofile(f)


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().decode()
        match = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not match:
            raise ValueError(f"{path}: malformed PFM dimensions {dims!r}")
        w, h = int(match.group(1)), int(match.group(2))
        scale = float(f.readline().decode().strip())
        endian = "<" if scale < 0 else ">"
        count = w * h * (3 if header == b"PF" else 1)
        payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise ValueError(f"{path}: truncated PFM payload")
    data = np.frombuffer(payload, dtype=f"{endian}f4")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32).copy()


def _sample_paths(root: Path, index: int) -> Dict[str, Path]:
    stem = f"{index:06d}"
    return {
        "image": root / f"{stem}_image.png",
        "seg": root / f"{stem}_seg.png",
        "depth": root / f"{stem}_depth.pfm",
        "normals": root / f"{stem}_normals.pfm",
        "edges": root / f"{stem}_edges.png",
    }


def save_dataset(samples: Sequence[Sample], root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("refusing to save an empty dataset")
    first = samples[0]
    for s in samples:
        if s.d_far != first.d_far or s.intrinsics != first.intrinsics:
            raise ValueError("all samples must share intrinsics and d_far")
    meta = dict(first.intrinsics.to_dict(), d_far=first.d_far)
    (root / "intrinsics.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for i, s in enumerate(samples):
        paths = _sample_paths(root, i)
        rgb = (np.clip(s.image, 0, 1) * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(paths["image"])
        Image.fromarray(s.seg.astype(np.uint8), mode="L").save(paths["seg"])
        write_pfm(paths["depth"], s.depth)
        write_pfm(paths["normals"], s.normals.transpose(1, 2, 0))
        Image.fromarray((s.edges * 255).astype(np.uint8), mode="L").save(paths["edges"])


def load_dataset(root: str | Path, strict: bool = True) -> List[Sample]:
    """Read a saved dataset back; validates every sample's invariants.

    With ``strict=False`` samples with missing files are skipped with a
    warning instead of raising.
    """
    root = Path(root)
    meta_path = root / "intrinsics.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} missing")
    meta = json.loads(meta_path.read_text())
    intr = Intrinsics.from_dict(meta)
    d_far = float(meta["d_far"])

    indices = sorted(
        int(p.name.split("_")[0]) for p in root.glob("*_image.png")
    )
    samples: List[Sample] = []
    for i in indices:
        paths = _sample_paths(root, i)
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            if strict:
                raise FileNotFoundError(f"sample {i}: missing {missing}")
            warnings.warn(f"sample {i}: missing {missing}; skipped", stacklevel=2)
            continue
        image = (
            np.asarray(Image.open(paths["image"]).convert("RGB"), dtype=np.float32) / 255.0
        ).transpose(2, 0, 1)
        seg = np.asarray(Image.open(paths["seg"]), dtype=np.int64)
        depth = read_pfm(paths["depth"])
        normals = read_pfm(paths["normals"]).transpose(2, 0, 1)
        edges = (np.asarray(Image.open(paths["edges"])) > 127).astype(np.uint8)
        sample = Sample(
            image=image,
            seg=seg,
            depth=depth,
            normals=normals,
            edges=edges,
            intrinsics=intr,
            d_far=d_far,
        )
        sample.validate()
        samples.append(sample)
    return samples
