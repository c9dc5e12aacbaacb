"""Procedural rigged characters and a joint-limited pose sampler.

Characters face +z with +y up and their left side on +x. A body is an
ellipsoid torso around a spine chain, a head ellipsoid, and capsule tubes
for the limb, leg and tail chains. Keypoints sit at the start of every
bone. Skin weights are a softmax of negative bone distance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .. import so3
from ..meshcore import Mesh, PoseTransforms, Rig, apply_lbs
from ..pipeline.bundle import CharacterBundle
from ..shapefeat import ShapeFeatConfig

CATEGORIES = ("humanoid", "bird", "quadruped")
PART_WORDS = {
    "humanoid": ("arm", "leg"),
    "bird": ("wing", "claw"),
    "quadruped": ("foreleg", "hindleg"),
}
_MAX_CHAIN = {"spine": 5, "limb": 4, "leg": 3, "tail": 4}


@dataclass(frozen=True)
class SynthSpec:
    k_min: int = 4
    k_max: int = 12
    categories: Tuple[str, ...] = CATEGORIES
    temperature: float = 0.02  # skin softness, in units of body height
    jitter: float = 0.2  # relative proportion noise
    ring: int = 8
    stations_per_bone: int = 3
    weight_cutoff: float = 1e-3

    def __post_init__(self):
        if not 3 <= self.k_min <= self.k_max <= 24:
            raise ValueError("keypoint range must satisfy 3 <= k_min <= k_max <= 24")
        if not self.categories or any(c not in CATEGORIES for c in self.categories):
            raise ValueError(f"categories must be drawn from {CATEGORIES}")
        if self.temperature <= 0 or not 0 <= self.jitter < 1:
            raise ValueError("temperature must be > 0 and jitter in [0, 1)")
        if self.ring < 3 or self.stations_per_bone < 1:
            raise ValueError("ring >= 3 and stations_per_bone >= 1 required")


@dataclass(frozen=True)
class JointLimits:
    """Maximum rotation angle (degrees) per part; ``twist`` allows rotation about the bone."""

    spine: float = 20.0
    head: float = 35.0
    limb: float = 70.0
    leg: float = 50.0
    tail: float = 40.0
    root: float = 10.0
    twist: bool = False

    def of(self, part: str) -> float:
        return float(getattr(self, part))


@dataclass
class _Bone:
    name: str
    part: str
    parent: int
    head: np.ndarray
    tail: np.ndarray


def _chain_counts(category, spec, rng):
    c = {
        "spine": int(rng.integers(1, 4)),
        "limb": int(rng.integers(1, 4)),
        "leg": int(rng.integers(1, 3)),
        "tail": 0 if category == "humanoid" else int(rng.integers(0, 4)),
    }

    def total():
        return c["spine"] + 1 + 2 * c["limb"] + 2 * c["leg"] + c["tail"]

    shrink = [("tail", 0), ("leg", 1), ("limb", 1), ("spine", 1), ("leg", 0), ("limb", 0)]
    while total() > spec.k_max:
        for part, floor in shrink:
            if c[part] > floor:
                c[part] -= 1
                break
    while total() < spec.k_min:
        grow = [p for p in ("spine", "limb", "leg", "tail") if c[p] < _MAX_CHAIN[p]]
        grow = [p for p in grow if total() + (2 if p in ("limb", "leg") else 1) <= spec.k_max] or grow
        c[grow[int(rng.integers(len(grow)))]] += 1
    return c


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _layout(category, rng, spec):
    """Anchor points and chain directions in rest pose."""
    j = lambda: 1.0 + spec.jitter * rng.uniform(-1.0, 1.0)  # noqa: E731
    if category == "humanoid":
        H = 1.7 * j()
        return H, dict(
            pelvis=np.array([0, 0.55, 0]) * H,
            spine_top=np.array([0, 0.55 + 0.3 * j(), 0]) * H,
            head_dir=_unit([0, 1, 0]), head_len=0.15 * H * j(),
            shoulder=np.array([0.12 * j(), 0.82, 0]) * H, limb_dir=_unit([1, 0, 0]), limb_len=0.42 * H * j(),
            hip=np.array([0.07 * j(), 0.53, 0]) * H, leg_dir=_unit([0, -1, 0]), leg_len=0.5 * H * j(),
            tail_dir=_unit([0, -0.3, -1]), tail_len=0.3 * H * j(),
            torso_width=0.12 * H * j(), limb_radius=0.035 * H, leg_radius=0.045 * H,
        )
    if category == "bird":
        H = 1.0 * j()
        return H, dict(
            pelvis=np.array([0, 0.45, -0.1]) * H,
            spine_top=np.array([0, 0.45 + 0.3 * j(), 0.1]) * H,
            head_dir=_unit([0, 0.6, 0.8]), head_len=0.25 * H * j(),
            shoulder=np.array([0.1 * j(), 0.7, 0.05]) * H, limb_dir=_unit([1, 0.1, -0.1]), limb_len=0.7 * H * j(),
            hip=np.array([0.08 * j(), 0.42, -0.05]) * H, leg_dir=_unit([0, -1, 0.1]), leg_len=0.42 * H * j(),
            tail_dir=_unit([0, -0.3, -1]), tail_len=0.4 * H * j(),
            torso_width=0.14 * H * j(), limb_radius=0.03 * H, leg_radius=0.025 * H,
        )
    H = 1.0 * j()
    half = 0.5 * j()
    return H, dict(
        pelvis=np.array([0, 0.8, -half]) * H,
        spine_top=np.array([0, 0.85, half]) * H,
        head_dir=_unit([0, 0.6, 0.8]), head_len=0.35 * H * j(),
        shoulder=np.array([0.15 * j(), 0.75, 0.85 * half]) * H, limb_dir=_unit([0, -1, 0]), limb_len=0.72 * H * j(),
        hip=np.array([0.15 * j(), 0.75, -0.9 * half]) * H, leg_dir=_unit([0, -1, 0]), leg_len=0.72 * H * j(),
        tail_dir=_unit([0, 0.2, -1]), tail_len=0.5 * H * j(),
        torso_width=0.18 * H * j(), limb_radius=0.05 * H, leg_radius=0.05 * H,
    )


def _bones(category, counts, L) -> List[_Bone]:
    limb_word, leg_word = PART_WORDS[category]
    bones: List[_Bone] = []

    def chain(prefix, part, n, start, direction, length, parent):
        seg = length / n
        for i in range(n):
            head = start + direction * seg * i
            bones.append(_Bone(f"{prefix}_{i + 1}", part, parent, head, head + direction * seg))
            parent = len(bones) - 1

    ns = counts["spine"]
    spine_vec = L["spine_top"] - L["pelvis"]
    chain("spine", "spine", ns, L["pelvis"], _unit(spine_vec), np.linalg.norm(spine_vec), -1)
    top = ns - 1
    bones.append(_Bone("head", "head", top, L["spine_top"], L["spine_top"] + L["head_dir"] * L["head_len"]))
    mirror = np.array([-1.0, 1.0, 1.0])
    for side, flip in (("left", np.ones(3)), ("right", mirror)):
        if counts["limb"]:
            chain(f"{side}_{limb_word}", "limb", counts["limb"], L["shoulder"] * flip, L["limb_dir"] * flip,
                  L["limb_len"], top)
    for side, flip in (("left", np.ones(3)), ("right", mirror)):
        if counts["leg"]:
            chain(f"{side}_{leg_word}", "leg", counts["leg"], L["hip"] * flip, L["leg_dir"] * flip, L["leg_len"], 0)
    if counts["tail"]:
        chain("tail", "tail", counts["tail"], L["pelvis"], L["tail_dir"], L["tail_len"], 0)
    return bones


def _frame(axis):
    """Right-handed (e1, e2, e3) with e3 = axis."""
    e3 = _unit(axis)
    ref = np.array([0.0, 1.0, 0.0]) if abs(e3[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = _unit(np.cross(ref, e3))
    e2 = np.cross(e3, e1)
    return e1, e2, e3


def _capsule(top, bottom, centers, radii, e1, e2, n):
    """Closed surface: a pole, rings of ``n`` vertices, a pole. Outward-facing when
    (e1, e2, top - bottom) is right-handed."""
    phi = 2 * np.pi * np.arange(n) / n
    rings = [c + r[0] * np.cos(phi)[:, None] * e1 + r[1] * np.sin(phi)[:, None] * e2 for c, r in zip(centers, radii)]
    verts = np.vstack([top[None]] + rings + [bottom[None]])
    m = len(rings)
    faces = []
    ring_idx = lambda i, k: 1 + i * n + (k % n)  # noqa: E731
    for k in range(n):
        faces.append((0, ring_idx(0, k), ring_idx(0, k + 1)))
    for i in range(m - 1):
        for k in range(n):
            a, b = ring_idx(i, k), ring_idx(i, k + 1)
            c, d = ring_idx(i + 1, k), ring_idx(i + 1, k + 1)
            faces += [(a, c, d), (a, d, b)]
    last = verts.shape[0] - 1
    for k in range(n):
        faces.append((last, ring_idx(m - 1, k + 1), ring_idx(m - 1, k)))
    return verts, np.asarray(faces)


def _ellipsoid(center, axis, half_len, width, n, n_lat):
    e1, e2, e3 = _frame(axis)
    theta = np.pi * np.arange(1, n_lat + 1) / (n_lat + 1)
    centers = [center + half_len * np.cos(t) * e3 for t in theta]
    radii = [(width * np.sin(t), width * np.sin(t)) for t in theta]
    return _capsule(center + half_len * e3, center - half_len * e3, centers, radii, e1, e2, n)


def _tube(points, radius, n, stations):
    """Capsule along a straight polyline ``points`` (start ... end)."""
    d = points[-1] - points[0]
    e1, e2, e3 = _frame(-d)  # top pole sits at the start
    centers = []
    for a, b in zip(points[:-1], points[1:]):
        for s in range(stations):
            centers.append(a + (b - a) * (s + 0.5) / stations)
    length = np.linalg.norm(d)
    radii = []
    for c in centers:
        f = np.dot(c - points[0], -e3) / length
        r = radius * (1.0 - 0.35 * f)
        radii.append((r, r))
    cap = 0.5 * radius
    return _capsule(points[0] + cap * e3, points[-1] - cap * e3, centers, radii, e1, e2, n)


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _mesh_and_weights(bones, L, H, spec):
    parts = []
    n = spec.ring
    spine = [b for b in bones if b.part == "spine"]
    s0, s1 = spine[0].head, spine[-1].tail
    parts.append(_ellipsoid(0.5 * (s0 + s1), s1 - s0, 0.5 * np.linalg.norm(s1 - s0) + L["torso_width"] * 0.6,
                            L["torso_width"], n, 2 + 2 * len(spine)))
    head = next(b for b in bones if b.part == "head")
    parts.append(_ellipsoid(0.5 * (head.head + head.tail), head.tail - head.head, 0.5 * np.linalg.norm(head.tail - head.head),
                            0.35 * np.linalg.norm(head.tail - head.head) + 0.02 * H, n, 4))
    chains = {}
    for i, b in enumerate(bones):
        if b.part in ("limb", "leg", "tail"):
            key = b.name.rsplit("_", 1)[0]
            chains.setdefault(key, []).append(b)
    for key, chain in chains.items():
        pts = np.vstack([chain[0].head] + [b.tail for b in chain])
        radius = L["limb_radius"] if chain[0].part == "limb" else L["leg_radius"]
        if chain[0].part == "tail":
            radius = 0.6 * L["leg_radius"]
        parts.append(_tube(pts, radius, n, spec.stations_per_bone))
    verts, faces, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + off)
        off += v.shape[0]
    V = np.vstack(verts)
    F = np.vstack(faces)
    D = np.stack([_segment_distance(V, b.head, b.tail) for b in bones], axis=1) / H
    logits = -D / spec.temperature
    W = np.exp(logits - logits.max(axis=1, keepdims=True))
    W /= W.sum(axis=1, keepdims=True)
    W[W < spec.weight_cutoff] = 0.0
    W /= W.sum(axis=1, keepdims=True)
    return V, F, W


class PoseSampler:
    """Random joint-limited poses for one synthetic character."""

    def __init__(self, bundle: CharacterBundle, parts, bone_dirs, limits: JointLimits = JointLimits()):
        self.bundle = bundle
        self.parts = tuple(parts)
        self.bone_dirs = np.asarray(bone_dirs)
        self.limits = limits
        self.parents = bundle.rig.parents

    def sample_local(self, rng: np.random.Generator) -> np.ndarray:
        """Local (parent-relative) quaternions, one per keypoint."""
        K = len(self.parts)
        out = np.empty((K, 4))
        for k, part in enumerate(self.parts):
            limit = np.radians(self.limits.root if self.parents[k] < 0 else self.limits.of(part))
            axis = rng.standard_normal(3)
            if not self.limits.twist and self.parents[k] >= 0:
                d = self.bone_dirs[k]
                axis -= (axis @ d) * d
            axis /= np.linalg.norm(axis)
            out[k] = so3.axis_angle_to_quat(axis, rng.uniform(0.0, limit))
        return out

    def forward_kinematics(self, local_quats) -> PoseTransforms:
        C = self.bundle.rig.keypoints
        K = C.shape[0]
        R_local = so3.attitude(np.asarray(local_quats))
        R = np.empty((K, 3, 3))
        t = np.empty((K, 3))
        for k in range(K):  # parents precede children
            p = self.parents[k]
            if p < 0:
                R[k] = R_local[k]
                t[k] = C[k]
            else:
                R[k] = R[p] @ R_local[k]
                t[k] = t[p] + R[p] @ (C[k] - C[p])
        return PoseTransforms.from_matrices(R, t)

    def sample(self, rng: np.random.Generator) -> PoseTransforms:
        return self.forward_kinematics(self.sample_local(rng))

    def pose_mesh(self, transforms: PoseTransforms) -> Mesh:
        return apply_lbs(self.bundle.mesh, self.bundle.rig, transforms)

    def posed_bundle(self, transforms: PoseTransforms, cfg: ShapeFeatConfig = ShapeFeatConfig()) -> CharacterBundle:
        return self.bundle.with_pose(self.pose_mesh(transforms), cfg)

    def poses(self, seed: int, n: int) -> List[PoseTransforms]:
        rng = np.random.default_rng(seed)
        return [self.sample(rng) for _ in range(n)]


def generate_synthetic_character(
    seed: int,
    spec: SynthSpec = SynthSpec(),
    shape_cfg: ShapeFeatConfig = ShapeFeatConfig(),
    category: Optional[str] = None,
    limits: JointLimits = JointLimits(),
) -> Tuple[CharacterBundle, PoseSampler]:
    """Deterministic character for ``seed``; returns its bundle and pose sampler."""
    rng = np.random.default_rng([seed, 7919])
    cat = category or spec.categories[int(rng.integers(len(spec.categories)))]
    if cat not in CATEGORIES:
        raise ValueError(f"unknown category {cat!r}")
    counts = _chain_counts(cat, spec, rng)
    H, L = _layout(cat, rng, spec)
    bones = _bones(cat, counts, L)
    V, F, W = _mesh_and_weights(bones, L, H, spec)
    rig = Rig(
        np.stack([b.head for b in bones]),
        [b.name for b in bones],
        W,
        parents=[b.parent for b in bones],
    )
    name = f"{cat}_{seed}"
    bundle = CharacterBundle.build(Mesh(V, F), rig, shape_cfg, name=name)
    dirs = np.stack([_unit(b.tail - b.head) for b in bones])
    return bundle, PoseSampler(bundle, [b.part for b in bones], dirs, limits)
