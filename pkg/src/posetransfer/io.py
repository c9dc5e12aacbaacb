"""File formats: Wavefront OBJ (v/f subset), rig JSON, pose JSON."""
from __future__ import annotations

import json
import logging
from typing import List

import numpy as np

from .meshcore import Mesh, PoseTransforms, Rig

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent input file."""


def _obj_index(tok: str, n_vertices: int, path, lineno: int) -> int:
    try:
        idx = int(tok.split("/")[0])
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad face index {tok!r}") from None
    if idx > 0:
        i = idx - 1
    elif idx < 0:
        i = n_vertices + idx
    else:
        raise DataError(f"{path}:{lineno}: face index 0 is invalid (OBJ is 1-based)")
    if not 0 <= i < n_vertices:
        raise DataError(f"{path}:{lineno}: face index {idx} out of range for {n_vertices} vertices")
    return i


def load_obj(path) -> Mesh:
    """Vertices and faces; polygons are fan-triangulated; other records are ignored."""
    verts: List[List[float]] = []
    faces: List[tuple] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise DataError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise DataError(f"{path}:{lineno}: face needs at least 3 vertices")
                idx = [_obj_index(t, len(verts), path, lineno) for t in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise DataError(f"{path}: no vertices")
    try:
        return Mesh(np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_obj(path, mesh: Mesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices.tolist():
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def rig_to_dict(rig: Rig) -> dict:
    parents = rig.parents or (-1,) * rig.n_keypoints
    return {
        "keypoints": [
            {"name": n, "position": [float(x) for x in c], "parent": int(p)}
            for n, c, p in zip(rig.names, rig.keypoints, parents)
        ],
        "skin_weights": [[[k, w] for k, w in row] for row in rig.sparse_weights()],
    }


def rig_from_dict(doc: dict, n_vertices: int = None, source="rig") -> Rig:
    try:
        kps = doc["keypoints"]
        rows = doc["skin_weights"]
        names = [str(k["name"]) for k in kps]
        pos = np.asarray([k["position"] for k in kps], dtype=np.float64)
        parents = [int(k.get("parent", -1)) for k in kps]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{source}: malformed rig document ({exc})") from exc
    K = len(kps)
    if K == 0:
        raise DataError(f"{source}: rig has no keypoints")
    if pos.shape != (K, 3):
        raise DataError(f"{source}: keypoint positions must be 3D")
    if n_vertices is not None and len(rows) != n_vertices:
        raise DataError(f"{source}: {len(rows)} skin-weight rows for a mesh with {n_vertices} vertices")
    W = np.zeros((len(rows), K))
    for i, row in enumerate(rows):
        for pair in row:
            k, w = int(pair[0]), float(pair[1])
            if not 0 <= k < K:
                raise DataError(f"{source}: vertex {i} references keypoint {k}, valid range is 0..{K - 1}")
            if w < 0:
                raise DataError(f"{source}: vertex {i} has a negative weight")
            W[i, k] += w
    sums = W.sum(axis=1)
    if np.any(sums <= 0):
        raise DataError(f"{source}: vertex {int(np.argmin(sums))} has no skin weight")
    if np.max(np.abs(sums - 1.0)) > 1e-4:
        log.warning("%s: skin weights do not sum to 1; renormalizing", source)
    W /= sums[:, None]
    if any(p < -1 or p >= K for p in parents):
        raise DataError(f"{source}: parent index out of range")
    return Rig(pos, names, W, parents)


def load_rig(path, n_vertices: int = None) -> Rig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return rig_from_dict(doc, n_vertices, str(path))


def save_rig(path, rig: Rig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rig_to_dict(rig), fh, indent=1)


def pose_to_list(pose: PoseTransforms) -> list:
    return [
        {"quaternion": [float(x) for x in q], "translation": [float(x) for x in t]}
        for q, t in zip(pose.rotations, pose.translations)
    ]


def pose_from_list(doc, n_keypoints: int = None, source="pose") -> PoseTransforms:
    try:
        q = np.asarray([r["quaternion"] for r in doc], dtype=np.float64)
        t = np.asarray([r["translation"] for r in doc], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{source}: malformed pose document ({exc})") from exc
    if q.ndim != 2 or q.shape[1] != 4 or t.shape != (q.shape[0], 3):
        raise DataError(f"{source}: each entry needs a 4-vector quaternion and a 3-vector translation")
    if n_keypoints is not None and q.shape[0] != n_keypoints:
        raise DataError(f"{source}: {q.shape[0]} transforms for a rig with {n_keypoints} keypoints")
    n = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DataError(f"{source}: zero quaternion")
    return PoseTransforms(q / n, t)


def load_pose(path, n_keypoints: int = None) -> PoseTransforms:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return pose_from_list(doc, n_keypoints, str(path))


def save_pose(path, pose: PoseTransforms) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pose_to_list(pose), fh, indent=1)
