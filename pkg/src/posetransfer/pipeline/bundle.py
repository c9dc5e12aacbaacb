"""Per-character data handed to the networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..meshcore import Mesh, Rig
from ..shapefeat import ShapeFeatConfig, ShapeTokens, encode_shape


@dataclass(frozen=True, eq=False)
class CharacterBundle:
    """Canonical mesh, rig and tokens, optionally with one posed mesh."""

    mesh: Mesh
    rig: Rig
    tokens: ShapeTokens
    posed: Optional[Mesh] = None
    posed_tokens: Optional[ShapeTokens] = None
    name: str = ""

    def __post_init__(self):
        self.rig.check_mesh(self.mesh)
        if self.posed is not None:
            self.rig.check_mesh(self.posed)
            if self.posed_tokens is None or self.posed_tokens.shape != self.tokens.shape:
                raise ValueError("posed bundle needs posed tokens matching the canonical tokens")

    @classmethod
    def build(cls, mesh: Mesh, rig: Rig, cfg: ShapeFeatConfig = ShapeFeatConfig(), posed: Optional[Mesh] = None,
              name: str = "") -> "CharacterBundle":
        tokens = encode_shape(mesh, cfg, tag=f"{name}:canonical")
        posed_tokens = encode_shape(posed, cfg, tag=f"{name}:posed") if posed is not None else None
        return cls(mesh, rig, tokens, posed, posed_tokens, name)

    def with_pose(self, posed: Mesh, cfg: ShapeFeatConfig = ShapeFeatConfig()) -> "CharacterBundle":
        return CharacterBundle(self.mesh, self.rig, self.tokens, posed, encode_shape(posed, cfg, tag=f"{self.name}:posed"),
                               self.name)

    def canonical_only(self) -> "CharacterBundle":
        return CharacterBundle(self.mesh, self.rig, self.tokens, name=self.name)

    @property
    def n_keypoints(self) -> int:
        return self.rig.n_keypoints
