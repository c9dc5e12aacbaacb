"""Round-trip (source -> target -> source) benchmark and its report."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..meshcore import PoseTransforms, apply_lbs
from ..pipeline.bundle import CharacterBundle
from ..pipeline.transfer import infer
from ..shapefeat import ShapeFeatConfig
from .metrics import els, pmd
from .synth import JointLimits, SynthSpec, generate_synthetic_character

TOY_SEED_OFFSET = 10_000_000


@dataclass
class BenchmarkCase:
    src: CharacterBundle
    tgt: CharacterBundle
    poses: List[PoseTransforms]
    name: str = ""
    plan: Optional[np.ndarray] = None  # overrides the learned correspondence when given
    return_plan: Optional[np.ndarray] = None

    @property
    def is_self(self) -> bool:
        return self.src is self.tgt or self.src.name == self.tgt.name and bool(self.src.name)


@dataclass
class MetricReport:
    pmd: float
    els: float
    self_pmd: Optional[float]
    self_els: Optional[float]
    target_els: Optional[float] = None
    cases: List[Dict] = field(default_factory=list)
    runtime: float = 0.0
    n_failed: int = 0

    def to_dict(self, include_runtime: bool = False) -> Dict:
        d = {
            "pmd": self.pmd,
            "els": self.els,
            "self_pmd": self.self_pmd,
            "self_els": self.self_els,
            "target_els": self.target_els,
            "n_cases": len(self.cases),
            "n_failed": self.n_failed,
            "cases": self.cases,
        }
        if include_runtime:
            d["runtime_seconds"] = self.runtime
        return d

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [("case", "pose", "pmd_x100", "els", "status")]
        for c in self.cases:
            rows.append((c["case"], str(c["pose"]), _fmt(c.get("pmd")), _fmt(c.get("els")), c["status"]))
        rows.append(("MEAN", "", _fmt(self.pmd), _fmt(self.els), f"{self.n_failed} failed"))
        if self.self_pmd is not None:
            rows.append(("SELF", "", _fmt(self.self_pmd), _fmt(self.self_els), ""))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows)


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.6f}"


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def run_cycle_benchmark(
    cases: Sequence[BenchmarkCase],
    corr_net=None,
    transfer_net=None,
    init_only: bool = False,
    refine: bool = False,
    arap_cfg=None,
    shape_cfg: ShapeFeatConfig = ShapeFeatConfig(),
    dump_dir: Optional[str] = None,
) -> MetricReport:
    """Transfer each pose to the target and back, scoring the cycled source.

    Self cases (source character = target character) also record the
    single-pass PMD/ELS of the transferred mesh against the posed source.
    Failed cases are recorded with their error and excluded from the means.
    """
    t0 = time.perf_counter()
    records = []
    for case in cases:
        for p, pose in enumerate(case.poses):
            rec = {"case": case.name, "pose": p, "self": case.is_self}
            try:
                posed = apply_lbs(case.src.mesh, case.src.rig, pose)
                src = case.src.with_pose(posed, shape_cfg)
                fwd = infer(src, case.tgt, corr_net, transfer_net, refine, arap_cfg, init_only, case.plan)
                mid = case.tgt.with_pose(fwd.mesh, shape_cfg)
                back = infer(mid, case.src, corr_net, transfer_net, refine, arap_cfg, init_only, case.return_plan)
                rec["pmd"] = pmd(back.mesh, posed)
                rec["els"] = els(back.mesh, posed)
                rec["target_els"] = els(fwd.mesh, case.tgt.mesh)  # distortion of the transfer vs. the rest shape
                if case.is_self:
                    rec["self_pmd"] = pmd(fwd.mesh, posed)
                    rec["self_els"] = els(fwd.mesh, posed)
                if not (np.isfinite(rec["pmd"]) and np.isfinite(rec["els"])):
                    raise FloatingPointError("non-finite metric")
                rec["status"] = "ok"
                if dump_dir:
                    from ..io import save_obj

                    os.makedirs(dump_dir, exist_ok=True)
                    stem = os.path.join(dump_dir, f"{case.name}_pose{p}")
                    save_obj(stem + "_target.obj", fwd.mesh)
                    save_obj(stem + "_cycled.obj", back.mesh)
            except Exception as exc:  # noqa: BLE001 - failures are reported per case
                rec["status"] = f"failed: {type(exc).__name__}: {exc}"
                rec.pop("pmd", None)
                rec.pop("els", None)
                rec.pop("target_els", None)
            records.append(rec)
    ok = [r for r in records if r["status"] == "ok"]
    report = MetricReport(
        pmd=_mean([r["pmd"] for r in ok]),
        els=_mean([r["els"] for r in ok]),
        self_pmd=_mean([r.get("self_pmd") for r in ok]),
        self_els=_mean([r.get("self_els") for r in ok]),
        target_els=_mean([r["target_els"] for r in ok]),
        cases=records,
        n_failed=len(records) - len(ok),
    )
    report.runtime = time.perf_counter() - t0
    return report


def toy_suite(
    n_characters: int = 6,
    poses_per_case: int = 2,
    seed: int = 0,
    spec: SynthSpec = SynthSpec(),
    shape_cfg: ShapeFeatConfig = ShapeFeatConfig(),
    limits: JointLimits = JointLimits(),
    cross: bool = True,
) -> List[BenchmarkCase]:
    """Held-out characters: one self case each plus neighbouring cross pairs in both directions."""
    chars: List[Tuple[CharacterBundle, object]] = [
        generate_synthetic_character(TOY_SEED_OFFSET + seed * 1000 + i, spec, shape_cfg, limits=limits)
        for i in range(n_characters)
    ]
    rng = np.random.default_rng([seed, 4242])
    cases = []
    for i, (b, smp) in enumerate(chars):
        cases.append(BenchmarkCase(b, b, [smp.sample(rng) for _ in range(poses_per_case)], f"self_{b.name}"))
    if cross and n_characters > 1:
        for i in range(n_characters):
            a, sa = chars[i]
            b, sb = chars[(i + 1) % n_characters]
            cases.append(BenchmarkCase(a, b, [sa.sample(rng) for _ in range(poses_per_case)], f"{a.name}_to_{b.name}"))
    return cases


def identity_plan(k: int) -> np.ndarray:
    return np.eye(k) / k
