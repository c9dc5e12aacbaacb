"""Command-line entry points.

Every command writes its outputs plus a report ``<command>.json`` into
``--out``. Reports hold only seed-determined content (no timings, no
absolute paths) so repeated runs with the same ``--seed`` are byte-identical.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import fisher, softmatch, so3
from .io import DataError, load_obj, load_rig, pose_to_list, save_obj, save_pose, save_rig
from .meshcore import apply_lbs, estimate_keypoint_transforms
from .nn.optim import load_checkpoint, save_checkpoint

log = logging.getLogger("posetransfer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _write_json(path: str, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True))
        fh.write("\n")


def _report(args, doc) -> str:
    path = os.path.join(args.out, f"{args.command}.json")
    _write_json(path, dict(doc, command=args.command, seed=args.seed))
    log.info("report written to %s", path)
    return path


def _config(args):
    from .pipeline.config import PipelineConfig

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _character(mesh_path, rig_path, cfg, posed_path=None, name=""):
    from .pipeline.bundle import CharacterBundle

    mesh = load_obj(mesh_path)
    rig = load_rig(rig_path, mesh.n_vertices)
    posed = None
    if posed_path:
        posed = load_obj(posed_path)
        if posed.n_vertices != mesh.n_vertices or not np.array_equal(posed.faces, mesh.faces):
            raise DataError(f"{posed_path}: posed mesh must share the canonical mesh's vertices count and faces")
    return CharacterBundle.build(mesh, rig, cfg.shape, posed, name or os.path.splitext(os.path.basename(mesh_path))[0])


def _load_net(path, kind: str, cfg):
    from .pipeline.correspondence import build_corr_net
    from .pipeline.prior import build_prior_net
    from .pipeline.stage2 import build_transfer_net
    from .pipeline.config import PipelineConfig

    try:
        state, meta = load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if meta.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    ncfg = PipelineConfig.from_dict(meta["config"]) if "config" in meta else cfg
    net = {"correspondence": build_corr_net, "prior": build_prior_net, "transfer": build_transfer_net}[kind](ncfg)
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return net


def _save_net(path, net, kind: str, cfg, extra=None) -> None:
    save_checkpoint(path, net.state_dict(), dict({"kind": kind, "config": cfg.to_dict()}, **(extra or {})))


def _plan(args, src, tgt, cfg):
    from .pipeline.correspondence import correspondence_forward, text_plan

    if getattr(args, "corr", None):
        return correspondence_forward(src, tgt, _load_net(args.corr, "correspondence", cfg)).plan, "network"
    return text_plan(src.rig.names, tgt.rig.names), "labels"


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


# ---------------------------------------------------------------- commands

def cmd_gen_synth(args, cfg):
    from .evalbench.synth import generate_synthetic_character

    files = []
    for i in range(args.n):
        b, smp = generate_synthetic_character(cfg.seed * 1000 + i, cfg.synth, cfg.shape, args.category, cfg.limits)
        save_obj(os.path.join(args.out, f"{b.name}.obj"), b.mesh)
        save_rig(os.path.join(args.out, f"{b.name}.rig.json"), b.rig)
        rng = np.random.default_rng([cfg.seed, i, 17])
        poses = []
        for p in range(args.poses):
            T = smp.sample(rng)
            save_pose(os.path.join(args.out, f"{b.name}_pose{p}.json"), T)
            save_obj(os.path.join(args.out, f"{b.name}_pose{p}.obj"), smp.pose_mesh(T))
            poses.append(f"{b.name}_pose{p}")
        files.append({"name": b.name, "n_keypoints": b.n_keypoints, "n_vertices": b.mesh.n_vertices,
                      "n_faces": int(b.mesh.faces.shape[0]), "poses": poses})
    _report(args, {"characters": files})


def cmd_estimate(args, cfg):
    mesh = load_obj(args.mesh)
    rig = load_rig(args.rig, mesh.n_vertices)
    posed = load_obj(args.posed)
    try:
        T = estimate_keypoint_transforms(mesh, posed, rig)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_pose(os.path.join(args.out, "pose.json"), T)
    recon = apply_lbs(mesh, rig, T)
    err = float(np.max(np.linalg.norm(recon.vertices - posed.vertices, axis=1)))
    _report(args, {"pose": pose_to_list(T), "degenerate": list(T.degenerate), "max_vertex_error": err})


def cmd_correspond(args, cfg):
    src = _character(args.src_mesh, args.src_rig, cfg)
    tgt = _character(args.tgt_mesh, args.tgt_rig, cfg)
    plan, source = _plan(args, src, tgt, cfg)
    pairs = softmatch.hungarian(plan)
    with open(os.path.join(args.out, "plan.csv"), "w", encoding="utf-8") as fh:
        fh.write("source," + ",".join(tgt.rig.names) + "\n")
        for name, row in zip(src.rig.names, plan):
            fh.write(name + "," + ",".join(repr(float(x)) for x in row) + "\n")
    _report(args, {"plan_source": source, "plan": _floats(plan),
                   "matches": [[src.rig.names[i], tgt.rig.names[j]] for i, j in pairs]})


def cmd_transfer(args, cfg):
    from .pipeline.transfer import infer

    src = _character(args.src_mesh, args.src_rig, cfg, args.src_posed)
    tgt = _character(args.tgt_mesh, args.tgt_rig, cfg)
    plan, source = _plan(args, src, tgt, cfg)
    net = None
    if args.transfer:
        net = _load_net(args.transfer, "transfer", cfg)
    elif not args.init_only:
        log.info("no transfer checkpoint given; using the initialization only")
    res = infer(src, tgt, None, net, refine=args.arap, arap_cfg=cfg.arap, init_only=args.init_only or net is None,
                plan=plan)
    save_obj(os.path.join(args.out, "transferred.obj"), res.mesh)
    save_pose(os.path.join(args.out, "transferred_pose.json"), res.transforms)
    doc = {"plan_source": source, "init_only": bool(args.init_only or net is None), "arap": bool(args.arap),
           "pose": pose_to_list(res.transforms)}
    if args.arap:
        doc["arap_energy"] = _floats(res.diagnostics["arap_energy"])
    _report(args, doc)


def cmd_train_corr(args, cfg):
    from .pipeline.correspondence import match_accuracy, stage1_train, synthetic_pairs

    c1 = cfg.stage1
    n_train = args.n_train or c1.n_train
    train = synthetic_pairs(cfg, n_train, 0, c1.n_characters, self_fraction=c1.self_pair_fraction, seed=cfg.seed)
    val = synthetic_pairs(cfg, c1.n_val, 100_000, max(2, c1.n_characters // 4), self_fraction=0.0, seed=cfg.seed + 1)
    net, tlog = stage1_train(train, cfg, val, epochs=args.epochs, eval_every=args.eval_every)
    acc = match_accuracy(net, val)
    _save_net(os.path.join(args.out, "corr.ckpt.json"), net, "correspondence", cfg, {"val_accuracy": acc})
    _report(args, {"n_train": n_train, "n_val": len(val), "val_accuracy": acc, "val_accuracy_curve": tlog.val_accuracy,
                   "final_train_loss": tlog.train_loss[-1], "skipped_steps": tlog.skipped_steps})


def cmd_train_prior(args, cfg):
    from .pipeline.prior import mode_errors, prior_dataset, prior_train

    pc = cfg.prior
    n_chars = args.n_characters or pc.n_characters
    train = prior_dataset(cfg, n_chars, pc.poses_per_character, 200_000, seed=cfg.seed)
    val = prior_dataset(cfg, max(2, n_chars // 6), 4, 300_000, seed=cfg.seed + 1)
    net, plog = prior_train(train, cfg, epochs=args.epochs)
    err = mode_errors(net, val)
    _save_net(os.path.join(args.out, "prior.ckpt.json"), net, "prior", cfg)
    _report(args, {"n_train": len(train), "final_nll": plog.nll[-1], "val_median_mode_error_deg": float(np.median(err)),
                   "val_fraction_within_15deg": float(np.mean(err < 15.0)), "skipped_steps": plog.skipped_steps})


def cmd_train_transfer(args, cfg):
    from .pipeline.stage2 import cycle_pairs, stage2_train

    if not args.corr:
        raise UsageError("train-transfer needs --corr (a trained correspondence checkpoint)")
    corr = _load_net(args.corr, "correspondence", cfg)
    prior = _load_net(args.prior, "prior", cfg) if args.prior else None
    if prior is None and cfg.stage2.use_prior:
        log.info("no prior checkpoint given; training without the prior term")
    c2 = cfg.stage2
    n_pairs = args.n_pairs or c2.n_pairs
    pairs = cycle_pairs(cfg, corr, n_pairs, min(c2.n_characters, max(2, n_pairs)), 400_000, c2.self_pair_fraction,
                        cfg.seed)
    net, slog = stage2_train(pairs, corr, prior, cfg, epochs=args.epochs)
    _save_net(os.path.join(args.out, "transfer.ckpt.json"), net, "transfer", cfg)
    _report(args, {"n_pairs": n_pairs, "rec_initial": slog.rec_initial, "rec_final": slog.rec_final,
                   "rec_reduction": 1.0 - slog.rec_final / slog.rec_initial, "skipped_steps": slog.skipped_steps})


def cmd_eval_cycle(args, cfg):
    from .evalbench.benchmark import run_cycle_benchmark, toy_suite
    from .pipeline.correspondence import text_plan

    cases = toy_suite(args.n_characters, args.poses, cfg.seed, cfg.synth, cfg.shape, cfg.limits)
    corr = _load_net(args.corr, "correspondence", cfg) if args.corr else None
    net = _load_net(args.transfer, "transfer", cfg) if args.transfer else None
    if corr is None:
        for c in cases:
            c.plan = text_plan(c.src.rig.names, c.tgt.rig.names)
            c.return_plan = text_plan(c.tgt.rig.names, c.src.rig.names)
    report = run_cycle_benchmark(cases, corr, net, init_only=args.init_only or net is None, refine=args.arap,
                                 arap_cfg=cfg.arap, shape_cfg=cfg.shape,
                                 dump_dir=os.path.join(args.out, "meshes") if args.dump else None)
    doc = report.to_dict()
    doc.update(plan_source="network" if corr else "labels", init_only=bool(args.init_only or net is None),
               arap=bool(args.arap))
    _report(args, doc)
    print(report.to_table())
    if report.n_failed == len(report.cases):
        raise FloatingPointError("every benchmark case failed")


def cmd_sample_prior(args, cfg):
    from .pipeline.prior import prior_for_pose

    net = _load_net(args.prior, "prior", cfg)
    b = _character(args.mesh, args.rig, cfg, args.posed)
    F = prior_for_pose(net, b)
    out = []
    for k, name in enumerate(b.rig.names):
        R = fisher.sample(F[k], args.n, seed=cfg.seed * 1009 + k)
        out.append({"keypoint": name, "mode": _floats(so3.quat_from_matrix(fisher.mode(F[k]))),
                    "samples": _floats(so3.quat_from_matrix(R))})
    _report(args, {"keypoints": out})


def cmd_grad_check(args, cfg):
    from .pipeline.diagnostics import gradient_suite

    report = gradient_suite(cfg.seed, args.probes)
    failed = sorted(k for k, v in report.items() if not v["passed"])
    _report(args, {"checks": report, "failed": failed})
    for k, v in sorted(report.items()):
        print(f"{'PASS' if v['passed'] else 'FAIL'} {k} max_rel_error={v['max_rel_error']:.3e}")
    if failed:
        raise FloatingPointError(f"{len(failed)} gradient checks failed")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    def globals_(suppress: bool):
        # global flags are accepted before or after the subcommand; the copy on
        # subcommands must not overwrite values given before it
        g = _Parser(add_help=False)
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g.add_argument("--config", help="pipeline config JSON", **kw)
        g.add_argument("--seed", type=int, help="overrides the config seed", **kw)
        g.add_argument("--out", help="output directory (created if missing)", **(kw or {"default": "."}))
        g.add_argument("--verbose", action="store_true", **kw)
        return g

    common = globals_(True)
    p = _Parser(prog="posetransfer", description="Keypoint-driven pose transfer between rigged meshes.",
                parents=[globals_(False)])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-synth", cmd_gen_synth, "write synthetic characters, rigs and poses")
    sp.add_argument("--n", type=int, default=2)
    sp.add_argument("--poses", type=int, default=2)
    sp.add_argument("--category", choices=["humanoid", "bird", "quadruped"])

    sp = add("estimate", cmd_estimate, "per-keypoint transforms from canonical + posed OBJ and a rig")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--posed", required=True)

    for name, fn, help_ in (("correspond", cmd_correspond, "keypoint correspondence plan and heat-map CSV"),
                            ("transfer", cmd_transfer, "transfer a posed source onto a target character")):
        sp = add(name, fn, help_)
        sp.add_argument("--src-mesh", required=True)
        sp.add_argument("--src-rig", required=True)
        sp.add_argument("--tgt-mesh", required=True)
        sp.add_argument("--tgt-rig", required=True)
        sp.add_argument("--corr", help="correspondence checkpoint (default: label-similarity plan)")
        if name == "transfer":
            sp.add_argument("--src-posed", required=True)
            sp.add_argument("--transfer", help="transfer-network checkpoint")
            sp.add_argument("--init-only", action="store_true")
            sp.add_argument("--arap", action="store_true", help="ARAP refinement of the result")

    sp = add("train-corr", cmd_train_corr, "train the correspondence network on synthetic pairs")
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--eval-every", type=int, default=5)

    sp = add("train-prior", cmd_train_prior, "train the matrix-Fisher pose prior")
    sp.add_argument("--n-characters", type=int)
    sp.add_argument("--epochs", type=int)

    sp = add("train-transfer", cmd_train_transfer, "cycle-train the transfer network")
    sp.add_argument("--corr", help="correspondence checkpoint (required)")
    sp.add_argument("--prior", help="prior checkpoint")
    sp.add_argument("--n-pairs", type=int)
    sp.add_argument("--epochs", type=int)

    sp = add("eval-cycle", cmd_eval_cycle, "round-trip benchmark on the toy suite")
    sp.add_argument("--corr")
    sp.add_argument("--transfer")
    sp.add_argument("--init-only", action="store_true")
    sp.add_argument("--arap", action="store_true")
    sp.add_argument("--n-characters", type=int, default=4)
    sp.add_argument("--poses", type=int, default=2)
    sp.add_argument("--dump", action="store_true", help="also write target and cycled meshes")

    sp = add("sample-prior", cmd_sample_prior, "draw rotations from a trained prior")
    sp.add_argument("--prior", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--posed", required=True)
    sp.add_argument("--n", type=int, default=8)

    sp = add("grad-check", cmd_grad_check, "finite-difference gradient suite")
    sp.add_argument("--probes", type=int, default=20)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(f"posetransfer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        os.makedirs(args.out, exist_ok=True)
        cfg = _config(args)
        args.seed = cfg.seed
        t0 = time.perf_counter()
        args.fn(args, cfg)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except UsageError as exc:
        print(f"posetransfer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"posetransfer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError, fisher.ConcentrationError) as exc:
        print(f"posetransfer: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"posetransfer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
