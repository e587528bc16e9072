"""Command-line front end.

Every command writes its outputs atomically and leaves a ``<output>.manifest``
JSON file next to the primary output recording the config hash, seeds,
input/output digests and library versions. Downstream commands refuse
inputs whose manifest carries a different config hash.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import typing
from pathlib import Path

import numpy as np
import scipy

from . import __version__, detector, network, pipeline
from .config import PipelineConfig, parse, render
from .detector import DistanceMap
from .synth import SyntheticCohortSpec, generate_cohort
from .volume import Volume, _atomic_write, load_volume, save_volume

log = logging.getLogger("voxoutlier")

COHORT_SPEC = "cohort.txt"
HEALTHY_GLOB = "healthy_*.vxw"


class StageError(RuntimeError):
    pass


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def manifest_path(path) -> Path:
    return Path(f"{path}.manifest")


def write_manifest(output, command: str, config_hash: str | None, seeds: dict,
                   inputs: dict[str, str | os.PathLike]) -> None:
    record = {
        "command": command,
        "config_hash": config_hash,
        "seeds": seeds,
        "inputs": {role: {"path": os.fspath(p), "sha256": _sha256(p)} for role, p in sorted(inputs.items())},
        "output": {"path": os.fspath(output), "sha256": _sha256(output)},
        "versions": {
            "voxoutlier": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    _atomic_write(manifest_path(output), (json.dumps(record, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(path) -> dict:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise StageError(f"{path} has no run manifest ({mpath})")
    with open(mpath) as fh:
        return json.load(fh)


def require_config(path, cfg: PipelineConfig) -> None:
    recorded = read_manifest(path).get("config_hash")
    if recorded != cfg.digest():
        raise StageError(
            f"config hash mismatch: {path} was produced with {recorded}, current config is {cfg.digest()}"
        )


def cohort_volumes(cohort_dir) -> list[Volume]:
    paths = sorted(Path(cohort_dir).glob(HEALTHY_GLOB))
    if not paths:
        raise StageError(f"no {HEALTHY_GLOB} volumes in {cohort_dir}")
    return [load_volume(p) for p in paths]


def _emit(stage: str):
    def on_epoch(*args):
        if len(args) == 2:
            layer, rec = args
            print(f"{stage} layer={layer} {rec}", flush=True)
        else:
            print(f"{stage} {args[0]}", flush=True)
    return on_epoch


# --- commands ---------------------------------------------------------------

def cmd_generate(args) -> None:
    spec = SyntheticCohortSpec(
        dims=tuple(args.dims), n_subjects=args.subjects, smoothness=args.smoothness,
        noise=args.noise, deformation=args.deformation, lesion_center=tuple(args.lesion_center),
        lesion_radius=args.lesion_radius, lesion_shift=args.lesion_shift, shell=args.shell,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(spec)
    for k, v in enumerate(cohort.healthy):
        save_volume(v, out / f"healthy_{k:03d}.vxw")
    save_volume(cohort.test, out / "test.vxw")
    save_volume(Volume(cohort.truth.astype(np.int32), np.ones(cohort.truth.shape, bool)),
                out / "truth.vxw", labels=True)
    _atomic_write(out / COHORT_SPEC, render(spec).encode())
    write_manifest(out / COHORT_SPEC, "generate", None, {"seed": spec.seed}, {})
    print(f"wrote {spec.n_subjects} healthy subjects, test subject and truth to {out}")


def cmd_pretrain(args, cfg: PipelineConfig) -> None:
    vols = cohort_volumes(args.cohort)
    model = pipeline.pretrain(cfg, vols, on_epoch=_emit("pretrain"))
    network.save_model(model, args.out)
    write_manifest(args.out, "pretrain", cfg.digest(), {"seed": cfg.seed},
                   {"cohort": Path(args.cohort) / COHORT_SPEC} if (Path(args.cohort) / COHORT_SPEC).exists() else {})


def cmd_finetune(args, cfg: PipelineConfig) -> None:
    require_config(args.model, cfg)
    vols = cohort_volumes(args.cohort)
    model = pipeline.finetune(cfg, network.load_model(args.model), vols, on_epoch=_emit("finetune"))
    network.save_model(model, args.out)
    write_manifest(args.out, "finetune", cfg.digest(), {"seed": cfg.seed}, {"model": args.model})


def cmd_build_bank(args, cfg: PipelineConfig) -> None:
    require_config(args.model, cfg)
    vols = cohort_volumes(args.cohort)
    bank = pipeline.build_bank(cfg, network.load_model(args.model), vols)
    detector.save_bank(bank, args.out)
    write_manifest(args.out, "build-bank", cfg.digest(), {"seed": cfg.seed}, {"model": args.model})
    print(f"bank centers={len(bank)} skipped={len(bank.skipped)} "
          f"unconverged={sum(not m.converged for m in bank.models)}")


def cmd_score(args, cfg: PipelineConfig) -> None:
    require_config(args.bank, cfg)
    require_config(args.model, cfg)
    bank = detector.load_bank(args.bank)
    model = network.load_model(args.model)
    dmap = pipeline.score(cfg, bank, model, load_volume(args.subject))
    save_volume(dmap.to_volume(), args.out)
    write_manifest(args.out, "score", cfg.digest(), {"seed": cfg.seed},
                   {"bank": args.bank, "model": args.model, "subject": args.subject})
    print(f"scored voxels={int(dmap.valid.sum())}")


def cmd_clusters(args, cfg: PipelineConfig) -> None:
    require_config(args.map, cfg)
    dmap = DistanceMap.from_volume(load_volume(args.map))
    cmap = pipeline.clusters(dmap, cfg.p_value, cfg.min_cluster_size)
    save_volume(cmap.to_volume(), args.out, labels=True)
    _atomic_write(args.report, detector.cluster_report(cmap).encode())
    write_manifest(args.out, "clusters", cfg.digest(), {"seed": cfg.seed}, {"map": args.map})
    print(detector.cluster_report(cmap), end="")


def cmd_evaluate(args) -> None:
    cmap = detector.ClusterMap.from_labels(load_volume(args.clusters).data)
    truth = load_volume(args.truth).data > 0
    report = detector.evaluate(cmap, truth)
    text = report.to_text()
    if args.out:
        _atomic_write(args.out, text.encode())
    print(text, end="")


# --- argument parsing ---------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    hints = typing.get_type_hints(PipelineConfig)
    for f in dataclasses.fields(PipelineConfig):
        p.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar="VALUE",
                       help=f"default: {render_value(f.default)} ({hints[f.name]})")


def render_value(v) -> str:
    return ",".join(map(repr, v)) if isinstance(v, tuple) else repr(v)


def resolve_config(args) -> PipelineConfig:
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    base = parse(text)
    overrides = "".join(
        f"{f.name} = {getattr(args, 'cfg_' + f.name)}\n"
        for f in dataclasses.fields(PipelineConfig)
        if getattr(args, "cfg_" + f.name) is not None
    )
    if not overrides:
        return base
    return parse(render(base) + overrides)


def _triple(kind):
    def conv(text):
        parts = [kind(t) for t in text.split(",")]
        if len(parts) != 3:
            raise argparse.ArgumentTypeError("expected three comma-separated values")
        return parts
    return conv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxoutlier", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    d = SyntheticCohortSpec()
    g.add_argument("--out", required=True)
    g.add_argument("--dims", type=_triple(int), default=list(d.dims), metavar="NX,NY,NZ")
    g.add_argument("--subjects", type=int, default=d.n_subjects)
    g.add_argument("--smoothness", type=float, default=d.smoothness)
    g.add_argument("--noise", type=float, default=d.noise)
    g.add_argument("--deformation", type=float, default=d.deformation)
    g.add_argument("--lesion-center", type=_triple(int), default=list(d.lesion_center), metavar="X,Y,Z")
    g.add_argument("--lesion-radius", type=float, default=d.lesion_radius)
    g.add_argument("--lesion-shift", type=float, default=d.lesion_shift)
    g.add_argument("--shell", type=float, default=d.shell)
    g.add_argument("--seed", type=int, default=d.seed)

    specs = {
        "pretrain": [("--cohort", "cohort directory"), ("--out", "model file to write")],
        "finetune": [("--cohort", "cohort directory"), ("--model", "pretrained model"),
                     ("--out", "model file to write")],
        "build-bank": [("--cohort", "cohort directory"), ("--model", "model file"),
                       ("--out", "bank file to write")],
        "score": [("--bank", "bank file"), ("--model", "model file"),
                  ("--subject", "volume to score"), ("--out", "distance map to write")],
        "clusters": [("--map", "distance map"), ("--out", "cluster map to write"),
                     ("--report", "cluster report to write")],
    }
    for name, opts in specs.items():
        p = sub.add_parser(name)
        for flag, help_ in opts:
            p.add_argument(flag, required=True, help=help_)
        _add_config_flags(p)

    e = sub.add_parser("evaluate", help="compare a cluster map with a truth grid")
    e.add_argument("--clusters", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out")
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "build-bank": cmd_build_bank,
    "score": cmd_score,
    "clusters": cmd_clusters,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "generate":
            cmd_generate(args)
        elif args.command == "evaluate":
            cmd_evaluate(args)
        else:
            COMMANDS[args.command](args, resolve_config(args))
    except (OSError, ValueError, ArithmeticError, StageError) as exc:
        print(f"voxoutlier {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
