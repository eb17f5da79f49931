"""Command-line entry point: ``totem <command> ...``.

Commands: synth, pretrain, train, track, eval, gradcheck, ablate. Every
command that draws random numbers takes an explicit ``--seed``; outputs
are byte-identical for identical inputs and seed. Each run ends by
atomically writing ``manifest.json`` next to its outputs (the manifest is
the only file carrying timestamps).
"""

from __future__ import annotations

import os

# BLAS threading must be capped before numpy is imported anywhere
_THREADS = os.environ.get("TOTEM_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import dataclasses
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck, metrics
from . import synthdata as sd
from . import training as tr
from .fusion import FusionConfig
from .rng import derive_seed
from .tracker import Predictor, PredictorConfig

log = logging.getLogger("totem")

SYNTH_PRESETS = {
    "transparent": sd.SynthConfig.transparent,
    "opaque": sd.SynthConfig.opaque,
    "reference": sd.SynthConfig.reference,
    "ablation": sd.SynthConfig.ablation,
}
MODES = {"one_step": "one_step", "two_step": "two_step", "finetune": "two_step_plus_finetune"}
ROW_NAMES = {
    "totem": "TOTEM",
    "totem_t": "TOTEM-T",
    "ffn_fuse": "TOTEM-FFNFuse",
    "no_query": "TOTEM-e_query",
    "no_phi": "TOTEM-φ",
}
SYNTH_CFG_FILE = "synth.cfg"
PREDICTOR_FILE = "predictor.ckpt"


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# run manifest


def version_string() -> str:
    try:
        from importlib.metadata import version

        base = version("artifact")
    except Exception:
        base = "0+unknown"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    config: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    version: str = ""
    started: float = 0.0
    duration_s: float = 0.0

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, default=str) + "\n")
        os.replace(tmp, path)
        return path


# --------------------------------------------------------------------------
# helpers


def _read_config(cls, path: str | None, base):
    if path is None:
        return base
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {p} not found")
    return tr.parse_config(cls, p.read_text(), str(p), base)


def _synth_to_text(cfg: sd.SynthConfig) -> str:
    def fmt(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

    return "".join(f"{k}={fmt(v)}\n" for k, v in dataclasses.asdict(cfg).items())


def _load_dataset(path: str) -> tuple[sd.Dataset, sd.SynthConfig]:
    root = Path(path)
    if not (root / "split.txt").exists():
        raise CliError(f"dataset {root} not found (no split.txt); create one with 'totem synth'")
    ds = sd.import_dataset(root)
    cfg_file = root / SYNTH_CFG_FILE
    if cfg_file.exists():
        cfg = tr.parse_config(sd.SynthConfig, cfg_file.read_text(), str(cfg_file))
    else:
        T, h, w, c = ds.sequences[0].x.shape
        cfg = sd.SynthConfig(h=h, w=w, c=c, frames_per_sequence=T)
    return ds, cfg


def _predictor_cfg(scfg: sd.SynthConfig) -> PredictorConfig:
    return PredictorConfig(channels=scfg.c, num_heads=2)


def _load_predictor(path: str, scfg: sd.SynthConfig) -> Predictor:
    ck = tr.Checkpoint.load(path)
    pcfg = PredictorConfig(**ck.model_config["predictor"])
    if pcfg.channels != scfg.c:
        raise CliError(f"predictor {path} has {pcfg.channels} channels, dataset has {scfg.c}")
    pred = Predictor(pcfg)
    for n, p in pred.params.items():
        p.value[...] = ck.params[n]
    return pred


def _fusion_cfg(variant: str, scfg: sd.SynthConfig) -> FusionConfig:
    base = FusionConfig.reference() if scfg.c == 256 else FusionConfig(channels=scfg.c)
    return tr.variant_fusion_config(variant, scfg.c, base)


def _metrics_row(m: metrics.TrackerMetrics) -> tuple[float, float, float]:
    return m.suc_auc, m.pre_auc, m.npre_auc


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> list[str]:
    base = SYNTH_PRESETS[args.preset](seed=args.seed)
    cfg = _read_config(sd.SynthConfig, args.config, base)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    ds = sd.generate(cfg)
    root = sd.export_dataset(ds, args.out)
    (root / SYNTH_CFG_FILE).write_text(_synth_to_text(cfg))
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test sequences to {root}")
    args._config = dataclasses.asdict(cfg)
    return [str(root)]


def cmd_pretrain(args) -> list[str]:
    _, scfg = _load_dataset(args.dataset)
    tcfg = dataclasses.replace(_read_config(tr.TrainConfig, args.config, tr.TrainConfig()), seed=args.seed)
    pcfg = _predictor_cfg(scfg)
    pred = tr.pretrained_predictor(scfg, tcfg, args.seed, pcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = tr.model_config("predictor", None, pcfg, (scfg.h, scfg.w))
    path = tr.make_checkpoint(tr.TrackerModel(pred), mcfg).save(out / PREDICTOR_FILE)
    args._config = {"train": dataclasses.asdict(tcfg), "predictor": dataclasses.asdict(pcfg)}
    return [str(path)]


def cmd_train(args) -> list[str]:
    ds, scfg = _load_dataset(args.dataset)
    mode = MODES[args.mode]
    tcfg = _read_config(tr.TrainConfig, args.config, tr.TrainConfig())
    tcfg = dataclasses.replace(tcfg, seed=args.seed, step_mode=mode)
    fcfg = _fusion_cfg(args.variant, scfg)
    if fcfg.ffn_fuse_mode and mode != "one_step":
        raise CliError("--variant ffn_fuse supports only --mode one_step: two-step training is defined "
                       "for the transformer fusion, whose step 1 runs on transparency features alone")
    if args.predictor:
        pred = _load_predictor(args.predictor, scfg)
    else:
        pred = tr.pretrained_predictor(scfg, tcfg, args.seed, _predictor_cfg(scfg))
    model = tr.attach_fusion(pred, fcfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = tr.model_config(args.variant, fcfg, pred.cfg, (scfg.h, scfg.w))
    res = tr.train(model, ds.train, tcfg, ds.test, mcfg, out)
    res.log.write(out / "loss.csv")
    paths = [str(res.checkpoint.save(out / "model.ckpt")), str(out / "loss.csv")]
    for stage, ck in res.stages.items():
        paths.append(str(ck.save(out / f"{stage}.ckpt")))
    print(f"held-out loss {res.heldout_initial:.4f} -> {res.heldout_final:.4f} after {res.steps} steps")
    args._config = {"train": dataclasses.asdict(tcfg), "model": mcfg}
    return paths


def cmd_track(args) -> list[str]:
    try:
        ck = tr.Checkpoint.load(args.checkpoint)
    except ValueError as exc:
        raise CliError(f"{exc}; the checkpoint does not match its recorded configuration, retrain the model") from exc
    ds, scfg = _load_dataset(args.dataset)
    grid = tuple(ck.model_config.get("grid", ()))
    c = ck.model_config["predictor"]["channels"]
    if grid != (scfg.h, scfg.w) or c != scfg.c:
        raise CliError(
            f"checkpoint config (hash {ck.config_hash}, grid {grid}, c={c}) does not match dataset "
            f"({scfg.h}x{scfg.w}, c={scfg.c}); retrain the model for this dataset"
        )
    model = tr.model_from_checkpoint(ck)
    seqs = ds.split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in tr.track_dataset(model, seqs):
        p = out / f"{r.name}.txt"
        metrics.write_annotation_file(p, r.pred)
        paths.append(str(p))
    args._config = {"checkpoint_hash": ck.config_hash, "split": args.split}
    return paths


def _parse_named(items: Sequence[str]) -> dict[str, Path]:
    out = {}
    for item in items:
        if "=" not in item:
            raise CliError(f"--pred-dirs expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = Path(path)
    return out


def cmd_eval(args) -> list[str]:
    gt_root = Path(args.gt_dir)
    if not (gt_root / "split.txt").exists():
        raise CliError(f"ground-truth directory {gt_root} has no split.txt")
    ids = [sid for split, sid in sd.load_split(gt_root / "split.txt") if args.split in (split, "all")]
    trackers = {}
    for name, pdir in _parse_named(args.pred_dirs).items():
        results = []
        for sid in ids:
            pfile = pdir / f"{sid}.txt"
            if not pfile.exists():
                raise CliError(f"tracker {name}: no predictions for sequence {sid} ({pfile})")
            gt = metrics.parse_annotation_file(gt_root / sid / "groundtruth.txt")
            attrs = tuple(metrics.parse_attribute_file(gt_root / sid / "attributes.txt"))
            pred = metrics.parse_annotation_file(pfile)
            if len(pred) != len(gt):
                raise CliError(f"tracker {name}: sequence {sid} has {len(pred)} predicted frames, ground truth has {len(gt)}")
            results.append(metrics.SequenceResult(sid, gt, pred, attrs))
        trackers[name] = results
    report = metrics.attribute_report(trackers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report_json(report, out / "report.json")
    metrics.write_curves_csv(report, out / "curves.csv")
    (out / "attributes.txt").write_text(report.table() + "\n")
    print(report.table())
    args._config = {"split": args.split, "trackers": sorted(trackers)}
    return [str(out / f) for f in ("report.json", "curves.csv", "attributes.txt")]


def cmd_gradcheck(args) -> list[str]:
    t0 = time.perf_counter()
    results = gradcheck.run(args.scope, args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    args._config = {"scope": args.scope, "tolerance": gradcheck.TOLERANCE, "step": gradcheck.STEP}
    if failed:
        args._exit = 1
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
    return []


# --------------------------------------------------------------------------
# ablations

ABLATION_ROWS = ("TOTEM", "TOTEM-T", "TOTEM-FFNFuse", "TOTEM-e_query", "TOTEM-φ", "one_step", "two_step", "finetune")
# (name, lhs, rhs, strict)
ABLATION_CHECKS = (
    ("transparency_features", "TOTEM", "TOTEM-T", True),
    ("two_step_over_one_step", "two_step", "one_step", True),
    ("finetune_over_two_step", "finetune", "two_step", False),
    ("transformer_over_ffnfuse", "TOTEM", "TOTEM-FFNFuse", True),
    ("projection_mlp", "TOTEM", "TOTEM-φ", True),
)


@dataclass
class AblationResult:
    seeds: list[int]
    scores: dict[str, list[tuple[float, float, float]]]  # row -> per-seed (SUC, PRE, NPRE)
    heldout: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def mean(self, row: str, k: int = 0) -> float:
        return float(np.mean([s[k] for s in self.scores[row]]))

    def checks(self) -> list[dict]:
        out = []
        for name, lhs, rhs, strict in ABLATION_CHECKS:
            for i, seed in enumerate(self.seeds):
                a, b = self.scores[lhs][i][0], self.scores[rhs][i][0]
                out.append({"check": name, "seed": str(seed), "lhs": lhs, "rhs": rhs, "lhs_suc": a, "rhs_suc": b,
                            "passed": a > b if strict else a >= b})
            a, b = self.mean(lhs), self.mean(rhs)
            out.append({"check": name, "seed": "mean", "lhs": lhs, "rhs": rhs, "lhs_suc": a, "rhs_suc": b,
                        "passed": a > b if strict else a >= b})
        return out

    def write(self, out: Path) -> list[Path]:
        checks = self.checks()
        failing: dict[str, list[str]] = {}
        for c in checks:
            if not c["passed"]:
                for row in (c["lhs"], c["rhs"]):
                    failing.setdefault(row, []).append(f"{c['check']}@{c['seed']}")
        p1 = out / "ablation.csv"
        with open(p1, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "SUC", "PE", "NPE"] + [f"SUC_seed{s}" for s in self.seeds] + ["flags"])
            for row in ABLATION_ROWS:
                w.writerow([row] + [repr(self.mean(row, k)) for k in range(3)]
                           + [repr(s[0]) for s in self.scores[row]] + [";".join(failing.get(row, []))])
        p2 = out / "checks.csv"
        with open(p2, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "seed", "lhs", "rhs", "lhs_suc", "rhs_suc", "passed"])
            for c in checks:
                w.writerow([c["check"], c["seed"], c["lhs"], c["rhs"], repr(c["lhs_suc"]), repr(c["rhs_suc"]),
                            "yes" if c["passed"] else "no"])
        return [p1, p2]


def run_ablation(
    ds: sd.Dataset, scfg: sd.SynthConfig, tcfg: tr.TrainConfig, seeds: Sequence[int], pred: Predictor
) -> AblationResult:
    """Train and evaluate every ablation row for each seed.

    All rows start from the same pretrained predictor. Variant rows are
    trained with the one-step schedule so they differ from TOTEM in
    architecture only; the schedule rows vary the schedule for the full
    model. two_step is the intermediate stage of the finetune run.
    """
    res = AblationResult(list(seeds), {r: [] for r in ABLATION_ROWS}, {r: [] for r in ABLATION_ROWS})
    pcfg = pred.cfg
    for seed in seeds:
        cfg = dataclasses.replace(tcfg, seed=seed)
        for variant in ("totem", "totem_t", "ffn_fuse", "no_query", "no_phi"):
            model = tr.attach_fusion(pred, _fusion_cfg(variant, scfg), seed)
            out = tr.train(model, ds.train, dataclasses.replace(cfg, step_mode="one_step"), ds.test)
            m = tr.evaluate_tracker(out.model, ds.test)
            res.scores[ROW_NAMES[variant]].append(_metrics_row(m))
            res.heldout[ROW_NAMES[variant]].append((out.heldout_initial, out.heldout_final))
            log.info("seed %d %s: SUC=%.4f", seed, ROW_NAMES[variant], m.suc_auc)
        res.scores["one_step"].append(res.scores["TOTEM"][-1])
        res.heldout["one_step"].append(res.heldout["TOTEM"][-1])
        fcfg = _fusion_cfg("totem", scfg)
        mcfg = tr.model_config("totem", fcfg, pcfg, (scfg.h, scfg.w))
        model = tr.attach_fusion(pred, fcfg, seed)
        out = tr.train(model, ds.train, dataclasses.replace(cfg, step_mode="two_step_plus_finetune"), ds.test, mcfg)
        two = tr.model_from_checkpoint(out.stages["two_step"])
        for row, mdl in (("two_step", two), ("finetune", out.model)):
            m = tr.evaluate_tracker(mdl, ds.test)
            res.scores[row].append(_metrics_row(m))
            log.info("seed %d %s: SUC=%.4f", seed, row, m.suc_auc)
        res.heldout["finetune"].append((out.heldout_initial, out.heldout_final))
        res.heldout["two_step"].append((out.heldout_initial, float("nan")))
    return res


def cmd_ablate(args) -> list[str]:
    ds, scfg = _load_dataset(args.dataset)
    tcfg = _read_config(tr.TrainConfig, args.config, tr.TrainConfig())
    seeds = [derive_seed(args.seed, f"ablation{k}") & 0xFFFFFFFF for k in range(args.num_seeds)]
    if args.predictor:
        pred = _load_predictor(args.predictor, scfg)
    else:
        pred = tr.pretrained_predictor(scfg, tcfg, args.seed, _predictor_cfg(scfg))
    res = run_ablation(ds, scfg, tcfg, seeds, pred)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = res.write(out)
    print(paths[0].read_text(), end="")
    args._config = {"train": dataclasses.asdict(tcfg), "dataset_seed": scfg.seed, "seeds": seeds}
    return [str(p) for p in paths]


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="totem", description="Transparency-feature fusion for object tracking on synthetic benchmarks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def seeded(p, required=True):
        p.add_argument("--seed", type=int, required=required, default=None if required else 0,
                       help="master seed (required: every random draw derives from it)" if required else "master seed")

    p = sub.add_parser("synth", help="generate a synthetic benchmark directory")
    p.add_argument("--config", help="key=value file with SynthConfig fields")
    p.add_argument("--preset", choices=sorted(SYNTH_PRESETS), default="transparent")
    p.add_argument("--out", required=True)
    seeded(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train the model predictor alone on appearance-informative data")
    p.add_argument("--dataset", required=True, help="benchmark directory (its geometry is reused)")
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--out", required=True)
    seeded(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train a fusion variant in front of a frozen predictor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=sorted(MODES), default="two_step")
    p.add_argument("--variant", choices=tr.VARIANTS, default="totem")
    p.add_argument("--predictor", help="pretrained predictor checkpoint (default: pretrain now)")
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--out", required=True)
    seeded(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="write OTB-style predictions for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="success / precision / normalized precision report")
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--pred-dirs", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--scope", choices=("primitives", "fusion", "tracker", "all"), default="all")
    p.add_argument("--out", help="directory for the run manifest")
    seeded(p, required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate all ablation rows over several seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--num-seeds", type=int, default=3)
    p.add_argument("--predictor", help="pretrained predictor checkpoint shared by all rows (default: pretrain now)")
    p.add_argument("--out", required=True)
    seeded(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args._config, args._exit = {}, 0
    started = time.time()
    try:
        artifacts = args.func(args)
    except (CliError, ValueError, OSError, metrics.AnnotationError) as exc:
        print(f"totem {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except tr.TrainingDiverged as exc:
        print(f"totem {args.command}: error: {exc} (last finite state: {exc.checkpoint})", file=sys.stderr)
        return 3
    out = getattr(args, "out", None)
    if out:
        RunManifest(
            command=args.command,
            argv=argv,
            seed=getattr(args, "seed", None),
            config=args._config,
            artifacts=artifacts,
            version=version_string(),
            started=started,
            duration_s=time.time() - started,
        ).write(Path(out))
    return args._exit


if __name__ == "__main__":
    sys.exit(main())
