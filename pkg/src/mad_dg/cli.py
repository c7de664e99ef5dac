"""Command-line entry point: mad-dg {gen-data, augment, train, eval, probe, sweep, report}.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 config validation error.
Errors are printed to stderr as one line of JSON.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger("mad_dg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
SUBCOMMANDS = ("gen-data", "augment", "train", "eval", "probe", "sweep", "report")


class CliError(Exception):
    """Runtime failure with a machine-readable kind."""

    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME, **extra):
        super().__init__(message)
        self.kind, self.code, self.extra = kind, code, extra


class ConfigError(CliError):
    def __init__(self, message: str, field_path: str = "", constraint: str = ""):
        super().__init__("config_invalid", message, EXIT_CONFIG, field=field_path, constraint=constraint)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


@dataclass
class CliInvocation:
    command: str
    args: argparse.Namespace
    argv: list[str]
    config: dict = field(default_factory=dict)
    config_path: str | None = None

    @property
    def out(self) -> Path:
        return Path(self.args.out)


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    p = _Parser(prog="mad-dg", description="Multi-view adversarial domain generalization on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic multi-domain dataset")
    g.add_argument("--config", help="dataset config JSON (domains, sizes, cut-offs)")
    g.add_argument("--n-train", type=int, default=None)
    g.add_argument("--n-test", type=int, default=None)

    a = sub.add_parser("augment", parents=[common], help="write SCG-augmented copies of a dataset split")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="train")
    a.add_argument("--mode", choices=("intent", "literal"), default="intent")
    a.add_argument("--sigma", type=float, default=1.0)
    a.add_argument("--r-low", type=float, default=2.0)
    a.add_argument("--r-high", type=float, default=None)
    a.add_argument("--limit", type=int, default=None, help="augment at most this many samples per domain")

    t = sub.add_parser("train", parents=[common], help="train a model on the source domains")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--data", required=True)

    e = sub.add_parser("eval", parents=[common], help="per-domain instance accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")

    r = sub.add_parser("probe", parents=[common], help="residual domain probe on frozen features")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--level", choices=("image", "instance"), default="image")
    r.add_argument("--epochs", type=int, default=20)
    r.add_argument("--views", action="store_true", help="also write the view-divergence report")

    s = sub.add_parser("sweep", parents=[common], help="grid or component-ablation sweep")
    s.add_argument("--config", help="base training config JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", required=True, help="grid JSON: {n_views: [...], lam: [...], components: [[...]]}")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--workers", type=int, default=1, help="child processes (0 = in-process)")

    m = sub.add_parser("report", parents=[common], help="consolidated markdown + SVG from run dirs")
    m.add_argument("runs", nargs="+")
    return p


def _load_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what}_not_found", f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc


def load_schema(name: str) -> dict:
    return json.loads(resources.files("mad_dg").joinpath("schemas", name).read_text())


def validate(doc: dict, schema_name: str) -> None:
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(x) for x in err.absolute_path) or "<root>"
        raise ConfigError(f"config field '{path}': {err.message}", path, err.validator)


def parse_and_validate(argv: Sequence[str]) -> CliInvocation:
    args = build_parser().parse_args(list(argv))
    inv = CliInvocation(command=args.command, args=args, argv=list(argv))
    if args.command in ("train", "sweep", "gen-data") and getattr(args, "config", None):
        inv.config_path = args.config
        inv.config = _load_json(args.config, "config")
        validate(inv.config, "data_config.schema.json" if args.command == "gen-data" else "train_config.schema.json")
    if args.command == "sweep":
        grid = _load_json(args.grid, "grid")
        validate(grid, "grid.schema.json")
        inv.config["__grid__"] = grid
        try:
            seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}", "seeds", "type")
        if len(seeds) < 3:
            raise ConfigError("a sweep needs at least 3 seeds", "seeds", "minItems")
        args.seed_list = seeds
    if args.out is None:
        args.out = f"runs/{args.command}"
    return inv


# ---------------------------------------------------------------- run bookkeeping


def _hash_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _versions() -> dict:
    from . import __version__
    from .tensor import kernels

    return {"mad_dg": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "kernel_backend": kernels.BACKEND}


class RunMeta:
    """run_meta.json, written before any work and updated with every produced file."""

    def __init__(self, inv: CliInvocation, dataset_hash: str | None):
        self.path = inv.out / "run_meta.json"
        self.doc = {"argv": inv.argv, "command": inv.command,
                    "config_hash": _hash_json({k: v for k, v in inv.config.items()}) if inv.config else None,
                    "dataset_hash": dataset_hash, "versions": _versions(), "status": "running", "outputs": []}
        self.t0 = time.perf_counter()
        inv.out.mkdir(parents=True, exist_ok=True)
        (inv.out / ".incomplete").write_text("running\n")
        self.write()

    def add(self, *paths: Path) -> None:
        for p in paths:
            rel = str(Path(p).relative_to(self.path.parent))
            if rel not in self.doc["outputs"]:
                self.doc["outputs"].append(rel)

    def write(self) -> None:
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def finish(self, ok: bool, error: dict | None = None) -> None:
        self.doc["status"] = "complete" if ok else "failed"
        self.doc["wall_time_s"] = round(time.perf_counter() - self.t0, 3)
        if error:
            self.doc["error"] = error
        marker = self.path.parent / ".incomplete"
        if ok:
            marker.unlink(missing_ok=True)
        else:
            marker.write_text(json.dumps(error or {}, sort_keys=True) + "\n")
        self.doc["outputs"].sort()
        self.write()


def _manifest(path: str):
    from .synthgen import read_manifest

    p = Path(path)
    if not (p / "manifest.json").exists():
        raise CliError("dataset_not_found", f"no dataset manifest at {p / 'manifest.json'}")
    try:
        return read_manifest(p)
    except Exception as exc:
        raise CliError("dataset_invalid", f"{p}: {exc}") from exc


def _train_config(inv: CliInvocation):
    from .trainer import TrainConfig

    doc = {k: v for k, v in inv.config.items() if k != "__grid__"}
    if inv.args.seed is not None:
        doc["seed"] = inv.args.seed
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- commands


def cmd_gen_data(inv: CliInvocation, meta: RunMeta) -> None:
    from .synthgen import DomainSpec, benchmark_specs, generate_dataset

    cfg = inv.config
    seed = inv.args.seed if inv.args.seed is not None else cfg.get("seed", 0)
    n_train = inv.args.n_train or cfg.get("n_train", 2000)
    n_test = inv.args.n_test or cfg.get("n_test", 500)
    if "domains" in cfg:
        specs = [DomainSpec.from_dict({k: v for k, v in d.items() if k != "role"}) for d in cfg["domains"]]
        roles = [d.get("role", "source") for d in cfg["domains"]]
    else:
        specs, roles = benchmark_specs()
    manifest = generate_dataset(specs, {"train": n_train, "test": n_test}, inv.out, seed=seed, roles=roles,
                                r_low=cfg.get("r_low", 2.0), r_high=cfg.get("r_high", 8.0))
    meta.doc["dataset_hash"] = manifest.content_hash()
    meta.add(inv.out / "manifest.json", *(inv.out / s for s in ("train", "test")))
    log.info("wrote %d domains to %s", len(specs), inv.out)


def cmd_augment(inv: CliInvocation, meta: RunMeta) -> None:
    from .spectral import ScgConfig, scg_augment
    from .synthgen import Sample, encode_sample, load_split

    a = inv.args
    manifest = _manifest(a.data)
    seed = a.seed if a.seed is not None else 0
    cfg = ScgConfig(r_low=a.r_low, r_high=a.r_high, mode=a.mode, sigma=a.sigma, seed=seed)
    rng = np.random.default_rng(seed)
    out_split = inv.out / a.split
    out_split.mkdir(parents=True, exist_ok=True)
    counts: dict[int, int] = {}
    for s in load_split(manifest, a.split):
        i = counts.get(s.domain_id, 0)
        if a.limit is not None and i >= a.limit:
            continue
        aug = Sample(scg_augment(s.image, cfg, rng).astype(np.float32), s.boxes, s.classes, s.domain_id)
        (out_split / f"d{s.domain_id}_{i:05d}.bin").write_bytes(encode_sample(aug))
        counts[s.domain_id] = i + 1
    doc = manifest.to_dict()
    doc["augmentation"] = cfg.to_dict()
    for d in doc["domains"]:
        d["counts"] = {a.split: counts.get(d["spec"]["domain_id"], 0)}
    _write_json(inv.out / "manifest.json", doc)
    meta.add(inv.out / "manifest.json", out_split)


def cmd_train(inv: CliInvocation, meta: RunMeta) -> None:
    from .plots import loss_curves
    from .trainer import train

    manifest = _manifest(inv.args.data)
    cfg = _train_config(inv)
    report, _ = train(cfg, manifest, out_dir=inv.out)
    meta.doc["run_wall_time_s"] = round(report.wall_time, 3)
    loss_curves([("train", report.to_json_dict())], inv.out / "loss_curves.svg")
    meta.add(*(inv.out / f for f in ("report.json", "model.ckpt", "train_log.csv", "loss_curves.svg")))
    log.info("target accuracy %.4f, source accuracy %.4f", report.target_accuracy, report.source_accuracy)


def cmd_eval(inv: CliInvocation, meta: RunMeta) -> None:
    from .evalprobe import evaluate_accuracy

    ckpt = Path(inv.args.checkpoint)
    if not ckpt.exists():
        raise CliError("checkpoint_not_found", f"checkpoint not found: {ckpt}")
    manifest = _manifest(inv.args.data)
    acc = evaluate_accuracy(ckpt, manifest, inv.args.split)
    acc["split"] = inv.args.split
    meta.add(_write_json(inv.out / "eval.json", acc))


def cmd_probe(inv: CliInvocation, meta: RunMeta) -> None:
    from .evalprobe import residual_probe, view_divergence_report
    from .plots import probe_curves, view_projection
    from .synthgen import load_split
    from .trainer import load_model

    ckpt = Path(inv.args.checkpoint)
    if not ckpt.exists():
        raise CliError("checkpoint_not_found", f"checkpoint not found: {ckpt}")
    manifest = _manifest(inv.args.data)
    model = load_model(ckpt)
    seed = inv.args.seed if inv.args.seed is not None else 0
    res = residual_probe(ckpt, manifest, level=inv.args.level, epochs=inv.args.epochs, seed=seed, model=model)
    meta.add(_write_json(inv.out / "probe.json", res.to_dict()))
    probe_curves(res, inv.out / "probe_curves.svg")
    meta.add(inv.out / "probe_curves.svg")
    if inv.args.views:
        samples = load_split(manifest, "test")[::5]
        vr = view_divergence_report(ckpt, samples, model=model)
        meta.add(_write_json(inv.out / "views.json", vr.to_dict()))
        if vr.levels:
            view_projection(vr, inv.out / "views.svg")
            meta.add(inv.out / "views.svg")


def cmd_sweep(inv: CliInvocation, meta: RunMeta) -> None:
    from .evalprobe import ablation_sweep

    manifest = _manifest(inv.args.data)
    grid = inv.config["__grid__"]
    cfg = _train_config(inv)
    table = ablation_sweep(cfg, grid, inv.args.seed_list, manifest.root, inv.out, workers=inv.args.workers)
    meta.add(*(inv.out / f for f in ("sweep.csv", "sweep.json", "sweep.svg")))
    meta.add(*sorted(p for p in inv.out.glob("cell*") if p.is_dir()))
    failed = sum(1 for c in table.cells for e in c.errors if e)
    if failed:
        log.warning("%d child runs failed; see sweep.csv", failed)


def cmd_report(inv: CliInvocation, meta: RunMeta) -> None:
    md, svgs = emit_report(inv.args.runs, inv.out)
    meta.add(md, *svgs)


COMMANDS = {"gen-data": cmd_gen_data, "augment": cmd_augment, "train": cmd_train, "eval": cmd_eval,
            "probe": cmd_probe, "sweep": cmd_sweep, "report": cmd_report}


# ---------------------------------------------------------------- report


def _accuracy_table(name: str, rep: dict) -> list[str]:
    per = rep["final"]["per_domain"]
    targets = set(rep.get("target_domains", []))
    lines = [f"### {name}", "", "| domain | role | accuracy | instances |", "|---|---|---|---|"]
    for d in sorted(per, key=int):
        role = "target" if int(d) in targets else "source"
        lines.append(f"| {d} | {role} | {per[d]:.4f} | {rep['final']['counts'][d]} |")
    lines += ["", f"overall {rep['final']['overall']:.4f}; source mean {rep['source_accuracy']:.4f}; "
                  f"target mean {rep['target_accuracy']:.4f}", ""]
    return lines


def _check_report(doc: dict) -> None:
    for key in ("final", "epochs", "source_accuracy", "target_accuracy"):
        if key not in doc:
            raise ValueError(f"missing key {key!r}")
    if "per_domain" not in doc["final"]:
        raise ValueError("missing final.per_domain")


def emit_report(run_dirs: Sequence[str], out_dir) -> tuple[Path, list[Path]]:
    """Markdown summary of every run / sweep dir; unreadable dirs go to an errors section."""
    from .evalprobe import read_sweep
    from .plots import loss_curves, sweep_plot

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# MAD-DG report", ""]
    errors, runs, svgs = [], [], []
    sweeps = []
    for rd in run_dirs:
        p = Path(rd)
        if (p / "sweep.json").exists():
            try:
                sweeps.append((p.name or str(p), read_sweep(p / "sweep.json")))
            except Exception as exc:
                errors.append(f"{p / 'sweep.json'}: malformed sweep.json ({exc})")
            continue
        rp = p / "report.json"
        try:
            doc = json.loads(rp.read_text())
            _check_report(doc)
            runs.append((p.name or str(p), doc))
        except FileNotFoundError:
            errors.append(f"{rp}: report.json not found")
        except (json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
            errors.append(f"{rp}: malformed report.json ({exc})")
    if runs:
        lines += ["## Runs", ""]
        for name, doc in runs:
            lines += _accuracy_table(name, doc)
        path = out / "loss_curves.svg"
        loss_curves(runs, path)
        svgs.append(path)
        lines += [f"![loss curves]({path.name})", ""]
    for i, (name, table) in enumerate(sweeps):
        lines += [f"## Sweep {name}", "", "| cell | mean target acc | std | seeds ok |", "|---|---|---|---|"]
        for c in table.cells:
            label = ", ".join(f"{k}={'+'.join(v) if isinstance(v, list) else v}" for k, v in c.params.items())
            lines.append(f"| {label} | {c.mean:.4f} | {c.std:.4f} | {len(c.ok)}/{len(c.seeds)} |")
        path = out / f"sweep_{i}.svg"
        sweep_plot(table, path)
        svgs.append(path)
        lines += ["", f"![sweep]({path.name})", ""]
    if errors:
        lines += ["## Errors", ""] + [f"- {e}" for e in errors] + [""]
    md = out / "report.md"
    md.write_text("\n".join(lines))
    return md, svgs


# ---------------------------------------------------------------- main


def run(inv: CliInvocation) -> int:
    meta = RunMeta(inv, None)
    try:
        if hasattr(inv.args, "data") and inv.command != "gen-data":
            mp = Path(inv.args.data) / "manifest.json"
            if mp.exists():
                from .synthgen import read_manifest

                try:
                    meta.doc["dataset_hash"] = read_manifest(mp.parent).content_hash()
                except Exception:
                    pass
                meta.write()
        COMMANDS[inv.command](inv, meta)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), **exc.extra}
        meta.finish(False, err)
        _emit_error(exc.kind, str(exc), **exc.extra)
        return exc.code
    except Exception as exc:
        kind = _classify(exc)
        err = {"error": kind, "message": f"{type(exc).__name__}: {exc}"}
        meta.finish(False, err)
        _emit_error(kind, err["message"])
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    meta.finish(True)
    return EXIT_OK


def _classify(exc: Exception) -> str:
    from .synthgen import DatasetError
    from .tensor import CheckpointError
    from .trainer import TrainingError

    if isinstance(exc, FileNotFoundError):
        return "file_not_found"
    if isinstance(exc, DatasetError):
        return "dataset_invalid"
    if isinstance(exc, CheckpointError):
        return "checkpoint_invalid"
    if isinstance(exc, TrainingError):
        return "training_failed"
    return "runtime_error"


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        inv = parse_and_validate(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    except CliError as exc:
        _emit_error(exc.kind, str(exc), **exc.extra)
        return exc.code
    logging.basicConfig(level=logging.WARNING if inv.args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    return run(inv)


if __name__ == "__main__":
    raise SystemExit(main())
