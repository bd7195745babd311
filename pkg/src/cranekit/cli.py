"""``cranekit`` command line: delta, taylor, gsp-build, merge, baseline, verify, compare-salience, ttc."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .archive import TensorArchive, TensorView, hash_path, open_archive, write_archive
from .calibration import CalibrationExample, load_calibration, save_calibration, select
from .delta import check_paired, delta_archive
from .gsp import GspProjectorSet, build_projector_set, sidecar_path
from .lab import PlantingSpec, plant_pair, verify_pipeline
from .merge import MergeConfig, aim_merge, crane_merge, preset as merge_preset, slerp, task_arithmetic, ties, ttc
from .micro import GradientSet, MicroConfig, init_params
from .schema import PRESETS as SCHEMA_PRESETS, SchemaError, bind, load_schema
from .signals import aim_importance, micro_projectors, micro_salience, salience_table
from .taylor import SalienceTable, arch_normalize, compare_salience

log = logging.getLogger("cranekit")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


# ------------------------------------------------------------------ helpers


def _archive(path) -> TensorArchive:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such archive: {p}")
    return open_archive(p)


def _calib(path, tag: str) -> list[CalibrationExample]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such calibration file: {p}")
    return select(load_calibration(p), tag)


def _micro_config(path) -> MicroConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such model config: {p}")
    return MicroConfig.from_json(p.read_text())


def _bound(args, names, config: MicroConfig | None = None):
    if args.schema:
        return bind(load_schema(args.schema), names)
    if config is not None:
        return bind(load_schema(config.schema_preset()), names)
    # First micro preset that maps every tensor.
    errors = []
    for name in SCHEMA_PRESETS:
        try:
            return bind(load_schema(name), names)
        except SchemaError as exc:
            errors.append(f"{name}: {exc}")
    raise SchemaError("no --schema given and no built-in preset matches the archive:\n  " + "\n  ".join(errors))


def _write(tensors, out, args) -> list[Path]:
    return write_archive(tensors, out, shard_budget=args.shard_budget)


class Run:
    """Collects inputs, outputs and stats for the manifest of one command."""

    def __init__(self, args):
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.stats: dict = {}
        self.config: dict = {}
        self.t0 = time.perf_counter()

    def read(self, *paths):
        for p in paths:
            if p is not None:
                self.inputs[str(p)] = hash_path(p)

    def wrote(self, *paths):
        for p in paths:
            self.outputs[str(p)] = hash_path(p)

    def finish(self, default_out=None):
        target = self.args.manifest_out or (str(default_out) + ".manifest.json" if default_out else None)
        if target is None:
            return
        manifest = {
            "command": self.args.command,
            "version": __version__,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "stats": self.stats,
            "wall_time": round(time.perf_counter() - self.t0, 6),
        }
        Path(target).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    return str(x)


# ----------------------------------------------------------------- commands


def cmd_init_micro(args, run: Run):
    cfg = MicroConfig(
        vocab=args.vocab,
        d_model=args.d_model,
        n_layers=args.layers,
        n_heads=args.heads,
        moe_experts=args.experts,
        mixer_families=args.families.split(",") if args.families else [],
        seed=args.seed,
    )
    params = init_params(cfg)
    if args.perturb:
        rng = np.random.default_rng(args.seed + 1)
        params = TensorArchive.from_arrays(
            {n: params.f64(n) + args.perturb * rng.standard_normal(params[n].shape) for n in sorted(params)}, "F64"
        )
    paths = _write(dict(params), args.out, args)
    cfg_path = Path(args.config_out or str(args.out) + ".config.json")
    cfg_path.write_text(cfg.to_json() + "\n")
    run.config = json.loads(cfg.to_json()) | {"perturb": args.perturb}
    run.wrote(args.out, cfg_path)
    run.stats = {"n_tensors": len(params), "shards": len(paths)}
    return args.out


def cmd_make_calib(args, run: Run):
    rng = np.random.default_rng(args.seed)
    examples = []
    for tag, n in (("R", args.n_r), ("A", args.n_a), ("F", args.n_f)):
        for _ in range(n):
            toks = rng.integers(0, args.vocab, size=args.length).tolist()
            if tag == "F":
                mask = [0] * args.length
                for s in rng.choice(args.length, size=min(2, args.length), replace=False):
                    mask[int(s)] = 1
            else:
                mask = [0] + [1] * (args.length - 1)
            examples.append(CalibrationExample(toks, mask, tag))
    save_calibration(examples, args.out)
    run.config = {"seed": args.seed, "n": [args.n_r, args.n_a, args.n_f], "length": args.length, "vocab": args.vocab}
    run.wrote(args.out)
    return args.out


def cmd_delta(args, run: Run):
    inst, think = _archive(args.instruct), _archive(args.thinking)
    run.read(args.instruct, args.thinking)
    d = delta_archive(inst, think)
    _write({n: TensorView.from_array(v, "F64") for n, v in d.items()}, args.out, args)
    run.wrote(args.out)
    run.stats = {"n_tensors": len(d), "nonzero": int(sum(np.count_nonzero(v) for v in d.values()))}
    return args.out


def _delta_for(args, inst, run):
    if args.delta:
        run.read(args.delta)
        arch = _archive(args.delta)
        check_paired(inst, arch)
        return arch.to_f64_dict()
    if args.thinking:
        run.read(args.thinking)
        return delta_archive(inst, _archive(args.thinking))
    raise ValueError("taylor needs --delta or --thinking")


def cmd_taylor(args, run: Run):
    inst = _archive(args.instruct)
    run.read(args.instruct)
    d = _delta_for(args, inst, run)
    if args.grad_r or args.grad_a:
        if not (args.grad_r and args.grad_a):
            raise ValueError("--grad-r and --grad-a must be given together")
        run.read(args.grad_r, args.grad_a)
        g_r = GradientSet.from_archive(_archive(args.grad_r))
        g_a = GradientSet.from_archive(_archive(args.grad_a))
        bound = _bound(args, list(inst))
        table = salience_table(inst, d, g_r, g_a, bound, {"gradients": "external"})
    elif args.model_config:
        if not (args.calib_r and args.calib_a):
            raise ValueError("built-in gradients need --calib-r and --calib-a")
        cfg = _micro_config(args.model_config)
        run.read(args.model_config, args.calib_r, args.calib_a)
        d_r, d_a = _calib(args.calib_r, "R"), _calib(args.calib_a, "A")
        if not d_r or not d_a:
            raise ValueError("calibration files contain no R or no A examples")
        bound = _bound(args, list(inst), cfg)
        table = micro_salience(inst, cfg, d, d_r, d_a, bound, args.loss_scale)
    else:
        raise ValueError("no gradient source: pass --model-config with calibration sets, or --grad-r/--grad-a")
    if args.arch_normalize:
        table = arch_normalize(table, bound.kappa())
    out = Path(args.out)
    table.save(out)
    csv = Path(args.csv or out.with_suffix(".csv"))
    csv.write_text(table.to_csv())
    run.config = {"arch_normalize": args.arch_normalize, "schema": bound.schema.name, "loss_scale": args.loss_scale}
    run.wrote(out, csv)
    run.stats = {"salience": table.to_dict()["entries"]}
    return out


def cmd_gsp_build(args, run: Run):
    inst = _archive(args.instruct)
    run.read(args.instruct)
    if args.activations:
        run.read(args.activations)
        acts = _archive(args.activations)
        bound = _bound(args, list(inst))
        pset = build_projector_set({s: acts.f64(s) for s in sorted(acts)}, args.tau, args.rho, spaces=bound.spaces())
    else:
        if not args.model_config:
            raise ValueError("gsp-build needs --model-config (built-in activations) or --activations")
        cfg = _micro_config(args.model_config)
        run.read(args.model_config)
        d_f = []
        if args.calib_f:
            run.read(args.calib_f)
            d_f = _calib(args.calib_f, "F")
        bound = _bound(args, list(inst), cfg)
        pset = micro_projectors(inst, cfg, d_f, bound, args.tau, args.rho, args.collect_intermediate)
    paths = pset.save(args.out)
    run.config = {"tau": args.tau, "rho": args.rho, "collect_intermediate": args.collect_intermediate}
    run.wrote(args.out, sidecar_path(args.out))
    run.stats = {"mean_w": pset.mean_weights(), "identity_spaces": sorted(pset.identity_spaces), "shards": len(paths)}
    return args.out


def _merge_config(args) -> MergeConfig:
    overrides = {k: v for k, v in (("alpha", args.alpha), ("tau", args.tau), ("rho", args.rho)) if v is not None}
    overrides.update(
        use_sparsifier=not args.no_sparsifier, use_taylor=not args.no_taylor, use_gsp=not args.no_gsp
    )
    if args.arch_normalize:
        overrides["arch_normalize"] = True
    return merge_preset(args.preset, **overrides)


def cmd_merge(args, run: Run):
    cfg = _merge_config(args)
    inst, think = _archive(args.instruct), _archive(args.thinking)
    run.read(args.instruct, args.thinking)
    table = projectors = bound = None
    if cfg.use_taylor:
        if not args.salience:
            raise ValueError("--salience is required unless --no-taylor")
        run.read(args.salience)
        table = SalienceTable.load(args.salience)
    if cfg.use_gsp:
        if not args.projectors:
            raise ValueError("--projectors is required unless --no-gsp")
        run.read(args.projectors, sidecar_path(args.projectors))
        projectors = GspProjectorSet.load(args.projectors)
    if cfg.use_taylor or cfg.use_gsp:
        bound = _bound(args, list(inst))
    result = crane_merge(inst, think, bound, table, projectors, cfg, threads=args.threads)
    _write(dict(result.archive), args.out, args)
    run.config = cfg.to_dict() | {"preset": args.preset}
    run.wrote(args.out)
    run.stats = result.stats
    return args.out


def cmd_baseline(args, run: Run):
    inst, think = _archive(args.instruct), _archive(args.thinking)
    run.read(args.instruct, args.thinking)
    m = args.method
    if m == "ta":
        merged = task_arithmetic(inst, think, args.alpha, args.threads)
    elif m == "ties":
        merged = ties(inst, think, args.alpha, args.density, args.threads)
    elif m == "slerp":
        merged = slerp(inst, think, args.t, args.threads)
    else:
        if args.importance:
            run.read(args.importance)
            imp = _archive(args.importance).to_f64_dict()
            bound = _bound(args, list(inst)) if args.schema else None
        elif args.model_config and args.calib_a:
            cfg = _micro_config(args.model_config)
            run.read(args.model_config, args.calib_a)
            bound = _bound(args, list(inst), cfg)
            imp = aim_importance(inst, cfg, _calib(args.calib_a, "A"), bound)
        else:
            raise ValueError("AIM needs --importance or --model-config with --calib-a")
        merged = aim_merge(inst, think, m.split("-")[1], args.alpha, args.omega, imp, bound, args.density, args.threads)
    _write(dict(merged), args.out, args)
    run.config = {"method": m, "alpha": args.alpha, "density": args.density, "t": args.t, "omega": args.omega}
    run.wrote(args.out)
    return args.out


def cmd_verify(args, run: Run):
    config = MicroConfig(moe_experts=2, seed=args.seed)
    cfg = merge_preset(args.preset, **{k: v for k, v in (("alpha", args.alpha), ("tau", args.tau)) if v is not None})
    report = verify_pipeline(plant_pair(config, PlantingSpec(seed=args.seed)), cfg)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        run.wrote(args.out)
    run.config = {"seed": args.seed} | cfg.to_dict()
    run.stats = json.loads(report.to_json())
    if not all(report.passed.values()):
        log.error("verification failed: %s", sorted(k for k, v in report.passed.items() if not v))
        return args.out, EXIT_INVALID
    return args.out


def cmd_compare_salience(args, run: Run):
    for p in (args.a, args.b):
        if not Path(p).exists():
            raise FileNotFoundError(f"no such salience table: {p}")
    run.read(args.a, args.b)
    res = compare_salience(SalienceTable.load(args.a), SalienceTable.load(args.b), args.top_k, args.kinds)
    print(json.dumps(res, indent=1, sort_keys=True))
    run.stats = res
    return None


def cmd_ttc(args, run: Run):
    value = ttc(args.input, args.cached, args.output)
    print(f"{value / 1e6:.1f}M")
    run.config = {"input": args.input, "cached": args.cached, "output": args.output}
    run.stats = {"ttc": value}
    return None


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker cap for per-tensor parallelism")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--manifest-out", help="manifest path (default: <out>.manifest.json)")
    common.add_argument("--shard-budget", type=int, default=1 << 30, help="max bytes per output shard")
    common.add_argument("--schema", help="schema preset name or JSON file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cranekit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-micro", parents=[common], help="write a seeded micro-transformer checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--config-out")
    s.add_argument("--vocab", type=int, default=16)
    s.add_argument("--d-model", type=int, default=8)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--heads", type=int, default=2)
    s.add_argument("--experts", type=int, default=0)
    s.add_argument("--families", help="comma-separated mixer family per layer")
    s.add_argument("--perturb", type=float, default=0.0, help="add seeded Gaussian noise of this scale")
    s.set_defaults(func=cmd_init_micro)

    s = sub.add_parser("make-calib", parents=[common], help="write random R/A/F calibration JSONL")
    s.add_argument("--out", required=True)
    s.add_argument("--vocab", type=int, default=16)
    s.add_argument("--length", type=int, default=8)
    s.add_argument("--n-r", type=int, default=4)
    s.add_argument("--n-a", type=int, default=4)
    s.add_argument("--n-f", type=int, default=4)
    s.set_defaults(func=cmd_make_calib)

    s = sub.add_parser("delta", parents=[common], help="thinking - instruct")
    s.add_argument("instruct")
    s.add_argument("thinking")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_delta)

    s = sub.add_parser("taylor", parents=[common], help="salience table from gated first-order scores")
    s.add_argument("--instruct", required=True)
    s.add_argument("--delta")
    s.add_argument("--thinking")
    s.add_argument("--model-config")
    s.add_argument("--calib-r")
    s.add_argument("--calib-a")
    s.add_argument("--grad-r")
    s.add_argument("--grad-a")
    s.add_argument("--loss-scale", type=float, default=1.0)
    s.add_argument("--arch-normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_taylor)

    s = sub.add_parser("gsp-build", parents=[common], help="format-subspace projectors")
    s.add_argument("--instruct", required=True)
    s.add_argument("--model-config")
    s.add_argument("--calib-f")
    s.add_argument("--activations", help="archive of per-space activation matrices")
    s.add_argument("--tau", type=float, default=0.03)
    s.add_argument("--rho", type=int, default=2)
    s.add_argument("--collect-intermediate", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gsp_build)

    s = sub.add_parser("merge", parents=[common], help="gated, projected merge")
    s.add_argument("--instruct", required=True)
    s.add_argument("--thinking", required=True)
    s.add_argument("--salience")
    s.add_argument("--projectors")
    s.add_argument("--preset", default="crane-30b", choices=["crane-30b", "crane-80b"])
    s.add_argument("--alpha", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--rho", type=int)
    s.add_argument("--arch-normalize", action="store_true")
    s.add_argument("--no-sparsifier", action="store_true")
    s.add_argument("--no-taylor", action="store_true")
    s.add_argument("--no-gsp", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("baseline", parents=[common], help="TA / TIES / SLERP / AIM merges")
    s.add_argument("method", choices=["ta", "ties", "slerp", "aim-ta", "aim-ties"])
    s.add_argument("--instruct", required=True)
    s.add_argument("--thinking", required=True)
    s.add_argument("--alpha", type=float, default=0.30)
    s.add_argument("--density", type=float, default=0.50)
    s.add_argument("--t", type=float, default=0.30)
    s.add_argument("--omega", type=float, default=0.40)
    s.add_argument("--importance")
    s.add_argument("--model-config")
    s.add_argument("--calib-a")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("verify", parents=[common], help="planted-structure end-to-end check")
    s.add_argument("--preset", default="crane-30b", choices=["crane-30b", "crane-80b"])
    s.add_argument("--alpha", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("compare-salience", parents=[common], help="correlation and top-k overlap")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--top-k", type=int, nargs="+", default=[10, 20, 30, 48])
    s.add_argument("--kinds", nargs="+")
    s.set_defaults(func=cmd_compare_salience)

    s = sub.add_parser("ttc", parents=[common], help="weighted token count")
    s.add_argument("--input", type=float, required=True)
    s.add_argument("--cached", type=float, required=True)
    s.add_argument("--output", type=float, required=True)
    s.set_defaults(func=cmd_ttc)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    run = Run(args)
    try:
        result = args.func(args, run)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    code = EXIT_OK
    if isinstance(result, tuple):
        result, code = result
    run.finish(result)
    return code


if __name__ == "__main__":
    sys.exit(main())
