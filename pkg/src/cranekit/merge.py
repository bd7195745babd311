"""Gated, projected delta merging plus the Task Arithmetic / TIES / SLERP / AIM baselines."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .archive import TensorArchive, TensorView, load_f64
from .delta import check_paired, delta, sparsify, trim_top_fraction
from .gsp import GspProjectorSet, orient, project
from .schema import BoundSchema
from .taylor import SalienceTable, arch_normalize

log = logging.getLogger(__name__)

AIM_EXEMPT_KINDS = frozenset({"embedding", "norm"})


@dataclass
class MergeConfig:
    alpha: float = 0.25
    tau: float = 0.03
    rho: int = 2
    use_sparsifier: bool = True
    use_taylor: bool = True
    use_gsp: bool = True
    arch_normalize: bool = False

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "crane-30b": dict(alpha=0.25, tau=0.03, rho=2, arch_normalize=False),
    "crane-80b": dict(alpha=0.15, tau=0.03, rho=2, arch_normalize=True),
}


def preset(name: str, **overrides) -> MergeConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown merge preset {name!r}; choose from {sorted(PRESETS)}")
    return MergeConfig(**{**PRESETS[name], **overrides})


def apply_edit(inst: np.ndarray, edit: np.ndarray) -> np.ndarray:
    # Zero edits keep the stored value bit-for-bit (including -0.0).
    return np.where(edit == 0.0, inst, inst + edit)


def _map_tensors(names, fn: Callable[[str], tuple[TensorView, dict]], threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fn, names))
    else:
        results = [fn(n) for n in names]
    return dict(zip(names, results))


def _finish(inst: TensorArchive, name: str, merged: np.ndarray) -> TensorView:
    return TensorView.from_array(merged, inst[name].dtype)


@dataclass
class MergeResult:
    archive: TensorArchive
    stats: dict = field(default_factory=dict)


def crane_merge(
    inst: TensorArchive,
    think: TensorArchive,
    bound: BoundSchema | None,
    salience: SalienceTable | None,
    projectors: GspProjectorSet | None,
    cfg: MergeConfig,
    threads: int = 1,
) -> MergeResult:
    """``inst + project(alpha * S(c, l) * sparsify(delta))`` per tensor, each stage switchable."""
    names = check_paired(inst, think)
    if (cfg.use_taylor or cfg.use_gsp) and bound is None:
        raise ValueError("a bound schema is required for the Taylor and GSP stages")
    table = salience
    if cfg.use_taylor:
        if table is None:
            raise ValueError("use_taylor requires a salience table")
        if cfg.arch_normalize and not table.metadata.get("arch_normalized"):
            table = arch_normalize(table, bound.kappa())
    if cfg.use_gsp:
        if projectors is None:
            raise ValueError("use_gsp requires a projector set")
        if projectors.tau != cfg.tau:
            projectors = projectors.with_tau(cfg.tau)

    def one(name: str):
        base = load_f64(inst[name])
        d = delta(inst[name], think[name])
        t = sparsify(d) if cfg.use_sparsifier else d
        s = 1.0
        if cfg.use_taylor:
            b = bound[name]
            s = table.coefficient(b.kind, b.layer)
        edit = (cfg.alpha * s) * t
        projected = False
        if cfg.use_gsp:
            b = bound[name]
            proj = projectors.get(b.space)
            if proj is not None and edit.ndim == 2:
                view, restore = orient(edit, b.input_side)
                edit = restore(project(view, proj))
                projected = True
            elif b.space is not None and proj is None and b.space not in projectors.identity_spaces:
                raise KeyError(f"no projector for activation space {b.space!r} (tensor {name!r})")
        stats = {
            "surviving_fraction": float(np.count_nonzero(t)) / max(t.size, 1) if cfg.use_sparsifier else 1.0,
            "coefficient": s,
            "projected": projected,
        }
        return _finish(inst, name, apply_edit(base, edit)), stats

    out = _map_tensors(names, one, threads)
    merged = TensorArchive({n: v for n, (v, _) in out.items()})
    stats = {
        "config": cfg.to_dict(),
        "per_tensor": {n: s for n, (_, s) in out.items()},
    }
    if cfg.use_taylor:
        stats["salience"] = {f"{k}@{l}": v for (k, l), v in sorted(table.entries.items(), key=lambda kv: str(kv[0]))}
    if cfg.use_gsp:
        stats["mean_w"] = projectors.mean_weights()
    return MergeResult(merged, stats)


def task_arithmetic(inst: TensorArchive, think: TensorArchive, alpha: float, threads: int = 1) -> TensorArchive:
    names = check_paired(inst, think)

    def one(name):
        base = load_f64(inst[name])
        return _finish(inst, name, apply_edit(base, alpha * delta(inst[name], think[name]))), {}

    return TensorArchive({n: v for n, (v, _) in _map_tensors(names, one, threads).items()})


def ties_update(d: np.ndarray, alpha: float, density: float) -> np.ndarray:
    """Single-task TIES: with one task vector, sign election and disjoint averaging are identities."""
    trimmed = trim_top_fraction(d, density)
    elected = np.sign(trimmed)  # majority sign of a single vector is its own sign
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    count = agree.astype(np.float64)  # disjoint mean over one contributor
    merged = np.where(count > 0, np.where(agree, trimmed, 0.0) / np.maximum(count, 1.0), 0.0)
    return alpha * merged


def ties(inst: TensorArchive, think: TensorArchive, alpha: float, density: float, threads: int = 1) -> TensorArchive:
    names = check_paired(inst, think)

    def one(name):
        base = load_f64(inst[name])
        edit = ties_update(delta(inst[name], think[name]), alpha, density)
        return _finish(inst, name, apply_edit(base, edit)), {}

    return TensorArchive({n: v for n, (v, _) in _map_tensors(names, one, threads).items()})


def slerp_vectors(a: np.ndarray, b: np.ndarray, t: float, eps: float = 1e-7) -> np.ndarray:
    """Spherical interpolation of two flattened tensors; linear fallback for tiny angles or zero norms."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    fa, fb = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        return (1.0 - t) * a + t * b
    cos = float(np.clip(np.dot(fa, fb) / (na * nb), -1.0, 1.0))
    omega = math.acos(cos)
    if omega < eps:
        return (1.0 - t) * a + t * b
    so = math.sin(omega)
    return (math.sin((1.0 - t) * omega) / so) * a + (math.sin(t * omega) / so) * b


def slerp(inst: TensorArchive, think: TensorArchive, t: float, threads: int = 1) -> TensorArchive:
    names = check_paired(inst, think)

    def one(name):
        if t == 0.0:
            return inst[name], {}
        if t == 1.0:
            return TensorView.from_array(load_f64(think[name]), inst[name].dtype), {}
        return _finish(inst, name, slerp_vectors(load_f64(inst[name]), load_f64(think[name]), t)), {}

    return TensorArchive({n: v for n, (v, _) in _map_tensors(names, one, threads).items()})


def aim_relax(update: np.ndarray, importance: np.ndarray, omega: float) -> np.ndarray:
    """Shrink input-channel columns toward ``omega`` in proportion to normalized importance."""
    update = np.asarray(update, dtype=np.float64)
    m = np.asarray(importance, dtype=np.float64)
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    if update.ndim != 2 or m.shape != (update.shape[1],):
        raise ValueError(f"importance of shape {m.shape} does not match {update.shape[-1]} input channels")
    if np.any(m < 0):
        raise ValueError("importance values must be non-negative")
    top = m.max() if m.size else 0.0
    if not top > 0:
        return update
    r = 1.0 - (1.0 - omega) * (m / top)
    return update * r


def aim_merge(
    inst: TensorArchive,
    think: TensorArchive,
    base: str,
    alpha: float,
    omega: float,
    importance: Mapping[str, np.ndarray],
    bound: BoundSchema | None = None,
    density: float = 0.5,
    threads: int = 1,
) -> TensorArchive:
    """Base-rule update (``ta`` or ``ties``) with AIM relaxation on 2-D weights that have importance vectors."""
    if base not in ("ta", "ties"):
        raise ValueError("AIM base rule must be 'ta' or 'ties'")
    names = check_paired(inst, think)
    missing = []

    def one(name):
        d = delta(inst[name], think[name])
        edit = alpha * d if base == "ta" else ties_update(d, alpha, density)
        exempt = edit.ndim != 2 or (bound is not None and name in bound and bound[name].kind in AIM_EXEMPT_KINDS)
        if not exempt:
            if name in importance:
                edit = aim_relax(edit, importance[name], omega)
            else:
                missing.append(name)
        return _finish(inst, name, apply_edit(load_f64(inst[name]), edit)), {}

    out = _map_tensors(names, one, threads)
    if missing:
        log.warning("AIM: %d weight tensors without importance vectors left unrelaxed", len(missing))
    return TensorArchive({n: v for n, (v, _) in out.items()})


def ttc(n_input: float, n_cached: float, n_output: float) -> float:
    """Weighted token count: input + 0.1 * cached + 5 * output."""
    if min(n_input, n_cached, n_output) < 0:
        raise ValueError("token counts must be non-negative")
    return n_input + 0.1 * n_cached + 5 * n_output
