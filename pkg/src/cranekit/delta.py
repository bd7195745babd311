"""Thinking-minus-Instruct deltas and the median-magnitude sparsifier."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .archive import TensorArchive, TensorView, load_f64


class StructureError(ValueError):
    """Paired checkpoints disagree on tensor names or shapes."""


def check_paired(inst: Mapping[str, TensorView], think: Mapping[str, TensorView]) -> list[str]:
    only_inst = sorted(set(inst) - set(think))
    only_think = sorted(set(think) - set(inst))
    if only_inst or only_think:
        raise StructureError(
            f"checkpoints differ in tensor names: only in instruct {only_inst[:5]}, only in thinking {only_think[:5]}"
        )
    for name in sorted(inst):
        if inst[name].shape != think[name].shape:
            raise StructureError(f"tensor {name!r}: shape {list(inst[name].shape)} vs {list(think[name].shape)}")
    return sorted(inst)


def delta(inst: TensorView, think: TensorView) -> np.ndarray:
    """Elementwise ``think - inst`` in float64."""
    if inst.shape != think.shape:
        raise StructureError(f"shape mismatch {list(inst.shape)} vs {list(think.shape)}")
    return load_f64(think) - load_f64(inst)


def delta_archive(inst: TensorArchive, think: TensorArchive) -> dict[str, np.ndarray]:
    return {name: delta(inst[name], think[name]) for name in check_paired(inst, think)}


def sparsify(d: np.ndarray) -> np.ndarray:
    """Keep coordinates with ``|d| > median(|d|)`` and double them; zero the rest.

    The median is taken over this tensor only (even counts average the two
    middle order statistics). The inequality is strict, so ties at the median
    are dropped.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ValueError("cannot sparsify an empty tensor")
    mag = np.abs(d)
    keep = mag > np.median(mag)
    return np.where(keep, 2.0 * d, 0.0)


def trim_top_fraction(d: np.ndarray, density: float) -> np.ndarray:
    """TIES trim: keep the ``int(density * n)`` largest-magnitude entries, earlier index wins ties."""
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    flat = np.asarray(d, dtype=np.float64).ravel()
    k = int(density * flat.size)
    if k >= flat.size:
        return flat.reshape(np.shape(d)).copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:k]] = flat[order[:k]]
    return out.reshape(np.shape(d))
