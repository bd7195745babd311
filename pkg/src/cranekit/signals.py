"""Signal computation on the built-in micro model: gradients, format activations, AIM importances."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

from .archive import TensorArchive
from .calibration import CalibrationExample, expand_neighborhood, format_support
from .gsp import ActivationMatrix, GspProjectorSet, build_activation_matrix, build_projector_set
from .micro import MicroConfig, forward, gradients
from .schema import BoundSchema
from .taylor import SalienceTable, aggregate, coordinate_scores

log = logging.getLogger(__name__)

RESIDUAL_SUFFIXES = (".attn_in", ".ffn_in", "final_in")


def default_spaces(bound: BoundSchema, collect_intermediate: bool = False) -> list[str]:
    """Residual-stream input spaces, plus mixer/MLP intermediates when requested."""
    spaces = bound.spaces()
    if collect_intermediate:
        return spaces
    return [s for s in spaces if s.endswith(RESIDUAL_SUFFIXES)]


def salience_table(
    inst: TensorArchive,
    delta: Mapping[str, np.ndarray],
    g_r: Mapping[str, np.ndarray],
    g_a: Mapping[str, np.ndarray],
    bound: BoundSchema,
    metadata: dict | None = None,
) -> SalienceTable:
    return aggregate(coordinate_scores(g_r, g_a, delta), bound, inst, metadata)


def micro_salience(
    inst: TensorArchive,
    config: MicroConfig,
    delta: Mapping[str, np.ndarray],
    d_r: Sequence[CalibrationExample],
    d_a: Sequence[CalibrationExample],
    bound: BoundSchema,
    loss_scale: float = 1.0,
) -> SalienceTable:
    g_r = gradients(inst, config, d_r, loss_scale)
    g_a = gradients(inst, config, d_a, loss_scale)
    meta = {"n_r": len(d_r), "n_a": len(d_a), "m_r": sum(map(_masked, d_r)), "m_a": sum(map(_masked, d_a))}
    return salience_table(inst, delta, g_r, g_a, bound, meta)


def _masked(ex: CalibrationExample) -> int:
    return sum(ex.mask)


def format_matrices(
    inst: TensorArchive,
    config: MicroConfig,
    d_f: Sequence[CalibrationExample],
    spaces: Sequence[str],
    rho: int = 2,
) -> dict[str, ActivationMatrix]:
    """Activation matrices over the radius-``rho`` neighborhood of the format-mask support."""
    support = format_support(d_f)
    hood = expand_neighborhood(support, rho, [len(ex.tokens) for ex in d_f])
    per_example = hood.by_example()
    traces = []
    for i, ex in enumerate(d_f):
        positions = per_example.get(i, [])
        traces.append(forward(inst, config, ex.tokens, {s: positions for s in spaces} if positions else None))
    dims = {s: _space_dim(inst, config, s) for s in spaces}
    return {s: build_activation_matrix(traces, s, hood, dims[s]) for s in spaces}


def _space_dim(inst: TensorArchive, config: MicroConfig, space: str) -> int:
    return config.d_ff if space.endswith("_mid") else config.d_model


def micro_projectors(
    inst: TensorArchive,
    config: MicroConfig,
    d_f: Sequence[CalibrationExample],
    bound: BoundSchema,
    tau: float = 0.03,
    rho: int = 2,
    collect_intermediate: bool = False,
) -> GspProjectorSet:
    collected = default_spaces(bound, collect_intermediate)
    if not d_f:
        log.warning("empty format set: every activation space uses the identity projector")
    mats = format_matrices(inst, config, d_f, collected, rho) if d_f else {}
    pset = build_projector_set(mats, tau, rho, spaces=bound.spaces())
    pset.metadata.update({"n_f": len(d_f), "collected_spaces": collected})
    return pset


def aim_importance(
    inst: TensorArchive, config: MicroConfig, examples: Sequence[CalibrationExample], bound: BoundSchema
) -> dict[str, np.ndarray]:
    """Mean absolute input activation per channel for every 2-D weight with a captured space."""
    spaces = bound.spaces()
    sums = {s: None for s in spaces}
    counts = {s: 0 for s in spaces}
    for ex in examples:
        trace = forward(inst, config, ex.tokens, {s: range(len(ex.tokens)) for s in spaces})
        for s, rows in trace.captured.items():
            for _, vec in rows:
                sums[s] = np.abs(vec) if sums[s] is None else sums[s] + np.abs(vec)
                counts[s] += 1
    means = {s: sums[s] / counts[s] for s in spaces if counts[s]}
    out = {}
    for name in bound.names():
        b = bound[name]
        if b.space in means and len(inst[name].shape) == 2:
            out[name] = means[b.space]
    return out
