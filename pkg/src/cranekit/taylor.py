"""Conservative Taylor gating and per-(component, layer) salience tables."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .archive import TensorArchive
from .schema import GLOBAL, MIXER_KINDS, NONE, BoundSchema, Layer

log = logging.getLogger(__name__)

ANCHOR_KIND = "ffn_anchor"


@dataclass
class CoordinateScores:
    s_r: np.ndarray
    s_a: np.ndarray
    p: np.ndarray


def coordinate_scores(
    g_r: Mapping[str, np.ndarray], g_a: Mapping[str, np.ndarray], delta: Mapping[str, np.ndarray]
) -> dict[str, CoordinateScores]:
    """Signed first-order improvements ``s_K = -g_K * delta`` and gate ``p = max(0, min(s_R, s_A))``."""
    out = {}
    for name in sorted(delta):
        d = np.asarray(delta[name], dtype=np.float64)
        if name not in g_r or name not in g_a:
            raise ValueError(f"missing gradient for tensor {name!r}")
        gr, ga = np.asarray(g_r[name], np.float64), np.asarray(g_a[name], np.float64)
        if gr.shape != d.shape or ga.shape != d.shape:
            raise ValueError(f"tensor {name!r}: gradient shapes {gr.shape}/{ga.shape} vs delta {d.shape}")
        s_r = -gr * d
        s_a = -ga * d
        out[name] = CoordinateScores(s_r, s_a, np.maximum(np.minimum(s_r, s_a), 0.0))
    return out


def _layer_key(layer: Layer):
    return (1, 0) if layer == GLOBAL else (0, int(layer))


def entry_key(kind: str, layer: Layer):
    return (kind, _layer_key(layer))


@dataclass
class SalienceTable:
    entries: dict[tuple[str, Layer], float]
    families: dict[tuple[str, Layer], str] = field(default_factory=dict)
    anchor_norms: dict[Layer, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def keys(self) -> list[tuple[str, Layer]]:
        return sorted(self.entries, key=lambda k: entry_key(*k))

    def coefficient(self, kind: str, layer: Layer) -> float:
        try:
            return self.entries[(kind, layer)]
        except KeyError:
            raise KeyError(f"salience table has no entry for ({kind}, {layer})") from None

    def anchor(self, layer: Layer) -> float:
        return self.entries[(ANCHOR_KIND, layer)]

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"kind": k, "layer": l, "value": self.entries[(k, l)], "family": self.families.get((k, l), NONE)}
                for k, l in self.keys()
            ],
            "anchor_norms": {str(l): v for l, v in sorted(self.anchor_norms.items(), key=lambda kv: _layer_key(kv[0]))},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SalienceTable":
        entries, families = {}, {}
        for e in d["entries"]:
            key = (e["kind"], e["layer"])
            entries[key] = float(e["value"])
            families[key] = e.get("family", NONE)
        norms = {(GLOBAL if k == GLOBAL else int(k)): float(v) for k, v in d.get("anchor_norms", {}).items()}
        return cls(entries, families, norms, dict(d.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SalienceTable":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        """Kind x layer grid, one row per kind, one column per layer."""
        layers = sorted({l for _, l in self.entries}, key=_layer_key)
        kinds = sorted({k for k, _ in self.entries})
        lines = ["kind," + ",".join(str(l) for l in layers)]
        for k in kinds:
            cells = [repr(self.entries[(k, l)]) if (k, l) in self.entries else "" for l in layers]
            lines.append(k + "," + ",".join(cells))
        return "\n".join(lines) + "\n"


def aggregate(
    scores: Mapping[str, CoordinateScores], bound: BoundSchema, inst: TensorArchive, metadata: dict | None = None
) -> SalienceTable:
    """Block salience relative to the layer's FFN/expert anchor, normalized by Frobenius norms.

    Expert replicas of one kind within a layer share one coefficient. Global
    components (embedding, lm_head, final norm) are measured against the mean
    of the per-layer anchor sums and norms.
    """
    p_sum: dict[tuple[str, Layer], float] = {}
    sq_norm: dict[tuple[str, Layer], float] = {}
    families: dict[tuple[str, Layer], str] = {}
    anchor_p: dict[Layer, float] = {}
    anchor_sq: dict[Layer, float] = {}

    # Fixed name order for the f64 reductions.
    for name in sorted(scores):
        if name not in bound:
            raise KeyError(f"scored tensor {name!r} is not mapped by the schema")
        b = bound[name]
        key = (b.kind, b.layer)
        p = float(np.sum(scores[name].p))
        w = inst.f64(name)
        nrm = float(np.sum(w * w))
        p_sum[key] = p_sum.get(key, 0.0) + p
        sq_norm[key] = sq_norm.get(key, 0.0) + nrm
        families[key] = b.family
        if b.kind in bound.schema.anchor and b.layer != GLOBAL:
            anchor_p[b.layer] = anchor_p.get(b.layer, 0.0) + p
            anchor_sq[b.layer] = anchor_sq.get(b.layer, 0.0) + nrm

    layers = sorted(anchor_p)
    anchor_norm = {l: math.sqrt(anchor_sq[l]) for l in layers}
    if layers:
        anchor_p[GLOBAL] = math.fsum(anchor_p[l] for l in layers) / len(layers)
        anchor_norm[GLOBAL] = math.fsum(anchor_norm[l] for l in layers) / len(layers)

    entries: dict[tuple[str, Layer], float] = {}
    for key in sorted(p_sum, key=lambda k: entry_key(*k)):
        kind, layer = key
        ap, an = anchor_p.get(layer, 0.0), anchor_norm.get(layer, 0.0)
        cn = math.sqrt(sq_norm[key])
        if ap <= 0.0:
            log.warning("layer %s: anchor gate sum is zero, no injection for (%s, %s)", layer, kind, layer)
            entries[key] = 0.0
        elif cn == 0.0:
            log.warning("(%s, %s): zero parameter norm, coefficient set to 0", kind, layer)
            entries[key] = 0.0
        else:
            entries[key] = (p_sum[key] / ap) * (an / cn)
    for layer in layers:
        ap, an = anchor_p[layer], anchor_norm[layer]
        entries[(ANCHOR_KIND, layer)] = (ap / ap) * (an / an) if ap > 0 and an > 0 else 1.0
        families[(ANCHOR_KIND, layer)] = NONE

    return SalienceTable(entries, families, {l: anchor_norm[l] for l in layers}, dict(metadata or {}))


def arch_normalize(table: SalienceTable, kappa: Mapping[str, float]) -> SalienceTable:
    """Divide mixer-component coefficients by the occupation divisor of their layer's family."""
    entries = {}
    for key, value in table.entries.items():
        kind, _ = key
        fam = table.families.get(key, NONE)
        k = float(kappa.get(fam, 1.0)) if kind in MIXER_KINDS else 1.0
        if not k > 0:
            raise ValueError(f"kappa for family {fam!r} must be positive, got {k}")
        entries[key] = value / k
    meta = dict(table.metadata, arch_normalized=True, kappa={f: float(v) for f, v in sorted(kappa.items())})
    return SalienceTable(entries, dict(table.families), dict(table.anchor_norms), meta)


def compare_salience(
    a: SalienceTable, b: SalienceTable, k_list: Sequence[int] = (10, 20, 30, 48), kinds: Iterable[str] | None = None
) -> dict:
    """Pearson/Spearman correlation and top-k overlap over the flattened (kind, layer) grid."""
    keys = a.keys()
    if keys != b.keys():
        raise ValueError("salience tables cover different (kind, layer) grids")
    if kinds is not None:
        wanted = set(kinds)
        keys = [k for k in keys if k[0] in wanted]
    x = np.array([a.entries[k] for k in keys])
    y = np.array([b.entries[k] for k in keys])
    out = {"n": len(keys), "pearson": _pearson(x, y), "spearman": _pearson(stats.rankdata(x), stats.rankdata(y))}
    overlap = {}
    for k in k_list:
        ta, tb = _top_k(keys, x, k), _top_k(keys, y, k)
        overlap[int(k)] = [len(ta & tb), min(k, len(keys))]
    out["top_k_overlap"] = overlap
    return out


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        return float("nan")
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    return float(np.dot(xc, yc)) / denom if denom > 0 else float("nan")


def _top_k(keys, values, k):
    order = sorted(range(len(keys)), key=lambda i: (-values[i], entry_key(*keys[i])))
    return {keys[i] for i in order[:k]}
