"""Planted-structure fixtures and end-to-end checks of selective injection.

A planted pair edits every 2-D weight on a small "support" set with large
deltas and on a "noise" set with one shared small magnitude. Because more
than half of each tensor's |delta| sits at or below that shared magnitude, the
median equals it and the strict Stage-1 test removes every noise coordinate.
Gradients on planted coordinates come from quadratic surrogates whose signs
agree on the support and disagree on the noise; format activations are
planted to lie exactly in a known low-rank basis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .archive import TensorArchive
from .calibration import CalibrationExample
from .delta import delta_archive, sparsify
from .gsp import build_projector_set, format_energy, orient, project
from .merge import MergeConfig, crane_merge
from .micro import MicroConfig, gradients, init_params
from .schema import bind, preset
from .signals import default_spaces
from .taylor import aggregate, coordinate_scores

GRID = 2.0**-24


class PlantingError(ValueError):
    pass


@dataclass
class PlantingSpec:
    seed: int = 0
    support_fraction: float = 0.125
    zero_fraction: float = 0.25  # share of non-support coordinates left exactly unchanged
    format_rank: int = 2
    n_format_rows: int = 12
    n_calibration: int = 3
    seq_len: int = 8


@dataclass
class PlantedPair:
    config: MicroConfig
    inst: TensorArchive
    think: TensorArchive
    support: dict[str, np.ndarray]  # flat indices per tensor
    noise: dict[str, np.ndarray]
    format_basis: dict[str, np.ndarray]  # space -> [d_q, rank] orthonormal
    format_rows: dict[str, np.ndarray]  # space -> planted activation matrix
    d_r: list[CalibrationExample]
    d_a: list[CalibrationExample]
    seed: int


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(x / GRID) * GRID


def plant_tensor(base: np.ndarray, n_support: int, n_noise: int, rng: np.random.Generator):
    """Planted delta for one tensor: (delta, support indices, noise indices)."""
    flat = base.ravel()
    D = flat.size
    if n_support + n_noise > D or n_support < 0 or n_noise < 0:
        raise PlantingError(f"{n_support} support + {n_noise} noise coordinates exceed tensor size {D}")
    if 2 * n_support >= D:
        raise PlantingError("support must cover fewer than half the coordinates")
    mags = np.abs(flat)
    hi = float(np.percentile(mags, 75)) or 1.0
    lo = float(np.percentile(mags, 25)) or hi / 4
    noise_mag = _quantize(np.array(0.5 * lo))
    if noise_mag <= 0:
        noise_mag = GRID
    perm = rng.permutation(D)
    support, noise = np.sort(perm[:n_support]), np.sort(perm[n_support : n_support + n_noise])
    d = np.zeros(D)
    signs = rng.choice([-1.0, 1.0], size=D)
    d[support] = _quantize(signs[support] * rng.uniform(hi, 2 * hi, size=n_support))
    d[noise] = signs[noise] * noise_mag
    if n_noise and np.median(np.abs(d)) != noise_mag:
        raise PlantingError(
            f"planting leaves the median |delta| at {np.median(np.abs(d))}, not at the noise magnitude; "
            "use fewer zero coordinates"
        )
    return d.reshape(base.shape), support, noise


def _random_tokens(rng, config: MicroConfig, n: int, seq_len: int, tag: str) -> list[CalibrationExample]:
    out = []
    for _ in range(n):
        toks = rng.integers(0, config.vocab, size=seq_len).tolist()
        mask = [0] + [1] * (seq_len - 1)
        out.append(CalibrationExample(toks, mask, tag))
    return out


def plant_pair(config: MicroConfig, spec: PlantingSpec | None = None) -> PlantedPair:
    spec = spec or PlantingSpec()
    rng = np.random.default_rng(spec.seed)
    base = init_params(config)
    bound = bind(preset(config.schema_preset()), base)
    inst, think, support, noise = {}, {}, {}, {}
    for name in base:
        w = _quantize(base.f64(name))
        inst[name] = w
        if w.ndim != 2:
            think[name] = w
            continue
        D = w.size
        n_s = max(1, int(round(spec.support_fraction * D)))
        n_n = D - n_s - int(spec.zero_fraction * (D - n_s))
        d, support[name], noise[name] = plant_tensor(w, n_s, n_n, rng)
        think[name] = w + d

    basis, rows = {}, {}
    for space in default_spaces(bound):
        d_q = config.d_model
        if spec.format_rank > d_q or spec.format_rank > spec.n_format_rows:
            raise PlantingError("format rank exceeds the activation dimension or row count")
        B, _ = np.linalg.qr(rng.standard_normal((d_q, spec.format_rank)))
        Q, _ = np.linalg.qr(rng.standard_normal((spec.n_format_rows, spec.format_rank)))
        basis[space] = B
        rows[space] = Q @ B.T  # every singular value equals 1

    d_r = _random_tokens(rng, config, spec.n_calibration, spec.seq_len, "R")
    d_a = _random_tokens(rng, config, spec.n_calibration, spec.seq_len, "A")
    return PlantedPair(
        config,
        TensorArchive.from_arrays(inst, "F64"),
        TensorArchive.from_arrays(think, "F64"),
        support,
        noise,
        basis,
        rows,
        d_r,
        d_a,
        spec.seed,
    )


def surrogate_gradients(pair: PlantedPair, delta: dict[str, np.ndarray]):
    """Masked-NLL gradients with planted coordinates replaced by quadratic-surrogate gradients.

    Both surrogates pull planted support coordinates toward the Thinking
    values (gradient ``-delta``). On noise coordinates the reasoning surrogate
    still pulls toward Thinking while the agent surrogate pulls away
    (gradient ``+delta``), so the two first-order scores disagree in sign.
    """
    g_r = gradients(pair.inst, pair.config, pair.d_r)
    g_a = gradients(pair.inst, pair.config, pair.d_a)
    for name in pair.support:
        d = delta[name].ravel()
        gr, ga = g_r[name].ravel(), g_a[name].ravel()
        for idx in (pair.support[name], pair.noise[name]):
            gr[idx] = -d[idx]
        ga[pair.support[name]] = -d[pair.support[name]]
        ga[pair.noise[name]] = d[pair.noise[name]]
    return g_r, g_a


@dataclass
class VerificationReport:
    stage1_noise_removal_rate: float
    ctg_selectivity: float
    gsp_energy_ratio: float
    gsp_energy_bound: float
    edited_coordinates: int
    edited_outside_support: int
    n_gated: int
    seed: int
    alpha: float
    tau: float
    passed: dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("stage-1 noise removal", f"{self.stage1_noise_removal_rate:.6f}"),
            ("CTG selectivity", f"{self.ctg_selectivity:.6f}"),
            ("GSP energy ratio", f"{self.gsp_energy_ratio:.3e}"),
            ("GSP energy bound", f"{self.gsp_energy_bound:.3e}"),
            ("edited coords (GSP off)", str(self.edited_coordinates)),
            ("edited outside support", str(self.edited_outside_support)),
        ]
        rows += [(f"pass: {k}", "yes" if v else "NO") for k, v in sorted(self.passed.items())]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def verify_pipeline(pair: PlantedPair, cfg: MergeConfig | None = None, energy_tol: float = 1e-4) -> VerificationReport:
    cfg = cfg or MergeConfig()
    bound = bind(preset(pair.config.schema_preset()), pair.inst)
    delta = delta_archive(pair.inst, pair.think)

    kept_noise = total_noise = 0
    for name, idx in pair.noise.items():
        t = sparsify(delta[name]).ravel()
        kept_noise += int(np.count_nonzero(t[idx]))
        total_noise += idx.size
    noise_removal = 1.0 - kept_noise / total_noise if total_noise else 1.0

    g_r, g_a = surrogate_gradients(pair, delta)
    scores = coordinate_scores(g_r, g_a, delta)
    gated = inside = 0
    for name, sc in scores.items():
        on = np.flatnonzero(sc.p.ravel() > 0)
        gated += on.size
        if name in pair.support:
            inside += np.isin(on, pair.support[name]).sum()
    selectivity = inside / gated if gated else 1.0
    table = aggregate(scores, bound, pair.inst, {"seed": pair.seed})

    projectors = build_projector_set(pair.format_rows, cfg.tau, cfg.rho, spaces=bound.spaces())

    # GSP off: every edited coordinate must lie in the planted support.
    plain = MergeConfig(**{**cfg.to_dict(), "use_gsp": False})
    merged = crane_merge(pair.inst, pair.think, bound, table, None, plain).archive
    edited = outside = 0
    for name in merged:
        changed = np.flatnonzero(merged.f64(name).ravel() != pair.inst.f64(name).ravel())
        edited += changed.size
        sup = pair.support.get(name, np.array([], dtype=int))
        outside += int((~np.isin(changed, sup)).sum())

    pre = post = 0.0
    w_min = 1.0
    for name in bound.names():
        b = bound[name]
        proj = projectors.get(b.space)
        if proj is None or delta[name].ndim != 2:
            continue
        coef = table.coefficient(b.kind, b.layer) if cfg.use_taylor else 1.0
        t = sparsify(delta[name]) if cfg.use_sparsifier else delta[name]
        edit, _ = orient((cfg.alpha * coef) * t, b.input_side)
        H = pair.format_rows[b.space]
        pre += format_energy(edit, H)
        post += format_energy(project(edit, proj), H)
        w_min = min(w_min, float(proj.w.min()))
    ratio = post / pre if pre > 0 else 0.0
    bound_val = (1.0 - w_min) ** 2

    report = VerificationReport(
        stage1_noise_removal_rate=float(noise_removal),
        ctg_selectivity=float(selectivity),
        gsp_energy_ratio=float(ratio),
        gsp_energy_bound=float(bound_val),
        edited_coordinates=int(edited),
        edited_outside_support=int(outside),
        n_gated=int(gated),
        seed=pair.seed,
        alpha=cfg.alpha,
        tau=cfg.tau,
    )
    report.passed = {
        "noise_removal": report.stage1_noise_removal_rate == 1.0,
        "selectivity": report.ctg_selectivity == 1.0,
        "edits_in_support": report.edited_outside_support == 0,
        "energy_ratio": report.gsp_energy_ratio <= min(energy_tol, bound_val + 1e-12),
    }
    return report
