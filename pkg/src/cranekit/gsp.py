"""Soft spectral projection of edits away from format-critical input directions."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .archive import TensorArchive, TensorView, open_archive, write_archive
from .calibration import Neighborhood

log = logging.getLogger(__name__)

RANK_FLOOR = 1e-10
EXP_CLAMP = 60.0
W_CLAMP = 1e-12


@dataclass
class ActivationMatrix:
    space_id: str
    rows: np.ndarray  # [N_q, d_q]
    positions: list[tuple[int, int]] = field(default_factory=list)


def build_activation_matrix(traces: Sequence, space_id: str, neighborhood: Neighborhood, d_q: int | None = None) -> ActivationMatrix:
    """Stack captured input activations at every neighborhood position, in (example, position) order.

    ``traces[i]`` is the ForwardTrace of format example ``i``. Positions where
    the space carries no activation (an expert that was not routed to) are
    skipped; any other missing capture is an error.
    """
    rows, positions = [], []
    for i, s in neighborhood.sorted():
        captured = dict(traces[i].captured.get(space_id, []))
        if s not in captured:
            if "expert" in space_id:
                continue
            raise KeyError(f"no capture for space {space_id!r} at example {i}, position {s}")
        rows.append(captured[s])
        positions.append((i, s))
    if rows:
        mat = np.vstack(rows).astype(np.float64)
    else:
        mat = np.zeros((0, d_q or 0))
    return ActivationMatrix(space_id, mat, positions)


def sigmoid_weights(a: np.ndarray, tau: float) -> np.ndarray:
    """Protection weights ``1 / (1 + exp(-k (a - tau)))`` with ``k = ln(99) / tau``."""
    k = slope(tau)
    z = np.clip(-k * (np.asarray(a, dtype=np.float64) - tau), -EXP_CLAMP, EXP_CLAMP)
    w = 1.0 / (1.0 + np.exp(z))
    return np.clip(w, W_CLAMP, 1.0 - W_CLAMP)


def slope(tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return math.log(99.0) / tau


@dataclass
class GspProjector:
    space_id: str
    V: np.ndarray  # [d_q, r] orthonormal columns
    sigma: np.ndarray  # [r] descending
    tau: float

    @property
    def k(self) -> float:
        return slope(self.tau)

    @property
    def amplitudes(self) -> np.ndarray:
        return self.sigma / self.sigma[0]

    @property
    def w(self) -> np.ndarray:
        return sigmoid_weights(self.amplitudes, self.tau)

    @property
    def d_q(self) -> int:
        return self.V.shape[0]

    def with_tau(self, tau: float) -> "GspProjector":
        return GspProjector(self.space_id, self.V, self.sigma, tau)


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column positive, so saved projectors are reproducible.
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def spectrum(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right singular vectors and singular values of ``H``, rank-truncated at 1e-10 * sigma_1.

    Tall matrices go through the d_q x d_q Gram matrix; singular values are then
    re-measured as ``||H v||`` so that null directions are not inflated by the
    eigenvalue round-off of ``H^T H``.
    """
    H = np.asarray(H, dtype=np.float64)
    n, d = H.shape
    if n > d:
        evals, evecs = np.linalg.eigh(H.T @ H)
        V = evecs[:, ::-1]
        sigma = np.linalg.norm(H @ V, axis=0)
        order = np.argsort(-sigma, kind="stable")
        V, sigma = V[:, order], sigma[order]
    else:
        _, sigma, Vt = np.linalg.svd(H, full_matrices=False)
        V = Vt.T
    if sigma.size == 0 or not sigma[0] > 0:
        return np.zeros((d, 0)), np.zeros(0)
    keep = sigma > RANK_FLOOR * sigma[0]
    return _canonical_signs(V[:, keep]), sigma[keep]


def build_projector(H: ActivationMatrix | np.ndarray, tau: float, space_id: str | None = None) -> GspProjector | None:
    """Projector for one activation space, or ``None`` (identity) when ``H`` is empty or numerically zero."""
    if isinstance(H, ActivationMatrix):
        space_id = space_id or H.space_id
        H = H.rows
    H = np.asarray(H, dtype=np.float64)
    slope(tau)
    if H.size == 0:
        return None
    if not np.all(np.isfinite(H)):
        raise ValueError(f"space {space_id!r}: non-finite activations")
    V, sigma = spectrum(H)
    if sigma.size == 0:
        return None
    return GspProjector(space_id or "", V, sigma, tau)


def project(delta: np.ndarray, proj: GspProjector | None) -> np.ndarray:
    """``delta - delta V diag(w) V^T``; identity when ``proj`` is None."""
    delta = np.asarray(delta, dtype=np.float64)
    if proj is None:
        return delta
    if delta.ndim != 2 or delta.shape[1] != proj.d_q:
        raise ValueError(f"edit of shape {delta.shape} does not act on a {proj.d_q}-dim input space")
    return delta - ((delta @ proj.V) * proj.w) @ proj.V.T


def orient(tensor: np.ndarray, input_side: str = "right") -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Put the protected input dimension on the right; returns the view and its inverse."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 2:
        raise ValueError(f"only 2-D tensors can be projected, got {tensor.ndim}-D")
    if input_side == "right":
        return tensor, lambda x: x
    if input_side == "left":
        return tensor.T, lambda x: x.T
    raise ValueError(f"input_side must be 'left' or 'right', got {input_side!r}")


def format_energy(delta: np.ndarray, H: np.ndarray) -> float:
    """``||H delta^T||_F^2``: squared output change over the protected activations."""
    delta, H = np.asarray(delta, np.float64), np.asarray(H, np.float64)
    if delta.shape[1] != H.shape[1]:
        raise ValueError("edit and activation matrix disagree on the input dimension")
    return float(np.sum((H @ delta.T) ** 2))


def spectral_energy(delta: np.ndarray, proj: GspProjector, weights: np.ndarray | None = None) -> float:
    """``sum_r sigma_r^2 (weight_r)^2 ||delta v_r||^2``; ``weights=None`` gives the unprojected energy."""
    delta = np.asarray(delta, np.float64)
    if delta.shape[1] != proj.d_q:
        raise ValueError("edit and projector disagree on the input dimension")
    col = np.sum((delta @ proj.V) ** 2, axis=0)
    scale = proj.sigma**2 if weights is None else proj.sigma**2 * np.asarray(weights) ** 2
    return float(np.sum(scale * col))


def post_projection_energy(delta: np.ndarray, proj: GspProjector) -> float:
    return spectral_energy(delta, proj, 1.0 - proj.w)


@dataclass
class GspProjectorSet:
    projectors: dict[str, GspProjector]
    identity_spaces: set[str]
    tau: float
    rho: int = 2
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        clash = set(self.projectors) & set(self.identity_spaces)
        if clash:
            raise ValueError(f"spaces both projected and identity: {sorted(clash)}")

    def get(self, space: str | None) -> GspProjector | None:
        if space is None or space in self.identity_spaces:
            return None
        return self.projectors.get(space)

    def with_tau(self, tau: float) -> "GspProjectorSet":
        return GspProjectorSet(
            {s: p.with_tau(tau) for s, p in self.projectors.items()}, set(self.identity_spaces), tau, self.rho, dict(self.metadata)
        )

    def mean_weights(self) -> dict[str, float]:
        return {s: float(np.mean(p.w)) for s, p in sorted(self.projectors.items())}

    def save(self, path) -> list[Path]:
        path = Path(path)
        tensors: dict[str, TensorView] = {}
        for s, p in self.projectors.items():
            tensors[f"{s}.V"] = TensorView.from_array(p.V, "F64")
            tensors[f"{s}.sigma"] = TensorView.from_array(p.sigma, "F64")
            tensors[f"{s}.w"] = TensorView.from_array(p.w, "F64")
        paths = write_archive(tensors, path)
        sidecar = {
            "tau": self.tau,
            "k": slope(self.tau),
            "rho": self.rho,
            "spaces": sorted(self.projectors),
            "identity_spaces": sorted(self.identity_spaces),
            "metadata": self.metadata,
        }
        sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
        return paths

    @classmethod
    def load(cls, path) -> "GspProjectorSet":
        path = Path(path)
        meta = json.loads(sidecar_path(path).read_text())
        arch = open_archive(path)
        projectors = {
            s: GspProjector(s, arch.f64(f"{s}.V"), arch.f64(f"{s}.sigma"), float(meta["tau"])) for s in meta["spaces"]
        }
        return cls(projectors, set(meta["identity_spaces"]), float(meta["tau"]), int(meta.get("rho", 2)), meta.get("metadata", {}))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def build_projector_set(
    matrices: Mapping[str, ActivationMatrix | np.ndarray], tau: float, rho: int = 2, spaces: Sequence[str] = ()
) -> GspProjectorSet:
    """Projectors for every space; spaces in ``spaces`` without usable activations become identity."""
    projectors, identity, empty = {}, set(spaces) - set(matrices), []
    for space in sorted(matrices):
        proj = build_projector(matrices[space], tau, space)
        if proj is None:
            empty.append(space)
        else:
            projectors[space] = proj
    if empty:
        log.warning("%d activation spaces have no usable activations and use the identity projector: %s", len(empty), empty)
    return GspProjectorSet(projectors, identity | set(empty), tau, rho)
