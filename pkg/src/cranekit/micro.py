"""Desk-scale decoder-only transformer used to produce gradients and activations.

Pre-norm residual blocks (RMSNorm), a full causal softmax-attention or ungated
linear-attention mixer per layer, and a dense SwiGLU FFN or a top-1 routed
mixture of SwiGLU experts. All arithmetic runs in float64.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .archive import TensorArchive, TensorView, fnv1a64
from .calibration import CalibrationExample
from .schema import FULL, LINEAR

RMS_EPS = 1e-6
_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


@dataclass
class MicroConfig:
    vocab: int = 16
    d_model: int = 8
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 2
    moe_experts: int = 0
    mixer_families: list[str] = field(default_factory=list)
    seed: int = 0
    dtype: str = "F64"

    def __post_init__(self):
        if not self.mixer_families:
            self.mixer_families = [FULL] * self.n_layers
        self.validate()

    def validate(self) -> None:
        if self.vocab < 2:
            raise ConfigError("vocab must be at least 2")
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be a positive multiple of n_heads")
        if self.n_layers <= 0 or self.ffn_mult <= 0 or self.moe_experts < 0:
            raise ConfigError("n_layers and ffn_mult must be positive, moe_experts non-negative")
        if len(self.mixer_families) != self.n_layers:
            raise ConfigError("mixer_families must have one entry per layer")
        bad = set(self.mixer_families) - {FULL, LINEAR}
        if bad:
            raise ConfigError(f"unknown mixer families {sorted(bad)}")

    @property
    def d_ff(self) -> int:
        return self.d_model * self.ffn_mult

    def schema_preset(self) -> str:
        if LINEAR in self.mixer_families:
            return "micro-hybrid"
        return "micro-moe" if self.moe_experts else "micro-dense"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MicroConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------- initialization


def splitmix64(seed: int, n: int) -> np.ndarray:
    """``n`` consecutive outputs of the SplitMix64 generator started at ``seed``."""
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & _MASK64) + steps * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def normal_stream(seed: int, n: int) -> np.ndarray:
    """Standard normals from SplitMix64 uniforms via Box-Muller (cos and sin branches)."""
    pairs = (n + 1) // 2
    bits = splitmix64(seed, 2 * pairs)
    u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u1 = 1.0 - u[0::2]  # (0, 1]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


def _tensor_seed(seed: int, name: str) -> int:
    return int(splitmix64(seed ^ fnv1a64(name.encode()), 1)[0])


def param_shapes(config: MicroConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ff, config.vocab
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (v, d),
        "final_norm.weight": (d,),
        "lm_head.weight": (v, d),
    }
    for l, fam in enumerate(config.mixer_families):
        p = f"layers.{l}"
        mix = "attn" if fam == FULL else "linattn"
        shapes[f"{p}.attn_norm.weight"] = (d,)
        shapes[f"{p}.ffn_norm.weight"] = (d,)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[f"{p}.{mix}.{proj}.weight"] = (d, d)
        if config.moe_experts:
            shapes[f"{p}.moe.router.weight"] = (config.moe_experts, d)
            for e in range(config.moe_experts):
                q = f"{p}.moe.experts.{e}"
                shapes[f"{q}.gate_proj.weight"] = (f, d)
                shapes[f"{q}.up_proj.weight"] = (f, d)
                shapes[f"{q}.down_proj.weight"] = (d, f)
        else:
            shapes[f"{p}.mlp.gate_proj.weight"] = (f, d)
            shapes[f"{p}.mlp.up_proj.weight"] = (f, d)
            shapes[f"{p}.mlp.down_proj.weight"] = (d, f)
    return shapes


def init_params(config: MicroConfig) -> TensorArchive:
    """Deterministic parameters; each tensor draws from its own name-keyed stream."""
    config.validate()
    arrays = {}
    for name, shape in param_shapes(config).items():
        z = normal_stream(_tensor_seed(config.seed, name), int(np.prod(shape))).reshape(shape)
        if name.endswith("norm.weight"):
            arrays[name] = 1.0 + 0.1 * z
        elif name == "embed.weight":
            arrays[name] = z
        else:
            arrays[name] = z / math.sqrt(shape[-1])
    return TensorArchive.from_arrays(arrays, config.dtype)


# ---------------------------------------------------------------- forward


@contextlib.contextmanager
def _single_thread():
    # Fixed reduction order for bit-reproducible gradients.
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _rms(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + RMS_EPS) * w


def _swiglu(h, gate, up, down, tap=None):
    mid = torch.nn.functional.silu(h @ gate.T) * (h @ up.T)
    if tap is not None:
        tap(mid)
    return mid @ down.T


def _mixer(h: torch.Tensor, P, prefix: str, family: str, n_heads: int) -> torch.Tensor:
    S, d = h.shape
    dh = d // n_heads
    q = (h @ P[f"{prefix}.q_proj.weight"].T).view(S, n_heads, dh).transpose(0, 1)
    k = (h @ P[f"{prefix}.k_proj.weight"].T).view(S, n_heads, dh).transpose(0, 1)
    v = (h @ P[f"{prefix}.v_proj.weight"].T).view(S, n_heads, dh).transpose(0, 1)
    causal = torch.ones(S, S, dtype=torch.bool).tril()
    if family == FULL:
        scores = (q @ k.transpose(1, 2)) / math.sqrt(dh)
        scores = scores.masked_fill(~causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
    else:
        # Ungated state S_t = sum_{s<=t} k_s v_s^T read out as q_t^T S_t / t.
        scores = (q @ k.transpose(1, 2)) * causal
        steps = torch.arange(1, S + 1, dtype=h.dtype).view(1, S, 1)
        out = (scores @ v) / steps
    return out.transpose(0, 1).reshape(S, d)


def _run(P: Mapping[str, torch.Tensor], config: MicroConfig, tokens: torch.Tensor, taps: dict | None = None):
    """Logits for one sequence; ``taps`` collects input activations keyed by space id."""

    def tap(space, value, positions=None):
        if taps is not None:
            taps[space] = (positions, value)

    S = tokens.shape[0]
    x = P["embed.weight"][tokens]
    for l, fam in enumerate(config.mixer_families):
        p = f"layers.{l}"
        mix = f"{p}.attn" if fam == FULL else f"{p}.linattn"
        h = _rms(x, P[f"{p}.attn_norm.weight"])
        tap(f"{p}.attn_in", h)
        a = _mixer(h, P, mix, fam, config.n_heads)
        tap(f"{p}.mixer_out", a)
        x = x + a @ P[f"{mix}.o_proj.weight"].T

        h2 = _rms(x, P[f"{p}.ffn_norm.weight"])
        tap(f"{p}.ffn_in", h2)
        if config.moe_experts:
            r = h2 @ P[f"{p}.moe.router.weight"].T
            probs = torch.softmax(r, dim=-1)
            choice = torch.argmax(r, dim=-1)
            y = torch.zeros_like(h2)
            for e in range(config.moe_experts):
                sel = (choice == e).nonzero().flatten()
                if sel.numel() == 0:
                    continue
                q = f"{p}.moe.experts.{e}"
                out = _swiglu(
                    h2[sel],
                    P[f"{q}.gate_proj.weight"],
                    P[f"{q}.up_proj.weight"],
                    P[f"{q}.down_proj.weight"],
                    tap=lambda m, e=e, sel=sel: tap(f"{p}.expert{e}_mid", m, sel.tolist()),
                )
                y = y.index_add(0, sel, probs[sel, e : e + 1] * out)
        else:
            y = _swiglu(
                h2,
                P[f"{p}.mlp.gate_proj.weight"],
                P[f"{p}.mlp.up_proj.weight"],
                P[f"{p}.mlp.down_proj.weight"],
                tap=lambda m: tap(f"{p}.mlp_mid", m),
            )
        x = x + y
    hf = _rms(x, P["final_norm.weight"])
    tap("final_in", hf)
    return hf @ P["lm_head.weight"].T


def _torch_params(params: TensorArchive | Mapping[str, np.ndarray], requires_grad=False) -> dict[str, torch.Tensor]:
    out = {}
    for name in params:
        arr = params.f64(name) if isinstance(params, TensorArchive) else np.asarray(params[name], dtype=np.float64)
        out[name] = torch.tensor(arr, dtype=torch.float64, requires_grad=requires_grad)
    return out


def _check_tokens(tokens: Sequence[int], config: MicroConfig) -> torch.Tensor:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D list")
    if t.min() < 0 or t.max() >= config.vocab:
        raise ValueError(f"token id out of range [0, {config.vocab})")
    return torch.from_numpy(t)


@dataclass
class ForwardTrace:
    logits: np.ndarray  # [seq, vocab]
    captured: dict[str, list[tuple[int, np.ndarray]]]  # space -> [(position, vector)]


def forward(params, config: MicroConfig, tokens: Sequence[int], capture: Mapping[str, Iterable[int]] | None = None) -> ForwardTrace:
    """Evaluate logits; capture pre-linear input activations at requested positions.

    Positions where a space is undefined (an expert that was not routed to)
    are silently absent from the capture.
    """
    tok = _check_tokens(tokens, config)
    taps: dict = {}
    with torch.no_grad(), _single_thread():
        logits = _run(_torch_params(params), config, tok, taps if capture else None)
    captured: dict[str, list[tuple[int, np.ndarray]]] = {}
    for space, positions in (capture or {}).items():
        if space not in taps:
            captured[space] = []
            continue
        tap_pos, value = taps[space]
        value = value.numpy()
        row_of = {p: i for i, p in enumerate(tap_pos)} if tap_pos is not None else None
        rows = []
        for pos in sorted(set(positions)):
            if row_of is None:
                if 0 <= pos < value.shape[0]:
                    rows.append((pos, value[pos].copy()))
            elif pos in row_of:
                rows.append((pos, value[row_of[pos]].copy()))
        captured[space] = rows
    return ForwardTrace(logits.numpy(), captured)


def _nll_sum(P, config: MicroConfig, example: CalibrationExample) -> tuple[torch.Tensor, int]:
    mask = np.asarray(example.mask)
    if len(mask) != len(example.tokens):
        raise ValueError("mask length must equal token length")
    if mask[0]:
        raise ValueError("position 0 has no prefix and cannot carry a loss mask")
    m = int(mask.sum())
    if m == 0:
        raise ValueError("example has an all-zero loss mask")
    tok = _check_tokens(example.tokens, config)
    logits = _run(P, config, tok)
    logp = torch.log_softmax(logits[:-1], dim=-1)
    picked = logp.gather(1, tok[1:].view(-1, 1)).flatten()
    weights = torch.from_numpy(mask[1:].astype(np.float64))
    return -(picked * weights).sum(), m


def masked_nll(params, config: MicroConfig, example: CalibrationExample | Sequence[CalibrationExample]) -> float:
    """Token-weighted masked negative log-likelihood of one example or a batch."""
    examples = [example] if isinstance(example, CalibrationExample) else list(example)
    P = _torch_params(params)
    total, m = 0.0, 0
    with torch.no_grad(), _single_thread():
        for ex in examples:
            s, k = _nll_sum(P, config, ex)
            total += float(s)
            m += k
    return total / m


class GradientSet(dict):
    """name -> f64 gradient array, same shapes as the parameters."""

    def to_archive(self) -> TensorArchive:
        return TensorArchive.from_arrays(self, "F64")

    @classmethod
    def from_archive(cls, archive: TensorArchive) -> "GradientSet":
        return cls(archive.to_f64_dict())


def gradients(params, config: MicroConfig, dataset: Sequence[CalibrationExample], loss_scale: float = 1.0) -> GradientSet:
    """Exact gradient of ``loss_scale * (1/M) * sum of masked NLL`` with M the total masked-token count."""
    if not dataset:
        raise ValueError("gradient dataset is empty")
    P = _torch_params(params, requires_grad=True)
    total_m = 0
    with _single_thread():
        for ex in dataset:
            s, m = _nll_sum(P, config, ex)
            s.backward()
            total_m += m
    out = GradientSet()
    for name in sorted(P):
        g = P[name].grad
        g = np.zeros(P[name].shape) if g is None else g.numpy().copy()
        out[name] = g * loss_scale / total_m
    return out


def dataset_loss_fn(params, config: MicroConfig, dataset: Sequence[CalibrationExample]):
    """A callable ``f(name, index, value) -> loss`` for coordinate perturbation checks.

    Holds one float64 copy of the parameters and evaluates the dataset loss with
    a single coordinate temporarily replaced.
    """
    P = _torch_params(params)

    def loss(name: str | None = None, index=None, value: float | None = None) -> float:
        with torch.no_grad(), _single_thread():
            if name is not None:
                flat = P[name].view(-1)
                old = float(flat[index])
                flat[index] = value
            try:
                total, m = 0.0, 0
                for ex in dataset:
                    s, k = _nll_sum(P, config, ex)
                    total += float(s)
                    m += k
                return total / m
            finally:
                if name is not None:
                    flat[index] = old

    return loss
