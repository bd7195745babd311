"""Calibration sets: masked-loss examples (R, A) and format traces (F)."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

SET_TAGS = ("R", "A", "F")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationExample:
    tokens: tuple[int, ...]
    mask: tuple[int, ...]
    set_tag: str = "R"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "mask", tuple(int(m) for m in self.mask))
        validate_example(self)

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens), "mask": list(self.mask), "set": self.set_tag})


def validate_example(ex: CalibrationExample) -> None:
    if ex.set_tag not in SET_TAGS:
        raise CalibrationError(f"unknown set tag {ex.set_tag!r}")
    if len(ex.mask) != len(ex.tokens):
        raise CalibrationError(f"mask length {len(ex.mask)} != token length {len(ex.tokens)}")
    if not ex.tokens:
        raise CalibrationError("empty token sequence")
    if any(m not in (0, 1) for m in ex.mask):
        raise CalibrationError("mask values must be 0 or 1")
    if ex.set_tag in ("R", "A"):
        if not any(ex.mask):
            raise CalibrationError(f"{ex.set_tag} example has an all-zero loss mask")
        if ex.mask[0]:
            raise CalibrationError(f"{ex.set_tag} example masks position 0, which has no prefix to predict from")


def load_calibration(path) -> list[CalibrationExample]:
    """Read a JSONL file of ``{"tokens", "mask", "set"}`` records."""
    path = Path(path)
    examples = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                examples.append(CalibrationExample(rec["tokens"], rec["mask"], rec["set"]))
            except (json.JSONDecodeError, KeyError, TypeError, CalibrationError) as exc:
                raise CalibrationError(f"{path}:{lineno}: {exc}") from exc
    if not examples:
        raise CalibrationError(f"{path}: no calibration records")
    log.info("loaded %s: %s", path, summarize(examples))
    return examples


def summarize(examples: Iterable[CalibrationExample]) -> str:
    counts = Counter(ex.set_tag for ex in examples)
    return " / ".join(f"{tag}={counts.get(tag, 0)}" for tag in SET_TAGS)


def save_calibration(examples: Iterable[CalibrationExample], path) -> None:
    Path(path).write_text("".join(ex.to_json() + "\n" for ex in examples))


def select(examples: Iterable[CalibrationExample], tag: str) -> list[CalibrationExample]:
    return [ex for ex in examples if ex.set_tag == tag]


@dataclass(frozen=True)
class FormatSupport:
    positions: frozenset[tuple[int, int]]

    def sorted(self) -> list[tuple[int, int]]:
        return sorted(self.positions)


@dataclass(frozen=True)
class Neighborhood:
    positions: frozenset[tuple[int, int]]
    radius: int

    def sorted(self) -> list[tuple[int, int]]:
        return sorted(self.positions)

    def by_example(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, s in self.sorted():
            out.setdefault(i, []).append(s)
        return out

    def __len__(self) -> int:
        return len(self.positions)


def format_support(examples: Sequence[CalibrationExample]) -> FormatSupport:
    """All (example index, position) pairs whose format mask is 1."""
    return FormatSupport(frozenset((i, s) for i, ex in enumerate(examples) for s, m in enumerate(ex.mask) if m))


def expand_neighborhood(support: FormatSupport, rho: int, lengths: Sequence[int]) -> Neighborhood:
    """Union of windows [s - rho, s + rho] clipped to [0, len - 1] within each example."""
    if rho < 0:
        raise ValueError("neighborhood radius must be non-negative")
    out = set()
    for i, s in support.positions:
        lo, hi = max(0, s - rho), min(lengths[i] - 1, s + rho)
        out.update((i, t) for t in range(lo, hi + 1))
    return Neighborhood(frozenset(out), rho)
