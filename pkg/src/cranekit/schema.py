"""Component taxonomy: tensor name -> (layer, kind, mixer family, activation space)."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

FULL = "full_attention"
LINEAR = "linear_attention"
NONE = "none"
FAMILIES = (FULL, LINEAR, NONE)
MIXER_FAMILIES = (FULL, LINEAR)

KINDS = (
    "q_proj", "k_proj", "v_proj", "o_proj",
    "expert_gate", "expert_up", "expert_down",
    "dense_gate", "dense_up", "dense_down",
    "router", "norm", "lm_head", "embedding", "mixer_inner",
)  # fmt: skip
EXPERT_KINDS = frozenset({"expert_gate", "expert_up", "expert_down"})
MIXER_KINDS = frozenset({"q_proj", "k_proj", "v_proj", "o_proj", "mixer_inner"})
GLOBAL = "global"

Layer = Union[int, str]


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ComponentId:
    kind: str
    layer: Layer
    expert: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown component kind {self.kind!r}")
        if (self.expert is not None) != (self.kind in EXPERT_KINDS):
            raise SchemaError(f"expert index must be present iff kind is an expert kind ({self.kind!r})")


@dataclass(frozen=True)
class Rule:
    """``pattern`` is literal text with optional ``{layer}`` / ``{expert}`` numeric captures."""

    pattern: str
    kind: str
    family: str = NONE
    space: str | None = None  # activation space template, may use {layer}/{expert}
    input_side: str = "right"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"rule {self.pattern!r}: unknown kind {self.kind!r}")
        if self.family not in FAMILIES:
            raise SchemaError(f"rule {self.pattern!r}: unknown family {self.family!r}")
        if self.input_side not in ("left", "right"):
            raise SchemaError(f"rule {self.pattern!r}: input_side must be left or right")
        has_expert = "{expert}" in self.pattern
        if has_expert != (self.kind in EXPERT_KINDS):
            raise SchemaError(f"rule {self.pattern!r}: {{expert}} capture required iff kind is an expert kind")

    def compile(self) -> re.Pattern:
        parts = re.split(r"(\{layer\}|\{expert\})", self.pattern)
        rx = []
        for p in parts:
            if p == "{layer}":
                rx.append(r"(?P<layer>\d+)")
            elif p == "{expert}":
                rx.append(r"(?P<expert>\d+)")
            else:
                rx.append(re.escape(p))
        return re.compile("".join(rx) + r"\Z")


@dataclass(frozen=True)
class Binding:
    component: ComponentId
    family: str
    space: str | None
    input_side: str = "right"

    @property
    def kind(self) -> str:
        return self.component.kind

    @property
    def layer(self) -> Layer:
        return self.component.layer


@dataclass
class ModelSchema:
    rules: list[Rule]
    anchor: frozenset[str] = frozenset({"dense_gate", "dense_up", "dense_down", "expert_gate", "expert_up", "expert_down"})
    occupation: dict[str, int] = field(default_factory=dict)
    kappa: dict[str, float] | str = "auto"
    reference_family: str = FULL
    name: str = "custom"

    def __post_init__(self):
        bad = set(self.anchor) - set(KINDS)
        if bad or not self.anchor:
            raise SchemaError(f"invalid anchor kinds {sorted(bad)}")
        if "router" in self.anchor:
            raise SchemaError("the router is not part of the FFN/expert anchor")
        self._compiled = [(r, r.compile()) for r in self.rules]

    def match(self, name: str) -> list[tuple[Rule, re.Match]]:
        return [(r, m) for r, rx in self._compiled if (m := rx.match(name))]

    # -- serialization
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rules": [
                {"pattern": r.pattern, "kind": r.kind, "family": r.family, "space": r.space, "input_side": r.input_side}
                for r in self.rules
            ],
            "anchor": sorted(self.anchor),
            "occupation": dict(self.occupation),
            "kappa": self.kappa if isinstance(self.kappa, str) else dict(self.kappa),
            "reference_family": self.reference_family,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSchema":
        try:
            rules = [Rule(**r) for r in d["rules"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema rules: {exc}") from exc
        return cls(
            rules=rules,
            anchor=frozenset(d.get("anchor", cls.__dataclass_fields__["anchor"].default)),
            occupation=dict(d.get("occupation", {})),
            kappa=d.get("kappa", "auto"),
            reference_family=d.get("reference_family", FULL),
            name=d.get("name", "custom"),
        )


@dataclass(frozen=True)
class BoundSchema:
    schema: ModelSchema
    bindings: dict[str, Binding]

    def __getitem__(self, name: str) -> Binding:
        return self.bindings[name]

    def __contains__(self, name: str) -> bool:
        return name in self.bindings

    def names(self) -> list[str]:
        return sorted(self.bindings)

    def layers(self) -> list[int]:
        return sorted({b.layer for b in self.bindings.values() if b.layer != GLOBAL})

    def layer_family(self, layer: Layer) -> str:
        """Family of the token mixer in ``layer`` (``none`` for global or mixer-less layers)."""
        fams = {b.family for b in self.bindings.values() if b.layer == layer and b.family != NONE}
        return fams.pop() if fams else NONE

    def anchor_names(self, layer: int) -> list[str]:
        return sorted(n for n, b in self.bindings.items() if b.layer == layer and b.kind in self.schema.anchor)

    def spaces(self) -> list[str]:
        return sorted({b.space for b in self.bindings.values() if b.space is not None})

    def kappa(self) -> dict[str, float]:
        """Per-family salience divisor; families outside any mixer use 1."""
        if isinstance(self.schema.kappa, str):
            if self.schema.kappa != "auto":
                raise SchemaError(f"kappa must be a mapping or 'auto', got {self.schema.kappa!r}")
            occ = dict(occupation_counts(self))
            occ.update(self.schema.occupation)
            present = {f: n for f, n in occ.items() if n > 0}
            if not present:
                return {f: 1.0 for f in FAMILIES}
            ref = self.schema.reference_family if present.get(self.schema.reference_family) else min(present)
            kap = kappa_from_occupation(present, ref)
        else:
            kap = {f: float(v) for f, v in self.schema.kappa.items()}
        kap.setdefault(NONE, 1.0)
        for f in FAMILIES:
            kap.setdefault(f, 1.0)
        return kap


def bind(schema: ModelSchema, names: Iterable[str]) -> BoundSchema:
    """Map every tensor name to exactly one rule; unmatched or ambiguous names raise."""
    bindings: dict[str, Binding] = {}
    for name in sorted(names):
        hits = schema.match(name)
        if not hits:
            raise SchemaError(f"tensor {name!r} matches no schema rule")
        if len(hits) > 1:
            pats = ", ".join(r.pattern for r, _ in hits)
            raise SchemaError(f"tensor {name!r} matches {len(hits)} rules ({pats})")
        rule, m = hits[0]
        groups = m.groupdict()
        layer: Layer = int(groups["layer"]) if groups.get("layer") is not None else GLOBAL
        expert = int(groups["expert"]) if groups.get("expert") is not None else None
        space = rule.space.format(layer=layer, expert=expert) if rule.space else None
        bindings[name] = Binding(ComponentId(rule.kind, layer, expert), rule.family, space, rule.input_side)

    bound = BoundSchema(schema, bindings)
    for layer in bound.layers():
        fams = {b.family for b in bindings.values() if b.layer == layer and b.family != NONE}
        if len(fams) > 1:
            raise SchemaError(f"layer {layer} mixes token-mixer families {sorted(fams)}")
        if not bound.anchor_names(layer):
            raise SchemaError(f"layer {layer} has no FFN/expert anchor tensors")
    return bound


def occupation_counts(bound: BoundSchema) -> dict[str, int]:
    """Number of layers whose token mixer belongs to each family."""
    counts = {f: 0 for f in MIXER_FAMILIES}
    for layer in bound.layers():
        fam = bound.layer_family(layer)
        if fam != NONE:
            counts[fam] = counts.get(fam, 0) + 1
    return counts


def kappa_from_occupation(occupation: Mapping[str, int], reference: str) -> dict[str, float]:
    ref = occupation.get(reference, 0)
    if ref <= 0:
        raise SchemaError(f"reference family {reference!r} has zero occupation")
    kap = {f: n / ref for f, n in occupation.items()}
    kap[reference] = 1.0
    return kap


def kappa_measured(occupation: Mapping[str, int], scale: Mapping[str, float], reference: str) -> dict[str, float]:
    """Occupation ratio weighted by measured per-layer perturbation scales."""
    ref = occupation.get(reference, 0)
    if ref <= 0:
        raise SchemaError(f"reference family {reference!r} has zero occupation")
    for f, a in scale.items():
        if not a > 0:
            raise SchemaError(f"perturbation scale for {f!r} must be positive, got {a}")
    denom = ref * scale[reference]
    kap = {f: (n * scale[f]) / denom for f, n in occupation.items() if f in scale}
    kap[reference] = 1.0
    return kap


# ---------------------------------------------------------------- presets


def _attention_rules(prefix: str, family: str) -> list[Rule]:
    return [
        Rule(f"layers.{{layer}}.{prefix}.q_proj.weight", "q_proj", family, "layers.{layer}.attn_in"),
        Rule(f"layers.{{layer}}.{prefix}.k_proj.weight", "k_proj", family, "layers.{layer}.attn_in"),
        Rule(f"layers.{{layer}}.{prefix}.v_proj.weight", "v_proj", family, "layers.{layer}.attn_in"),
        Rule(f"layers.{{layer}}.{prefix}.o_proj.weight", "o_proj", family, "layers.{layer}.mixer_out"),
    ]


def _common_rules() -> list[Rule]:
    return [
        Rule("embed.weight", "embedding"),
        Rule("lm_head.weight", "lm_head", space="final_in"),
        Rule("final_norm.weight", "norm"),
        Rule("layers.{layer}.attn_norm.weight", "norm"),
        Rule("layers.{layer}.ffn_norm.weight", "norm"),
    ]


def _dense_rules() -> list[Rule]:
    return [
        Rule("layers.{layer}.mlp.gate_proj.weight", "dense_gate", space="layers.{layer}.ffn_in"),
        Rule("layers.{layer}.mlp.up_proj.weight", "dense_up", space="layers.{layer}.ffn_in"),
        Rule("layers.{layer}.mlp.down_proj.weight", "dense_down", space="layers.{layer}.mlp_mid"),
    ]


def _moe_rules() -> list[Rule]:
    return [
        Rule("layers.{layer}.moe.router.weight", "router", space="layers.{layer}.ffn_in"),
        Rule("layers.{layer}.moe.experts.{expert}.gate_proj.weight", "expert_gate", space="layers.{layer}.ffn_in"),
        Rule("layers.{layer}.moe.experts.{expert}.up_proj.weight", "expert_up", space="layers.{layer}.ffn_in"),
        Rule(
            "layers.{layer}.moe.experts.{expert}.down_proj.weight",
            "expert_down",
            space="layers.{layer}.expert{expert}_mid",
        ),
    ]


def preset(name: str) -> ModelSchema:
    """Schemas matching the micro-transformer's tensor naming."""
    full = _attention_rules("attn", FULL)
    if name == "micro-dense":
        rules = _common_rules() + full + _dense_rules()
    elif name == "micro-moe":
        rules = _common_rules() + full + _moe_rules()
    elif name == "micro-hybrid":
        rules = _common_rules() + full + _attention_rules("linattn", LINEAR) + _dense_rules() + _moe_rules()
    else:
        raise SchemaError(f"unknown schema preset {name!r}")
    return ModelSchema(rules=rules, name=name)


PRESETS = ("micro-dense", "micro-moe", "micro-hybrid")


def load_schema(spec: str | Path) -> ModelSchema:
    """A preset name or a path to a schema JSON file."""
    if str(spec) in PRESETS:
        return preset(str(spec))
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"schema file not found: {path}")
    return ModelSchema.from_dict(json.loads(path.read_text()))
