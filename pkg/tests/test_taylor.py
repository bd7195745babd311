import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_examples
from cranekit.archive import TensorArchive
from cranekit.delta import delta_archive
from cranekit.micro import MicroConfig, init_params
from cranekit.schema import FULL, LINEAR, ModelSchema, Rule, bind, preset
from cranekit.signals import micro_salience
from cranekit.taylor import (
    ANCHOR_KIND,
    CoordinateScores,
    SalienceTable,
    aggregate,
    arch_normalize,
    compare_salience,
    coordinate_scores,
)
from oracles import ranks


def scores_of(**named):
    return {n: CoordinateScores(np.asarray(p, float), np.asarray(p, float), np.asarray(p, float)) for n, p in named.items()}


TOY_RULES = [
    Rule("layers.{layer}.mlp.up_proj.weight", "dense_up", space="layers.{layer}.ffn_in"),
    Rule("layers.{layer}.attn.q_proj.weight", "q_proj", FULL, "layers.{layer}.attn_in"),
]
UP, Q = "layers.0.mlp.up_proj.weight", "layers.0.attn.q_proj.weight"


def toy(inst_up, inst_q, p_up, p_q):
    inst = TensorArchive.from_arrays({UP: np.asarray(inst_up, float), Q: np.asarray(inst_q, float)})
    bound = bind(ModelSchema(TOY_RULES), list(inst))
    return aggregate(scores_of(**{UP: p_up, Q: p_q}), bound, inst)


def test_coordinate_score_examples():
    def one(gr, ga, d):
        sc = coordinate_scores({"x": np.array([gr])}, {"x": np.array([ga])}, {"x": np.array([d])})["x"]
        return sc.s_r[0], sc.s_a[0], sc.p[0]

    assert one(-1.0, 2.0, 0.0) == (0.0, 0.0, 0.0)
    assert one(-1.0, 2.0, 1.0) == (1.0, -2.0, 0.0)
    assert one(-1.0, -0.5, 2.0) == (2.0, 1.0, 1.0)


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        coordinate_scores({"x": np.zeros(3)}, {"x": np.zeros(2)}, {"x": np.zeros(3)})
    with pytest.raises(ValueError, match="missing"):
        coordinate_scores({}, {"x": np.zeros(3)}, {"x": np.zeros(3)})


def test_two_block_toy():
    # anchor p-sum 4, component p-sum 2, ||anchor|| = 2, ||component|| = 1
    t = toy([[2.0, 0.0]], [[1.0, 0.0]], [[1.0, 3.0]], [[2.0, 0.0]])
    assert t.coefficient("q_proj", 0) == 1.0
    assert t.coefficient("dense_up", 0) == 1.0
    assert t.anchor(0) == 1.0


def test_zero_gate_component_gets_zero():
    t = toy([[1.0, 1.0]], [[0.5, 0.5]], [[1.0, 0.2]], [[0.0, 0.0]])
    assert t.coefficient("q_proj", 0) == 0.0


def test_zero_anchor_layer_blocks_injection(caplog):
    t = toy([[1.0, 1.0]], [[0.5, 0.5]], [[0.0, 0.0]], [[3.0, 0.0]])
    assert t.coefficient("q_proj", 0) == 0.0
    assert t.anchor(0) == 1.0
    assert "anchor gate sum is zero" in caplog.text


def test_anchor_exactly_one_with_awkward_values(rng):
    for _ in range(20):
        t = toy(rng.standard_normal((3, 3)) * 1e3, rng.standard_normal((2, 2)), rng.random((3, 3)) * 1e-7, rng.random((2, 2)))
        assert t.anchor(0) == 1.0


def test_arch_normalize_examples():
    t = SalienceTable(
        {("q_proj", 0): 0.9, ("q_proj", 1): 0.6, ("dense_up", 0): 0.4, (ANCHOR_KIND, 0): 1.0},
        {("q_proj", 0): LINEAR, ("q_proj", 1): FULL},
    )
    n = arch_normalize(t, {LINEAR: 3.0, FULL: 1.0})
    assert n.coefficient("q_proj", 0) == pytest.approx(0.3, abs=1e-16)
    assert n.coefficient("q_proj", 1) == 0.6
    assert n.coefficient("dense_up", 0) == 0.4 and n.anchor(0) == 1.0
    assert arch_normalize(t, {LINEAR: 1.0, FULL: 1.0}).entries == t.entries
    with pytest.raises(ValueError):
        arch_normalize(t, {LINEAR: 0.0})


def table_from(values, kinds=None):
    kinds = kinds or ["q_proj"] * len(values)
    return SalienceTable({(k, i): float(v) for i, (k, v) in enumerate(zip(kinds, values))})


def test_compare_salience_examples():
    r = compare_salience(table_from([1, 2, 3]), table_from([2, 4, 6]), k_list=(2,))
    assert r["pearson"] == pytest.approx(1.0) and r["spearman"] == pytest.approx(1.0)
    r = compare_salience(table_from([1, 2, 3]), table_from([3, 2, 1]), k_list=(1, 2, 3))
    assert r["spearman"] == pytest.approx(-1.0)
    assert r["top_k_overlap"] == {1: [0, 1], 2: [1, 2], 3: [3, 3]}
    x = table_from([0.3, 0.1, 0.7, 0.2])
    same = compare_salience(x, x, k_list=(2, 4))
    assert same["pearson"] == same["spearman"] == 1.0
    assert same["top_k_overlap"] == {2: [2, 2], 4: [4, 4]}
    with pytest.raises(ValueError):
        compare_salience(table_from([1, 2]), table_from([1, 2, 3]))


@given(st.lists(st.integers(-5, 5), min_size=3, max_size=12), st.lists(st.integers(-5, 5), min_size=3, max_size=12))
def test_spearman_matches_rank_oracle(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    ra, rb = np.array(ranks(a)), np.array(ranks(b))
    if ra.std() == 0 or rb.std() == 0:
        return
    expect = float(np.corrcoef(ra, rb)[0, 1])
    assert compare_salience(table_from(a), table_from(b), k_list=())["spearman"] == pytest.approx(expect, abs=1e-12)


def test_table_round_trip(tmp_path, rng):
    cfg = MicroConfig(moe_experts=2, seed=1)
    inst = init_params(cfg)
    think = TensorArchive.from_arrays({n: inst.f64(n) + 0.05 * rng.standard_normal(inst[n].shape) for n in inst})
    bound = bind(preset("micro-moe"), list(inst))
    t = micro_salience(inst, cfg, delta_archive(inst, think), random_examples(rng, 2, 6, 16, "R"), random_examples(rng, 2, 6, 16, "A"), bound)
    t.save(tmp_path / "s.json")
    back = SalienceTable.load(tmp_path / "s.json")
    assert back.entries == t.entries and back.families == t.families
    csv = t.to_csv().splitlines()
    assert csv[0] == "kind,0,1,global"
    anchor_row = next(line for line in csv if line.startswith(ANCHOR_KIND))
    assert anchor_row == f"{ANCHOR_KIND},1.0,1.0,"
    # experts share one coefficient per (kind, layer)
    assert ("expert_up", 0) in t.entries and all(k[0] != "expert_up" or isinstance(k[1], int) for k in t.entries)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.01, 100.0))
def test_loss_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    cfg = MicroConfig(moe_experts=2, seed=seed % 7)
    inst = init_params(cfg)
    think = TensorArchive.from_arrays({n: inst.f64(n) + 0.05 * rng.standard_normal(inst[n].shape) for n in inst})
    bound = bind(preset("micro-moe"), list(inst))
    d = delta_archive(inst, think)
    d_r, d_a = random_examples(rng, 2, 6, 16, "R"), random_examples(rng, 2, 6, 16, "A")
    a = micro_salience(inst, cfg, d, d_r, d_a, bound)
    b = micro_salience(inst, cfg, d, d_r, d_a, bound, loss_scale=scale)
    assert max(abs(a.entries[k] - b.entries[k]) for k in a.entries) <= 1e-12


@pytest.mark.parametrize("eta", [1e-4, 1e-5])
@pytest.mark.parametrize(
    "kw", [dict(), dict(moe_experts=2), dict(mixer_families=[LINEAR, FULL])], ids=["dense", "moe", "hybrid"]
)
def test_gated_step_lowers_both_losses(kw, eta, rng):
    from cranekit.micro import dataset_loss_fn, gradients

    cfg = MicroConfig(seed=9, **kw)
    inst = init_params(cfg)
    think = TensorArchive.from_arrays({n: inst.f64(n) + 0.05 * rng.standard_normal(inst[n].shape) for n in inst})
    d_r = random_examples(rng, 3, 8, cfg.vocab, "R")
    d_a = random_examples(rng, 3, 8, cfg.vocab, "A")
    delta = delta_archive(inst, think)
    sc = coordinate_scores(gradients(inst, cfg, d_r), gradients(inst, cfg, d_a), delta)
    flat = sorted(((float(s.p.ravel()[j]), n, j) for n, s in sc.items() for j in range(s.p.size)), reverse=True)[:10]
    for K, ds in (("r", d_r), ("a", d_a)):
        L = dataset_loss_fn(inst, cfg, ds)
        base = L()
        for _, n, j in flat:
            change = L(n, j, inst.f64(n).ravel()[j] + eta * delta[n].ravel()[j]) - base
            predicted = -eta * getattr(sc[n], f"s_{K}").ravel()[j]
            assert change < 0
            assert change == pytest.approx(predicted, rel=0.10)
