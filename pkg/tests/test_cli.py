import json
import logging

import numpy as np
import pytest

from cranekit.archive import TensorArchive, archives_equal, open_archive, write_archive
from cranekit.cli import main
from cranekit.delta import delta_archive
from cranekit.gsp import sidecar_path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path):
    assert run("init-micro", "--out", tmp_path / "inst.bin", "--experts", 2, "--seed", 3) == 0
    assert run("init-micro", "--out", tmp_path / "think.bin", "--experts", 2, "--seed", 3, "--perturb", 0.05) == 0
    assert run("make-calib", "--out", tmp_path / "cal.jsonl", "--seed", 1) == 0
    return tmp_path


def salience(w, *extra, inst="inst.bin", think="think.bin", cfg="inst.bin.config.json"):
    return run(
        "taylor", "--instruct", w / inst, "--thinking", w / think, "--model-config", w / cfg,
        "--calib-r", w / "cal.jsonl", "--calib-a", w / "cal.jsonl", "--out", w / "sal.json", *extra,
    )


def test_delta_command(workdir):
    w = workdir
    assert run("delta", w / "inst.bin", w / "inst.bin", "--out", w / "zero.bin") == 0
    assert all(not np.any(v.f64()) for v in open_archive(w / "zero.bin").values())
    assert run("delta", w / "inst.bin", w / "think.bin", "--out", w / "d.bin") == 0
    ref = delta_archive(open_archive(w / "inst.bin"), open_archive(w / "think.bin"))
    got = open_archive(w / "d.bin")
    assert all(np.array_equal(got.f64(n), ref[n]) for n in ref)
    manifest = json.loads((w / "d.bin.manifest.json").read_text())
    assert manifest["command"] == "delta" and str(w / "inst.bin") in manifest["inputs"]


def test_missing_file_exit_code(workdir, capsys):
    assert run("delta", workdir / "nope.bin", workdir / "think.bin", "--out", workdir / "x.bin") == 2
    assert "nope.bin" in capsys.readouterr().err


def test_validation_exit_code(workdir):
    other = workdir / "small.bin"
    run("init-micro", "--out", other, "--experts", 0)
    assert run("delta", workdir / "inst.bin", other, "--out", workdir / "x.bin") == 1


def test_taylor_table_and_grid(workdir):
    w = workdir
    assert salience(w) == 0
    table = json.loads((w / "sal.json").read_text())
    anchors = [e["value"] for e in table["entries"] if e["kind"] == "ffn_anchor"]
    assert anchors == [1.0, 1.0]
    row = next(l for l in (w / "sal.csv").read_text().splitlines() if l.startswith("ffn_anchor"))
    assert row == "ffn_anchor,1.0,1.0,"


def test_taylor_hybrid_arch_normalize(tmp_path):
    w = tmp_path
    fam = "linear_attention,linear_attention,linear_attention,full_attention"
    run("init-micro", "--out", w / "inst.bin", "--layers", 4, "--families", fam)
    run("init-micro", "--out", w / "think.bin", "--layers", 4, "--families", fam, "--perturb", 0.05)
    run("make-calib", "--out", w / "cal.jsonl")
    assert salience(w) == 0
    plain = {(e["kind"], e["layer"]): e for e in json.loads((w / "sal.json").read_text())["entries"]}
    assert salience(w, "--arch-normalize") == 0
    normed = {(e["kind"], e["layer"]): e for e in json.loads((w / "sal.json").read_text())["entries"]}
    for k, e in plain.items():
        if e["family"] == "linear_attention" and k[0] in ("q_proj", "k_proj", "v_proj", "o_proj"):
            assert normed[k]["value"] == e["value"] / 3.0
        else:
            assert normed[k]["value"] == e["value"]


def test_taylor_external_gradients(workdir, rng):
    w = workdir
    inst = open_archive(w / "inst.bin")
    good = TensorArchive.from_arrays({n: rng.standard_normal(inst[n].shape) for n in inst})
    write_archive(dict(good), w / "g.bin")
    common = ["taylor", "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--out", w / "ext.json"]
    assert run(*common, "--grad-r", w / "g.bin", "--grad-a", w / "g.bin") == 0
    bad = dict(good)
    bad["embed.weight"] = TensorArchive.from_arrays({"x": np.zeros((2, 2))})["x"]
    write_archive(bad, w / "bad.bin")
    assert run(*common, "--grad-r", w / "g.bin", "--grad-a", w / "bad.bin") == 1
    assert run(*common) == 1


def test_gsp_build(workdir, caplog):
    w = workdir
    args = ["gsp-build", "--instruct", w / "inst.bin", "--model-config", w / "inst.bin.config.json"]
    assert run(*args, "--calib-f", w / "cal.jsonl", "--out", w / "p1.bin") == 0
    assert run(*args, "--calib-f", w / "cal.jsonl", "--out", w / "p2.bin") == 0
    assert (w / "p1.bin").read_bytes() == (w / "p2.bin").read_bytes()
    side = json.loads(sidecar_path(w / "p1.bin").read_text())
    assert side["tau"] == 0.03 and side["rho"] == 2 and side["spaces"]

    only_r = w / "r.jsonl"
    only_r.write_text("".join(l + "\n" for l in (w / "cal.jsonl").read_text().splitlines() if '"R"' in l))
    with caplog.at_level(logging.WARNING):
        assert run(*args, "--calib-f", only_r, "--out", w / "p3.bin") == 0
    side = json.loads(sidecar_path(w / "p3.bin").read_text())
    assert side["spaces"] == [] and side["identity_spaces"]
    assert "identity" in caplog.text


def test_merge_ablation_equals_baseline_ta(workdir):
    w = workdir
    assert run("merge", "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--alpha", 0.3,
               "--no-sparsifier", "--no-taylor", "--no-gsp", "--out", w / "m.bin") == 0
    assert run("baseline", "ta", "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--alpha", 0.3, "--out", w / "b.bin") == 0
    assert (w / "m.bin").read_bytes() == (w / "b.bin").read_bytes()


def test_merge_presets_in_manifest(workdir):
    w = workdir
    assert salience(w) == 0
    run("gsp-build", "--instruct", w / "inst.bin", "--model-config", w / "inst.bin.config.json", "--calib-f", w / "cal.jsonl", "--out", w / "p.bin")
    base = ["merge", "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--salience", w / "sal.json", "--projectors", w / "p.bin"]
    assert run(*base, "--out", w / "m30.bin") == 0
    cfg = json.loads((w / "m30.bin.manifest.json").read_text())["config"]
    assert (cfg["alpha"], cfg["tau"], cfg["arch_normalize"]) == (0.25, 0.03, False)
    assert run(*base, "--preset", "crane-80b", "--out", w / "m80.bin") == 0
    cfg = json.loads((w / "m80.bin.manifest.json").read_text())["config"]
    assert (cfg["alpha"], cfg["tau"], cfg["arch_normalize"]) == (0.15, 0.03, True)
    assert run("merge", "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--out", w / "x.bin") == 1


def test_manifest_idempotent(workdir):
    w = workdir
    for _ in range(2):
        run("baseline", "ties", "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--out", w / "t.bin")
        m = json.loads((w / "t.bin.manifest.json").read_text())
        m.pop("wall_time")
        if _ == 0:
            first = m
    assert m == first


def test_baselines(workdir):
    w = workdir
    assert run("baseline", "slerp", "--t", 0, "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--out", w / "s.bin") == 0
    assert archives_equal(open_archive(w / "s.bin"), open_archive(w / "inst.bin"))
    assert run("baseline", "aim-ta", "--instruct", w / "inst.bin", "--thinking", w / "think.bin",
               "--model-config", w / "inst.bin.config.json", "--calib-a", w / "cal.jsonl", "--out", w / "a.bin") == 0
    assert run("baseline", "aim-ta", "--instruct", w / "inst.bin", "--thinking", w / "think.bin", "--out", w / "a2.bin") == 1


def test_small_commands(workdir, capsys):
    assert run("ttc", "--input", 43548016, "--cached", 957076451, "--output", 8372134) == 0
    assert capsys.readouterr().out.strip() == "181.1M"
    assert run("ttc", "--input", 34678861, "--cached", 424474281, "--output", 8759443) == 0
    assert capsys.readouterr().out.strip() == "120.9M"
    assert salience(workdir) == 0
    capsys.readouterr()
    assert run("compare-salience", workdir / "sal.json", workdir / "sal.json", "--top-k", 5) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["pearson"] == 1.0 and res["spearman"] == 1.0 and res["top_k_overlap"]["5"] == [5, 5]
    assert run("compare-salience", workdir / "nope.json", workdir / "sal.json") == 2


def test_verify_command(tmp_path, capsys):
    assert run("verify", "--out", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["ctg_selectivity"] == 1.0 and all(report["passed"].values())
    assert "CTG selectivity" in capsys.readouterr().out


def test_threads_must_be_positive(workdir):
    assert run("delta", workdir / "inst.bin", workdir / "think.bin", "--out", workdir / "d.bin", "--threads", 0) == 1
