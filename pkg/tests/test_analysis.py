import math

import numpy as np
import pytest

from r3tx.analysis import (UNDEFINED, GenerationTrace, evaluate_traces, improvement_report,
                           predicate_stratify, read_report, read_traces, role_word_probability,
                           word_frequency, write_report, write_report_csv, write_role_tables,
                           write_traces)
from r3tx.errors import ContractError, FormatError, RangeError


def roles(*ks, heads=1):
    return {"dec0.cross": np.array(ks, dtype=np.int64).reshape(-1, heads)}


def tr(id, gen, ref=None, ks=None, tags=()):
    return GenerationTrace(id, gen, ref if ref is not None else list(gen),
                           roles(*ks) if ks is not None else {}, [], list(tags))


def test_hand_built_five_step_trace():
    t = tr(0, ["red", "ball", "hits", "red", "cube"], ks=[2, 0, 1, 2, 0])
    out = role_word_probability([t], "dec0.cross")
    assert out == {"red": (2, 1.0), "ball": (0, 1.0), "hits": (1, 1.0), "cube": (0, 1.0)}


def test_single_role_gives_probability_one():
    ts = [tr(i, ["a", "b", "a"], ks=[0, 0, 0]) for i in range(3)]
    out = role_word_probability(ts, "dec0.cross")
    assert all(p == 1.0 and r == 0 for r, p in out.values())


def test_three_to_one_split():
    ts = [tr(0, ["w", "w"], ks=[1, 1]), tr(1, ["w", "w"], ks=[1, 2])]
    assert role_word_probability(ts, "dec0.cross") == {"w": (1, 0.75)}


def test_role_ties_take_lowest_id():
    assert role_word_probability([tr(0, ["w", "w"], ks=[5, 3])], "dec0.cross")["w"] == (3, 0.5)


def test_role_probability_errors():
    with pytest.raises(ContractError):
        role_word_probability([], "dec0.cross")
    with pytest.raises(RangeError):
        role_word_probability([tr(0, ["a"], ks=[0])], "dec9.self")
    with pytest.raises(RangeError):
        role_word_probability([tr(0, ["a"], ks=[0])], "dec0.cross", head=1)
    with pytest.raises(ContractError):
        GenerationTrace(0, ["a", "b"], [], roles(0))


def test_word_frequency_counts_references():
    ts = [tr(0, ["x"], ["the", "cat"]), tr(1, ["y"], ["the", "dog"])]
    assert word_frequency(ts) == {"the": 2, "cat": 1, "dog": 1}
    assert word_frequency([]) == {}


def test_stratify_nesting():
    ts = [tr(i, ["a"], tags=["VERB"] * n) for i, n in enumerate([0, 1, 2, 2, 3, 4])]
    sizes = [len(predicate_stratify(ts, m)) for m in (1, 2, 3, 4)]
    assert sizes == [5, 4, 2, 1]
    for lo in (1, 2, 3):
        hi = {t.id for t in predicate_stratify(ts, lo + 1)}
        assert hi <= {t.id for t in predicate_stratify(ts, lo)}
    with pytest.raises(RangeError):
        predicate_stratify(ts, 5)


def test_evaluate_traces_skips_empty_strata():
    ts = [tr(0, list("abcd"), tags=["VERB"]), tr(1, list("efgh"), tags=["VERB"])]
    rep = evaluate_traces(ts)
    assert set(rep) == {"all", "min1"}
    assert rep["all"]["B@4"] == 1.0 and rep["all"]["count"] == 2
    with pytest.raises(ContractError):
        evaluate_traces([])


def test_improvement():
    model = {"all": {"B@4": 0.25, "CIDEr": 1.0, "count": 3}}
    base = {"all": {"B@4": 0.20, "CIDEr": 0.0, "count": 3}}
    out = improvement_report(model, base)
    assert out["all"]["B@4"] == pytest.approx(25.0, abs=1e-12)
    assert out["all"]["CIDEr"] == UNDEFINED
    assert "count" not in out["all"]
    assert improvement_report(model, model)["all"]["B@4"] == 0.0
    with pytest.raises(ContractError):
        improvement_report(model, {"min1": base["all"]})


def test_trace_dump_roundtrip(tmp_path):
    ts = [GenerationTrace(i, ["a", "b"], ["a", "c"],
                          {"dec0.cross": np.array([[1, 2], [3, 4]]) + i,
                           "dec1.self": np.array([[0, 0], [1, 1]])},
                          ["DET", "NOUN"], ["DET", "VERB"]) for i in range(3)]
    path = tmp_path / "t.jsonl"
    write_traces(path, ts, ["dec0.cross", "dec1.self"], 2)
    header, back = read_traces(path)
    assert header["sites"] == ["dec0.cross", "dec1.self"] and header["heads"] == 2
    for a, b in zip(ts, back):
        assert (a.id, a.generated, a.reference, a.generated_tags, a.reference_tags) == \
               (b.id, b.generated, b.reference, b.generated_tags, b.reference_tags)
        for s in a.roles:
            assert np.array_equal(a.roles[s], b.roles[s])
    # empty generation has zero role rows
    write_traces(path, [GenerationTrace(9, [], ["a"], {"dec0.cross": np.zeros((0, 2), int)})],
                 ["dec0.cross"], 2)
    assert read_traces(path)[1][0].roles["dec0.cross"].shape == (0, 2)


def test_trace_dump_errors(tmp_path):
    p = tmp_path / "x"
    p.write_text("")
    with pytest.raises(FormatError):
        read_traces(p)
    p.write_text('{"format": "other", "version": 1}\n')
    with pytest.raises(FormatError):
        read_traces(p)
    p.write_text('{"format": "r3tx-trace", "version": 1, "sites": [], "heads": 1}\n{bad\n')
    with pytest.raises(FormatError):
        read_traces(p)
    with pytest.raises(FormatError):
        read_traces(tmp_path / "missing")


def test_report_roundtrip(tmp_path):
    rep = {"all": {"B@1": 0.5, "CIDEr": None, "count": 4}, "min2": {"B@1": 1 / 3, "CIDEr": 2.0, "count": 1}}
    write_report(tmp_path / "r.txt", rep)
    back = read_report(tmp_path / "r.txt")
    assert back["all"] == {"B@1": 0.5, "CIDEr": None, "count": 4}
    assert math.isclose(back["min2"]["B@1"], 1 / 3, abs_tol=1e-6)
    write_report_csv(tmp_path / "r.csv", rep)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "stratum,B@1,CIDEr,count" and lines[1] == f"all,0.500000,{UNDEFINED},4"


def test_role_tables(tmp_path):
    ts = [tr(0, ["w", "w", "v"], ["w", "v", "v"], ks=[1, 1, 0])]
    p1, p2 = write_role_tables(tmp_path / "out", ts, "dec0.cross", 0)
    assert p1.read_text().splitlines()[1:] == ["v,0,1.000000,dec0.cross,0", "w,1,1.000000,dec0.cross,0"]
    assert p2.read_text().splitlines() == ["word,count", "v,2", "w,1"]
