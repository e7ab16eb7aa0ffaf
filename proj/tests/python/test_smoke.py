import json

import pytest

import wstab

ONE = "<table><tbody><tr><td>{}</td></tr></tbody></table>"


def test_canonical_html_roundtrip():
    html = '<table><tbody><tr><td colspan="2">A</td></tr><tr><td>1</td><td></td></tr></tbody></table>'
    assert wstab.canonical_html(html) == html
    assert wstab.classify(html) == "complex"
    assert wstab.classify(ONE.format("1")) == "simple"


def test_malformed_html_raises_with_code():
    with pytest.raises(wstab.Error) as info:
        wstab.canonical_html("<table><tr>")
    assert info.value.code == "MalformedHtml"


def test_tokenize_structure():
    assert wstab.tokenize_structure(ONE.format("x")) == ["<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>"]


def test_tokenize_cell_counts_unknowns():
    ids, unknown = wstab.tokenize_cell("1a2", "0123456789")
    assert unknown == 1
    assert len(ids) == 4


def test_teds_values():
    # Five nodes per tree, one text relabel of cost 1.
    s = wstab.teds(ONE.format("x"), ONE.format("y"))
    assert s["value"] == pytest.approx(1 - 1 / 5)
    assert wstab.teds(ONE.format("x"), ONE.format("y"), structure_only=True)["value"] == 1.0
    assert wstab.teds(ONE.format("x"), ONE.format("x"))["value"] == 1.0


def test_preset_shapes():
    p = wstab.preset("tiny")
    assert set(p) == {"net", "train", "gen"}
    with pytest.raises(wstab.Error):
        wstab.preset("nope")


def test_gradcheck_tiny():
    r = wstab.gradcheck("tiny")
    assert r["pass"]
    assert r["max_rel_err"] <= 1e-4


def test_pipeline(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    wstab.generate(data, 6, preset="tiny", gen={"seed": 3, "test_fraction": 0.5})
    records = [json.loads(l) for l in (data / "annotations.jsonl").read_text().splitlines()]
    assert len(records) == 6

    result = wstab.train(data, run, preset="tiny", train={"lr_schedule": [[1, 0.001]], "batch_size": 2})
    assert len(result["history"]) == 1
    ckpt = result["checkpoint"]

    pred = tmp_path / "pred.jsonl"
    assert wstab.infer(data, ckpt, pred, split="test") == 3
    r = wstab.recognize_pgm(ckpt, data / "images" / (records[0]["id"] + ".pgm"))
    assert len(r["cell_texts"]) == sum(t in ("<td></td>", "<td") for t in r["struct_tokens"])

    report = wstab.score(pred, data / "annotations.jsonl", split="test")
    assert report["n"] == 3

    gt_report = wstab.score(data / "annotations.jsonl", data / "annotations.jsonl")
    assert gt_report["teds"]["all"] == 1.0
