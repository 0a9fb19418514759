import json
import subprocess
import sys

import pytest

from provfilter.cli import main, store_path


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-base", "--out", str(root / "base"), "--count", "10", "--seed", "1", "--size", "192"]) == 0
    assert main([
        "gen", "--base", str(root / "base"), "--distractors", "6", "--composites", "2",
        "--donors", "1", "--seed", "2", "--out", str(root / "corpus"),
    ]) == 0
    manifest = root / "corpus" / "manifest.jsonl"
    index = root / "idx.pfi"
    assert main([
        "index", "--corpus", str(manifest), "--backend", "kdforest", "--out", str(index),
        "--params", "num_trees=2", "--cache", str(root / "cache"),
    ]) == 0
    return root, manifest, index


def test_index_writes_store(built):
    _, _, index = built
    assert index.is_file() and (store_path(index) / "features.pffs").is_file()


def test_query_outputs(built, tmp_path):
    root, manifest, index = built
    q = json.loads(manifest.read_text().splitlines()[-1])
    image = root / "corpus" / q["path"]
    assert main(["query", "--index", str(index), "--image", str(image), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / f"{image.stem}.json").read_text())
    assert doc["query_id"] == image.stem and doc["final"]["entries"]
    assert (tmp_path / f"{image.stem}.tsv").read_text()
    if doc["mask"] is not None:
        assert (tmp_path / f"{image.stem}.mask.png").is_file()


def test_eval_is_repeatable(built, tmp_path):
    _, manifest, index = built
    cfg = tmp_path / "c.toml"
    cfg.write_text("budget = 500\n")
    for name in ("a", "b"):
        assert main(["eval", "--index", str(index), "--manifest", str(manifest), "--config", str(cfg),
                     "--out", str(tmp_path / f"{name}.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert main(["eval", "--index", str(index), "--manifest", str(manifest), "--out", str(tmp_path / "t.json"),
                 "--timings"]) == 0
    assert (tmp_path / "t.timings.json").is_file()


def test_bench(built, tmp_path):
    _, manifest, _ = built
    out = tmp_path / "bench.tsv"
    assert main(["bench", "--corpus", str(manifest), "--backends", "brute,kdtree,pq", "--out", str(out),
                 "--queries", "100", "--reps", "1"]) == 0
    rows = [line.split("\t") for line in out.read_text().splitlines()[1:]]
    assert [r[0] for r in rows] == ["brute", "kdtree", "pq"] and rows[0][4] == "1.0000"


def test_errors_exit_2(tmp_path, capsys):
    assert main(["query", "--index", str(tmp_path / "missing"), "--image", "x.png", "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["index"])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "provfilter", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen" in out.stdout
