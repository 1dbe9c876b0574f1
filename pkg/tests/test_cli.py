import json

import pytest

from sgscl import corpus as C
from sgscl.cli import main


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "c"), "--n-train", "32", "--n-test", "16"]) == 0
    assert main(["featurize", "--manifest", str(root / "c" / "manifest.tsv"), "--out", str(root / "f")]) == 0
    return root


def run(corpus_dir, *args):
    return main([*args, "--manifest", str(corpus_dir / "c" / "manifest.tsv"), "--features", str(corpus_dir / "f")])


def test_synth_manifest(corpus_dir):
    recs = C.read_manifest(corpus_dir / "c" / "manifest.tsv")
    assert len(recs) == 48 and {r.device for r in recs} == {0, 1}


def test_train_evaluate_probe_export(corpus_dir, capsys):
    out = corpus_dir / "run"
    cfg = corpus_dir / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "embed_dim": 8, "lr": 1e-3}))
    assert run(corpus_dir, "train", "--method", "sgscl", "--config", str(cfg), "--seeds", "2", "--out", str(out)) == 0
    assert "train: sgscl" in capsys.readouterr().out
    assert json.loads((out / "config.json").read_text())["epochs"] == 1
    ck = out / "seed1" / "checkpoint.sgck"
    before = ck.read_bytes()
    assert run(corpus_dir, "evaluate", "--checkpoint", str(ck), "--out", str(corpus_dir / "ev")) == 0
    assert ck.read_bytes() == before
    assert run(corpus_dir, "probe", "--checkpoint", str(ck), "--out", str(corpus_dir / "ev")) == 0
    assert "device_accuracy" in json.loads((corpus_dir / "ev" / "probe.json").read_text())
    assert run(corpus_dir, "export-embeddings", "--checkpoint", str(ck), "--out", str(corpus_dir / "ev")) == 0
    assert len((corpus_dir / "ev" / "embeddings.csv").read_text().splitlines()) == 49


def test_rerun_identical_bytes(corpus_dir):
    args = ("train", "--method", "dat", "--epochs", "1", "--seed", "4")
    assert run(corpus_dir, *args, "--out", str(corpus_dir / "r1")) == 0
    assert run(corpus_dir, *args, "--out", str(corpus_dir / "r2")) == 0
    for name in ("seed4/checkpoint.sgck", "seed4/runlog.jsonl", "aggregate.json"):
        assert (corpus_dir / "r1" / name).read_bytes() == (corpus_dir / "r2" / name).read_bytes()


def test_ablate_six_rows(corpus_dir):
    out = corpus_dir / "ab"
    assert run(corpus_dir, "ablate", "--variants", "all", "--epochs", "1", "--seeds", "2", "--out", str(out)) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["variant"] for r in rows] == ["z:z", "z:h", "h:z", "h:h", "h:z:sgd", "h:h:sgd"]
    assert [r["default"] for r in rows] == [False] * 5 + [True]
    seeds = {json.loads((out / r["variant"].replace(":", "_") / "config.json").read_text())["seeds"].__repr__()
             for r in rows}
    assert seeds == {"[0, 1]"}
    assert len((out / "ablation.tsv").read_text().splitlines()) == 7


def test_gradcheck(capsys):
    assert main(["gradcheck", "--batches", "1"]) == 0
    assert "sgscl[h:h:sgd]" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--nope"], ["train"]])
def test_usage_errors(argv):
    assert main(argv) == 2


def test_missing_input(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "none.tsv"), "--out", str(tmp_path)]) == 2
    assert main(["ingest-icbhi", "--root", str(tmp_path / "x"), "--split-file", "y", "--out", str(tmp_path)]) == 2


def test_missing_features(corpus_dir, tmp_path):
    assert main(["train", "--manifest", str(corpus_dir / "c" / "manifest.tsv"), "--features", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2
