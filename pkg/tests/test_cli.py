import json

import numpy as np
import pytest

from saghog import cli, imaging
from saghog.artifacts import write_sidecar
from saghog.retrieval import write_store
from saghog.synthetic import make_corpus, write_corpus

TINY = """
profile = "desk"
encoder_dim = 16
encoder_depth = 1
decoder_dim = 16
netrvlad_clusters = 2
min_keypoints = 20
keypoint_cap = 120
patches_per_page = 8
finetune_patches_per_page = 8
encode_patches_per_page = 8
cluster_patches_per_page = 20
cluster_k = 8
pretrain_epochs = 1
pretrain_batch_pages = 4
finetune_epochs = 1
batch_classes = 3
samples_per_class = 4
pca_dim = 4
val_fraction = 0.25
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY)
    corpus = make_corpus(4, 3, seed=3, size=(160, 160))
    write_corpus(root / "pages", corpus)
    cfg = ["--config", root / "tiny.toml"]
    assert run("curate", root / "pages", "--out", root / "m.jsonl", *cfg) == 0
    assert run("pretrain", root / "m.jsonl", "--out", root / "mae.sgck", *cfg) == 0
    assert run("finetune", root / "m.jsonl", "--init", root / "mae.sgck", "--out", root / "w.sgck", *cfg) == 0
    return root, cfg


# -- curate -----------------------------------------------------------------------------------------


def test_curate_admits_four_of_five(tmp_path, capsys):
    corpus = make_corpus(1, 4, seed=4, size=(160, 160))
    corpus.append(("w000_sparse", "w000", np.full((160, 160, 3), 255, np.uint8)))
    write_corpus(tmp_path / "in", corpus)
    (tmp_path / "c.toml").write_text("min_keypoints = 20\n")
    args = ("curate", tmp_path / "in", "--config", tmp_path / "c.toml", "--seed", 1)
    assert run(*args, "--out", tmp_path / "a.jsonl") == 0
    recs = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(recs) == 5 and sum(r["admitted"] for r in recs) == 4
    assert "4 of 5 pages admitted" in capsys.readouterr().out
    assert run(*args, "--out", tmp_path / "b.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_curate_missing_sidecar_exit_code(tmp_path, capsys):
    write_corpus(tmp_path / "in", make_corpus(1, 1, seed=4, size=(96, 96)))
    (tmp_path / "masks").mkdir()
    imaging.write_mask(tmp_path / "masks" / "w000_p0.png", np.ones((96, 96), bool))
    (tmp_path / "c.toml").write_text("require_mask = true\n")
    code = run("curate", tmp_path / "in", "--out", tmp_path / "m.jsonl", "--masks", tmp_path / "masks",
               "--config", tmp_path / "c.toml")
    assert code == cli.EXIT_SIDECAR and "w000_p0.png" in capsys.readouterr().err


def test_curate_empty_admitted_set(tmp_path):
    write_corpus(tmp_path / "in", [("blank", "w", np.full((64, 64), 255, np.uint8))])
    assert run("curate", tmp_path / "in", "--out", tmp_path / "m.jsonl") == cli.EXIT_EMPTY
    assert (tmp_path / "m.jsonl").exists()


def test_unknown_config_key_fails(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("encoder_width = 3\n")
    assert run("curate", tmp_path, "--out", tmp_path / "m.jsonl", "--config", tmp_path / "c.toml") == cli.EXIT_ERROR
    assert "encoder_width" in capsys.readouterr().err


# -- eval -------------------------------------------------------------------------------------------


def test_eval_three_page_fixture(tmp_path):
    x = np.array([[1.0, 0.0], [0.6, 0.8], [0.8, 0.6]], np.float32)
    write_store(tmp_path / "d.sghd", ["a", "b", "c"], x, [{"writer_id": w} for w in "xxy"])
    assert run("eval", tmp_path / "d.sghd", "--out", tmp_path / "m.json", "--ranks", tmp_path / "r.jsonl") == 0
    m = json.loads((tmp_path / "m.json").read_text())
    # a ranks c before b, b ranks c before a: AP 1/2 each; c has no relevant page
    assert m == {"task": "writer", "map": 0.5, "top1": 0.0, "n_queries": 2, "excluded_queries": 1}
    ranks = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [g["id"] for g in ranks[0]["results"]] == ["c", "b"]
    assert [g["hit"] for g in ranks[0]["results"]] == [False, True]
    assert run("report", tmp_path / "r.jsonl", "--out", tmp_path / "r.html") == 0
    assert (tmp_path / "r.html").read_text().count("class='hit'") == 2


# -- training chain ------------------------------------------------------------------------------------


def test_encode_twice_identical(work, tmp_path):
    root, cfg = work
    for name in ("a", "b"):
        code = run("encode", root / "m.jsonl", "--model", root / "w.sgck", "--fit", root / "m.jsonl",
                   "--out", tmp_path / f"{name}.sghd", *cfg)
        assert code == 0
    assert (tmp_path / "a.sghd").read_bytes() == (tmp_path / "b.sghd").read_bytes()
    assert run("eval", tmp_path / "a.sghd", "--out", tmp_path / "m.json") == 0
    assert 0.0 <= json.loads((tmp_path / "m.json").read_text())["map"] <= 1.0


def test_encode_needs_fit_when_whitening(work, tmp_path, capsys):
    root, cfg = work
    assert run("encode", root / "m.jsonl", "--model", root / "w.sgck", "--out", tmp_path / "x", *cfg) == 1
    assert "--fit" in capsys.readouterr().err


def test_encode_rejects_pretraining_checkpoint(work, tmp_path):
    root, cfg = work
    assert run("encode", root / "m.jsonl", "--model", root / "mae.sgck", "--fit", root / "m.jsonl",
               "--out", tmp_path / "x", *cfg) == 1


def test_cls_without_labels_fails_fast(work, tmp_path, capsys):
    root, cfg = work
    code = run("finetune", root / "m.jsonl", "--regime", "cls", "--out", tmp_path / "x.sgck", *cfg)
    err = capsys.readouterr().err
    assert code == 1 and "saghog cluster" in err and "--labels" in err
    assert not (tmp_path / "x.sgck").exists()


def test_dimension_mismatch_before_compute(work, tmp_path, monkeypatch):
    root, cfg = work

    def boom(*a, **k):
        raise AssertionError("pipeline work started")

    monkeypatch.setattr(cli.pipeline, "page_refs", boom)
    (tmp_path / "wide.toml").write_text(TINY.replace("encoder_dim = 16", "encoder_dim = 32"))
    code = run("finetune", root / "m.jsonl", "--init", root / "mae.sgck", "--out", tmp_path / "x.sgck",
               "--config", tmp_path / "wide.toml")
    assert code == cli.EXIT_MISMATCH and not (tmp_path / "x.sgck").exists()


def test_cluster_deterministic_and_chain_checked(work, tmp_path):
    root, cfg = work
    for name in ("a", "b"):
        assert run("cluster", root / "m.jsonl", "--out", tmp_path / f"{name}.jsonl", *cfg) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    (tmp_path / "cap.toml").write_text(TINY.replace("keypoint_cap = 120", "keypoint_cap = 60"))
    other = ["--config", tmp_path / "cap.toml"]
    assert run("cluster", root / "m.jsonl", "--out", tmp_path / "c.jsonl", *other) == cli.EXIT_MISMATCH
    assert run("cluster", root / "m.jsonl", "--out", tmp_path / "c.jsonl", *other, "--force") == 0


def test_cls_regime_with_labels(work, tmp_path):
    root, cfg = work
    assert run("cluster", root / "m.jsonl", "--out", tmp_path / "l.jsonl", *cfg) == 0
    code = run("finetune", root / "m.jsonl", "--regime", "cls", "--labels", tmp_path / "l.jsonl",
               "--init", root / "mae.sgck", "--freeze-backbone", "--out", tmp_path / "c.sgck", *cfg)
    assert code == 0 and (tmp_path / "c.sgck").exists()


def test_manifest_without_sidecar_is_refused(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert run("cluster", tmp_path / "m.jsonl", "--out", tmp_path / "l.jsonl") == cli.EXIT_ERROR
    write_sidecar(tmp_path / "m.jsonl", {"kind": "manifest"})
    assert run("cluster", tmp_path / "m.jsonl", "--out", tmp_path / "l.jsonl") == cli.EXIT_MISMATCH
