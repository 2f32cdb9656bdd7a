import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saghog import imaging
from saghog.curation import (
    CurationRules,
    MaskCandidate,
    MissingSidecar,
    PageRecord,
    admit_page,
    bbox_iou,
    build_manifest,
    edge_fraction,
    filter_masks,
    find_mask_candidates,
    iou_at,
    mask_to_bbox,
    pixel_box_area,
    split_writers,
)
from saghog.synthetic import make_corpus, write_corpus


def _edgy_mask(shape=(20, 20)):
    """A mask whose pixels are half edge pixels, plus the edge map."""
    edges = np.zeros(shape, bool)
    edges[:, ::2] = True
    return np.ones(shape, bool), edges


# -- mask filtering ---------------------------------------------------------------------------


def test_confidence_threshold_inclusive():
    mask, edges = _edgy_mask()
    kept = filter_masks([MaskCandidate(mask, 0.79), MaskCandidate(mask, 0.80)], edges)
    assert [c.confidence for c in kept] == [0.80]


def test_low_edge_fraction_rejected():
    mask = np.ones((10, 10), bool)
    edges = np.zeros((10, 10), bool)
    edges[0, :2] = True  # 2 of 100 pixels
    assert edge_fraction(mask, edges) == 0.02
    assert filter_masks([MaskCandidate(mask, 0.99)], edges) == []


def test_top_two_by_confidence():
    mask, edges = _edgy_mask()
    cands = [MaskCandidate(mask, c) for c in (0.85, 0.95, 0.81, 0.9)]
    assert [c.confidence for c in filter_masks(cands, edges)] == [0.95, 0.9]


@given(st.lists(st.floats(0, 1), max_size=8))
def test_filter_output_bounded_and_confident(confs):
    mask, edges = _edgy_mask((6, 6))
    kept = filter_masks([MaskCandidate(mask, c) for c in confs], edges)
    assert len(kept) <= 2 and all(c.confidence >= 0.8 for c in kept)
    assert [c.confidence for c in kept] == sorted((c.confidence for c in kept), reverse=True)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        filter_masks([MaskCandidate(np.ones((3, 3), bool), 0.9)], np.ones((4, 4), bool))


# -- admission --------------------------------------------------------------------------------


def test_keypoint_threshold_boundary():
    assert not admit_page(PageRecord("p", "w", "x", kp_count=999), 1000)
    assert admit_page(PageRecord("p", "w", "x", kp_count=1000), 1000)


def test_require_mask_rejects_unmasked_page():
    rec = PageRecord("p", "w", "x", kp_count=5000)
    assert admit_page(rec, 1000) and not admit_page(rec, 1000, require_mask=True)


def test_errored_page_not_admitted():
    assert not admit_page(PageRecord("p", "w", "x", kp_count=5000, error="IOError"), 10)


# -- boxes ------------------------------------------------------------------------------------


def test_single_pixel_bbox():
    m = np.zeros((10, 10), bool)
    m[3, 7] = True
    assert mask_to_bbox(m) == (7, 3, 7, 3)
    assert mask_to_bbox(np.zeros((4, 4), bool)) is None


def test_half_overlap_iou_third():
    assert bbox_iou((0, 0, 2, 1), (1, 0, 3, 1)) == pytest.approx(1 / 3)


@given(*[st.floats(0, 50) for _ in range(8)])
def test_iou_symmetric_and_bounded(a, b, c, d, e, f, g, h):
    x, y = (a, b, a + c, b + d), (e, f, e + g, f + h)
    v = bbox_iou(x, y)
    assert v == bbox_iou(y, x) and 0.0 <= v <= 1.0


def test_iou_identical_and_degenerate():
    assert bbox_iou((1, 1, 4, 5), (1, 1, 4, 5)) == 1.0
    assert bbox_iou((1, 1, 1, 5), (1, 1, 1, 5)) == 0.0


def test_iou_at_threshold():
    truth = {"p": [pixel_box_area((0, 0, 9, 9))]}
    pred = {"p": [pixel_box_area((0, 0, 9, 9)), pixel_box_area((50, 50, 60, 60))]}
    assert iou_at(pred, truth) == 0.5


# -- splits and manifests ----------------------------------------------------------------------


def test_writer_split_size_and_determinism():
    ws = [f"w{i:02d}" for i in range(20)]
    a = split_writers(ws, 0.1, seed=3)
    assert len(a) == 2 and a == split_writers(reversed(ws), 0.1, seed=3)


@given(st.integers(1, 60), st.floats(0, 0.9), st.integers(0, 100))
def test_split_is_subset(n, frac, seed):
    ws = [str(i) for i in range(n)]
    val = split_writers(ws, frac, seed)
    assert val <= set(ws) and len(val) == int(np.floor(frac * n + 0.5))


@pytest.fixture(scope="module")
def page_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pages")
    corpus = make_corpus(3, 2, seed=1, size=(160, 160))
    corpus.append(("w000_blank", "w000", np.full((160, 160, 3), 255, np.uint8)))
    write_corpus(root, corpus)
    return root


def test_manifest_keeps_inadmissible_records(page_dir):
    m = build_manifest(page_dir, CurationRules(min_keypoints=50))
    recs = {r.page_id: r for r in m.records}
    assert len(recs) == 7 and not recs["w000_blank"].admitted
    assert recs["w000_blank"].kp_count == 0
    assert len(m.admitted()) == 6


def test_manifest_byte_identical(page_dir, tmp_path):
    rules = CurationRules(min_keypoints=50)
    build_manifest(page_dir, rules, seed=2).to_jsonl(tmp_path / "a.jsonl")
    build_manifest(page_dir, rules, seed=2).to_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_unreadable_page_reported(tmp_path):
    (tmp_path / "w1").mkdir()
    imaging.write_image(tmp_path / "w1" / "ok.png", np.full((64, 64), 255, np.uint8))
    (tmp_path / "w1" / "bad.png").write_bytes(b"not an image")
    m = build_manifest(tmp_path, CurationRules(min_keypoints=1))
    assert [p.endswith("bad.png") for p, _ in m.unreadable] == [True]
    assert {r.page_id for r in m.records} == {"ok", "bad"}


def test_missing_sidecar_strict(tmp_path):
    imaging.write_mask(tmp_path / "p1_0.png", np.ones((8, 8), bool))
    assert find_mask_candidates(tmp_path, "p1") == []
    with pytest.raises(MissingSidecar, match="p1_0.png"):
        find_mask_candidates(tmp_path, "p1", strict=True)
    (tmp_path / "p1_0.json").write_text(json.dumps({"confidence": 0.9}))
    (c,) = find_mask_candidates(tmp_path, "p1", strict=True)
    assert c.confidence == 0.9 and c.mask.all()
