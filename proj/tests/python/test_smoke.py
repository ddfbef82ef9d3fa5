import numpy as np
import pytest

import cityloc

SMALL = {
    "extent_width": 60,
    "extent_height": 60,
    "poses_per_submap": 2,
    "fine_poses_per_submap": 2,
    "width": 8,
    "branch_width": 4,
    "heads": 2,
    "text_width": 16,
    "max_points": 4,
    "fine_max_points": 4,
    "ccat_blocks": 1,
    "batch_size": 8,
    "epochs": 2,
    "distill_batch_size": 8,
    "distill_epochs": 2,
    "fine_batch_size": 8,
    "fine_epochs": 1,
}


def test_version_and_config():
    assert cityloc.__version__ == cityloc.version()
    cfg = cityloc.default_config()
    assert cfg["temperature"] == pytest.approx(0.07)
    assert cfg["pmc_alpha"] == 15 and cfg["pmc_beta"] == 10
    assert cityloc.resolve_config({"width": 16})["width"] == 16
    with pytest.raises(cityloc.PipelineError):
        cityloc.resolve_config({"no_such_key": 1})


def test_token_hash():
    assert cityloc.fnv1a64("") == 0xCBF29CE484222325
    assert cityloc.fnv1a64("a") == 0xAF63DC4C8601EC8C
    assert cityloc.tokenize("The pose is EAST of a light-gray pole.") == [
        "the", "pose", "is", "east", "of", "a", "light-gray", "pole"]
    v = np.array(cityloc.token_vector("pole", 32))
    assert v.shape == (32,)
    assert np.array_equal(v, cityloc.token_vector("pole", 32))
    assert not np.array_equal(v, cityloc.token_vector("pale", 32))


def test_retrieval_matches_numpy():
    rng = np.random.default_rng(0)
    db = cityloc.l2_normalize_rows(rng.normal(size=(30, 6)))
    np.testing.assert_allclose(np.linalg.norm(db, axis=1), 1.0)
    ids = list(range(100, 130))
    q = db[7] + 0.01 * rng.normal(size=6)
    top = cityloc.retrieve_topk(list(q), db, ids, 5)
    order = np.argsort(-(db @ q), kind="stable")[:5]
    assert [i for i, _ in top] == [ids[j] for j in order]
    queries = cityloc.l2_normalize_rows(rng.normal(size=(20, 6)))
    truth = [ids[j] for j in rng.integers(0, 30, size=20)]
    r = cityloc.recall_at_k(queries, truth, db, ids, [1, 3, 10, 30])
    assert r == sorted(r) and r[-1] == 1.0


def test_localization_recall_table():
    t = cityloc.localization_recall([[20.0] * 9 + [1.0], [4.0] + [30.0] * 9])
    assert t["recall"][0] == [0.5, 0.5, 1.0]
    with pytest.raises(Exception):
        cityloc.localization_recall([[1.0, 2.0]])


def test_pipeline_end_to_end(tmp_path):
    data, ck, m = tmp_path / "data", tmp_path / "ck", tmp_path / "m"
    counts = cityloc.gen(data, seed=3, config=SMALL)
    assert counts["pairs"] == counts["submaps"] * SMALL["poses_per_submap"]
    coarse = cityloc.train("coarse", data, ck, seed=1, config=SMALL)
    assert len(coarse["epoch_loss"]) == SMALL["epochs"]
    assert cityloc.train("coarse", data, ck, seed=1, config=SMALL)["digest"] == coarse["digest"]
    with pytest.raises(cityloc.PipelineError):
        cityloc.train("distill", data, ck, config=SMALL)
    student = cityloc.train("distill", data, ck, frozen=coarse["checkpoint"], config=SMALL)
    fine = cityloc.train("fine", data, ck, config=SMALL)
    s = cityloc.evaluate("retrieval", data, m, coarse["checkpoint"], student=student["checkpoint"])
    assert set(s["results"]) == {"simple", "moderate", "complex"}
    loc = cityloc.evaluate("localization", data, m, coarse["checkpoint"], fine=fine["checkpoint"],
                           levels=["simple"])
    assert "center_baseline_mean_error" in loc["results"]["simple"]
    text = cityloc.report(m)
    assert "## retrieval" in text and (m / "report.md").exists()
