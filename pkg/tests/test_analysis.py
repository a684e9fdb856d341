from __future__ import annotations

import json

import numpy as np
import numpy.testing as npt
import pytest

from egoflow import analysis as an
from egoflow import ego_net as en
from egoflow.errors import LabelError, SplitError
from egoflow.volume_builder import NormStats, VolumeDataset


def test_f1_values():
    assert an.f1_score(1.0, 1.0) == 1.0
    assert an.f1_score(0.8, 0.86) == pytest.approx(0.829, abs=5e-4)
    assert an.f1_score(0.0, 0.0) == 0.0


def test_confusion_and_report():
    truth = [0, 0, 0, 1, 1, 2]
    pred = [0, 0, 1, 1, 1, 1]
    cm = an.ConfusionMatrix.from_predictions(truth, pred, 3)
    npt.assert_array_equal(cm.counts, [[2, 1, 0], [0, 2, 0], [0, 1, 0]])
    npt.assert_array_equal(cm.counts.sum(axis=1), [3, 2, 1])
    assert cm.accuracy == pytest.approx(4 / 6)
    rep = an.EvaluationReport.from_confusion(cm, ["a", "b", "c"], eta=1)
    npt.assert_allclose(rep.precision, [1.0, 0.5, 0.0])
    npt.assert_allclose(rep.recall, [2 / 3, 1.0, 0.0])
    assert rep.f1[2] == 0.0
    for p, r, f in zip(rep.precision, rep.recall, rep.f1):
        if p + r > 0:
            assert f == pytest.approx(2 * p * r / (p + r))
    doc = json.loads(rep.to_json())
    assert set(doc) >= {"macro_precision", "macro_recall", "macro_f1", "per_class", "confusion_matrix", "accuracy"}
    assert doc["per_class"][1]["support"] == 2


def test_micro_recall_equals_accuracy(rng):
    truth = rng.integers(0, 4, 200)
    pred = rng.integers(0, 4, 200)
    cm = an.ConfusionMatrix.from_predictions(truth, pred, 4)
    assert np.trace(cm.counts) / cm.counts.sum() == cm.accuracy


def test_single_class_perfect():
    cm = an.ConfusionMatrix.from_predictions([1, 1, 1], [1, 1, 1], 3)
    assert np.count_nonzero(cm.counts) == 1 and cm.counts[1, 1] == 3


def test_unknown_label():
    with pytest.raises(LabelError):
        an.ConfusionMatrix.from_predictions([0, 3], [0, 0], 3)


def test_aggregation_stays_within_groups():
    scores = np.array([[0.9, 0.1]] * 3 + [[0.4, 0.6]])
    groups = [0, 0, 0, 1]
    npt.assert_array_equal(an.aggregate_by_group(scores, groups, [0, 30, 60, 0], eta=21), [0, 0, 0, 1])


def test_random_half_split():
    groups = np.repeat(np.arange(10), 4)
    tr, te = an.split_indices(groups, an.SplitSpec(seed=3))
    assert len(np.unique(groups[tr])) == 5 and len(np.unique(groups[te])) == 5
    assert not set(groups[tr]) & set(groups[te])
    assert len(tr) + len(te) == 40
    tr2, te2 = an.split_indices(groups, an.SplitSpec(seed=3))
    npt.assert_array_equal(tr, tr2)
    npt.assert_array_equal(te, te2)


def test_group_holdout():
    groups = np.array([0, 0, 1, 2, 2, 2])
    tr, te = an.split_indices(groups, an.SplitSpec("group_holdout", holdout_group=2))
    npt.assert_array_equal(te, [3, 4, 5])
    with pytest.raises(SplitError):
        an.split_indices(np.zeros(4), an.SplitSpec("group_holdout", holdout_group=0))
    with pytest.raises(ValueError):
        an.SplitSpec("group_holdout")


def _brute_affinity(model, vols, labels, depth):
    votes = np.zeros((model.num_classes, model.params["c1_w"].shape[0]), dtype=np.int64)
    for x, y in zip(vols, labels):
        act = en.activations(model, x)["c1"]
        resp = [act[k].max() for k in range(act.shape[0])]
        ranked = sorted(range(len(resp)), key=lambda k: (-resp[k], k))
        for k in ranked[:depth]:
            votes[y, k] += 1
    return votes


def test_affinity_matches_full_sort_oracle(rng):
    model = en.init_model(["a", "b", "c"], NormStats(1.0, 1.0), seed=2)
    vols = rng.uniform(-1, 1, (5, 32, 32, 120))
    labels = np.array([0, 2, 2, 1, 0])
    ds = VolumeDataset(vols, labels, norm_stats=model.norm_stats)
    votes = an.kernel_affinity(model, ds)
    npt.assert_array_equal(votes, _brute_affinity(model, vols, labels, 3))
    assert votes.sum() == 15
    one = an.kernel_affinity(model, ds.subset([1]))
    assert one[2].sum() == 3 and one.sum() == 3
    csv = an.affinity_csv(votes, ["a", "b", "c"]).splitlines()
    assert csv[0].startswith("class,k0,k1") and len(csv) == 4


def test_top_kernels_ties_to_lowest():
    npt.assert_array_equal(an.top_kernels(np.array([[1.0, 3.0, 3.0, 0.0]]), 2), [[1, 2]])


def _rotation_kernel(pair=3):
    w = np.zeros((30, 17, 17, 20))
    # u(i, j) = -(j - 8), v(i, j) = i - 8 with i along x (columns), j along y (rows)
    j, i = np.mgrid[0:17, 0:17].astype(float)
    w[5, :, :, 2 * pair] = -(j - 8)
    w[5, :, :, 2 * pair + 1] = i - 8
    return w


def test_zero_kernel_renders_dots(tmp_path):
    images = an.render_kernel_flowfields(np.zeros((30, 17, 17, 20)), 0, tmp_path)
    assert len(images) == 10
    svg = (tmp_path / "kernel_0_pair_0.svg").read_text()
    assert svg.count("<circle") == 289 and svg.count("<line") == 0


def test_rotation_kernel_render(tmp_path):
    images = an.render_kernel_flowfields(_rotation_kernel(), 5, tmp_path, ppm=True)
    assert sorted(p.name for p in tmp_path.glob("*.svg")) == sorted(f"kernel_5_pair_{p}.svg" for p in range(10))
    assert (tmp_path / "kernel_5_pair_3.ppm").read_bytes().startswith(b"P6\n408 408\n255\n")
    im = images[3]
    assert len(im.arrows()) == 289
    assert np.hypot(im.u, im.v).max() == pytest.approx(1.0)
    # the drawn vectors rotate about the slice centre
    x0, y0, x1, y1 = np.array(im.arrows()).T
    ax = ((x1 - x0) / (0.9 * an.CELL_PX)).reshape(17, 17)
    ay = ((y1 - y0) / (0.9 * an.CELL_PX)).reshape(17, 17)
    curl, div = an.curl_divergence(ax, ay)
    assert np.all(curl > 0)
    assert np.abs(div).max() <= 1e-9
    assert an.render_kernel_flowfields(_rotation_kernel(), 5)[3].to_svg() == im.to_svg()


def test_sparsity_and_bad_kernel():
    assert len(an.kernel_pairs(_rotation_kernel(), 5, sparsity=2)[0].arrows()) == 145
    with pytest.raises(IndexError):
        an.kernel_pairs(_rotation_kernel(), 30)
