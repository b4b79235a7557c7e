import math

import numpy as np
import pytest

from sapiens_desk import heads, metrics
from sapiens_desk.errors import (DegenerateBoxError, EmptyMaskError,
                                 NoLabeledKeypointsError, ShapeMismatchError)
from sapiens_desk.metrics import EvalProtocol
from sapiens_desk.skeleton import flip_index
from sapiens_desk.vit import get_config


# -- oks ----------------------------------------------------------------------

def test_oks_hand_value():
    # area 100, sigma 0.05: a squared distance of 2 gives exactly exp(-1)
    gt = np.array([[0.0, 0.0], [5.0, 5.0]])
    pred = np.array([[0.0, 0.0], [6.0, 6.0]])
    vis = np.array([2, 2])
    s = metrics.oks(pred, gt, vis, area=100.0, sigmas=np.full(2, 0.05))
    assert s == pytest.approx((1.0 + math.exp(-1.0)) / 2.0, abs=1e-12)


def test_oks_ignores_unlabeled():
    gt = np.array([[0.0, 0.0], [5.0, 5.0]])
    pred = np.array([[0.0, 0.0], [999.0, -999.0]])
    s = metrics.oks(pred, gt, np.array([2, 0]), 50.0, np.full(2, 0.05))
    assert s == 1.0


def test_oks_guards():
    gt = np.zeros((2, 2))
    with pytest.raises(NoLabeledKeypointsError):
        metrics.oks(gt, gt, np.zeros(2), 10.0, np.full(2, 0.05))
    with pytest.raises(DegenerateBoxError):
        metrics.oks(gt, gt, np.array([2, 2]), 0.0, np.full(2, 0.05))


# -- matching ------------------------------------------------------------------

def _pose(x, y, k=3):
    return np.tile([[x, y]], (k, 1)).astype(np.float64)


def test_greedy_match_priority_and_threshold():
    sig = np.full(3, 0.05)
    gts = [(_pose(0, 0), np.full(3, 2), 100.0),
           (_pose(10, 0), np.full(3, 2), 100.0)]
    # the higher-scoring pred claims the gt both sit next to
    preds = [(_pose(0.3, 0), 0.5), (_pose(0.2, 0), 0.9)]
    out = metrics.greedy_match(preds, gts, 0.5, sig)
    assert out[1] == 0          # high score matched the shared gt
    assert out[0] == -1         # leftover pred is too far from gt 1
    # far-away pred matches nothing even alone
    assert metrics.greedy_match([(_pose(500, 500), 1.0)], gts, 0.5, sig) == [-1]


def test_greedy_match_tie_takes_lowest_index():
    sig = np.full(3, 0.05)
    gts = [(_pose(0, 0), np.full(3, 2), 100.0),
           (_pose(0, 0), np.full(3, 2), 100.0)]
    out = metrics.greedy_match([(_pose(0, 0), 1.0)], gts, 0.5, sig)
    assert out == [0]


def test_greedy_match_skips_unlabeled_gt():
    sig = np.full(3, 0.05)
    gts = [(_pose(0, 0), np.zeros(3), 100.0),
           (_pose(0, 0), np.full(3, 2), 100.0)]
    out = metrics.greedy_match([(_pose(0, 0), 1.0)], gts, 0.5, sig)
    assert out == [1]


# -- ap / ar against an exhaustive assignment oracle -----------------------------

def _oracle_match(preds, gts, thr, sigmas):
    """Enumerate every valid assignment vector and keep the lexicographic
    maximum in score order, preferring matched, then higher similarity,
    then lower gt index."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    eligible = [i for i, (_, vis, _) in enumerate(gts)
                if (np.asarray(vis) > 0).any()]
    table = {(pi, gi): metrics.oks(preds[pi][0], gts[gi][0], gts[gi][1],
                                   gts[gi][2], sigmas)
             for pi in range(len(preds)) for gi in eligible}
    best_key = None
    best_assigned = None

    def walk(k, taken, assigned, key):
        nonlocal best_key, best_assigned
        if k == len(order):
            if best_key is None or key > best_key:
                best_key = list(key)
                best_assigned = dict(assigned)
            return
        pi = order[k]
        for gi in eligible:
            if gi not in taken and table[(pi, gi)] >= thr:
                assigned[pi] = gi
                key.append((1, table[(pi, gi)], -gi))
                walk(k + 1, taken | {gi}, assigned, key)
                key.pop()
                del assigned[pi]
        key.append((0, 0.0, 0))
        walk(k + 1, taken, assigned, key)
        key.pop()

    walk(0, frozenset(), {}, [])
    return [best_assigned.get(pi, -1) for pi in range(len(preds))]


def _oracle_ap_ar(preds_per_image, gts_per_image, protocol):
    n_kpts = next(len(gt[1]) for gts in gts_per_image for gt in gts)
    sigmas = protocol.sigmas(n_kpts)
    capped = []
    for preds in preds_per_image:
        order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
        capped.append([preds[i] for i in order[:protocol.ar_max_dets]])
    n_gt = sum(1 for gts in gts_per_image for g in gts
               if (np.asarray(g[1]) > 0).any())
    grid = np.linspace(0.0, 1.0, 101)
    aps, ars = [], []
    for thr in protocol.oks_thresholds:
        rows = []
        for img, (preds, gts) in enumerate(zip(capped, gts_per_image)):
            assigned = _oracle_match(preds, gts, thr, sigmas)
            for rank, ((_, score), gt) in enumerate(zip(preds, assigned)):
                rows.append((score, img, rank, gt >= 0))
        rows.sort(key=lambda r: (-r[0], r[1], r[2]))
        flags = np.array([r[3] for r in rows], dtype=bool)
        tp = np.cumsum(flags)
        recall = tp / n_gt
        precision = tp / np.arange(1, len(rows) + 1)
        interp = np.zeros(101)
        for i, r in enumerate(grid):
            keep = precision[recall >= r]
            interp[i] = keep.max() if keep.size else 0.0
        aps.append(float(interp.mean()))
        ars.append(float(recall[-1]) if len(rows) else 0.0)
    return {"ap": float(np.mean(aps)), "ar": float(np.mean(ars))}


def test_ap_ar_equals_exhaustive_oracle_on_random_scenes():
    rng = np.random.default_rng(2024)
    protocol = EvalProtocol()
    for scene in range(50):
        n_images = int(rng.integers(1, 4))
        preds_per_image, gts_per_image = [], []
        for _ in range(n_images):
            gts = []
            for _ in range(int(rng.integers(1, 4))):
                center = rng.uniform(0, 50, size=2)
                coords = center + rng.normal(0, 2, size=(3, 2))
                vis = rng.integers(1, 3, size=3)
                gts.append((coords, vis, float(rng.uniform(50, 400))))
            preds = []
            for _ in range(int(rng.integers(0, 5))):
                anchor = gts[int(rng.integers(0, len(gts)))][0]
                coords = anchor + rng.normal(0, rng.uniform(0.2, 6), size=(3, 2))
                preds.append((coords, float(rng.uniform(0, 1))))
            preds_per_image.append(preds)
            gts_per_image.append(gts)
        got = metrics.keypoint_ap_ar(preds_per_image, gts_per_image, protocol)
        want = _oracle_ap_ar(preds_per_image, gts_per_image, protocol)
        assert got["ap"] == want["ap"], f"scene {scene}"
        assert got["ar"] == want["ar"], f"scene {scene}"


def test_ap_hand_case_high_scoring_false_positive():
    # one gt; an exact match at score 0.9 behind a garbage det at 0.95
    gt = [(_pose(5, 5), np.full(3, 2), 100.0)]
    preds = [(_pose(5, 5), 0.9), (_pose(400, 400), 0.95)]
    out = metrics.keypoint_ap_ar([preds], [gt])
    assert out["ap"] == pytest.approx(0.5)
    assert out["ar"] == 1.0


def test_ap_perfect_predictions():
    gts = [[(_pose(3, 4), np.full(3, 2), 64.0)],
           [(_pose(8, 1), np.full(3, 2), 81.0)]]
    preds = [[(_pose(3, 4), 0.8)], [(_pose(8, 1), 0.6)]]
    out = metrics.keypoint_ap_ar(preds, gts)
    assert out["ap"] == 1.0
    assert out["ar"] == 1.0


def test_ap_requires_labeled_gt():
    with pytest.raises(NoLabeledKeypointsError):
        metrics.keypoint_ap_ar([[]], [[(_pose(0, 0), np.zeros(3), 10.0)]])
    with pytest.raises(ShapeMismatchError):
        metrics.keypoint_ap_ar([[], []], [[]])


# -- pck --------------------------------------------------------------------------

def test_pck_hand_case():
    gt = np.zeros((2, 3, 2))
    pred = np.zeros((2, 3, 2))
    pred[0, 0] = [5.0, 0.0]    # inside 0.1 * diag(100) = 10
    pred[0, 1] = [11.0, 0.0]   # outside
    pred[1, 2] = [0.0, 10.0]   # exactly on the boundary counts
    vis = np.array([[2, 2, 0], [1, 2, 2]])
    diag = np.array([100.0, 100.0])
    got = metrics.pck(pred, gt, vis, diag, fraction=0.1)
    assert got == pytest.approx(4 / 5)


# -- segmentation --------------------------------------------------------------------

def test_seg_metrics_hand_case():
    gt = [np.array([[0, 0], [1, 1]])]
    pred = [np.array([[0, 1], [1, 1]])]
    out = metrics.seg_metrics(pred, gt, n_classes=3)
    # IoU: class0 1/2, class1 2/3, class2 absent everywhere
    assert out["miou"] == pytest.approx((0.5 + 2 / 3) / 2)
    assert out["macc"] == pytest.approx((0.5 + 1.0) / 2)


def test_seg_metrics_counts_prediction_only_classes():
    gt = [np.zeros((2, 2), dtype=int)]
    pred = [np.array([[0, 0], [0, 2]])]
    out = metrics.seg_metrics(pred, gt, n_classes=3)
    # class 2 exists only in the prediction: IoU 0 drags the mean down
    assert out["miou"] == pytest.approx((3 / 4 + 0.0) / 2)
    assert out["macc"] == pytest.approx(3 / 4)


# -- depth -----------------------------------------------------------------------------

def test_depth_metrics_affine_alignment_nulls_linear_distortion():
    rng = np.random.default_rng(0)
    gt = rng.uniform(1.0, 3.0, size=(8, 8))
    pred = 0.25 * gt + 7.0
    out = metrics.depth_metrics([pred], [gt], [np.ones_like(gt, dtype=bool)])
    assert out["rmse"] == pytest.approx(0.0, abs=1e-9)
    assert out["absrel"] == pytest.approx(0.0, abs=1e-9)
    assert out["delta1"] == 1.0


def test_depth_metrics_hand_case():
    # lstsq fit of [[0,1],[1,1],[1,1]] against [1,1,2] gives a=0.5, b=1
    pred = np.array([[0.0, 1.0, 1.0]])
    gt = np.array([[1.0, 1.0, 2.0]])
    mask = np.ones_like(gt, dtype=bool)
    out = metrics.depth_metrics([pred], [gt], [mask])
    assert out["rmse"] == pytest.approx(math.sqrt(1 / 6), abs=1e-12)
    assert out["absrel"] == pytest.approx(0.25, abs=1e-12)
    assert out["delta1"] == pytest.approx(1 / 3, abs=1e-12)


def test_depth_metrics_empty_mask():
    z = np.ones((2, 2))
    with pytest.raises(EmptyMaskError):
        metrics.depth_metrics([z], [z], [np.zeros_like(z, dtype=bool)])


# -- normals ----------------------------------------------------------------------------

def test_normal_metrics_identical_is_zero():
    n = np.zeros((4, 4, 3))
    n[..., 2] = -1.0
    mask = np.ones((4, 4), dtype=bool)
    out = metrics.normal_metrics([n], [n], [mask])
    assert out["mean_deg"] == 0.0
    assert out["median_deg"] == 0.0
    assert out["within_11.25"] == 1.0
    assert out["within_30"] == 1.0


def test_normal_metrics_median_takes_lower_middle():
    def tilted(deg):
        a = math.radians(deg)
        return np.array([math.sin(a), 0.0, -math.cos(a)])

    gt = np.zeros((1, 4, 3))
    gt[..., 2] = -1.0
    pred = np.zeros((1, 4, 3))
    pred[0, 0] = tilted(10)
    pred[0, 1] = tilted(10)
    pred[0, 2] = tilted(20)
    pred[0, 3] = tilted(20)
    mask = np.ones((1, 4), dtype=bool)
    out = metrics.normal_metrics([pred], [gt], [mask])
    assert out["mean_deg"] == pytest.approx(15.0, abs=1e-9)
    assert out["median_deg"] == pytest.approx(10.0, abs=1e-9)
    assert out["within_11.25"] == pytest.approx(0.5)
    assert out["within_22.5"] == 1.0
    # prediction scaling does not change angles
    out2 = metrics.normal_metrics([pred * 3.7], [gt], [mask])
    assert out2["mean_deg"] == pytest.approx(out["mean_deg"], abs=1e-9)


# -- top-down inference ----------------------------------------------------------------


class _StubPoseModel:
    """Duck-typed stand-in whose heatmaps encode fixed crop keypoints."""

    def __init__(self, cfg, crop_coords):
        self.cfg = cfg
        self.task = "pose"
        self.crop_coords = crop_coords

    def _maps(self):
        oh = self.cfg.image_height // heads.POSE_STRIDE
        ow = self.cfg.image_width // heads.POSE_STRIDE
        vis = np.full(len(self.crop_coords), 2)
        return heads.make_heatmaps(self.crop_coords, vis, oh, ow).maps

    def predict(self, batch):
        maps = self._maps()
        out = [maps]
        if len(batch) > 1:  # mirrored view: what a flip-consistent model returns
            out.append(maps[flip_index()][:, :, ::-1])
        return np.stack(out)


def test_topdown_infer_roundtrips_coordinates():
    cfg = get_config("desk-tiny").with_image(64, 48)
    # crop keypoints chosen to sit exactly on quarter-pixel decode targets
    crop_kps = np.tile([[12.5, 16.5]], (14, 1))
    model = _StubPoseModel(cfg, crop_kps)
    box = np.array([8.0, 12.0, 24.0, 32.0])  # already 4:3, stays unpadded
    for flip in (False, True):
        proto = EvalProtocol(flip_test=flip)
        (coords, scores), = metrics.topdown_infer(
            np.zeros((64, 48, 3)), box[None], model, proto)
        np.testing.assert_allclose(coords[0], [14.0, 20.0], atol=1e-9)
        assert scores.shape == (14,)


def test_topdown_pads_narrow_boxes():
    from sapiens_desk import crops
    cfg = get_config("desk-tiny").with_image(64, 48)
    # (12.5, 16.5) sits on an exact quarter-pixel decode target
    crop_kps = np.tile([[12.5, 16.5]], (14, 1))
    model = _StubPoseModel(cfg, crop_kps)
    box = np.array([20.0, 10.0, 4.0, 40.0])  # tall sliver, needs width padding
    proto = EvalProtocol(flip_test=False)
    (coords, _), = metrics.topdown_infer(np.zeros((64, 48, 3)), box[None],
                                         model, proto)
    padded = crops.pad_box_to_aspect(box, 64 / 48)
    np.testing.assert_allclose(padded, [7.0, 10.0, 30.0, 40.0])
    want = crops.crop_to_image_coords(np.array([12.5, 16.5]), padded, 64, 48)
    np.testing.assert_allclose(coords[0], want, atol=1e-9)


def test_report_rows_and_csv(tmp_path):
    rep = metrics.MetricReport("seg", {"miou": 0.5, "macc": 0.75}, 12)
    p = tmp_path / "m.csv"
    rep.write_csv(p)
    text = p.read_text().splitlines()
    assert text[0] == "task,metric,value,n_samples"
    assert text[1] == "seg,miou,0.5,12"
    assert text[2] == "seg,macc,0.75,12"
