import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusion_mamba.detector import (
    BACKBONE_CHANNELS,
    DetectorParams,
    TrainConfig,
    assign_targets,
    backbone_forward,
    decode,
    detect_forward,
    detection_loss,
    evaluate,
    feature_heatmap,
    forward_raw,
    fused_features,
    heatmap,
    load_dataset,
    load_model,
    mean_ap,
    nms,
    predict,
    save_dataset,
    synth_dataset,
    train,
    write_pgm,
)
from fusion_mamba.detector.data import DetectionSample
from fusion_mamba.detector.metrics import box_iou, class_ap
from fusion_mamba.detector.model import ScaleOutput, cell_centers
from fusion_mamba.detector.train import normalize_map, read_pgm
from fusion_mamba.errors import ConfigurationError
from fusion_mamba.fusion import FmbConfig
from fusion_mamba.oracles import brute_force_ap, random_ap_instance
from fusion_mamba.ssm_core.s6 import inverse_softplus
from fusion_mamba.tensor_core import Parameter, backward, ops

SMALL = FmbConfig(n_dssf=2, d_state=2)


@pytest.fixture(scope="module")
def samples64():
    return synth_dataset(0, 6, 64)


# synthetic data

def test_dataset_is_deterministic():
    a, b = synth_dataset(5, 4, 64), synth_dataset(5, 4, 64)
    for x, y in zip(a, b):
        assert x.rgb.tobytes() == y.rgb.tobytes() and x.ir.tobytes() == y.ir.tobytes()
        np.testing.assert_array_equal(x.boxes, y.boxes)
    assert synth_dataset(6, 1, 64)[0].rgb.tobytes() != a[0].rgb.tobytes()


def test_dataset_layout_and_bounds():
    for s in synth_dataset(1, 20, 64, n_classes=3):
        assert s.rgb.shape == (1, 3, 64, 64) and s.ir.shape == (1, 1, 64, 64)
        assert s.rgb.dtype == np.float32
        assert 0 <= s.rgb.min() and s.rgb.max() <= 1
        assert len(s.boxes) >= 1
        s.validate(3)
        assert np.all(s.boxes[:, :2] >= 0) and np.all(s.boxes[:, 2:4] <= 64)


def test_dataset_errors():
    with pytest.raises(ConfigurationError):
        synth_dataset(0, 1, 48)
    with pytest.raises(ConfigurationError):
        synth_dataset(0, 1, 64, n_classes=4)


def _contrast(plane, box):
    x0, y0, x1, y1 = (int(v) for v in box)
    ring = np.zeros(plane.shape[-2:], bool)
    ring[max(0, y0 - 3):y1 + 3, max(0, x0 - 3):x1 + 3] = True
    ring[y0:y1, x0:x1] = False
    inside = plane[..., y0:y1, x0:x1].mean(axis=(-1, -2))
    outside = plane[..., ring].mean(axis=-1)
    return np.abs(inside - outside).mean()


def test_modality_exclusive_contrast():
    ratios = []
    for s in synth_dataset(2, 40, 128, max_objects=1):
        box, meta = s.boxes[0, :4], s.meta[0]
        rgb, ir = _contrast(s.rgb[0], box), _contrast(s.ir[0], box)
        ratios.append(ir / rgb if meta["modality"] == "visible" else rgb / ir)
    assert max(ratios) <= 0.2


def test_dataset_save_load_roundtrip(tmp_path, samples64):
    save_dataset(samples64, tmp_path / "d")
    loaded = load_dataset(tmp_path / "d")
    assert len(loaded) == len(samples64)
    for a, b in zip(samples64, loaded):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.ir, b.ir)
        np.testing.assert_allclose(a.boxes, b.boxes)


# model

def test_backbone_shapes(samples64):
    params = DetectorParams(2, SMALL, seed=0)
    feats = backbone_forward(samples64[0], params)
    assert sorted(feats) == [2, 3, 4, 5]
    for i, (f_r, f_ir) in feats.items():
        side = 64 // 2 ** i
        assert f_r.shape == f_ir.shape == (1, BACKBONE_CHANNELS[i - 1], side, side)


def test_backbone_zero_image_zero_features():
    params = DetectorParams(2, SMALL, seed=0)
    feats = backbone_forward((np.zeros((1, 3, 64, 64)), np.zeros((1, 1, 64, 64))), params)
    assert all(np.all(f.data == 0) for pair in feats.values() for f in pair)


def test_backbone_rejects_bad_size():
    params = DetectorParams(2, SMALL, seed=0)
    with pytest.raises(ConfigurationError):
        backbone_forward((np.zeros((1, 3, 48, 48)), np.zeros((1, 1, 48, 48))), params)


def test_prediction_count_and_determinism(samples64):
    params = DetectorParams(2, SMALL, seed=0)
    preds = detect_forward(samples64[0], params, SMALL)
    assert len(preds) == sum((64 // 2 ** i) ** 2 for i in (3, 4, 5))
    again = detect_forward(samples64[0], params, SMALL)
    assert all(np.array_equal(p.box, q.box) and p.confidence == q.confidence for p, q in zip(preds, again))
    p = preds[0]
    assert p.scores.shape == (2,) and 0 < p.confidence < 1
    assert np.all(p.box >= 0) and np.all(p.box <= 64)


def test_removing_fusion_changes_predictions(samples64):
    full = DetectorParams(2, SMALL, seed=0)
    plain_cfg = SMALL.replace(use_sscs=False, use_dssf=False)
    plain = DetectorParams(2, plain_cfg, seed=0)
    a = detect_forward(samples64[0], full, SMALL)
    b = detect_forward(samples64[0], plain, plain_cfg)
    assert not np.allclose([p.confidence for p in a], [p.confidence for p in b])


def test_fused_features_follow_stage_set(samples64):
    cfg = SMALL.replace(stages=(2, 4))
    params = DetectorParams(2, cfg, seed=0)
    assert sorted(params.fmb) == ["2", "4"]
    fused = fused_features(samples64[0], params, cfg)
    assert sorted(fused) == [2, 3, 4, 5]


def test_batched_forward_matches_single(samples64):
    params = DetectorParams(2, SMALL, seed=1)
    rgb = np.concatenate([s.rgb for s in samples64[:3]])
    ir = np.concatenate([s.ir for s in samples64[:3]])
    batched = forward_raw((rgb, ir), params, SMALL)
    single = forward_raw(samples64[1], params, SMALL)
    for o_b, o_s in zip(batched, single):
        np.testing.assert_allclose(o_b.obj.data[1:2], o_s.obj.data, rtol=1e-4, atol=1e-5)


def test_nms_suppresses_overlaps():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30]], float)
    keep = nms(boxes, np.array([0.9, 0.8, 0.7]), 0.5)
    assert keep.tolist() == [0, 2]


def test_predict_output_format(samples64):
    params = DetectorParams(2, SMALL, seed=0)
    dets = predict(samples64[:2], params, SMALL, conf_floor=0.0)
    assert len(dets) == 2
    boxes, scores, classes = dets[0]
    assert boxes.shape[1] == 4 and len(scores) == len(classes) <= 100
    assert np.all(np.diff(scores) <= 0)


# loss

def one_cell_output(box_raw, obj_logit, cls_logits):
    """A single 1x1 cell at stage 5 (stride 32, center (16, 16))."""
    as4 = lambda v: Parameter(np.asarray(v, np.float64).reshape(1, -1, 1, 1))
    return [ScaleOutput(5, as4(box_raw), as4([obj_logit]), as4(cls_logits))]


def test_loss_hand_computed_single_cell():
    # GT is the whole 32x32 cell; the prediction is a centered square of half its area.
    half = np.sqrt(512.0) / 2
    raw = inverse_softplus(np.full(4, half / 32))
    outputs = one_cell_output(raw, 0.0, [0.0, 0.0])
    targets = [np.array([[0.0, 0.0, 32.0, 32.0, 1]])]
    loss = detection_loss(outputs, targets, 7.5)
    assert float(loss.coord.data) == pytest.approx(0.5, rel=1e-9)
    assert float(loss.conf.data) == pytest.approx(np.log(2), rel=1e-12)
    assert float(loss.cls.data) == pytest.approx(np.log(2), rel=1e-12)
    assert float(loss.total.data) == pytest.approx(7.5 * 0.5 + 2 * np.log(2), rel=1e-9)


def test_loss_perfect_prediction_is_zero():
    raw = inverse_softplus(np.full(4, 0.5))
    outputs = one_cell_output(raw, 60.0, [-60.0, 60.0])
    loss = detection_loss(outputs, [np.array([[0.0, 0.0, 32.0, 32.0, 1]])], 7.5)
    assert float(loss.total.data) < 1e-9


def test_lambda_scales_only_the_coordinate_term():
    raw = np.array([0.3, -0.2, 0.1, 0.5])
    targets = [np.array([[2.0, 4.0, 30.0, 28.0, 0]])]
    a = detection_loss(one_cell_output(raw, 0.4, [0.2, -0.1]), targets, 7.5)
    b = detection_loss(one_cell_output(raw, 0.4, [0.2, -0.1]), targets, 15.0)
    assert float(b.coord.data) == float(a.coord.data)
    assert float(b.conf.data) == float(a.conf.data) and float(b.cls.data) == float(a.cls.data)
    diff = float(b.total.data) - float(a.total.data)
    assert diff == pytest.approx(7.5 * float(a.coord.data), rel=1e-12)


def test_loss_without_targets():
    loss = detection_loss(one_cell_output(np.zeros(4), -1.0, [0.0, 0.0]), [np.zeros((0, 5))], 7.5)
    assert float(loss.coord.data) == 0 and float(loss.cls.data) == 0
    assert float(loss.conf.data) == pytest.approx(np.log1p(np.exp(-1.0)))
    with pytest.raises(ConfigurationError):
        detection_loss(one_cell_output(np.zeros(4), 0.0, [0.0, 0.0]), [np.zeros((0, 5))], 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4))
def test_loss_is_non_negative(seed, n_boxes):
    rng = np.random.default_rng(seed)
    outputs = [ScaleOutput(s, Parameter(rng.normal(0, 3, (2, 4, 8 >> (s - 3), 8 >> (s - 3)))),
                           Parameter(rng.normal(0, 3, (2, 1, 8 >> (s - 3), 8 >> (s - 3)))),
                           Parameter(rng.normal(0, 3, (2, 2, 8 >> (s - 3), 8 >> (s - 3)))))
               for s in (3, 4, 5)]
    targets = []
    for _ in range(2):
        xy = rng.uniform(0, 40, (n_boxes, 2))
        wh = rng.uniform(4, 24, (n_boxes, 2))
        targets.append(np.column_stack([xy, xy + wh, rng.integers(0, 2, n_boxes)]))
    assert float(detection_loss(outputs, targets).total.data) >= 0


def test_assignment_picks_scale_by_size():
    outputs = [ScaleOutput(s, *(ops.tensor(np.zeros((1, c, 64 >> s, 64 >> s))) for c in (4, 1, 2)))
               for s in (3, 4, 5)]
    # reference sizes are twice the strides: 16, 32, 64
    targets = [np.array([[0, 0, 14, 14, 0], [30, 30, 62, 62, 1], [2, 2, 62, 62, 1]], float)]
    assigned = assign_targets(targets, outputs)
    assert [len(a) for a in assigned] == [1, 1, 1]
    assert (assigned[0].i[0], assigned[0].j[0]) == (0, 0)
    assert (assigned[1].i[0], assigned[1].j[0]) == (2, 2)
    assert (assigned[2].i[0], assigned[2].j[0]) == (1, 1)
    # a second box centered on a taken cell of the same scale is dropped
    dup = [np.vstack([targets[0], [[1, 1, 13, 13, 1]]])]
    assert [len(a) for a in assign_targets(dup, outputs)] == [1, 1, 1]


def test_cell_centers():
    cx, cy = cell_centers(2, 3, 8)
    assert cx[0].tolist() == [4, 12, 20] and cy[:, 0].tolist() == [4, 12]


def test_decode_box_geometry():
    raw = inverse_softplus(np.array([0.25, 0.5, 0.25, 0.5]))
    outputs = one_cell_output(raw, 0.0, [1.0, 1.0])
    boxes, confs, probs = decode(outputs)
    np.testing.assert_allclose(boxes[0, 0], [8, 0, 24, 32])
    assert confs[0, 0] == pytest.approx(0.5) and probs[0, 0].tolist() == [0.5, 0.5]


# metrics

def test_perfect_and_empty_predictions():
    gts = [np.array([[0, 0, 10, 10, 0], [20, 20, 30, 35, 1]], float), np.array([[5, 5, 15, 15, 1]], float)]
    perfect = [(g[:, :4], np.ones(len(g)), g[:, 4].astype(int)) for g in gts]
    m = mean_ap(perfect, gts, 2)
    assert m["mAP50"] == 1.0 and m["mAP"] == 1.0
    none = [(np.zeros((0, 4)), np.zeros(0), np.zeros(0, int)) for _ in gts]
    m = mean_ap(none, gts, 2)
    assert m["mAP50"] == 0.0 and m["mAP"] == 0.0


def test_one_tp_one_fp_hand_trace():
    gt = [np.array([[0, 0, 10, 10, 0]], float)]
    tp_box = [0, 0, 10, 6]  # IoU 0.6
    assert box_iou(np.array(tp_box), gt[0][:, :4])[0, 0] == pytest.approx(0.6)
    dets = [(np.array([tp_box, [50, 50, 60, 60]], float), np.array([0.9, 0.8]), np.array([0, 0]))]
    assert class_ap(dets, gt, 0, 0.5) == 1.0
    assert class_ap(dets, gt, 0, 0.7) == 0.0


def test_metrics_errors():
    with pytest.raises(ValueError):
        mean_ap([], [], 2)
    with pytest.raises(ValueError):
        mean_ap([(np.zeros((0, 4)), np.zeros(0), np.zeros(0))], [np.zeros((0, 5))], 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_ap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_ap_instance(rng)
    for c in range(2):
        for thr in (0.5, 0.75):
            fast, slow = class_ap(dets, gts, c, thr), brute_force_ap(dets, gts, c, thr)
            assert (fast is None) == (slow is None)
            if fast is not None:
                assert abs(fast - slow) <= 1e-6
                assert 0 <= fast <= 1


# training, evaluation, heatmaps

def test_zero_learning_rate_keeps_parameters(samples64):
    config = TrainConfig(epochs=1, learning_rate=0.0, fmb=SMALL)
    result = train(config, samples64[:4])
    fresh = DetectorParams(2, SMALL, seed=0)
    for (name, a), (_, b) in zip(result.params.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data), name


def test_training_reduces_loss_and_writes_outputs(tmp_path):
    data = synth_dataset(0, 8, 64)
    config = TrainConfig(epochs=2, seed=0)
    result = train(config, data, out_dir=tmp_path)
    first, second = result.epoch_means()
    assert second < first
    assert (tmp_path / "loss_log.csv").read_text().startswith("epoch,step,loss,coord,conf,class\n")
    assert (tmp_path / "checkpoint" / "manifest.txt").exists()
    params, cfg = load_model(tmp_path / "checkpoint")
    assert cfg == config
    for (_, a), (_, b) in zip(params.named_parameters(), result.params.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_is_deterministic(samples64):
    config = TrainConfig(epochs=1, fmb=SMALL)
    assert train(config, samples64[:4]).log_csv() == train(config, samples64[:4]).log_csv()


def test_every_active_fmb_parameter_gets_gradient(samples64):
    params = DetectorParams(2, SMALL, seed=0)
    outputs = forward_raw(samples64[0], params, SMALL)
    loss = detection_loss(outputs, [samples64[0].boxes])
    fmb_params = {f"{s}.{n}": p for s, block in params.fmb.items() for n, p in block.named_parameters()}
    grads = backward(loss.total, fmb_params)
    dead = [n for n, g in grads.items() if not np.any(g)]
    assert dead == []


def test_train_rejects_mismatched_samples(samples64):
    with pytest.raises(ConfigurationError):
        train(TrainConfig(epochs=1, image_size=128, fmb=SMALL), samples64[:1])
    with pytest.raises(ConfigurationError):
        train(TrainConfig(epochs=1, fmb=SMALL), [])


def test_evaluate_returns_metrics(samples64):
    result = train(TrainConfig(epochs=1, fmb=SMALL), samples64[:4])
    metrics = evaluate(result, samples64[4:])
    assert 0 <= metrics["mAP"] <= metrics["mAP50"] + 1e-12 <= 1 + 1e-12
    with pytest.raises(ValueError):
        evaluate(result, [])


def test_heatmap_rules(tmp_path, samples64):
    assert np.all(normalize_map(np.full((3, 3), 2.5)) == 0)
    hm = feature_heatmap(np.random.default_rng(0).normal(size=(1, 4, 5, 6)))
    assert hm.shape == (5, 6) and hm.max() == 1.0 and hm.min() == 0.0

    params = DetectorParams(2, SMALL, seed=0)
    config = TrainConfig(fmb=SMALL)
    img = heatmap((params, config), samples64[0], 5)
    assert img.shape == (2, 2) and img.max() == 1.0
    assert heatmap((params, config), samples64[0], 3).shape == (8, 8)
    with pytest.raises(ConfigurationError):
        heatmap((params, config), samples64[0], 2)

    path = write_pgm(tmp_path / "h.pgm", img)
    assert path.read_text().startswith("P2\n2 2\n255\n")
    np.testing.assert_allclose(read_pgm(path), np.rint(img * 255) / 255)


def test_sample_validation():
    s = DetectionSample(np.zeros((1, 3, 32, 32)), np.zeros((1, 1, 32, 32)), np.array([[0, 0, 40, 10, 0.0]]))
    with pytest.raises(ValueError):
        s.validate(2)
