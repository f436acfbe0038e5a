import numpy as np
import pytest
from hypothesis import given, strategies as st

from uda_forge import detector as det
from uda_forge.numerics import Rng, fd_check


def params64(seed=0):
    return det.init_params(Rng(seed), np.float64)


def test_param_shapes_and_validation():
    p = det.init_params(Rng(0))
    det.validate_params(p)
    assert p["head.out.weight"].shape == (16, 5)
    bad = dict(p)
    bad["encoder.weight"] = np.zeros((16, 15), np.float32)
    with pytest.raises(ValueError):
        det.validate_params(bad)
    missing = dict(p)
    del missing["mask_query"]
    with pytest.raises((KeyError, ValueError)):
        det.validate_params(missing)


def test_zero_image_zero_bias_gives_zero_maps():
    p = params64()
    for k in ("backbone.conv1.bias", "backbone.conv2.bias"):
        p[k] = np.zeros_like(p[k])
    fm, _ = det.backbone_forward(p, np.zeros((1, 64, 64)))
    assert [x.shape for x in fm.levels] == [(8, 32, 32), (16, 16, 16)]
    assert all(not x.any() for x in fm.levels)


def test_backbone_batched_matches_single():
    p = params64(1)
    imgs = Rng(2).uniform(2 * 4096).reshape(2, 1, 64, 64)
    fm, _ = det.backbone_forward(p, imgs)
    single, _ = det.backbone_forward(p, imgs[1])
    np.testing.assert_allclose(fm.top[1], single.top, atol=1e-12)


def test_backbone_gradient_of_feature_sum():
    # small weights and positive biases keep every relu input off its kink
    r = Rng(3)
    p = params64(3)
    p["backbone.conv1.weight"] = 0.05 * r.normal(72).reshape(8, 1, 3, 3)
    p["backbone.conv2.weight"] = 0.02 * r.normal(16 * 72).reshape(16, 8, 3, 3)
    p["backbone.conv1.bias"] = r.uniform(8, 1.0, 2.0)
    p["backbone.conv2.bias"] = r.uniform(16, 1.0, 2.0)
    img = r.uniform(4096).reshape(1, 64, 64)

    def f(q):
        fm, cache = det.backbone_forward(q, img)
        return float(fm.top.sum()), det.backbone_backward(q, cache, np.ones_like(fm.top))

    assert fd_check(f, p, names=list(det.BACKBONE_KEYS), max_coords=8) < 1e-4


@pytest.mark.parametrize("mu,count", [(0.0, 0), (1.0, 256), (0.25, 64), (0.3, 77)])
def test_mask_counts(mu, count):
    pattern = det.sample_mask(mu, Rng(0))
    assert pattern.masked_count == count == round(mu * 256)


def test_apply_mask_zeroes_masked_cells_only():
    p = params64()
    fm, _ = det.backbone_forward(p, Rng(1).uniform(4096).reshape(1, 64, 64))
    original = fm.top.copy()
    masked, pattern = det.apply_mask(fm, 0.4, Rng(7))
    assert np.array_equal(fm.top, original)
    m = pattern.mask
    assert not masked.top[:, m].any()
    assert np.array_equal(masked.top[:, ~m], original[:, ~m])
    assert np.array_equal(masked.levels[0], fm.levels[0])


def test_encoder_identity_weights_reproduce_nonnegative_input():
    p = params64()
    p["encoder.weight"] = np.eye(16)
    p["encoder.bias"] = np.zeros(16)
    tok = Rng(0).uniform(256 * 16).reshape(256, 16)
    enc, _ = det.encoder_forward(p, tok)
    np.testing.assert_array_equal(enc, tok)


def test_fill_mask_queries():
    enc = Rng(0).normal(256 * 16).reshape(256, 16)
    q = np.arange(16.0)
    empty = det.MaskPattern(np.zeros((16, 16), bool))
    assert np.array_equal(det.fill_mask_queries(enc, empty, q), enc)
    full = det.MaskPattern(np.ones((16, 16), bool))
    assert np.all(det.fill_mask_queries(enc, full, q) == q)
    one = np.zeros((16, 16), bool)
    one[3, 5] = True
    out = det.fill_mask_queries(enc, det.MaskPattern(one), q)
    assert int((out != enc).any(axis=1).sum()) == 1
    assert np.array_equal(out[3 * 16 + 5], q)


def test_mae_decode_zero_weights_and_shape():
    p = params64()
    p["mae_decoder.weight"] = np.zeros_like(p["mae_decoder.weight"])
    p["mae_decoder.bias"] = np.zeros_like(p["mae_decoder.bias"])
    recon, _ = det.mae_decode(p, Rng(0).normal(256 * 16).reshape(256, 16))
    assert recon.shape == (16, 16, 16) and not recon.any()


def test_zero_head_weights_give_centred_unit_boxes():
    p = det.zero_params(np.float64)
    raw, _ = det.detect_forward(p, np.zeros((256, 16)))
    assert not raw.any()
    scores, boxes = det.decode_boxes(raw)
    assert np.all(scores == 0.5)
    cx, cy = det.cell_centers()
    np.testing.assert_allclose(boxes[:, 0], (cx + 0.5) * 4)
    np.testing.assert_allclose(boxes[:, 1], (cy + 0.5) * 4)
    assert np.all(boxes[:, 2:] == 4.0)


def test_box_decode_by_hand():
    raw = np.zeros((256, 5))
    cell = 2 * 16 + 3  # column 3, row 2
    raw[cell] = (0.0, np.arctanh(0.5), np.arctanh(-0.5), np.log(2.0), np.log(0.25))
    _, boxes = det.decode_boxes(raw)
    np.testing.assert_allclose(boxes[cell], [(3 + 0.5 + 0.25) * 4, (2 + 0.5 - 0.25) * 4, 8.0, 2.0])


def test_box_size_clamped():
    raw = np.zeros((256, 5))
    raw[0, 3], raw[0, 4] = 50.0, -50.0
    _, boxes = det.decode_boxes(raw)
    assert boxes[0, 2] == 64.0 and boxes[0, 3] == 2.0


def test_identical_boxes_one_survives():
    boxes = np.array([[10.0, 10, 8, 8], [10.0, 10, 8, 8]])
    assert det.nms(boxes, np.array([0.9, 0.8]), 0.5) == [0]


def reference_nms(boxes, scores, thr, cells):
    def iou(a, b):
        ix = max(0.0, min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2))
        iy = max(0.0, min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2))
        inter = ix * iy
        return inter / (a[2] * a[3] + b[2] * b[3] - inter)

    order = sorted(range(len(scores)), key=lambda i: (-scores[i], cells[i]))
    keep = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


@given(st.integers(0, 10**6), st.integers(1, 5))
def test_nms_matches_exhaustive_reference(seed, n):
    r = Rng(seed)
    boxes = np.column_stack([r.uniform(n, 10, 20), r.uniform(n, 10, 20),
                             r.uniform(n, 2, 12), r.uniform(n, 2, 12)])
    scores = np.round(r.uniform(n), 1)  # coarse scores force ties
    cells = r.permutation(n)
    assert det.nms(boxes, scores, 0.5, cells) == reference_nms(boxes, scores, 0.5, cells)


def test_decode_threshold_above_one_is_empty():
    raw = np.full((256, 5), 30.0)
    assert det.decode_detections(raw, score_threshold=1.0 + 1e-9) == []


@given(st.integers(0, 10**6))
def test_decode_independent_of_row_order(seed):
    # the cell index travels with each row, so shuffling rows only relabels
    r = Rng(seed)
    raw = r.normal(256 * 5).reshape(256, 5)
    raw[:, 0] = np.round(raw[:, 0], 1)
    dets = det.decode_detections(raw, 0.3)
    scores, boxes = det.decode_boxes(raw)
    perm = r.permutation(256)
    keep = det.nms(boxes[perm], scores[perm], 0.5, cells=perm)
    keep = [k for k in keep if scores[perm][k] >= 0.3]
    ref = det.nms(boxes, scores, 0.5)
    ref = [k for k in ref if scores[k] >= 0.3]
    assert sorted(int(perm[k]) for k in keep) == sorted(ref) == sorted(d.cell for d in dets)


def test_grl_sign_contract():
    p = params64(4)
    feats = Rng(5).normal(2 * 256 * 16).reshape(2, 256, 16)
    for lam in (0.0, 1.0, 0.5):
        _, cache = det.discriminate(p, "encoder", feats, lam)
        dfeat, grads = det.discriminate_backward(p, cache, np.array([1.0, -2.0]))
        _, cache_plain = det.discriminate(p, "encoder", feats, -1.0)  # -(-1) = plain gradient
        dplain, grads_plain = det.discriminate_backward(p, cache_plain, np.array([1.0, -2.0]))
        np.testing.assert_allclose(dfeat, -lam * dplain, atol=1e-15)
        for k in grads:
            np.testing.assert_array_equal(grads[k], grads_plain[k])
        if lam == 0.0:
            assert not dfeat.any()


def test_discriminator_gradient_fd_with_reversal_folded_in():
    p = params64(6)
    feats = Rng(7).normal(2 * 16 * 256).reshape(2, 16, 16, 16)
    lam = 0.7

    # parameters: plain gradient
    def fp(q):
        logit, cache = det.discriminate(q, "backbone", feats, lam)
        _, g = det.discriminate_backward(q, cache, np.ones(2))
        return float(logit.sum()), g

    assert fd_check(fp, {k: p[k] for k in det.iter_stage_keys(["backbone"])}) < 1e-4

    # features: the returned gradient equals -lambda times the true one
    def ff(q):
        logit, cache = det.discriminate(p, "backbone", q["feats"], lam)
        dfeat, _ = det.discriminate_backward(p, cache, np.ones(2))
        return float(logit.sum()), {"feats": dfeat / -lam}

    assert fd_check(ff, {"feats": feats}, max_coords=32) < 1e-4


def test_unknown_stage():
    with pytest.raises(ValueError):
        det.discriminate(params64(), "neck", np.zeros((256, 16)))


def test_checkpoint_round_trip(tmp_path):
    p = det.init_params(Rng(3))
    path = det.save_checkpoint(tmp_path / "a.ckpt", {**det.prefixed(p, "teacher"), **det.prefixed(p, "student")})
    raw = path.read_bytes()
    assert raw[:4] == b"DMST" and int.from_bytes(raw[4:8], "little") == 1
    back = det.unprefixed(det.load_checkpoint(path), "student")
    assert set(back) == set(p)
    for k in p:
        assert back[k].tobytes() == p[k].tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        det.load_checkpoint(tmp_path / "x.ckpt")
