from dataclasses import replace

import numpy as np
import pytest

from uda_forge import detector as det
from uda_forge.gradcheck import objective_grad_error, smooth_instance
from uda_forge.objective import ObjectiveConfig, StudentBatch, student_objective

DISC = set(det.iter_stage_keys(det.STAGES))


@pytest.mark.parametrize("seed", range(20))
def test_full_objective_matches_finite_differences(seed):
    assert objective_grad_error(seed) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_objective_fd_without_adv_or_mae(seed):
    cfg = ObjectiveConfig(use_adv=False, mae_active=False)
    assert objective_grad_error(seed, cfg) < 1e-4


def _adv_part(params, batch, lam):
    on = ObjectiveConfig(grl_lambda=lam, mae_active=False)
    off = replace(on, use_adv=False)
    g_on = student_objective(params, batch, on)[1]
    g_off = student_objective(params, batch, off)[1]
    return {k: g_on[k] - g_off[k] for k in params}


def test_reversal_flips_only_feature_gradients():
    params, batch = smooth_instance(0)
    rev = _adv_part(params, batch, 1.0)
    plain = _adv_part(params, batch, -1.0)  # lambda -1 gives the ordinary gradient
    for k in params:
        if k in DISC:
            np.testing.assert_allclose(rev[k], plain[k], atol=1e-12)
        else:
            np.testing.assert_allclose(rev[k], -plain[k], atol=1e-12)
    assert np.abs(rev["backbone.conv1.weight"]).max() > 0


def test_reversal_scales_with_lambda():
    params, batch = smooth_instance(1)
    one = _adv_part(params, batch, 1.0)
    half = _adv_part(params, batch, 0.5)
    for k in params:
        if k in DISC:
            np.testing.assert_allclose(half[k], one[k], atol=1e-12)
        else:
            np.testing.assert_allclose(half[k], 0.5 * one[k], atol=1e-12)


def test_pretrain_mode_ignores_target_terms():
    params, batch = smooth_instance(2)
    src_only = StudentBatch(batch.src_images, batch.src_boxes,
                            mask=det.MaskPattern(batch.mask.mask[:1]))
    pre = ObjectiveConfig(mode="source_pretrain")
    b, _ = student_objective(params, src_only, pre)
    assert b.l_unsup == 0.0 and b.l_adv == 0.0
    assert b.l_total == pytest.approx(b.l_sup + b.l_mask)


def test_mae_requires_mask():
    params, batch = smooth_instance(3)
    with pytest.raises(ValueError, match="mask"):
        student_objective(params, replace(batch, mask=None), ObjectiveConfig())
