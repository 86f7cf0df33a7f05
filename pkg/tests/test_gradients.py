"""Finite-difference gradient checks for each learnable sub-path.

Central differences in double precision along the normalized analytic
gradient direction; BN layers run in eval mode so the loss surface is
locally smooth (gradients are identical either way, batch statistics only
add curvature that inflates the finite-difference truncation term).
"""

import torch

from ceseg.backbone import build_backbone
from ceseg.ce_block import build_context_block, neighboring_matching
from ceseg.config import ModelConfig
from ceseg.metrics import dice_loss

CFG = ModelConfig()
STEP = 1e-5
TOL = 1e-4


def directional_error(params, loss_fn, step=STEP):
    """Relative error of the FD directional derivative along the gradient."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.clone() for p in params]
    norm = torch.sqrt(sum((g * g).sum() for g in grads))
    assert float(norm) > 0, "no gradient signal reaches this group"
    vs = [g / norm for g in grads]
    with torch.no_grad():
        for p, v in zip(params, vs):
            p.add_(step * v)
        up = loss_fn().item()
        for p, v in zip(params, vs):
            p.add_(-2 * step * v)
        down = loss_fn().item()
        for p, v in zip(params, vs):
            p.add_(step * v)
    fd = (up - down) / (2 * step)
    return abs(fd - float(norm)) / float(norm)


def test_dice_loss_gradient():
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=g).requires_grad_()
    target = (torch.rand(2, 1, 8, 8, generator=g) > 0.5).double()
    assert torch.autograd.gradcheck(lambda p: dice_loss(p, target), pred,
                                    eps=1e-6, atol=1e-8)


def test_embed_head_gradient():
    blk = build_context_block(CFG, seed=0).double().eval()
    g = torch.Generator().manual_seed(1)
    feats = torch.randn(1, CFG.base_channels, 8, 8, dtype=torch.float64, generator=g)
    err = directional_error(list(blk.embed_head.parameters()),
                            lambda: blk.embed(feats).sum())
    assert err < TOL


def test_refine_path_gradient():
    blk = build_context_block(CFG, seed=0).double().eval()
    g = torch.Generator().manual_seed(2)
    feats = torch.randn(1, CFG.base_channels, 8, 8, dtype=torch.float64, generator=g)
    dist = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=g)
    prob = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=g)
    params = list(blk.refine_convs.parameters()) + list(blk.refine_head.parameters())
    err = directional_error(params, lambda: blk.refine(feats, dist, prob).sum())
    assert err < TOL


def test_gate_fc_gradient():
    blk = build_context_block(CFG, seed=0).double()
    g = torch.Generator().manual_seed(3)
    v = torch.randn(4, 2, dtype=torch.float64, generator=g)
    params = list(blk.gate_fc1.parameters()) + list(blk.gate_fc2.parameters())
    err = directional_error(params, lambda: blk.merge_score(v).sum())
    assert err < TOL


def test_merge_end_to_end_gradient():
    blk = build_context_block(CFG, seed=0).double().eval()
    g = torch.Generator().manual_seed(4)
    prob = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=g)
    refined = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=g)
    used = (list(blk.gate_fc1.parameters()) + list(blk.gate_fc2.parameters())
            + list(blk.merge_convs.parameters()) + list(blk.merge_head.parameters()))
    err = directional_error(used, lambda: blk.merge(prob, refined)[0].sum())
    assert err < TOL


def test_matching_gradient_exact():
    # the min/arg-min selection admits an exact sub-gradient; gradcheck must
    # pass at machine precision away from ties
    g = torch.Generator().manual_seed(5)
    e_cur = torch.randn(2, 5, 5, dtype=torch.float64, generator=g).requires_grad_()
    e_nb = torch.randn(2, 5, 5, dtype=torch.float64, generator=g).requires_grad_()
    p_nb = torch.rand(1, 5, 5, generator=g)

    def fn(a, b):
        return neighboring_matching(a, b, p_nb, radius=1)

    assert torch.autograd.gradcheck(fn, (e_cur, e_nb), eps=1e-6, atol=1e-8)


def test_backbone_single_parameter_perturbation():
    # perturbing one weight moves the loss in the direction the analytic
    # gradient predicts
    bb = build_backbone(CFG, seed=0).double().eval()
    g = torch.Generator().manual_seed(6)
    x = torch.randn(2, 1, 16, 16, dtype=torch.float64, generator=g)
    target = (torch.rand(2, 1, 16, 16, generator=g) > 0.5).double()

    def loss_fn():
        return dice_loss(bb(x)[1], target)

    err = directional_error(list(bb.parameters()), loss_fn)
    assert err < TOL
