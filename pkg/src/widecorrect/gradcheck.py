"""Central-difference verification of every differentiable operation.

Each check builds a small float64 instance of one operation, forms a scalar
loss, and compares autograd gradients against central finite differences
computed by re-evaluating the loss with single entries nudged by +/- eps.
The difference quotient never touches autograd, so the two routes are
independent.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import torch

from .losses import LossWeights, loss_ce, loss_m1, loss_ms, loss_supervised, loss_unsupervised
from .model import (
    DenseDilatedConv,
    FinalExpand,
    ModelConfig,
    PatchEmbed,
    PatchExpanding,
    PatchMerging,
    SkipFusion,
    WindowBlock,
    init_weights,
    msa,
)

__all__ = ["OP_NAMES", "check_gradients", "run_suite", "tiny_config"]

EPS = 1e-3


def tiny_config() -> ModelConfig:
    """Smallest full network that still exercises merge/expand and both heads."""
    return ModelConfig(
        input_h=16,
        input_w=16,
        base_channels=8,
        stage_depths=(1,),
        bottleneck_pairs=1,
        head_count=2,
        window_h=2,
        window_w=2,
        dcm_growth=2,
    )


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Iterable[torch.Tensor],
    entries_per_tensor: int = 4,
    eps: float = EPS,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Samples up to ``entries_per_tensor`` entries of every tensor. Relative
    error uses max(|analytic|, |numeric|, 1e-6) as denominator.
    """
    tensors = list(tensors)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        flat = tensor.detach().reshape(-1)
        count = min(entries_per_tensor, flat.numel())
        idx = torch.randperm(flat.numel(), generator=gen)[:count]
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            analytic = grad.reshape(-1)[i].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def _rand(shape, gen, scale=1.0):
    return (torch.randn(shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(True)


def _proj_loss(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (out * proj).sum()


def _module_params(module: torch.nn.Module) -> list[torch.Tensor]:
    return [p for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0])]


def _check_module(module: torch.nn.Module, inputs: list[torch.Tensor], seed: int) -> float:
    module = module.double()
    gen = torch.Generator().manual_seed(seed + 1)
    for p in _module_params(module):
        with torch.no_grad():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.2)
    proj_gen = torch.Generator().manual_seed(seed + 2)
    with torch.no_grad():
        proj = torch.randn(module(*inputs).shape, generator=proj_gen, dtype=torch.float64)

    def loss_fn():
        return (module(*inputs) * proj).sum()

    return check_gradients(loss_fn, _module_params(module), seed=seed)


def _safe_flows(shape, gen, margin=5e-3, scale=2.0):
    """Two flow tensors whose pointwise and sobel residuals stay clear of the
    |.| kinks, so eps-sized probes cannot cross them."""
    for _ in range(100):
        a = torch.randn(shape, generator=gen, dtype=torch.float64) * scale
        b = torch.randn(shape, generator=gen, dtype=torch.float64) * scale
        diff = a - b
        gx, gy = _sobel64(diff)
        if diff.abs().min() > margin and gx.abs().min() > margin and gy.abs().min() > margin:
            return a.requires_grad_(True), b
    raise RuntimeError("could not sample kink-safe flow pair")


def _sobel64(diff):
    from .geometry import sobel

    return sobel(diff.detach().reshape(-1, *diff.shape[-2:]))


def _check_dcm(seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, 8, 6, 6), generator=gen, dtype=torch.float64)
    return _check_module(DenseDilatedConv(8, 2), [x], seed)


def _check_msa(seed):
    gen = torch.Generator().manual_seed(seed)
    q = _rand((3, 2, 4, 5), gen)
    k = _rand((3, 2, 4, 5), gen)
    v = _rand((3, 2, 4, 5), gen)
    bias = _rand((2, 4, 4), gen, 0.3)
    proj = torch.randn((3, 4, 10), generator=gen, dtype=torch.float64)

    def loss_fn():
        return (msa(q, k, v, bias) * proj).sum()

    return check_gradients(loss_fn, [q, k, v, bias], seed=seed)


def _check_mstb_pair(seed):
    gen = torch.Generator().manual_seed(seed)
    blocks = torch.nn.Sequential(
        WindowBlock(8, 2, (4, 4), (0, 0), 2.0, 2),
        WindowBlock(8, 2, (4, 4), (2, 2), 2.0, 2),
    )
    x = torch.randn((1, 8, 8, 8), generator=gen, dtype=torch.float64)
    return _check_module(blocks, [x], seed)


def _check_sfb(seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn((1, 12, 8), generator=gen, dtype=torch.float64)
    b = torch.randn((1, 12, 8), generator=gen, dtype=torch.float64)

    module = SkipFusion(8).double()
    pgen = torch.Generator().manual_seed(seed + 1)
    for p in _module_params(module):
        with torch.no_grad():
            p.copy_(torch.randn(p.shape, generator=pgen, dtype=torch.float64) * 0.2)
    proj = torch.randn((1, 12, 8), generator=pgen, dtype=torch.float64)

    def loss_fn():
        return (module(a, b) * proj).sum()

    return check_gradients(loss_fn, _module_params(module), seed=seed)


def _check_patch_embed(seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, 3, 8, 8), generator=gen, dtype=torch.float64)
    return _check_module(PatchEmbed(3, 8, 4), [x], seed)


def _check_patch_merge(seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, 4, 6, 8), generator=gen, dtype=torch.float64)
    return _check_module(PatchMerging(8), [x], seed)


def _check_patch_expand(seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, 3, 4, 8), generator=gen, dtype=torch.float64)
    err = _check_module(PatchExpanding(8), [x], seed)
    y = torch.randn((1, 2, 2, 4), generator=gen, dtype=torch.float64)
    return max(err, _check_module(FinalExpand(4, 4), [y], seed))


def _check_forward(seed, n_params=20):
    cfg = tiny_config()
    model = init_weights(cfg, seed).double()
    gen = torch.Generator().manual_seed(seed + 3)
    img = torch.rand((3, cfg.input_h, cfg.input_w), generator=gen, dtype=torch.float64)
    flow_gt = torch.randn((2, cfg.input_h, cfg.input_w), generator=gen, dtype=torch.float64) * 3
    mask = (torch.rand((cfg.input_h, cfg.input_w), generator=gen) > 0.6).double()

    def loss_fn():
        flow, seg = model(img)
        return loss_supervised(flow, seg, flow_gt, mask)

    params = _module_params(model)
    picked = torch.randperm(len(params), generator=gen)[:n_params].tolist()
    return check_gradients(loss_fn, [params[i] for i in picked], entries_per_tensor=2, seed=seed)


def _check_loss_m1(seed):
    gen = torch.Generator().manual_seed(seed)
    pred, ref = _safe_flows((2, 12, 12), gen)
    mask = torch.rand((12, 12), generator=gen, dtype=torch.float64) + 0.5

    def loss_fn():
        return loss_m1(pred, ref, mask)

    return check_gradients(loss_fn, [pred], entries_per_tensor=10, seed=seed)


def _check_loss_ms(seed):
    gen = torch.Generator().manual_seed(seed)
    pred, ref = _safe_flows((2, 12, 12), gen)
    mask = torch.rand((12, 12), generator=gen, dtype=torch.float64) + 0.5

    def loss_fn():
        return loss_ms(pred, ref, mask)

    return check_gradients(loss_fn, [pred], entries_per_tensor=10, seed=seed)


def _check_loss_ce(seed):
    gen = torch.Generator().manual_seed(seed)
    logits = _rand((2, 3, 9, 9), gen)
    target = torch.randint(0, 3, (2, 9, 9), generator=gen)

    def loss_fn():
        return loss_ce(logits, target)

    return check_gradients(loss_fn, [logits], entries_per_tensor=10, seed=seed)


def _check_loss_supervised(seed):
    gen = torch.Generator().manual_seed(seed)
    pred, ref = _safe_flows((2, 12, 12), gen)
    logits = _rand((2, 3, 12, 12), gen)
    mask = (torch.rand((12, 12), generator=gen) > 0.5).double()

    def loss_fn():
        return loss_supervised(pred, logits, ref, mask)

    return check_gradients(loss_fn, [pred, logits], entries_per_tensor=6, seed=seed)


def _check_loss_unsupervised(seed):
    gen = torch.Generator().manual_seed(seed)
    f1, f2 = _safe_flows((2, 12, 12), gen)
    f2 = f2.requires_grad_(True)
    logits1 = _rand((2, 3, 12, 12), gen)
    logits2 = _rand((2, 3, 12, 12), gen)

    def loss_fn():
        return loss_unsupervised(f1, f2, logits1, logits2)

    return check_gradients(loss_fn, [f1, f2, logits1, logits2], entries_per_tensor=4, seed=seed)


OP_NAMES = {
    "dcm": (_check_dcm, 1e-4),
    "msa": (_check_msa, 1e-4),
    "mstb_pair": (_check_mstb_pair, 1e-4),
    "sfb": (_check_sfb, 1e-4),
    "patch_embed": (_check_patch_embed, 1e-4),
    "patch_merge": (_check_patch_merge, 1e-4),
    "patch_expand": (_check_patch_expand, 1e-4),
    "forward": (_check_forward, 1e-3),
    "loss_m1": (_check_loss_m1, 1e-4),
    "loss_ms": (_check_loss_ms, 1e-4),
    "loss_ce": (_check_loss_ce, 1e-4),
    "loss_supervised": (_check_loss_supervised, 1e-4),
    "loss_unsupervised": (_check_loss_unsupervised, 1e-4),
}


def run_suite(module: str | None = None, seed: int = 0) -> dict[str, tuple[float, float]]:
    """Run the checks (all, or one op by name); returns {op: (max_rel_err, tol)}."""
    if module is not None and module not in OP_NAMES:
        raise KeyError(f"unknown op {module!r}; choose from {sorted(OP_NAMES)}")
    names = [module] if module else list(OP_NAMES)
    results = {}
    for name in names:
        fn, tol = OP_NAMES[name]
        results[name] = (fn(seed), tol)
    return results
