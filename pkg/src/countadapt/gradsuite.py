"""Finite-difference checks for every differentiable operation and both networks.

Each case builds a small float64 computation on random inputs of at most
16x16 spatial size.  Inputs that feed a kink (ReLU at 0, maxpool ties, the
ranking hinge) are drawn away from it so central differences stay valid.
Hidden activations inside the networks cannot be placed that way, so probes
whose perturbation flips any ReLU or maxpool branch are skipped and counted.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import core as C
from .losses import adversarial_loss, density_loss, discriminator_loss, ranking_loss
from .nets import CountingNetConfig, DiscriminatorConfig, counting_forward, discriminator_forward, init_params

TOLERANCE = 1e-4


def _away_from_zero(x: np.ndarray, gap: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(x) < gap, np.copysign(gap, x) + x, x)


def _case_elementwise(rng):
    a, b = rng.standard_normal((2, 3, 5, 5))
    return lambda p: C.grid_sum(C.square(C.sub(C.add(C.mul(p["a"], p["b"]), p["a"]), C.neg(p["b"])))), {"a": a, "b": b}


def _case_relu(rng):
    x = _away_from_zero(rng.standard_normal((2, 2, 6, 6)))
    w = rng.standard_normal(x.shape)
    return lambda p: C.grid_sum(C.mul(C.relu(p["x"]), w)), {"x": x}


def _case_leaky_relu(rng):
    x = _away_from_zero(rng.standard_normal((1, 3, 8, 8)))
    w = rng.standard_normal(x.shape)
    return lambda p: C.grid_sum(C.mul(C.leaky_relu(p["x"], 0.2), w)), {"x": x}


def _case_log_sigmoid(rng):
    x = rng.standard_normal((2, 1, 4, 4)) * 3
    return lambda p: C.grid_sum(C.log_sigmoid(p["x"])), {"x": x}


def _conv_case(stride, padding, dilation, k=3, size=8):
    def make(rng):
        x = rng.standard_normal((2, 3, size, size))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        probe = rng.standard_normal(C.conv2d(x, w, b, stride, padding, dilation).shape)

        def fn(p):
            out = C.conv2d(p["x"], p["w"], p["b"], stride=stride, padding=padding, dilation=dilation)
            return C.grid_sum(C.mul(out, probe))

        return fn, {"x": x, "w": w, "b": b}

    return make


def _case_maxpool(rng):
    # a random permutation has no ties
    x = rng.permutation(2 * 2 * 8 * 8).reshape(2, 2, 8, 8) / 10.0
    w = rng.standard_normal((2, 2, 4, 4))
    return lambda p: C.grid_sum(C.mul(C.maxpool2(p["x"]), w)), {"x": x}


def _case_resize(rng):
    x = rng.standard_normal((1, 2, 5, 7))
    w_up = rng.standard_normal((1, 2, 16, 11))
    w_down = rng.standard_normal((1, 2, 3, 4))
    return (
        lambda p: C.add(
            C.grid_sum(C.mul(C.resize_bilinear(p["x"], 16, 11), w_up)),
            C.grid_sum(C.mul(C.resize_bilinear(p["x"], 3, 4), w_down)),
        ),
        {"x": x},
    )


def _case_block_sum(rng):
    x = rng.standard_normal((1, 2, 8, 12))
    w = rng.standard_normal((1, 2, 2, 3))
    return lambda p: C.grid_sum(C.mul(C.block_sum_downsample(p["x"], 4), w)), {"x": x}


def _case_reductions(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    wa, wb = rng.standard_normal((2, 3))
    mix = rng.standard_normal((3, 3))

    def fn(p):
        s = C.matvec(mix, C.item_sums(p["x"]))
        return C.add(C.grid_sum(C.mul(s, wa)), C.grid_sum(C.mul(C.item_means(p["x"]), wb)))

    return fn, {"x": x}


def _case_stack_concat(rng):
    a, b = rng.standard_normal((2, 1, 2, 3, 3))
    w_cat = rng.standard_normal((2, 2, 3, 3))
    w_stk = rng.standard_normal(2)

    def fn(p):
        cat = C.concat([p["a"], p["b"]], axis=0)
        stk = C.stack([C.grid_sum(p["a"]), C.reduce_sum(C.square(p["b"]))])
        return C.add(C.grid_sum(C.mul(cat, w_cat)), C.grid_sum(C.mul(stk, w_stk)))

    return fn, {"a": a, "b": b}


def _case_getitem(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((1, 2, 3, 4))
    return lambda p: C.grid_sum(C.mul(p["x"][1:, :, 1:4, 2:], w)), {"x": x}


def _case_losses(rng):
    pred, gt = rng.standard_normal((2, 2, 1, 4, 4))
    ls, lt = rng.standard_normal((2, 3, 1, 2, 2)) * 2
    counts = np.array([4.0, 1.0, 2.5, 3.2])  # pairwise gaps well away from the hinge

    def fn(p):
        return C.add(
            C.add(density_loss(p["pred"], gt), discriminator_loss(p["ls"], p["lt"])),
            C.add(adversarial_loss(p["lt"]), ranking_loss(p["counts"], 0.0)),
        )

    return fn, {"pred": pred, "ls": ls, "lt": lt, "counts": counts}


NET_CFG = CountingNetConfig(input_size=(16, 16))
DISC_CFG = DiscriminatorConfig()


def _case_counting_net(rng):
    params = init_params(NET_CFG, seed=int(rng.integers(1 << 31)), dtype=np.float64).arrays
    # positive output bias keeps the final ReLU active for every pixel
    params["out.b"] = params["out.b"] + 1.0
    x = rng.random((1, 1, 16, 16))
    gt = rng.random((1, 1, 4, 4)) * 0.1

    def fn(p):
        q = dict(params)
        q.update(p)
        return density_loss(counting_forward(q, p["x"], NET_CFG), gt)

    return fn, {**params, "x": x}


def _case_discriminator(rng):
    params = init_params(DISC_CFG, seed=int(rng.integers(1 << 31)), dtype=np.float64).arrays
    src, tgt = rng.random((2, 1, 1, 16, 16)) * 0.2

    def fn(p):
        up_s = C.resize_bilinear(p["src"], 32, 32)
        up_t = C.resize_bilinear(p["tgt"], 32, 32)
        return discriminator_loss(
            discriminator_forward(p, up_s, DISC_CFG), discriminator_forward(p, up_t, DISC_CFG)
        )

    return fn, {**params, "src": src, "tgt": tgt}


# name -> (builder, max_entries per parameter or None for all)
CASES: dict[str, tuple[Callable, int | None]] = {
    "elementwise": (_case_elementwise, None),
    "relu": (_case_relu, None),
    "leaky_relu": (_case_leaky_relu, None),
    "log_sigmoid": (_case_log_sigmoid, None),
    "conv2d": (_conv_case(1, 1, 1), None),
    "conv2d_strided": (_conv_case(2, 1, 1, k=4), None),
    "conv2d_dilated": (_conv_case(1, 4, 4, size=10), None),
    "maxpool2": (_case_maxpool, None),
    "resize_bilinear": (_case_resize, None),
    "block_sum_downsample": (_case_block_sum, None),
    "reductions": (_case_reductions, None),
    "stack_concat": (_case_stack_concat, None),
    "getitem": (_case_getitem, None),
    "losses": (_case_losses, None),
    "counting_net": (_case_counting_net, 24),
    "discriminator": (_case_discriminator, 24),
}


def run_case(name: str, seed: int = 0) -> C.GradCheckResult:
    builder, max_entries = CASES[name]
    fn, params = builder(np.random.default_rng([seed, sorted(CASES).index(name)]))
    return C.grad_check_detailed(fn, params, step=1e-5, max_entries=max_entries, seed=seed, skip_kinks=True)


def run_suite(names=None, seed: int = 0) -> dict[str, dict]:
    """Run the selected cases (all by default).

    Returns ``{name: {max_rel_error, checked, skipped, seconds, ok}}``; a case
    passes when its error is below :data:`TOLERANCE` and at least 90% of its
    probes were usable (not straddling a kink).
    """
    names = list(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradient case(s): {', '.join(unknown)}; known: {', '.join(CASES)}")
    out = {}
    for name in names:
        t0 = time.perf_counter()
        res = run_case(name, seed)
        usable = res.checked >= 0.9 * (res.checked + res.skipped) and res.checked > 0
        out[name] = {
            "max_rel_error": res.max_error,
            "checked": res.checked,
            "skipped": res.skipped,
            "seconds": time.perf_counter() - t0,
            "ok": bool(res.max_error < TOLERANCE and usable),
        }
    return out
