"""The finite-difference verification suite.

Every differentiable op is checked against central differences on random
small instances, plus one end-to-end check of a tiny two-level network
trained through the Dice loss. All checks run in float64 so the FD
truncation error sits well below the enforced tolerance.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .fusion import EncodingBlock, FusionWeightBlock, fuse_weighted, residual_plain
from .gradcheck import check_gradients
from .network import ModelConfig, build
from .params import ParamSet
from .tensor import Tensor, add, mul, relu, scale, sigmoid, tsum
from .training import dice_loss

REL_TOL = 1e-3
ABS_FLOOR = 1e-6


def _params_from(arrays: dict) -> ParamSet:
    ps = ParamSet()
    for name, arr in arrays.items():
        ps.add(name, Tensor(arr, dtype=np.float64))
    return ps


def _proj_loss(out: Tensor, rng) -> Tensor:
    # project to a scalar with a fixed random direction so every output
    # element influences the loss
    r = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return tsum(mul(out, r))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def _distinct_blocks(rng, shape, gap=1e-3):
    # max-pool inputs need distinct values inside each 2^3 block so the
    # argmax does not flip under the FD perturbation
    while True:
        x = rng.standard_normal(shape)
        n, c, d, h, w = shape
        blocks = (x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
                   .transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(-1, 8))
        s = np.sort(blocks, axis=1)
        if np.min(np.diff(s, axis=1)) > gap:
            return x


def cast_float64(net):
    for p in net.params:
        p.value.data = p.value.data.astype(np.float64)
    return net


def _check(f, params, h):
    return check_gradients(f, params, h=h, floor=ABS_FLOOR)


def check_conv3d(rng, size=4, h=1e-5):
    x = rng.standard_normal((1, 2, size, size, size))
    ps = _params_from({
        "x": x,
        "w": rng.standard_normal((3, 2, 3, 3, 3)) * 0.5,
        "b": rng.standard_normal(3) * 0.1,
    })
    stride = int(rng.integers(1, 3))

    def f():
        out = ops.conv3d(ps["x"].value, ps["w"].value, ps["b"].value,
                         stride=stride, padding=1)
        return _proj_loss(out, np.random.default_rng(7))

    return _check(f, ps, h)


def check_conv1x1x1(rng, size=3, h=1e-5):
    ps = _params_from({
        "x": rng.standard_normal((1, 4, size, size, size)),
        "w": rng.standard_normal((2, 4, 1, 1, 1)) * 0.5,
        "b": rng.standard_normal(2) * 0.1,
    })

    def f():
        out = ops.conv1x1x1(ps["x"].value, ps["w"].value, ps["b"].value)
        return _proj_loss(out, np.random.default_rng(7))

    return _check(f, ps, h)


def check_instance_norm(rng, size=4, h=1e-5):
    ps = _params_from({
        "x": rng.standard_normal((1, 3, size, size, size)),
        "g": 1.0 + 0.2 * rng.standard_normal(3),
        "b": 0.1 * rng.standard_normal(3),
    })

    def f():
        out = ops.instance_norm(ps["x"].value, ps["g"].value, ps["b"].value)
        return _proj_loss(out, np.random.default_rng(7))

    return _check(f, ps, h)


def check_down2(rng, size=4, h=1e-5):
    size += size % 2  # max-pool needs even spatial dims
    ps = _params_from({"x": _distinct_blocks(rng, (1, 2, size, size, size))})

    def f():
        return _proj_loss(ops.resample(ps["x"].value, "down2"),
                          np.random.default_rng(7))

    return _check(f, ps, h)


def check_up2(rng, size=3, h=1e-5):
    ps = _params_from({"x": rng.standard_normal((1, 2, size, size, size))})

    def f():
        return _proj_loss(ops.resample(ps["x"].value, "up2"),
                          np.random.default_rng(7))

    return _check(f, ps, h)


def check_relu(rng, size=4, h=1e-5):
    ps = _params_from({"x": _away_from_zero(rng, (2, 3, size, size, size))})

    def f():
        return _proj_loss(relu(ps["x"].value), np.random.default_rng(7))

    return _check(f, ps, h)


def check_sigmoid(rng, size=4, h=1e-5):
    ps = _params_from({"x": rng.standard_normal((2, 3, size, size, size))})

    def f():
        return _proj_loss(sigmoid(ps["x"].value), np.random.default_rng(7))

    return _check(f, ps, h)


def check_add_scale(rng, size=4, h=1e-5):
    ps = _params_from({
        "a": rng.standard_normal((1, 2, size, size, size)),
        "b": rng.standard_normal((1, 2, size, size, size)),
    })

    def f():
        out = add(scale(ps["a"].value, 1.7), ps["b"].value)
        return _proj_loss(out, np.random.default_rng(7))

    return _check(f, ps, h)


def check_fuse_weighted(rng, size=3, h=1e-5):
    c = 3
    ps = _params_from({
        "e": rng.standard_normal((1, c, size, size, size)),
        "x": rng.standard_normal((1, c, size, size, size)),
        "w": rng.standard_normal((c, c, 1, 1, 1)) * 0.5,
        "b": rng.standard_normal(c) * 0.1,
    })
    fw = FusionWeightBlock(ps["w"].value, ps["b"].value)

    def f():
        return _proj_loss(fuse_weighted(ps["e"].value, ps["x"].value, fw),
                          np.random.default_rng(7))

    return _check(f, ps, h)


def check_dice_loss(rng, size=4, h=1e-5):
    labels = rng.integers(0, 2, size=(1, size, size, size))
    ps = _params_from({"logits": rng.standard_normal((1, 2, size, size, size))})

    def f():
        return dice_loss(ps["logits"].value, labels)

    return _check(f, ps, h)


def check_end_to_end(rng, size=8, h=1e-6):
    # h must stay well below the typical distance of activations from
    # their nearest ReLU/max-pool kink, or the FD oracle itself crosses
    # a non-differentiability and stops estimating the derivative
    cfg = ModelConfig(levels=2, base_channels=2, variant="weighted",
                      seed=int(rng.integers(0, 2 ** 31)))
    net = cast_float64(build(cfg))
    pre = Tensor(rng.standard_normal((1, 1, size, size, size)), dtype=np.float64)
    post = Tensor(rng.standard_normal((1, 1, size, size, size)), dtype=np.float64)
    labels = rng.integers(0, 2, size=(1, size, size, size))

    def f():
        return dice_loss(net.forward(pre, post), labels)

    return _check(f, net.params, h)


def check_end_to_end_directional(rng, size=8, h=1e-6):
    """One directional-derivative trial on the tiny network.

    The full elementwise check costs two evaluations per parameter; a
    directional check costs two evaluations total, so it is what makes
    running many end-to-end trials affordable. Compares g·v against
    (f(θ+hv) − f(θ−hv)) / 2h for a random direction v."""
    cfg = ModelConfig(levels=2, base_channels=2, variant="weighted",
                      seed=int(rng.integers(0, 2 ** 31)))
    net = cast_float64(build(cfg))
    pre = Tensor(rng.standard_normal((1, 1, size, size, size)), dtype=np.float64)
    post = Tensor(rng.standard_normal((1, 1, size, size, size)), dtype=np.float64)
    labels = rng.integers(0, 2, size=(1, size, size, size))

    def f():
        return dice_loss(net.forward(pre, post), labels)

    net.zero_grad()
    f().backward()
    direction = {p.name: rng.standard_normal(p.value.shape) for p in net.params}
    # unit-norm direction keeps the perturbation small enough that the
    # secant never crosses a ReLU/max-pool kink and higher-order terms
    # stay below the comparison tolerance
    norm = np.sqrt(sum(float(np.vdot(v, v)) for v in direction.values()))
    direction = {name: v / norm for name, v in direction.items()}
    analytic = sum(float(np.vdot(p.value.grad, direction[p.name]))
                   for p in net.params if p.value.grad is not None)
    from .tensor import no_grad
    with no_grad():
        for sign in (1.0, -1.0):
            for p in net.params:
                p.value.data += sign * h * direction[p.name]
            val = f().item()
            for p in net.params:
                p.value.data -= sign * h * direction[p.name]
            if sign > 0:
                fp = val
            else:
                fm = val
    numeric = (fp - fm) / (2.0 * h)
    from .gradcheck import max_rel_error
    return max_rel_error(np.array([analytic]), np.array([numeric]),
                         floor=ABS_FLOOR)


OP_CHECKS = {
    "conv3d": check_conv3d,
    "conv1x1x1": check_conv1x1x1,
    "instance_norm": check_instance_norm,
    "resample_down2": check_down2,
    "resample_up2": check_up2,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "add_scale": check_add_scale,
    "fuse_weighted": check_fuse_weighted,
    "dice_loss": check_dice_loss,
}


def run_suite(trials: int = 100, size: int = 4, seed: int = 0,
              end_to_end_trials: int = 1) -> dict:
    """Max relative FD error per op over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    report = {}
    for name, fn in OP_CHECKS.items():
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, fn(rng, size=size))
        report[name] = worst
    worst = 0.0
    for _ in range(end_to_end_trials):
        worst = max(worst, check_end_to_end(rng))
    for _ in range(trials):
        worst = max(worst, check_end_to_end_directional(rng))
    report["end_to_end"] = worst
    return report
