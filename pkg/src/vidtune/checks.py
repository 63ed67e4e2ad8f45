"""Gradient-check cases for every differentiable operation.

Each builder returns ``(name, f, inputs)`` triples where ``f(*inputs)`` is a
scalar.  Outputs are contracted against a fixed random tensor so that no
gradient is trivially constant.  Shared by the test suite and the
``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import attention as A
from . import functional as F
from . import tensor as T
from .gradcheck import GradcheckReport, gradcheck
from .tensor import Parameter, Tensor

Case = tuple[str, Callable[..., Tensor], list[Tensor]]


def _leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _contract(rng, fn):
    """Wrap ``fn`` into ``sum(fn(*xs) * R)`` with a fixed random ``R``."""
    cache = {}

    def f(*xs):
        y = fn(*xs)
        if "r" not in cache:
            cache["r"] = rng.standard_normal(y.shape)
        return (y * cache["r"]).sum()

    return f


def tensor_cases(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    c = []

    def add(name, fn, *inputs):
        c.append((name, _contract(rng, fn), list(inputs)))

    add("add", lambda a, b: a + b, _leaf(rng, 3, 4), _leaf(rng, 4))
    add("sub", lambda a, b: a - b, _leaf(rng, 3, 1), _leaf(rng, 3, 4))
    add("mul", lambda a, b: a * b, _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1))
    add("div", lambda a, b: a / b, _leaf(rng, 3, 4), _leaf(rng, 3, 4, positive=True))
    add("neg", lambda a: -a, _leaf(rng, 5))
    add("pow", lambda a: a**1.5, _leaf(rng, 6, positive=True))
    add("exp", T.exp, _leaf(rng, 4, 3))
    add("log", T.log, _leaf(rng, 4, 3, positive=True))
    add("sqrt", T.sqrt, _leaf(rng, 7, positive=True))
    add("tanh", T.tanh, _leaf(rng, 7))
    add("sum", lambda a: a.sum(axis=1, keepdims=True), _leaf(rng, 3, 4, 2))
    add("mean", lambda a: a.mean(axis=(0, 2)), _leaf(rng, 3, 4, 2))
    add("reshape", lambda a: a.reshape(4, 6), _leaf(rng, 2, 3, 4))
    add("transpose", lambda a: a.transpose(2, 0, 1), _leaf(rng, 2, 3, 4))
    add("getitem", lambda a: a[np.array([0, 2, 2]), 1:], _leaf(rng, 3, 4))
    add("broadcast_to", lambda a: T.broadcast_to(a, (3, 2, 4)), _leaf(rng, 2, 1))
    add("concat", lambda a, b: T.concat([a, b], axis=1), _leaf(rng, 2, 3), _leaf(rng, 2, 2))
    add("stack", lambda a, b: T.stack([a, b], axis=0), _leaf(rng, 2, 3), _leaf(rng, 2, 3))
    add("matmul", lambda a, b: a @ b, _leaf(rng, 4, 5), _leaf(rng, 5, 3))
    add("matmul_batched", lambda a, b: a @ b, _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2))
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    add("softmax", F.softmax_lastdim, _leaf(rng, 3, 5))
    add("softmax_masked", lambda a: F.softmax_lastdim(a, mask), _leaf(rng, 3, 5))
    add("silu", F.silu, _leaf(rng, 9))
    add("gelu", F.gelu, _leaf(rng, 9))
    add("conv2d", F.conv2d, _leaf(rng, 2, 3, 5, 4), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4))
    add("pseudo3d_conv", F.pseudo3d_conv, _leaf(rng, 1, 2, 3, 4, 4), _leaf(rng, 3, 2, 1, 3, 3), _leaf(rng, 3))
    add("conv1x1", F.conv1x1, _leaf(rng, 2, 3, 2, 2), _leaf(rng, 4, 3), _leaf(rng, 4))
    add("group_norm", lambda x, s, b: F.group_norm(x, 2, s, b), _leaf(rng, 2, 4, 3, 3), _leaf(rng, 4), _leaf(rng, 4))
    add("layer_norm", F.layer_norm, _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6))
    add("avg_pool2", F.avg_pool2, _leaf(rng, 2, 2, 4, 4))
    add("upsample2", F.upsample2, _leaf(rng, 2, 2, 2, 3))
    ids = np.array([0, 3, 3, 1])
    add("take_rows", lambda t: F.take_rows(t, ids), _leaf(rng, 5, 3))
    add("mse", lambda a, b: F.mse(a, b).reshape(1), _leaf(rng, 3, 4), _leaf(rng, 3, 4))
    return c


def _proj(rng, d_model=6, d=4, d_kv=None, heads=1):
    p = A.ProjectionSet.init(d_model, d, rng, d_kv=d_kv, heads=heads)
    return p


def attention_cases(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    c = []
    m, n, dm = 3, 4, 6

    def add(name, fn, *inputs):
        c.append((name, _contract(rng, fn), list(inputs)))

    q, k, v = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    add("scaled_dot_attention", A.scaled_dot_attention, q, k, v)
    for name, fn in [
        ("frame_individual", A.frame_individual_attention),
        ("sparse_causal", A.sparse_causal_attention),
        ("full_st", A.full_st_attention),
        ("causal_st", A.causal_st_attention),
    ]:
        p = _proj(rng, dm, 4)
        add(
            name,
            lambda x, wq, wk, wv, wo, fn=fn, p=p: fn(x, p),
            _leaf(rng, m, n, dm), p.w_q, p.w_k, p.w_v, p.w_out,
        )
    p = _proj(rng, dm, 4, d_kv=5)
    cond_mask = np.array([True, True, False])
    add(
        "cross",
        lambda x, cond, wq, wk, wv, wo, p=p: A.cross_attention(x, cond, p, cond_mask=cond_mask),
        _leaf(rng, m, n, dm), _leaf(rng, 3, 5), p.w_q, p.w_k, p.w_v, p.w_out,
    )
    p = _proj(rng, dm, 4)
    pos = Parameter(rng.standard_normal((5, dm)))
    add(
        "temporal",
        lambda x, wq, wk, wv, wo, pe, p=p: A.temporal_self_attention(x, p, pos_emb=pe),
        _leaf(rng, m, n, dm), p.w_q, p.w_k, p.w_v, p.w_out, pos,
    )
    p = _proj(rng, 8, 8, heads=2)
    add(
        "sparse_causal_2head",
        lambda x, wq, wk, wv, wo, p=p: A.sparse_causal_attention(x, p),
        _leaf(rng, m, n, 8), p.w_q, p.w_k, p.w_v, p.w_out,
    )
    return c


def tiny_unet_case(seed: int, kind: str = "sparse_causal"):
    """Loss of the tiny video U-Net (8 channels, 1 level, 4x4, m=2)."""
    from .unet import UNet, UNetConfig

    cfg = UNetConfig(
        in_channels=2, base_width=8, channel_mults=(1,), num_res_blocks=1,
        attention_levels=(0,), d_cond=4, m_max=4, temb_dim=8, groups=4,
        ffn_mult=2, video=True, attention=kind, seed=seed,
    )
    net = UNet(cfg)
    rng = np.random.default_rng(seed + 1000)
    randomize_parameters(net, rng)
    x = Tensor(rng.standard_normal((1, 2, 2, 4, 4)), requires_grad=True)
    cond = rng.standard_normal((3, 4))
    r = rng.standard_normal((1, 2, 2, 4, 4))

    def f(x, *params):
        return (net(x, 37, cond) * r).sum()

    return net, f, [x] + net.parameters()


def randomize_parameters(net, rng, scale: float = 0.3) -> None:
    """Perturb every parameter (including zero-initialised ones) for checks."""
    for p in net.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape) / np.sqrt(max(p.shape[-1], 1))


def run_suite(
    module: str,
    seeds=range(10),
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_entries: int | None = None,
) -> dict[str, list[GradcheckReport]]:
    """Run every gradient check in ``module`` (tensor, attention, unet)."""
    results: dict[str, list[GradcheckReport]] = {}
    for seed in seeds:
        if module == "tensor":
            cases = tensor_cases(seed)
        elif module == "attention":
            cases = attention_cases(seed)
        elif module == "unet":
            _, f, inputs = tiny_unet_case(seed)
            cases = [("tiny_unet", f, inputs)]
        else:
            raise ValueError(f"unknown gradcheck module {module!r}")
        for name, f, inputs in cases:
            rep = gradcheck(f, inputs, rtol=rtol, atol=atol, max_entries=max_entries, seed=seed)
            results.setdefault(name, []).append(rep)
    return results
