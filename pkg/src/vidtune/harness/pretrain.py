"""From-scratch training of the toy 2D text-to-image model on rendered stills."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..diffusion import build_schedule, eps_loss
from ..errors import ConfigurationError, NumericError
from ..tensor import Tape, backward
from ..tuner import AdamState, Checkpoint, adam_step, to_latent
from ..unet import UNet, UNetConfig
from .text import VOCABULARY, TextEncoder

MIN_CORPUS = 200


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-4
    seed: int = 0
    p_uncond: float = 0.1
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigurationError("steps and batch must be >= 1")
        if self.unet.video:
            raise ConfigurationError("pretraining builds the 2D network; pass a non-video UNetConfig")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        return d


class _Model:
    def __init__(self, net: UNet, mask):
        self.net, self.mask, self.schedule = net, mask, net.schedule

    def __call__(self, xt, t, cond):
        return self.net(xt, t, cond, self.mask)


def pretrain_toy_t2i(
    images: np.ndarray,
    captions: list[list[str]],
    cfg: PretrainConfig,
    callback: Callable[[int, float], None] | None = None,
    snapshot: Callable[[int, Checkpoint], None] | None = None,
    snapshot_every: int = 0,
) -> Checkpoint:
    """Train the 2D U-Net and the prompt embedding table with the eps objective.

    ``images`` is ``[n, 3, H, W]`` in [0, 1].  Each step draws a batch of
    stills, one timestep per still, and drops each caption to the null
    prompt with probability ``p_uncond``.  The returned checkpoint carries
    the embedding table under ``extras["text_embedding"]``.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) < MIN_CORPUS:
        raise ConfigurationError(f"corpus has {len(images)} stills, need at least {MIN_CORPUS}")
    if len(captions) != len(images):
        raise ConfigurationError("one caption per image is required")
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    net = UNet(cfg.unet, sched)
    text = TextEncoder(cfg.unet.d_cond, seed=cfg.unet.seed)
    params = [(f"net.{n}", p) for n, p in net.named_parameters()] + [("text.table", text.table)]
    opt = AdamState()
    rng = np.random.default_rng(cfg.seed)
    latents = to_latent(images, cfg.unet.latent_factor)[:, :, None]  # [n, C, 1, H, W]
    losses = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(images), size=cfg.batch)
        t = rng.integers(1, sched.T + 1, size=cfg.batch)
        eps = rng.standard_normal((cfg.batch,) + latents.shape[1:])
        drop = rng.random(cfg.batch) < cfg.p_uncond
        for _, p in params:
            p.grad = None
        with Tape() as tape:
            rows, mask = text.batch([[] if d else captions[i] for i, d in zip(idx, drop)])
            loss = eps_loss(_Model(net, mask), latents[idx], t, eps, rows)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"pretraining diverged: loss {value} at step {step}")
        backward(loss, tape)
        adam_step(params, {n: p.grad for n, p in params}, opt, cfg.lr)
        losses.append(value)
        if callback is not None:
            callback(step, value)
        if snapshot is not None and snapshot_every and step % snapshot_every == 0 and step < cfg.steps:
            snapshot(step, _checkpoint(net, text, cfg, step, losses))
    for _, p in params:
        p.grad = None
    return _checkpoint(net, text, cfg, cfg.steps, losses)


def _checkpoint(net, text, cfg, step, losses) -> Checkpoint:
    return Checkpoint.from_network(
        net,
        step=step,
        losses=np.array(losses),
        extras={"text_embedding": text.table.data.copy()},
        meta={"stage": "pretrain", "pretrain": cfg.to_dict(), "vocabulary": list(text.vocabulary)},
    )


def text_encoder_from(ckpt: Checkpoint) -> TextEncoder:
    table = ckpt.extras.get("text_embedding")
    if table is None:
        raise ConfigurationError("checkpoint carries no text embedding table")
    vocab = ckpt.meta.get("vocabulary") or VOCABULARY
    enc = TextEncoder(table.shape[1], vocabulary=tuple(vocab))
    enc.table.data = np.array(table, copy=True)
    return enc
