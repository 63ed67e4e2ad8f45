"""One-shot tuning: Adam on the selected parameter groups of one text-video pair.

Also hosts the training checkpoint (network weights with tags, optimizer
moments, step counter, RNG state and loss log) and its file round trip.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import TensorFile, load_tensor_file, save_tensor_file
from .diffusion import NoiseSchedule, eps_loss, schedule_from_betas
from .errors import CheckpointError, ConfigurationError, NumericError
from .tensor import Parameter, Tape, backward
from .unet import UNet, UNetConfig, collect_trainable_params


def to_latent(frames: np.ndarray, factor: int = 1) -> np.ndarray:
    """Fixed autoencoder stand-in: ``factor`` x ``factor`` average pooling of
    the last two axes, then pixels in [0, 1] map affinely to [-1, 1].

    ``factor=1`` is the identity encoder.
    """
    x = np.asarray(frames, dtype=np.float64)
    if factor > 1:
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise ConfigurationError(f"frame size {h}x{w} is not divisible by latent factor {factor}")
        x = x.reshape(x.shape[:-2] + (h // factor, factor, w // factor, factor)).mean(axis=(-3, -1))
    return 2.0 * x - 1.0


def from_latent(latent: np.ndarray, factor: int = 1) -> np.ndarray:
    """Inverse map to [0, 1] pixels, nearest-neighbour upsampled by ``factor``."""
    x = np.clip((np.asarray(latent) + 1.0) / 2.0, 0.0, 1.0)
    if factor > 1:
        x = x.repeat(factor, axis=-2).repeat(factor, axis=-1)
    return x


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[tuple[str, Parameter]],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update of ``params`` in place.

    A missing gradient counts as zero.  Only the listed parameters are
    touched; all gradients are validated before anything is written.
    """
    checked = []
    for name, p in params:
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        checked.append((name, p, g))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p, g in checked:
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# configuration and checkpoint


@dataclass
class TrainingConfig:
    steps: int = 300
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    frames: int = 8
    resolution: int = 32
    seed: int = 0
    p_uncond: float = 0.1
    policy: str = "one-shot"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.frames < 1:
            raise ConfigurationError(f"frames must be >= 1, got {self.frames}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigurationError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    unet_config: UNetConfig
    schedule: NoiseSchedule
    params: dict[str, np.ndarray]
    tags: dict[str, str]
    step: int = 0
    optimizer: AdamState | None = None
    rng_state: dict | None = None
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, network: UNet, **kw) -> "Checkpoint":
        if network.schedule is None:
            raise ConfigurationError("network has no noise schedule attached")
        params, tags = {}, {}
        for name, p, tag in network.tagged_parameters():
            params[name] = p.data.copy()
            tags[name] = tag.value
        return cls(network.config, network.schedule, params, tags, **kw)

    def build_network(self) -> UNet:
        net = UNet(self.unet_config, self.schedule)
        net.load_state_dict(self.params)
        return net

    def to_tensor_file(self) -> TensorFile:
        tf = TensorFile()
        for name, arr in self.params.items():
            tf.tensors[f"net/{name}"] = arr
            tf.tags[f"net/{name}"] = self.tags.get(name, "")
        for name, arr in self.extras.items():
            tf.tensors[f"extra/{name}"] = arr
            tf.tags[f"extra/{name}"] = "EXTRA"
        tf.tensors["schedule/betas"] = np.asarray(self.schedule.betas)
        tf.tags["schedule/betas"] = "SCHEDULE"
        tf.tensors["log/losses"] = np.asarray(self.losses, dtype=np.float64)
        tf.tags["log/losses"] = "LOG"
        opt = self.optimizer
        if opt is not None:
            for name in opt.m:
                tf.tensors[f"adam_m/{name}"] = opt.m[name]
                tf.tags[f"adam_m/{name}"] = "OPTIMIZER"
                tf.tensors[f"adam_v/{name}"] = opt.v[name]
                tf.tags[f"adam_v/{name}"] = "OPTIMIZER"
            tf.meta["adam"] = {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t}
        tf.meta["unet_config"] = self.unet_config.to_dict()
        tf.meta["schedule"] = self.schedule.to_dict()
        tf.meta["step"] = self.step
        tf.meta["rng_state"] = self.rng_state
        tf.meta["user"] = self.meta
        return tf

    @classmethod
    def from_tensor_file(cls, tf: TensorFile) -> "Checkpoint":
        try:
            cfg = UNetConfig.from_dict(tf.meta["unet_config"])
            sched = schedule_from_betas(tf.tensors["schedule/betas"])
            sd = tf.meta["schedule"]
            sched = NoiseSchedule(sched.T, sd["beta_start"], sd["beta_end"], sched.betas)
        except KeyError as e:
            raise CheckpointError(f"checkpoint lacks required entry {e}") from None
        params, tags, extras = {}, {}, {}
        opt = None
        if "adam" in tf.meta:
            a = tf.meta["adam"]
            opt = AdamState(a["beta1"], a["beta2"], a["eps"], int(a["t"]))
        for key, arr in tf.tensors.items():
            kind, _, name = key.partition("/")
            if kind == "net":
                params[name], tags[name] = arr, tf.tags[key]
            elif kind == "extra":
                extras[name] = arr
            elif kind == "adam_m" and opt is not None:
                opt.m[name] = arr
            elif kind == "adam_v" and opt is not None:
                opt.v[name] = arr
        return cls(
            cfg, sched, params, tags,
            step=int(tf.meta.get("step", 0)),
            optimizer=opt,
            rng_state=tf.meta.get("rng_state"),
            losses=tf.tensors.get("log/losses", np.zeros(0)),
            extras=extras,
            meta=tf.meta.get("user") or {},
        )


def save_checkpoint(ckpt: Checkpoint, path):
    return save_tensor_file(ckpt.to_tensor_file(), path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_tensor_file(load_tensor_file(path))


# ---------------------------------------------------------------------------
# tuning loop


class _Conditioned:
    """Adapter giving eps_loss the ``model(x_t, t, cond)`` signature."""

    def __init__(self, network: UNet, cond_mask):
        self.network, self.cond_mask = network, cond_mask
        self.schedule = network.schedule

    def __call__(self, xt, t, cond):
        return self.network(xt, t, cond, self.cond_mask)


class frozen_except:
    """Context manager: only ``trainable`` parameters require gradients inside."""

    def __init__(self, network: UNet, trainable: Sequence[tuple[str, Parameter]]):
        self.network = network
        self.keep = {id(p) for _, p in trainable}

    def __enter__(self):
        self.saved = [(p, p.requires_grad) for p in self.network.parameters()]
        for p, _ in self.saved:
            p.requires_grad = id(p) in self.keep
        return self

    def __exit__(self, *exc):
        for p, flag in self.saved:
            p.requires_grad = flag
        return False


def tune_one_shot(
    network: UNet,
    clip,
    cond,
    cfg: TrainingConfig,
    cond_mask=None,
    null_cond=None,
    resume: Checkpoint | None = None,
    callback: Callable[[int, float], None] | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> Checkpoint:
    """Fine-tune the one-shot parameter groups on a single clip.

    ``clip`` is a VideoClip (or an ``[m, C, H, W]`` array) with pixels in
    [0, 1].  Each step draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` from the
    run's generator, replaces the caption by ``null_cond`` with probability
    ``p_uncond``, and applies one Adam step to the trainable set.  With
    ``resume`` the optimizer, generator and loss log continue from the
    checkpoint; the network must already hold the checkpoint weights.
    """
    frames = np.asarray(getattr(clip, "frames", clip), dtype=np.float64)
    if frames.ndim != 4:
        raise ConfigurationError(f"clip frames must be [m, C, H, W], got {frames.shape}")
    m = frames.shape[0]
    ncfg = network.config
    if m > ncfg.m_max:
        raise ConfigurationError(f"clip has {m} frames, network m_max is {ncfg.m_max}")
    if m != cfg.frames:
        raise ConfigurationError(f"clip has {m} frames, training config expects {cfg.frames}")
    if network.schedule is None:
        raise ConfigurationError("network has no noise schedule attached")
    sched = network.schedule
    x0 = to_latent(frames, ncfg.latent_factor).transpose(1, 0, 2, 3)[None]  # [1, C, m, H, W]
    cond = np.asarray(cond, dtype=np.float64)
    null = np.zeros_like(cond) if null_cond is None else np.asarray(null_cond, dtype=np.float64)

    trainable = collect_trainable_params(network, cfg.policy)
    opt = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    start = 0
    if resume is not None:
        if resume.optimizer is not None:
            opt = resume.optimizer
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        losses = [float(v) for v in resume.losses]
        start = resume.step

    with frozen_except(network, trainable):
        for step in range(start + 1, cfg.steps + 1):
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(x0.shape)
            drop = rng.random() < cfg.p_uncond
            model = _Conditioned(network, None if drop else cond_mask)
            network.zero_grad()
            with Tape() as tape:
                loss = eps_loss(model, x0, t, eps, null if drop else cond)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step} (t={t}, uncond={drop})")
            backward(loss, tape)
            adam_step(trainable, {n: p.grad for n, p in trainable}, opt, cfg.lr)
            losses.append(value)
            if callback is not None:
                callback(step, value)
    network.zero_grad()

    return Checkpoint.from_network(
        network,
        step=max(start, cfg.steps),
        optimizer=opt,
        rng_state=rng.bit_generator.state,
        losses=np.array(losses),
        extras=dict(extras or {}),
        meta={"training": cfg.to_dict(), "stage": "one-shot"},
    )
