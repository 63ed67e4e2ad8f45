"""Text-to-video sampling: guided DDIM over all frames jointly, plus extension.

Every frame owns its noise stream: the initial latent of frame ``j`` comes
from ``default_rng([seed, j])`` and the stochastic term of DDIM step ``k``
(``eta > 0``) from ``default_rng([seed, j, k + 1])``.  Adding frames
therefore never changes the noise seen by earlier frames, and with a
temporally causal network their whole trajectories stay bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import DotProductCounter
from .checkpoint import TensorFile, save_tensor_file
from .diffusion import NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps
from .errors import ConfigurationError, ContractError, NumericError
from .tensor import no_record
from .tuner import from_latent
from .unet import UNet


@dataclass
class SampleRequest:
    """What to sample.

    ``prompt`` is an embedding ``[Lc, d_cond]`` (or any object with ``rows``
    and ``mask`` attributes); ``null_prompt`` defaults to all-zero rows.
    ``resolution`` is the decoded frame size; the latent grid is
    ``resolution // latent_factor`` of the network.  ``clip_x0`` clips the
    predicted clean latent to [-1, 1] before each DDIM step and re-derives
    the noise estimate from it.
    """

    prompt: object
    frames: int = 8
    guidance: float = 7.5
    steps: int = 50
    eta: float = 0.0
    seed: int = 0
    resolution: int = 32
    null_prompt: object = None
    clip_x0: bool = False

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigurationError(f"frames must be >= 1, got {self.frames}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass
class SampleResult:
    frames: np.ndarray  # [m, C, H, W] in [0, 1]
    latent: np.ndarray  # final latent [C, m, H, W]
    trajectory: list[np.ndarray]  # latents [C, m, H, W]: initial, then after each step
    timesteps: list[int]
    request: SampleRequest
    dot_products: int = 0
    prefix_deviation: float | None = None
    extra: dict = field(default_factory=dict)


def _rows_mask(prompt):
    if prompt is None:
        return None, None
    rows = getattr(prompt, "rows", prompt)
    mask = getattr(prompt, "mask", None)
    rows = np.asarray(getattr(rows, "data", rows), dtype=np.float64)
    return rows, (None if mask is None else np.asarray(mask, dtype=bool))


def initial_latents(seed: int, channels: int, res: int, frames: range) -> np.ndarray:
    """Per-frame i.i.d. Gaussian latents stacked as ``[C, len(frames), H, W]``."""
    return np.stack(
        [np.random.default_rng([seed, j]).standard_normal((channels, res, res)) for j in frames],
        axis=1,
    )


def step_noise(seed: int, channels: int, res: int, frames: range, k: int) -> np.ndarray:
    return np.stack(
        [np.random.default_rng([seed, j, k + 1]).standard_normal((channels, res, res)) for j in frames],
        axis=1,
    )


class _Guided:
    """Conditional and null branches evaluated as one batch of two."""

    def __init__(self, network: UNet, req: SampleRequest, counter=None):
        cond, cmask = _rows_mask(req.prompt)
        if cond is None:
            raise ContractError("sample request has no prompt embedding")
        null, nmask = _rows_mask(req.null_prompt)
        if null is None:
            null = np.zeros_like(cond)
        if null.shape != cond.shape:
            raise ContractError(f"null prompt shape {null.shape} differs from prompt {cond.shape}")
        cmask = np.ones(cond.shape[0], bool) if cmask is None else cmask
        nmask = np.ones(null.shape[0], bool) if nmask is None else nmask
        self.cond = np.stack([cond, null])
        self.mask = np.stack([cmask, nmask])
        self.network, self.w, self.counter = network, req.guidance, counter

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        batch = np.stack([x, x])  # [2, C, m, H, W]
        with no_record():
            eps = self.network(batch, t, self.cond, self.mask, self.counter).data
        return cfg_combine(eps[1], eps[0], self.w)


def _check(network: UNet, req: SampleRequest, s: NoiseSchedule | None) -> NoiseSchedule:
    s = s or network.schedule
    if s is None:
        raise ConfigurationError("no noise schedule given and none attached to the network")
    cfg = network.config
    if cfg.video and req.frames > cfg.m_max:
        raise ConfigurationError(f"{req.frames} frames exceed m_max={cfg.m_max}")
    if not cfg.video and req.frames != 1:
        raise ConfigurationError("a 2D network samples single frames only")
    if req.steps > s.T:
        raise ConfigurationError(f"{req.steps} DDIM steps exceed T={s.T}")
    return s


def _latent_res(network: UNet, req: SampleRequest) -> int:
    f = network.config.latent_factor
    if req.resolution % f:
        raise ConfigurationError(f"resolution {req.resolution} is not divisible by latent factor {f}")
    return req.resolution // f


def _step(x, eps, t, tp, req: SampleRequest, s: NoiseSchedule, noise):
    if req.clip_x0:
        ab_t = s.alpha_bar[t]
        x0 = np.clip((x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t), -1.0, 1.0)
        eps = (x - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
    return ddim_step(x, eps, t, tp, req.eta, s, noise)


def _finish(traj, ts, req, counter, dump_path, factor=1, extra=None, deviation=None) -> SampleResult:
    latent = traj[-1]
    if not np.isfinite(latent).all():
        raise NumericError("sampling produced non-finite latents")
    if dump_path is not None:
        tf = TensorFile(meta={"timesteps": ts, "seed": req.seed, "frames": req.frames})
        for k, x in enumerate(traj):
            tf.tensors[f"step_{k:04d}"] = x
            tf.tags[f"step_{k:04d}"] = "LATENT"
        save_tensor_file(tf, dump_path)
    frames = from_latent(latent, factor).transpose(1, 0, 2, 3)
    return SampleResult(
        frames, latent, traj, ts, req,
        dot_products=counter.count if counter else 0,
        prefix_deviation=deviation,
        extra=extra or {},
    )


def sample_video(
    network: UNet,
    req: SampleRequest,
    s: NoiseSchedule | None = None,
    counter: DotProductCounter | None = None,
    dump_path=None,
) -> SampleResult:
    """Guided DDIM sampling of ``req.frames`` frames, denoised jointly."""
    s = _check(network, req, s)
    c = network.config.in_channels
    guided = _Guided(network, req, counter)
    res = _latent_res(network, req)
    ts = ddim_timesteps(s.T, req.steps)
    x = initial_latents(req.seed, c, res, range(req.frames))
    traj = [x]
    for k, (t, tp) in enumerate(zip(ts, ts[1:] + [0])):
        eps = guided(x, t)
        noise = step_noise(req.seed, c, res, range(req.frames), k) if req.eta > 0 else None
        x = _step(x, eps, t, tp, req, s, noise)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite latent after DDIM step {k} (t={t})")
        traj.append(x)
    return _finish(traj, ts, req, counter, dump_path, network.config.latent_factor)


def extend_video_autoregressive(
    network: UNet,
    prefix: SampleResult,
    k: int,
    req: SampleRequest | None = None,
    s: NoiseSchedule | None = None,
    counter: DotProductCounter | None = None,
    dump_path=None,
) -> SampleResult:
    """Append ``k`` frames to a sampled clip by joint denoising of all frames.

    At every DDIM step the prefix frames enter the network with their stored
    latents and the new frames with their own running latents; the new
    frames attend to the prefix through the causal attention layers.  The
    prefix frames are denoised again alongside, and the largest deviation
    from the stored trajectory is reported (zero when the network is
    causal).
    """
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    if prefix is None or not prefix.trajectory:
        raise ContractError("extension needs the prefix's stored latent trajectory")
    m = prefix.latent.shape[1]
    base = req or prefix.request
    if len(prefix.trajectory) != base.steps + 1:
        raise ContractError(
            f"prefix trajectory has {len(prefix.trajectory)} entries, expected {base.steps + 1}"
        )
    if k == 0:
        return replace(prefix, trajectory=list(prefix.trajectory), prefix_deviation=0.0)
    req = replace(base, frames=m + k)
    s = _check(network, req, s)
    c = network.config.in_channels
    guided = _Guided(network, req, counter)
    ts = prefix.timesteps
    if ts != ddim_timesteps(s.T, req.steps):
        raise ContractError("prefix was sampled with a different timestep sequence")
    res = _latent_res(network, req)
    new = initial_latents(req.seed, c, res, range(m, m + k))
    traj = [np.concatenate([prefix.trajectory[0], new], axis=1)]
    deviation = 0.0
    for step, (t, tp) in enumerate(zip(ts, ts[1:] + [0])):
        x = np.concatenate([prefix.trajectory[step], new], axis=1)
        eps = guided(x, t)
        noise = step_noise(req.seed, c, res, range(m + k), step) if req.eta > 0 else None
        x_next = _step(x, eps, t, tp, req, s, noise)
        deviation = max(deviation, float(np.abs(x_next[:, :m] - prefix.trajectory[step + 1]).max()))
        new = x_next[:, m:]
        traj.append(np.concatenate([prefix.trajectory[step + 1], new], axis=1))
    return _finish(traj, ts, req, counter, dump_path, network.config.latent_factor, deviation=deviation)
