"""Inflated spatio-temporal U-Net noise predictor.

The same classes build both the 2D text-to-image network (``video=False``)
and its inflated video counterpart.  Internally activations are frame-major
``[B*m, C, H, W]``; convolutions, normalisation and resampling act per
frame, and only the attention blocks mix frames.

Attention block layout: sparse-causal (or other spatial) self-attention,
cross-attention to the prompt, causal temporal attention (video only), FFN.
Each sub-layer is pre-normalised and residual.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .attention import (
    AttentionKind,
    ProjectionSet,
    cross_attention,
    self_attention,
    temporal_self_attention,
)
from .diffusion import NoiseSchedule
from .errors import ConfigurationError, DimensionError, IntegrityError
from .nn import Module, init_weight
from .tensor import Parameter, Tensor, as_tensor, broadcast_to, concat


class ParamGroupTag(str, enum.Enum):
    SCATTN_Q = "SCATTN_Q"
    SCATTN_FROZEN = "SCATTN_FROZEN"
    CROSSATTN_Q = "CROSSATTN_Q"
    CROSSATTN_FROZEN = "CROSSATTN_FROZEN"
    TEMPATTN_ALL = "TEMPATTN_ALL"
    BACKBONE_FROZEN = "BACKBONE_FROZEN"


TRAINABLE_TAGS = frozenset(
    {ParamGroupTag.SCATTN_Q, ParamGroupTag.CROSSATTN_Q, ParamGroupTag.TEMPATTN_ALL}
)


@dataclass
class UNetConfig:
    in_channels: int = 3
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    attention_levels: tuple[int, ...] = (1,)
    d_cond: int = 32
    m_max: int = 24
    temb_dim: int = 64
    heads: int = 1
    groups: int = 8
    ffn_mult: int = 4
    video: bool = False
    attention: str = AttentionKind.SPARSE_CAUSAL.value
    # whether the output projection joins the query-side trainable group
    scattn_out_trainable: bool = False
    crossattn_out_trainable: bool = False
    # pixels per latent cell along each axis (fixed pooling encoder)
    latent_factor: int = 1
    seed: int = 0

    def __post_init__(self):
        self.channel_mults = tuple(int(c) for c in self.channel_mults)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if not self.channel_mults:
            raise ConfigurationError("channel_mults must not be empty")
        for lvl in self.attention_levels:
            if not 0 <= lvl < len(self.channel_mults):
                raise ConfigurationError(f"attention level {lvl} outside the {len(self.channel_mults)} levels")
        AttentionKind.parse(self.attention)
        if self.latent_factor < 1:
            raise ConfigurationError(f"latent_factor must be >= 1, got {self.latent_factor}")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)

    def inflated(self, **overrides) -> "UNetConfig":
        return replace(self, video=True, **overrides)

    def as_2d(self) -> "UNetConfig":
        return replace(self, video=False, attention=AttentionKind.FRAME_INDIVIDUAL.value)


def _groups(cfg: UNetConfig, channels: int) -> int:
    g = min(cfg.groups, channels)
    while channels % g:
        g -= 1
    return g


# ---------------------------------------------------------------------------
# layers


class Conv3x3(Module):
    """3x3 conv; inflated variants store weights as ``[C', C, 1, 3, 3]``."""

    def __init__(self, cin: int, cout: int, rng, video: bool, zero: bool = False):
        shape = (cout, cin, 1, 3, 3) if video else (cout, cin, 3, 3)
        w = np.zeros(shape) if zero else init_weight(rng, cin * 9, shape)
        self.weight = Parameter(w, ParamGroupTag.BACKBONE_FROZEN)
        self.bias = Parameter(np.zeros(cout), ParamGroupTag.BACKBONE_FROZEN)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.weight
        if w.ndim == 5:
            w = w.reshape(w.shape[0], w.shape[1], 3, 3)
        return F.conv2d(x, w, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, tag=ParamGroupTag.BACKBONE_FROZEN):
        self._groups = groups
        self.scale = Parameter(np.ones(channels), tag)
        self.shift = Parameter(np.zeros(channels), tag)

    def __call__(self, x):
        return F.group_norm(x, self._groups, self.scale, self.shift)


class LayerNorm(Module):
    def __init__(self, dim: int, tag=ParamGroupTag.BACKBONE_FROZEN):
        self.scale = Parameter(np.ones(dim), tag)
        self.shift = Parameter(np.zeros(dim), tag)

    def __call__(self, x):
        return F.layer_norm(x, self.scale, self.shift)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng, tag=ParamGroupTag.BACKBONE_FROZEN):
        self.weight = Parameter(init_weight(rng, din, (din, dout)), tag)
        self.bias = Parameter(np.zeros(dout), tag)

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, cfg: UNetConfig, rng):
        self.norm1 = GroupNorm(cin, _groups(cfg, cin))
        self.conv1 = Conv3x3(cin, cout, rng, cfg.video)
        self.temb = Linear(cfg.temb_dim, cout, rng)
        self.norm2 = GroupNorm(cout, _groups(cfg, cout))
        self.conv2 = Conv3x3(cout, cout, rng, cfg.video)
        if cin != cout:
            self.skip = Parameter(init_weight(rng, cin, (cout, cin)), ParamGroupTag.BACKBONE_FROZEN)
        else:
            self.skip = None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        # temb is per batch entry [B, D]; project before repeating over frames so
        # the matmul shape does not depend on the frame count
        h = self.conv1(F.silu(self.norm1(x)))
        b = temb.shape[0]
        m = x.shape[0] // b
        e = self.temb(F.silu(temb))
        e = broadcast_to(e.reshape(b, 1, -1), (b, m, e.shape[-1]))
        h = h + e.reshape(b * m, -1, 1, 1)
        h = self.conv2(F.silu(self.norm2(h)))
        skip = x if self.skip is None else F.conv1x1(x, self.skip)
        return skip + h


class AttentionBlock(Module):
    """Self-attn -> Cross-attn -> Temporal attn (video) -> FFN on frame tokens."""

    def __init__(self, channels: int, cfg: UNetConfig, rng):
        T = ParamGroupTag
        d = channels
        self.norm = GroupNorm(channels, _groups(cfg, channels))
        self.ln1 = LayerNorm(d)
        sc_out = T.SCATTN_Q if cfg.scattn_out_trainable else T.SCATTN_FROZEN
        self.attn1 = ProjectionSet.init(
            d, d, rng, heads=cfg.heads,
            tags={"w_q": T.SCATTN_Q, "w_k": T.SCATTN_FROZEN, "w_v": T.SCATTN_FROZEN, "w_out": sc_out},
        )
        self.ln2 = LayerNorm(d)
        cr_out = T.CROSSATTN_Q if cfg.crossattn_out_trainable else T.CROSSATTN_FROZEN
        self.attn2 = ProjectionSet.init(
            d, d, rng, d_kv=cfg.d_cond, heads=cfg.heads,
            tags={"w_q": T.CROSSATTN_Q, "w_k": T.CROSSATTN_FROZEN, "w_v": T.CROSSATTN_FROZEN, "w_out": cr_out},
        )
        if cfg.video:
            self.ln_t = LayerNorm(d, T.TEMPATTN_ALL)
            self.attn_t = ProjectionSet.init(
                d, d, np.random.default_rng(rng.integers(2**63)), heads=cfg.heads, zero_out=True,
                tags={k: T.TEMPATTN_ALL for k in ProjectionSet.MATRICES},
            )
            self.pos_t = Parameter(0.02 * rng.standard_normal((cfg.m_max, d)), T.TEMPATTN_ALL)
        self.ln3 = LayerNorm(d)
        self.ff1 = Linear(d, cfg.ffn_mult * d, rng)
        self.ff2 = Linear(cfg.ffn_mult * d, d, rng)

    @property
    def is_video(self) -> bool:
        return hasattr(self, "attn_t")

    def __call__(self, x: Tensor, b: int, m: int, cond, cond_mask, kind, counter=None) -> Tensor:
        f, c, hh, ww = x.shape
        n = hh * ww
        tok = self.norm(x).reshape(b, m, c, n).transpose(0, 1, 3, 2)  # [B, m, N, C]
        tok = tok + self_attention(kind, self.ln1(tok), self.attn1, counter=counter)
        tok = tok + cross_attention(self.ln2(tok), cond, self.attn2, cond_mask=cond_mask)
        if self.is_video:
            tok = tok + temporal_self_attention(self.ln_t(tok), self.attn_t, pos_emb=self.pos_t)
        tok = tok + self.ff2(F.gelu(self.ff1(self.ln3(tok))))
        return x + tok.transpose(0, 1, 3, 2).reshape(f, c, hh, ww)


class Level(Module):
    def __init__(self, resblocks, attns):
        self.res = list(resblocks)
        self.attn = list(attns)


class UNet(Module):
    """Noise predictor ``eps(x_t, t, cond)`` over videos ``[B, C, m, H, W]``."""

    def __init__(self, cfg: UNetConfig, schedule: NoiseSchedule | None = None):
        self._cfg = cfg
        self._schedule = schedule
        self._kind = AttentionKind.parse(cfg.attention) if cfg.video else AttentionKind.FRAME_INDIVIDUAL
        rng = np.random.default_rng(cfg.seed)
        base = cfg.base_width
        widths = [base * mlt for mlt in cfg.channel_mults]
        self.time1 = Linear(base, cfg.temb_dim, rng)
        self.time2 = Linear(cfg.temb_dim, cfg.temb_dim, rng)
        self.conv_in = Conv3x3(cfg.in_channels, base, rng, cfg.video)

        skip_widths = []
        down = []
        ch = base
        for lvl, w in enumerate(widths):
            res, attn = [], []
            for _ in range(cfg.num_res_blocks):
                res.append(ResBlock(ch, w, cfg, rng))
                ch = w
                if lvl in cfg.attention_levels:
                    attn.append(AttentionBlock(ch, cfg, rng))
            skip_widths.append(ch)
            down.append(Level(res, attn))
        self.down = down

        up = []
        for lvl in reversed(range(cfg.levels)):
            w = widths[lvl]
            res, attn = [], []
            for i in range(cfg.num_res_blocks):
                cin = ch + skip_widths[lvl] if i == 0 else ch
                res.append(ResBlock(cin, w, cfg, rng))
                ch = w
                if lvl in cfg.attention_levels:
                    attn.append(AttentionBlock(ch, cfg, rng))
            up.append(Level(res, attn))
        self.up = up
        self.norm_out = GroupNorm(ch, _groups(cfg, ch))
        self.conv_out = Conv3x3(ch, cfg.in_channels, rng, cfg.video)

    # -- configuration ----------------------------------------------------
    @property
    def config(self) -> UNetConfig:
        return self._cfg

    @property
    def schedule(self) -> NoiseSchedule | None:
        return self._schedule

    @schedule.setter
    def schedule(self, s: NoiseSchedule) -> None:
        self._schedule = s

    @property
    def attention_kind(self) -> AttentionKind:
        return self._kind

    @attention_kind.setter
    def attention_kind(self, kind) -> None:
        kind = AttentionKind.parse(kind)
        if not self._cfg.video and kind is not AttentionKind.FRAME_INDIVIDUAL:
            raise ConfigurationError("a 2D network only supports frame-individual attention")
        self._kind = kind

    def attention_blocks(self) -> list[AttentionBlock]:
        return [a for lvl in self.down + self.up for a in lvl.attn]

    def tagged_parameters(self) -> list[tuple[str, Parameter, ParamGroupTag]]:
        out = []
        for name, p in self.named_parameters():
            if not isinstance(p.tag, ParamGroupTag):
                raise IntegrityError(f"parameter {name} carries no group tag")
            out.append((name, p, p.tag))
        return out

    # -- forward ----------------------------------------------------------
    def __call__(self, x, t, cond, cond_mask=None, counter=None) -> Tensor:
        return self.forward(x, t, cond, cond_mask, counter)

    def forward(self, x, t, cond, cond_mask=None, counter=None) -> Tensor:
        cfg = self._cfg
        x = as_tensor(x)
        if x.ndim != 5:
            raise DimensionError(f"expected [B, C, m, H, W], got {x.shape}")
        b, c, m, hh, ww = x.shape
        if c != cfg.in_channels:
            raise DimensionError(f"expected {cfg.in_channels} channels, got {c}")
        div = 2 ** (cfg.levels - 1)
        if hh % div or ww % div:
            raise ConfigurationError(f"spatial size {hh}x{ww} is not divisible by {div}")
        if cfg.video and m > cfg.m_max:
            raise ConfigurationError(f"{m} frames exceed m_max={cfg.m_max}")
        if not cfg.video and self._kind is not AttentionKind.FRAME_INDIVIDUAL:
            raise ConfigurationError("a 2D network only supports frame-individual attention")

        cond = as_tensor(cond)
        if cond.ndim == 2:
            cond = broadcast_to(cond.reshape((1,) + cond.shape), (b,) + cond.shape)
        if cond_mask is not None:
            cond_mask = np.broadcast_to(np.asarray(cond_mask, dtype=bool), cond.shape[:2])

        tt = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (b,))
        temb = self.time2(F.silu(self.time1(Tensor(F.sinusoidal_embedding(tt, cfg.base_width)))))

        h = x.transpose(0, 2, 1, 3, 4).reshape(b * m, c, hh, ww)
        h = self.conv_in(h)
        skips = []
        for lvl, level in enumerate(self.down):
            for i, res in enumerate(level.res):
                h = res(h, temb)
                if level.attn:
                    h = level.attn[i](h, b, m, cond, cond_mask, self._kind, counter)
            skips.append(h)
            if lvl < cfg.levels - 1:
                h = F.avg_pool2(h)
        for j, level in enumerate(self.up):
            lvl = cfg.levels - 1 - j
            for i, res in enumerate(level.res):
                if i == 0:
                    h = concat([h, skips[lvl]], axis=1)
                h = res(h, temb)
                if level.attn:
                    h = level.attn[i](h, b, m, cond, cond_mask, self._kind, counter)
            if lvl > 0:
                h = F.upsample2(h)
        h = self.conv_out(F.silu(self.norm_out(h)))
        return h.reshape(b, m, c, hh, ww).transpose(0, 2, 1, 3, 4)


def unet_forward(network: UNet, x, t, cond, cond_mask=None, counter=None) -> Tensor:
    return network.forward(x, t, cond, cond_mask, counter)


# ---------------------------------------------------------------------------
# inflation and parameter selection


def inflate_from_2d(t2i_params: dict[str, np.ndarray], cfg: UNetConfig, schedule=None) -> UNet:
    """Build a video network whose 2D weights come from ``t2i_params``.

    3x3 kernels become 1x3x3 with identical values, spatial self-attention
    weights become the sparse-causal attention weights, and the temporal
    attention layers are fresh (random inner projections, zero output).
    """
    vcfg = cfg if cfg.video else cfg.inflated()
    net = UNet(vcfg, schedule)
    own = dict(net.named_parameters())
    for name, value in t2i_params.items():
        if name not in own:
            raise ConfigurationError(f"2D parameter {name} has no counterpart in the video network")
        p = own[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.shape:
            if p.ndim == 5 and value.ndim == 4 and value.shape == p.shape[:2] + p.shape[3:]:
                value = value.reshape(p.shape)
            else:
                raise ConfigurationError(
                    f"parameter {name}: 2D shape {value.shape} incompatible with {p.shape}"
                )
        p.data = value.copy()
    missing = [n for n, p in own.items() if n not in t2i_params and p.tag is not ParamGroupTag.TEMPATTN_ALL]
    if missing:
        raise ConfigurationError(f"2D parameters missing for: {', '.join(missing[:5])}")
    return net


@dataclass(frozen=True)
class TuningPolicy:
    name: str = "one-shot"
    trainable_tags: frozenset = field(default=TRAINABLE_TAGS)

    @classmethod
    def parse(cls, policy) -> "TuningPolicy":
        if policy is None:
            return cls()
        if isinstance(policy, cls):
            return policy
        if policy in ("one-shot", "default"):
            return cls()
        if policy == "freeze-all":
            return cls("freeze-all", frozenset())
        if policy == "all":
            return cls("all", frozenset(ParamGroupTag))
        raise ConfigurationError(f"unknown tuning policy {policy!r}")


def collect_trainable_params(network: UNet, policy=None) -> list[tuple[str, Parameter]]:
    """Parameters updated by one-shot tuning, in stable name order."""
    policy = TuningPolicy.parse(policy)
    chosen = [(n, p) for n, p, tag in network.tagged_parameters() if tag in policy.trainable_tags]
    for block in network.attention_blocks():
        for proj in [block.attn1, block.attn2] + ([block.attn_t] if block.is_video else []):
            proj.set_trainable(**{k: getattr(proj, k).tag in policy.trainable_tags for k in proj.MATRICES})
    return chosen
