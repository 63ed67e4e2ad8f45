"""Procedural scenes: one flat-colored shape moving over a flat background."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SpecificationError

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.95, 0.5, 0.05),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}
SUBJECT_COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
BACKGROUNDS = ("white", "black", "gray")
SHAPES = ("square", "circle", "triangle")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    shape: str = "square"
    color: str = "red"
    background: str = "white"
    motion: tuple[int, int] = (2, 0)  # pixels per frame (dx, dy), y grows downwards
    size: int = 8
    start: tuple[float, float] | None = None  # subject center (x, y); None picks one from the seed

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecificationError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        for c in (self.color, self.background):
            if c not in COLORS:
                raise SpecificationError(f"unknown color {c!r}")
        if self.size < 2:
            raise SpecificationError(f"subject size must be >= 2 px, got {self.size}")

    def caption(self) -> list[str]:
        dx, dy = self.motion
        words = [self.color, self.shape]
        if dx or dy:
            words.append("moving")
            if dx:
                words.append("right" if dx > 0 else "left")
            if dy:
                words.append("down" if dy > 0 else "up")
        words += ["on", self.background]
        return words


@dataclass
class VideoClip:
    frames: np.ndarray  # [m, 3, H, W] in [0, 1]
    caption: list[str]
    fps: int = 8
    seed: int = 0
    centers: list[tuple[float, float]] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.frames.shape[0]


def shape_mask(shape: str, size: int, cx: float, cy: float, res: int) -> np.ndarray:
    """Boolean coverage of pixel centers by the shape centered at (cx, cy)."""
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    h = size / 2.0
    if shape == "square":
        return (np.abs(xx - cx) < h) & (np.abs(yy - cy) < h)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 < h * h
    # isosceles triangle, apex up, base at the bottom of the bounding box
    top, bottom = cy - h, cy + h
    frac = (yy - top) / size
    return (yy > top) & (yy < bottom) & (np.abs(xx - cx) < h * frac)


def render_frame(spec: SyntheticSceneSpec, cx: float, cy: float, res: int) -> np.ndarray:
    bg = np.asarray(COLORS[spec.background])
    fg = np.asarray(COLORS[spec.color])
    mask = shape_mask(spec.shape, spec.size, cx, cy, res)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    return img.astype(np.float64)


def _trajectory_fits(spec, cx, cy, m, res) -> bool:
    h = spec.size / 2.0
    dx, dy = spec.motion
    xs = [cx + dx * i for i in range(m)]
    ys = [cy + dy * i for i in range(m)]
    return min(xs) - h >= 0 and max(xs) + h <= res and min(ys) - h >= 0 and max(ys) + h <= res


def generate_synthetic_clip(spec: SyntheticSceneSpec, m: int, res: int = 32, seed: int = 0) -> VideoClip:
    """Render ``m`` frames of the scene; deterministic in (spec, m, res, seed)."""
    if m < 1:
        raise SpecificationError(f"m must be >= 1, got {m}")
    dx, dy = spec.motion
    h = spec.size / 2.0
    if spec.start is not None:
        cx, cy = map(float, spec.start)
        if not _trajectory_fits(spec, cx, cy, m, res):
            raise SpecificationError(
                f"subject of size {spec.size} starting at ({cx}, {cy}) with motion {spec.motion} "
                f"leaves the {res}x{res} canvas within {m} frames"
            )
    else:
        # integer-aligned centers (half-integers for odd sizes) keep pixel coverage exact
        off = 0.0 if spec.size % 2 == 0 else 0.5
        lo_x = h - min(0, dx * (m - 1))
        hi_x = res - h - max(0, dx * (m - 1))
        lo_y = h - min(0, dy * (m - 1))
        hi_y = res - h - max(0, dy * (m - 1))
        if lo_x > hi_x or lo_y > hi_y:
            raise SpecificationError(
                f"motion {spec.motion} over {m} frames cannot keep a size-{spec.size} subject "
                f"inside a {res}x{res} canvas"
            )
        rng = np.random.default_rng(seed)
        cx = float(rng.integers(int(np.ceil(lo_x - off)), int(np.floor(hi_x - off)) + 1)) + off
        cy = float(rng.integers(int(np.ceil(lo_y - off)), int(np.floor(hi_y - off)) + 1)) + off
    centers = [(cx + dx * i, cy + dy * i) for i in range(m)]
    frames = np.stack([render_frame(spec, x, y, res) for x, y in centers])
    return VideoClip(frames, spec.caption(), fps=8, seed=seed, centers=centers)


def still_corpus(n: int, res: int = 32, seed: int = 0, sizes=(6, 8, 10)):
    """``n`` random single-frame scenes with captions "<color> <shape> on <background>"."""
    if n < 1:
        raise SpecificationError("corpus size must be >= 1")
    rng = np.random.default_rng(seed)
    images, captions = [], []
    for i in range(n):
        bg = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
        choices = [c for c in SUBJECT_COLORS if c != bg]
        spec = SyntheticSceneSpec(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=choices[rng.integers(len(choices))],
            background=bg,
            motion=(0, 0),
            size=int(sizes[rng.integers(len(sizes))]),
        )
        clip = generate_synthetic_clip(spec, 1, res, seed=int(rng.integers(2**31)))
        images.append(clip.frames[0])
        captions.append(spec.caption())
    return np.stack(images), captions
