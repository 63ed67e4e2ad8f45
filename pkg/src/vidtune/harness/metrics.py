"""Evaluation oracles for synthetic clips: consistency, subject motion, color."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError

HUE_BINS: tuple[tuple[str, float, float], ...] = (
    ("red", 345.0, 15.0),
    ("orange", 15.0, 45.0),
    ("yellow", 45.0, 70.0),
    ("green", 70.0, 170.0),
    ("cyan", 170.0, 200.0),
    ("blue", 200.0, 260.0),
    ("purple", 260.0, 345.0),
)


def _downsample(frame: np.ndarray, size: int = 8) -> np.ndarray:
    c, h, w = frame.shape
    if h % size or w % size:
        raise ContractError(f"frame size {h}x{w} is not a multiple of {size}")
    return frame.reshape(c, size, h // size, size, w // size).mean(axis=(2, 4))


def frame_consistency_score(frames) -> float:
    """Mean cosine similarity of consecutive frames' 8x8 mean-removed features."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ContractError(f"frames must be [m, C, H, W], got {frames.shape}")
    if frames.shape[0] < 2:
        raise ContractError("frame consistency needs at least two frames")
    feats = []
    for f in frames:
        v = _downsample(f).ravel()
        feats.append(v - v.mean())
    sims = []
    for a, b in zip(feats, feats[1:]):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            sims.append(1.0 if na == nb else 0.0)
        else:
            sims.append(float(np.clip(a @ b / (na * nb), -1.0, 1.0)))
    return float(np.mean(sims))


def background_color(frame: np.ndarray) -> np.ndarray:
    """Per-channel median of the one-pixel border."""
    border = np.concatenate(
        [frame[:, 0, :], frame[:, -1, :], frame[:, 1:-1, 0], frame[:, 1:-1, -1]], axis=1
    )
    return np.median(border, axis=1)


def subject_mask(frame: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Pixels whose color is farther than ``threshold`` (Euclidean) from the background."""
    bg = background_color(frame)
    return np.sqrt(((frame - bg[:, None, None]) ** 2).sum(axis=0)) > threshold


def subject_centroids(frames, threshold: float = 0.3) -> np.ndarray:
    """``[m, 2]`` centroid (x, y) of subject pixels per frame; NaN when none."""
    frames = np.asarray(frames, dtype=np.float64)
    out = np.full((frames.shape[0], 2), np.nan)
    h, w = frames.shape[2:]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for i, f in enumerate(frames):
        mask = subject_mask(f, threshold)
        if mask.any():
            out[i] = xx[mask].mean(), yy[mask].mean()
    return out


def mean_displacement(frames, threshold: float = 0.3) -> np.ndarray:
    """Mean per-frame centroid step (dx, dy) over frame pairs with a visible subject."""
    c = subject_centroids(frames, threshold)
    d = np.diff(c, axis=0)
    d = d[np.isfinite(d).all(axis=1)]
    if len(d) == 0:
        return np.array([np.nan, np.nan])
    return d.mean(axis=0)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """``[..., 3]`` RGB in [0, 1] to HSV with hue in degrees."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx, mn = rgb.max(axis=-1), rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(
        mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0)
    )
    hue = np.where(delta > 0, hue * 60.0, 0.0)
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([hue, sat, mx], axis=-1)


def hue_histogram(frames, threshold: float = 0.3, min_sat: float = 0.3, min_val: float = 0.2) -> dict[str, int]:
    """Counts of saturated subject pixels per named hue bin over all frames."""
    frames = np.asarray(frames, dtype=np.float64)
    counts = {name: 0 for name, _, _ in HUE_BINS}
    for f in frames:
        px = f.transpose(1, 2, 0)[subject_mask(f, threshold)]
        if not len(px):
            continue
        hsv = rgb_to_hsv(np.clip(px, 0.0, 1.0))
        keep = (hsv[:, 1] > min_sat) & (hsv[:, 2] > min_val)
        for hue in hsv[keep, 0]:
            for name, lo, hi in HUE_BINS:
                if (lo <= hue < hi) if lo < hi else (hue >= lo or hue < hi):
                    counts[name] += 1
                    break
    return counts


def dominant_hue(frames, **kw) -> str | None:
    """Name of the most populated hue bin, or None without saturated subject pixels."""
    counts = hue_histogram(frames, **kw)
    name = max(counts, key=counts.get)
    return name if counts[name] > 0 else None
