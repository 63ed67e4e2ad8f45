"""Binary PPM (P6) frame export and parsing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ContractError, VidtuneError


class ExportError(VidtuneError, OSError):
    pass


def quantize(frame: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half away from zero (0.5 -> 128)."""
    v = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def encode_ppm(frame: np.ndarray) -> bytes:
    """``[3, H, W]`` frame to P6 bytes with maxval 255."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ContractError(f"PPM export needs [3, H, W] frames, got {frame.shape}")
    _, h, w = frame.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(frame).transpose(1, 2, 0).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes back to a ``[3, H, W]`` float frame in [0, 1]."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ContractError("not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def contact_sheet(frames: np.ndarray) -> np.ndarray:
    """Frames side by side: ``[m, 3, H, W]`` -> ``[3, H, m * W]``."""
    frames = np.asarray(frames)
    return np.concatenate(list(frames), axis=2)


def export_frames(frames, out_dir, prefix: str = "frame") -> list[Path]:
    """Write ``frame_0001.ppm``... plus ``contact_sheet.ppm``; returns the paths."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ContractError(f"frames must be [m, 3, H, W], got {frames.shape}")
    out_dir = Path(out_dir)
    paths = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(frames, start=1):
            p = out_dir / f"{prefix}_{i:04d}.ppm"
            p.write_bytes(encode_ppm(f))
            paths.append(p)
        p = out_dir / "contact_sheet.ppm"
        p.write_bytes(encode_ppm(contact_sheet(frames)))
        paths.append(p)
    except OSError as e:
        raise ExportError(f"cannot write frames under {out_dir}: {e}") from e
    return paths


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())
