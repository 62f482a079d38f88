"""Binary tensor files, preview graymaps, and CSV result tables.

Tensor format: magic "CDPIRTEN", u32 version, u32 rank, u32 dims,
little-endian float32 payload, row-major.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"CDPIRTEN"
TENSOR_VERSION = 1


class TensorFormatError(ValueError):
    pass


def write_tensor(path, tensor: np.ndarray) -> None:
    tensor = np.ascontiguousarray(tensor, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", TENSOR_VERSION, tensor.ndim))
        f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        f.write(tensor.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {data[:8]!r}")
    version, rank = struct.unpack_from("<II", data, 8)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}I", data, 16)
    offset = 16 + 4 * rank
    n = int(np.prod(dims))
    payload = data[offset:]
    if len(payload) != 4 * n:
        raise TensorFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {4 * n}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def export_preview(image: np.ndarray, path, window: tuple[float, float]) -> None:
    """Linear window to a 16-bit binary PGM (P5, maxval 65535)."""
    lo, hi = window
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {window}")
    image = np.asarray(image, dtype=np.float64)
    scaled = np.clip((image - lo) / (hi - lo), 0.0, 1.0)
    pix = np.round(scaled * 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode())
        f.write(pix.tobytes())


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Metric table as CSV `case,method,psnr,ssim`."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["case", "method", "psnr", "ssim"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        row["psnr"] = float(row["psnr"])
        row["ssim"] = float(row["ssim"])
    return rows
