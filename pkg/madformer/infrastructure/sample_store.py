"""Sample dumps and grayscale previews.

Sample dump layout (little-endian):

    magic     4 bytes  b"MADS"
    version   u32      FORMAT_VERSION
    grid_h    u32
    grid_w    u32
    channels  u32
    count     u32
    data      count x grid_h x grid_w x channels float32 ('<f4'), row-major

The preview is a binary PGM (P5) tiling channel 0 of up to PREVIEW_LIMIT
samples, min-max scaled to 0..255 over the whole image.
"""

import math
import os
import struct
from pathlib import Path
from typing import BinaryIO, Self

import numpy as np
import torch

from madformer.errors import ShapeMismatch
from madformer.ports import SampleStore

MAGIC = b"MADS"
FORMAT_VERSION = 1
PREVIEW_LIMIT = 16
PREVIEW_GAP = 1


def write_samples(stream: BinaryIO, grids: torch.Tensor) -> None:
    if grids.ndim != 4:
        raise ShapeMismatch(f"samples must be (count, H, W, C), got {tuple(grids.shape)}")
    count, grid_h, grid_w, channels = grids.shape
    stream.write(MAGIC)
    stream.write(struct.pack("<5I", FORMAT_VERSION, grid_h, grid_w, channels, count))
    array = grids.detach().cpu().to(torch.float32).numpy()
    stream.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_samples(stream: BinaryIO) -> torch.Tensor:
    """
    Raises:
        ShapeMismatch: On a wrong magic, a short header, or data that does not
            fill the shape the header declares
    """
    header_size = 4 + struct.calcsize("<5I")
    header = stream.read(header_size)
    if header[:4] != MAGIC:
        raise ShapeMismatch(f"not a sample dump: magic {header[:4]!r}")
    if len(header) != header_size:
        raise ShapeMismatch(f"sample dump header is truncated: {len(header)} bytes")
    _, grid_h, grid_w, channels, count = struct.unpack("<5I", header[4:])
    payload = stream.read()
    expected = 4 * count * grid_h * grid_w * channels
    if len(payload) != expected:
        raise ShapeMismatch(
            f"sample dump declares {count}x{grid_h}x{grid_w}x{channels} floats "
            f"({expected} bytes) but holds {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<f4")
    return torch.from_numpy(data.reshape(count, grid_h, grid_w, channels).astype(np.float32))


def preview_image(grids: torch.Tensor) -> np.ndarray:
    """uint8 mosaic of channel 0, one tile per sample."""
    tiles = grids[:PREVIEW_LIMIT, :, :, 0].detach().cpu().to(torch.float64).numpy()
    count, height, width = tiles.shape
    cols = math.ceil(math.sqrt(count))
    rows = math.ceil(count / cols)
    low, high = float(tiles.min()), float(tiles.max())
    scaled = (tiles - low) / (high - low) if high > low else np.zeros_like(tiles)

    canvas = np.zeros(
        (rows * (height + PREVIEW_GAP) - PREVIEW_GAP, cols * (width + PREVIEW_GAP) - PREVIEW_GAP)
    )
    for index, tile in enumerate(scaled):
        top = (index // cols) * (height + PREVIEW_GAP)
        left = (index % cols) * (width + PREVIEW_GAP)
        canvas[top : top + height, left : left + width] = tile
    return np.round(canvas * 255.0).astype(np.uint8)


class LocalSampleStore(SampleStore):
    def __init__(self: Self, root: Path):
        self.root = Path(root)

    def save_samples(self: Self, name: str, grids: torch.Tensor) -> Path:
        path = self.root / f"{name}.mads"
        os.makedirs(self.root, exist_ok=True)
        with open(path, "wb") as file:
            write_samples(file, grids)
        return path

    def save_preview(self: Self, name: str, grids: torch.Tensor) -> Path:
        path = self.root / f"{name}.pgm"
        image = preview_image(grids)
        os.makedirs(self.root, exist_ok=True)
        with open(path, "wb") as file:
            file.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
            file.write(image.tobytes())
        return path
