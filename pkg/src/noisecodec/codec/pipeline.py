"""Image-level compress / decompress."""
from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np

from ..entropy.bitstream import Bitstream
from ..entropy.latents import compress_latents, decompress_latents, encode_image
from ..imageio import read_image, write_image
from ..tensor import Tensor, no_grad
from .checkpoint import load_model
from .model import CodecModel, pad_reflect


def _reconstruct(model: CodecModel, z1_hat: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    with no_grad():
        return model.synthesize(Tensor(z1_hat), size=size, clamp=True).data[0]


def compress_image(model: CodecModel, x: np.ndarray) -> Tuple[bytes, np.ndarray]:
    """Encode a (3, H, W) image in [0, 1]; returns the stream and the encoder-side reconstruction."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {x.shape}")
    padded, size = pad_reflect(x.astype(model.dtype), model.arch.pad_multiple)
    bundle = encode_image(model, padded[None])
    stream = compress_latents(bundle, model, size).to_bytes()
    return stream, _reconstruct(model, bundle.z1_hat.data, size)


def decompress_image(model: CodecModel, data: bytes) -> np.ndarray:
    bs = Bitstream.from_bytes(data)
    _, z1_hat = decompress_latents(bs, model)
    return _reconstruct(model, z1_hat, (bs.orig_height, bs.orig_width))


def compress_file(in_path, model_path, out_path) -> dict:
    model, _ = load_model(model_path)
    x = read_image(in_path)
    stream, _ = compress_image(model, x)
    Path(out_path).write_bytes(stream)
    h, w = x.shape[1:]
    return {"bytes": len(stream), "bpp": 8 * len(stream) / (h * w), "width": w, "height": h}


def decompress_file(in_path, model_path, out_path) -> np.ndarray:
    model, _ = load_model(model_path)
    x_hat = decompress_image(model, Path(in_path).read_bytes())
    write_image(out_path, x_hat)
    return x_hat

