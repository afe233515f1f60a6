"""Rate-distortion sweeps over images, checkpoints and noise presets.

CSV schema (every row has the same ten columns)::

    kind, image, quality, preset, bpp, psnr, msssim, msssim_db, msssim_scales, error

``kind`` is ``record`` for one (image, checkpoint, preset) triple, ``mean``
for the per-(quality, preset) aggregate (``image`` is ``*``) and ``error``
for a record that could not be produced. Records are sorted by
(quality, preset, image); aggregates follow, sorted by (quality, preset).
Floats are written with ``repr`` so the file is reproducible byte for byte.
Timings are kept out of the CSV and go to the optional JSON summary.
"""
from __future__ import annotations

import csv
import json
import math
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .codec.checkpoint import load_model
from .codec.pipeline import compress_image, decompress_image
from .imageio import ImageError, list_images, read_image
from .metrics import max_scales, ms_ssim, msssim_db, psnr
from .noise import GAIN_PRESETS, NoiseParams, synthesize_noise

CSV_COLUMNS = ("kind", "image", "quality", "preset", "bpp", "psnr", "msssim", "msssim_db", "msssim_scales", "error")
PRESETS: Dict[str, NoiseParams] = {f"gain{k}": v for k, v in GAIN_PRESETS.items()}
PRESETS["clean"] = NoiseParams(0.0, 0.0)


@dataclass
class RDRecord:
    image: str
    quality: str
    preset: str
    bpp: float = math.nan
    psnr: float = math.nan
    msssim: float = math.nan
    msssim_db: float = math.nan
    msssim_scales: int = 0
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    def row(self) -> list:
        kind = "record" if self.ok else "error"
        return [kind, self.image, self.quality, self.preset, _fmt(self.bpp), _fmt(self.psnr),
                _fmt(self.msssim), _fmt(self.msssim_db), self.msssim_scales, self.error]


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    return repr(float(v))


def record_seed(seed: int, image: str, preset: str) -> int:
    """Noise seed shared by every checkpoint for one (image, preset) pair."""
    key = zlib.crc32(f"{image}\x00{preset}".encode())
    return int(np.random.SeedSequence([seed, key]).generate_state(1, np.uint64)[0])


def score(clean: np.ndarray, x_hat: np.ndarray, record: RDRecord) -> None:
    record.psnr = psnr(clean, x_hat)
    scales = max_scales(*clean.shape[1:])
    record.msssim_scales = scales
    if scales:
        record.msssim = ms_ssim(clean, x_hat, scales)
        record.msssim_db = msssim_db(record.msssim)


def evaluate_rd(data_dir, checkpoints: Sequence, presets: Sequence[str], out_csv=None, seed: int = 0,
                summary_json=None) -> List[RDRecord]:
    """Run every (image, checkpoint, preset) combination and write the CSV."""
    if not checkpoints:
        raise ValueError("at least one checkpoint is required")
    unknown = [p for p in presets if p not in PRESETS]
    if unknown:
        raise ValueError(f"unknown noise presets {unknown}; choose from {sorted(PRESETS)}")
    paths = list_images(data_dir)
    if not paths:
        raise ImageError(f"no .png or .ppm images in {data_dir}")
    models = [load_model(c)[0] for c in checkpoints]

    images = {}
    for p in paths:
        try:
            images[p.stem] = read_image(p)
        except ImageError as exc:
            images[p.stem] = exc

    records: List[RDRecord] = []
    for model in models:
        for preset in presets:
            for name, clean in images.items():
                rec = RDRecord(name, model.quality, preset)
                records.append(rec)
                if isinstance(clean, Exception):
                    rec.error = str(clean)
                    continue
                try:
                    noisy = synthesize_noise(clean, PRESETS[preset], record_seed(seed, name, preset))
                    t0 = time.perf_counter()
                    stream, _ = compress_image(model, noisy)
                    t1 = time.perf_counter()
                    x_hat = decompress_image(model, stream)
                    rec.decode_seconds = time.perf_counter() - t1
                    rec.encode_seconds = t1 - t0
                    rec.bpp = 8.0 * len(stream) / (clean.shape[1] * clean.shape[2])
                    score(clean, x_hat, rec)
                except (ValueError, FloatingPointError) as exc:
                    rec.error = f"{type(exc).__name__}: {exc}"

    records.sort(key=lambda r: (r.quality, r.preset, r.image))
    if out_csv is not None:
        write_csv(out_csv, records)
    if summary_json is not None:
        write_summary(summary_json, records)
    return records


def aggregates(records: Sequence[RDRecord]) -> List[list]:
    groups: Dict[tuple, List[RDRecord]] = {}
    for r in records:
        if r.ok:
            groups.setdefault((r.quality, r.preset), []).append(r)
    rows = []
    for (q, p), rs in sorted(groups.items()):
        scales = sorted({r.msssim_scales for r in rs})
        rows.append(["mean", "*", q, p, _fmt(np.mean([r.bpp for r in rs])), _fmt(np.mean([r.psnr for r in rs])),
                     _fmt(np.mean([r.msssim for r in rs])), _fmt(np.mean([r.msssim_db for r in rs])),
                     scales[0] if len(scales) == 1 else "", ""])
    return rows


def write_csv(path, records: Sequence[RDRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(r.row())
        for row in aggregates(records):
            writer.writerow(row)


def write_summary(path, records: Sequence[RDRecord]) -> None:
    ok = [r for r in records if r.ok]
    summary = {
        "records": len(records),
        "failed": len(records) - len(ok),
        "encode_seconds": {f"{r.quality}/{r.preset}/{r.image}": r.encode_seconds for r in ok},
        "decode_seconds": {f"{r.quality}/{r.preset}/{r.image}": r.decode_seconds for r in ok},
    }
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
